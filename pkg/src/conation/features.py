"""MFCC front end and the ``.mfcc`` / WAV file formats.

The front end is fixed so that two runs (or two implementations) agree
bit for bit: 16 kHz mono input, pre-emphasis 0.97, 25 ms Hamming window,
10 ms hop, 512-point FFT, 26 triangular mel filters over 0-8000 Hz,
natural-log filter energies floored at 1e-10, orthonormal DCT-II.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import dct

from conation._io import atomic_write_bytes

SAMPLE_RATE = 16000
WINDOW_LEN = 400
HOP_LEN = 160
NFFT = 512
N_FILTERS = 26
PREEMPHASIS = 0.97
LOG_FLOOR = 1e-10
DEFAULT_DIM = 13

MFCC_MAGIC = b"MFCC"
MFCC_VERSION = 1
_MFCC_HEADER = struct.Struct("<4sIII")


class FeatureError(ValueError):
    """Raised for invalid audio or feature input."""


class WavFormatError(FeatureError):
    """Malformed or unsupported WAV file."""


class MfccFormatError(FeatureError):
    """Malformed ``.mfcc`` file."""


@dataclass(frozen=True)
class AudioClip:
    sample_rate: int
    samples: np.ndarray

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise FeatureError(f"sample rate must be positive, got {self.sample_rate}")
        samples = np.ascontiguousarray(self.samples, dtype=np.int16)
        if samples.ndim != 1:
            raise FeatureError("clip must be mono (1-D samples)")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True, eq=False)
class ObservationSequence:
    """T feature vectors of dimension D, stored as float32 rows.

    Values are held at float32 precision so that the ``.mfcc`` file format
    round-trips them exactly; scoring code promotes to float64.
    """

    frames: np.ndarray
    frame_hop_ms: float = field(default=10.0)

    def __post_init__(self):
        frames = np.array(self.frames, dtype=np.float32, copy=True)
        if frames.ndim == 1:
            frames = frames[:, None]
        if frames.ndim != 2:
            raise FeatureError(f"frames must be a T x D matrix, got shape {frames.shape}")
        if frames.shape[1] < 1:
            raise FeatureError("feature dimension must be at least 1")
        if not np.all(np.isfinite(frames)):
            raise FeatureError("frames contain non-finite values")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    def __len__(self) -> int:
        return self.frames.shape[0]

    def __eq__(self, other):
        if not isinstance(other, ObservationSequence):
            return NotImplemented
        return (
            self.frames.shape == other.frames.shape
            and self.frames.tobytes() == other.frames.tobytes()
            and self.frame_hop_ms == other.frame_hop_ms
        )

    __hash__ = None


# --- mel filterbank ---------------------------------------------------------


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(n_filters: int = N_FILTERS, low_hz: float = 0.0,
                   high_hz: float = SAMPLE_RATE / 2) -> np.ndarray:
    """Return the ``n_filters + 2`` band edges in Hz, evenly spaced in mel."""
    mels = np.linspace(hz_to_mel(low_hz), hz_to_mel(high_hz), n_filters + 2)
    return mel_to_hz(mels)


def mel_filterbank(n_filters: int = N_FILTERS, nfft: int = NFFT,
                   sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular filters evaluated at the FFT bin centre frequencies.

    Filter ``m`` rises linearly from edge ``m`` to a peak of 1 at edge
    ``m + 1`` and falls back to zero at edge ``m + 2``.
    """
    edges = mel_band_edges(n_filters, 0.0, sample_rate / 2)
    freqs = np.arange(nfft // 2 + 1) * sample_rate / nfft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.clip(np.minimum(rising, falling), 0.0, None)


_FILTERBANK = mel_filterbank()
_WINDOW = np.hamming(WINDOW_LEN)


# --- feature extraction -----------------------------------------------------


def frame_count(n_samples: int) -> int:
    if n_samples < WINDOW_LEN:
        return 0
    return (n_samples - WINDOW_LEN) // HOP_LEN + 1


def _check_clip(clip: AudioClip):
    if clip.sample_rate != SAMPLE_RATE:
        raise FeatureError(
            f"unsupported sample rate {clip.sample_rate} Hz (only {SAMPLE_RATE} Hz is accepted)"
        )
    if len(clip.samples) < WINDOW_LEN:
        raise FeatureError(
            f"clip too short: {len(clip.samples)} samples, need at least {WINDOW_LEN}"
        )


def _frames(clip: AudioClip) -> np.ndarray:
    x = clip.samples.astype(np.float64) / 32768.0
    emphasized = np.empty_like(x)
    emphasized[0] = x[0]
    emphasized[1:] = x[1:] - PREEMPHASIS * x[:-1]
    n = frame_count(len(x))
    idx = np.arange(WINDOW_LEN)[None, :] + HOP_LEN * np.arange(n)[:, None]
    return emphasized[idx] * _WINDOW


def log_mel_energies(clip: AudioClip) -> np.ndarray:
    """Per-frame natural-log mel filterbank energies, shape (T, 26)."""
    _check_clip(clip)
    spectrum = np.fft.rfft(_frames(clip), NFFT)
    power = (spectrum.real ** 2 + spectrum.imag ** 2) / NFFT
    energies = power @ _FILTERBANK.T
    return np.log(np.maximum(energies, LOG_FLOOR))


def extract_features(clip: AudioClip, dim: int = DEFAULT_DIM) -> ObservationSequence:
    """Compute ``dim`` MFCCs per 10 ms frame of a 16 kHz clip."""
    if not 1 <= dim <= N_FILTERS:
        raise FeatureError(f"dim must be in [1, {N_FILTERS}], got {dim}")
    cepstra = dct(log_mel_energies(clip), type=2, norm="ortho", axis=1)[:, :dim]
    return ObservationSequence(cepstra, frame_hop_ms=1000.0 * HOP_LEN / SAMPLE_RATE)


# --- .mfcc files ------------------------------------------------------------


def encode_mfcc(seq: ObservationSequence) -> bytes:
    if len(seq) < 1:
        raise MfccFormatError("refusing to write an empty observation sequence")
    header = _MFCC_HEADER.pack(MFCC_MAGIC, MFCC_VERSION, seq.dim, len(seq))
    return header + seq.frames.astype("<f4").tobytes()


def decode_mfcc(data: bytes) -> ObservationSequence:
    if len(data) < _MFCC_HEADER.size:
        raise MfccFormatError("truncated header")
    magic, version, dim, count = _MFCC_HEADER.unpack_from(data)
    if magic != MFCC_MAGIC:
        raise MfccFormatError(f"bad magic {magic!r}")
    if version != MFCC_VERSION:
        raise MfccFormatError(f"unsupported version {version}")
    if dim < 1 or count < 1:
        raise MfccFormatError(f"invalid shape: {count} frames of dimension {dim}")
    expected = _MFCC_HEADER.size + 4 * dim * count
    if len(data) < expected:
        raise MfccFormatError(
            f"truncated payload: header declares {count} frames, "
            f"file holds {(len(data) - _MFCC_HEADER.size) // (4 * dim)}"
        )
    if len(data) > expected:
        raise MfccFormatError(f"{len(data) - expected} trailing bytes after payload")
    values = np.frombuffer(data, dtype="<f4", count=dim * count, offset=_MFCC_HEADER.size)
    if not np.all(np.isfinite(values)):
        raise MfccFormatError("payload contains non-finite values")
    return ObservationSequence(values.reshape(count, dim))


def write_mfcc(seq: ObservationSequence, path) -> None:
    atomic_write_bytes(Path(path), encode_mfcc(seq))


def read_mfcc(path) -> ObservationSequence:
    return decode_mfcc(Path(path).read_bytes())


# --- WAV ingest -------------------------------------------------------------

_WAVE_FORMAT_PCM = 1
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE


def parse_wav(data: bytes) -> AudioClip:
    """Decode a RIFF/WAVE byte string holding 16-bit PCM audio.

    Multi-channel audio is down-mixed by averaging the channels.
    """
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError("not a RIFF/WAVE file")
    fmt = None
    pcm = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8: pos + 8 + size]
        if len(body) < size:
            if chunk_id == b"data":
                raise WavFormatError("data chunk truncated")
            raise WavFormatError(f"chunk {chunk_id!r} truncated")
        if chunk_id == b"fmt ":
            if size < 16:
                raise WavFormatError("fmt chunk too small")
            fmt = struct.unpack_from("<HHIIHH", body)
            if fmt[0] == _WAVE_FORMAT_EXTENSIBLE and size >= 26:
                # sub-format GUID starts with the real format code
                fmt = (struct.unpack_from("<H", body, 24)[0],) + fmt[1:]
        elif chunk_id == b"data":
            pcm = body
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise WavFormatError("missing fmt chunk")
    if pcm is None:
        raise WavFormatError("missing data chunk")
    code, channels, rate, _, block_align, bits = fmt
    if code != _WAVE_FORMAT_PCM:
        raise WavFormatError(f"unsupported encoding (format code {code}); only PCM is accepted")
    if bits != 16:
        raise WavFormatError(f"unsupported bit depth {bits}; only 16-bit is accepted")
    if channels < 1 or block_align != 2 * channels:
        raise WavFormatError("inconsistent channel count / block alignment")
    n = len(pcm) // block_align
    samples = np.frombuffer(pcm, dtype="<i2", count=n * channels).reshape(n, channels)
    if channels > 1:
        # mean then truncate toward zero keeps +a/-a pairs at exactly 0
        samples = np.trunc(samples.astype(np.float64).mean(axis=1))
    return AudioClip(rate, samples.reshape(-1).astype(np.int16))


def read_wav(path) -> AudioClip:
    return parse_wav(Path(path).read_bytes())


def encode_wav(clip: AudioClip) -> bytes:
    """Canonical 44-byte-header mono 16-bit PCM WAV bytes for ``clip``."""
    payload = clip.samples.astype("<i2").tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(payload), b"WAVE",
        b"fmt ", 16, _WAVE_FORMAT_PCM, 1, clip.sample_rate, clip.sample_rate * 2, 2, 16,
        b"data", len(payload),
    )
    return header + payload


def write_wav(clip: AudioClip, path) -> None:
    atomic_write_bytes(Path(path), encode_wav(clip))
