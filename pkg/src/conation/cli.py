"""Command-line interface.

Usage::

    conation extract-feature [--dim D] [--out-dir DIR] a.wav [b.wav ...]
    conation train N D a.mfcc [b.mfcc ...] [--word W] [--profile P]
    conation recognise [--profile P] [--threshold T] [--interpret] x.mfcc ...
    conation eval manifest.csv [--profile P] [--format markdown|csv]
    conation synth --words 10 --train 20 --test 20 --seed 7
    conation registry list [--profile P]

Exit status: 0 on success, 1 on a runtime failure, 2 on bad arguments.
Results go to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

from conation import evaluator, features, registry, trainer
from conation.recognizer import InterpreterState, interpret, load_dispatch, recognize

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _seed(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer seed, got {text!r}")
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _real(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}")
    if math.isnan(value):
        raise argparse.ArgumentTypeError("NaN is not allowed")
    return value


def _floor(text):
    value = _real(text)
    if not 0.0 <= value < 1.0:
        raise argparse.ArgumentTypeError("transition floor must be in [0, 1)")
    return value


def _word_count(text):
    value = _positive_int(text)
    if value < 2:
        raise argparse.ArgumentTypeError("need at least 2 words")
    return value


def _dim(text):
    value = _positive_int(text)
    if value > features.N_FILTERS:
        raise argparse.ArgumentTypeError(f"dim must be <= {features.N_FILTERS}")
    return value


def _err(msg):
    print(f"conation: {msg}", file=sys.stderr)


def _profile_root(name):
    try:
        return registry.profile_dir(name)
    except registry.RegistryError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _add_training_flags(p):
    p.add_argument("--max-iterations", type=_positive_int, default=100,
                   help="cap on segmental K-means sweeps (default 100)")
    p.add_argument("--transition-floor", type=_floor, default=0.0,
                   help="probability given to unseen transitions (default 0, no smoothing)")


def build_parser() -> argparse.ArgumentParser:
    """Top-level parser; each subcommand parser is in ``parser.subcommands``."""
    parser = argparse.ArgumentParser(prog="conation",
                                     description="HMM isolated-word voice command recognizer")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("extract-feature", help="WAV files -> .mfcc feature files")
    p.add_argument("wavs", nargs="+", metavar="WAV")
    p.add_argument("--dim", type=_dim, default=features.DEFAULT_DIM)
    p.add_argument("--out-dir", type=Path)

    p = sub.add_parser("train", help="train one word model: train N D FILE...")
    p.add_argument("n_states", type=_positive_int, metavar="N")
    p.add_argument("dim", type=_positive_int, metavar="D")
    p.add_argument("files", nargs="+", metavar="MFCC")
    p.add_argument("--word", help="register the model under this word instead of printing XML")
    p.add_argument("--profile", type=_profile_root, default=registry.DEFAULT_PROFILE)
    _add_training_flags(p)

    p = sub.add_parser("recognise", aliases=["recognize"], help="recognise .mfcc files")
    p.add_argument("files", nargs="+", metavar="MFCC")
    p.add_argument("--profile", type=_profile_root, default=registry.DEFAULT_PROFILE)
    p.add_argument("--threshold", type=_real, help="minimum score in nats/frame")
    p.add_argument("--interpret", action="store_true", help="emit action events as JSON lines")
    p.add_argument("--dispatch", type=Path, help="word<TAB>action map (default: bundled)")
    p.add_argument("--allow-empty", action="store_true", help="accept an empty registry")
    p.add_argument("--permissive", action="store_true",
                   help="skip models whose dimension differs instead of failing")

    p = sub.add_parser("eval", help="evaluate a labelled manifest")
    p.add_argument("manifest", type=Path)
    p.add_argument("--profile", type=_profile_root, default=registry.DEFAULT_PROFILE)
    p.add_argument("--format", choices=["markdown", "csv"], default="markdown")
    p.add_argument("--threshold", type=_real)

    p = sub.add_parser("synth", help="closed-loop benchmark on synthetic HMM data")
    p.add_argument("--words", type=_word_count, default=10)
    p.add_argument("--train", type=_positive_int, default=20)
    p.add_argument("--test", type=_positive_int, default=20)
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--states", type=_positive_int, default=3)
    p.add_argument("--dim", type=_positive_int, default=features.DEFAULT_DIM)
    p.add_argument("--separation", type=_real, default=8.0,
                   help="minimum distance between state means, in emission std devs")
    p.add_argument("--identical", action="store_true",
                   help="control run: every word shares one ground-truth model")
    p.add_argument("--format", choices=["markdown", "csv"], default="markdown")
    _add_training_flags(p)

    p = sub.add_parser("registry", help="inspect a profile's registry")
    p.add_argument("action", choices=["list"])
    p.add_argument("--profile", type=_profile_root, default=registry.DEFAULT_PROFILE)
    parser.subcommands = sub.choices
    return parser


# --- subcommands ------------------------------------------------------------


def cmd_extract_feature(args) -> int:
    status = EXIT_OK
    if args.out_dir is not None and not args.out_dir.is_dir():
        _err(f"output directory not found: {args.out_dir}")
        return EXIT_FAILURE
    for wav in map(Path, args.wavs):
        out = (args.out_dir or wav.parent) / (wav.stem + ".mfcc")
        try:
            seq = features.extract_features(features.read_wav(wav), args.dim)
            features.write_mfcc(seq, out)
        except (OSError, features.FeatureError) as exc:
            _err(f"{wav}: {exc}")
            status = EXIT_FAILURE
            continue
        print(f"{wav}\t{out}\t{len(seq)} frames x {seq.dim}")
    return status


def _read_sets(paths, dim):
    sets = []
    for path in paths:
        try:
            seq = features.read_mfcc(path)
        except (OSError, features.FeatureError) as exc:
            raise RuntimeError(f"{path}: {exc}")
        if seq.dim != dim:
            raise RuntimeError(f"{path}: feature dimension {seq.dim} does not match D={dim}")
        sets.append(seq)
    return sets


def cmd_train(args) -> int:
    try:
        config = trainer.TrainingConfig(args.n_states, args.dim, args.max_iterations,
                                        transition_floor=args.transition_floor)
        sets = _read_sets(args.files, args.dim)
        if len(sets[0]) < args.n_states:
            raise RuntimeError(f"{args.files[0]}: {len(sets[0])} frames cannot seed "
                               f"{args.n_states} states")
        try:
            model = trainer.segmental_kmeans(config, sets, args.word or "")
        except (ValueError, ArithmeticError) as exc:
            raise RuntimeError(f"training on {', '.join(args.files)} failed: {exc}")
        if args.word is None:
            sys.stdout.write(registry.model_to_xml(model))
            return EXIT_OK
        reg = registry.create_registry(args.profile)
        reg = registry.add_entry(reg, args.word, model)
    except (RuntimeError, OSError, registry.RegistryError, trainer.TrainingError) as exc:
        _err(str(exc))
        return EXIT_FAILURE
    _err(f"registered {args.word!r} in {reg.index_path} ({len(reg)} words)")
    return EXIT_OK


def _open_registry(root):
    return registry.load_registry(root)


def cmd_recognise(args) -> int:
    try:
        reg = _open_registry(args.profile)
        if not len(reg) and not args.allow_empty:
            _err(f"registry at {reg.index_path} is empty (use --allow-empty to proceed)")
            return EXIT_FAILURE
        models = reg.models()
        dispatch = load_dispatch(args.dispatch) if args.interpret else {}
    except (OSError, ValueError) as exc:
        _err(str(exc))
        return EXIT_FAILURE
    status = EXIT_OK
    state = InterpreterState()
    for path in args.files:
        try:
            result = recognize(models, features.read_mfcc(path), args.threshold, args.permissive)
        except (OSError, ValueError) as exc:
            _err(f"{path}: {exc}")
            status = EXIT_FAILURE
            continue
        if result.accepted:
            print(f"{path}\t{result.best_word}\t{result.best_score:.6f}")
        else:
            print(f"{path}\t<rejected>")
        if args.interpret:
            state, event = interpret(state, result, dispatch)
            if event is not None:
                print(event.to_json())
    return status


def cmd_eval(args) -> int:
    try:
        manifest = evaluator.load_manifest(args.manifest)
        reg = _open_registry(args.profile)
        report = evaluator.evaluate(manifest, reg, args.threshold)
    except (OSError, ValueError) as exc:
        _err(str(exc))
        return EXIT_FAILURE
    sys.stdout.write(evaluator.render_report(report, args.format))
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        config = trainer.TrainingConfig(args.states, args.dim, args.max_iterations,
                                        transition_floor=args.transition_floor)
        report = evaluator.synth_benchmark(args.words, args.train, args.test, args.seed, config,
                                           separation=args.separation, identical=args.identical)
    except (ValueError, RuntimeError) as exc:
        _err(str(exc))
        return EXIT_FAILURE
    out = evaluator.render_report(report, args.format)
    if args.format == "csv":
        out += f"\nOverall accuracy,{report.n_correct}/{report.n_trials}\n"
    sys.stdout.write(out)
    return EXIT_OK


def cmd_registry(args) -> int:
    try:
        reg = _open_registry(args.profile)
    except (OSError, ValueError) as exc:
        _err(str(exc))
        return EXIT_FAILURE
    for word, rel in reg.entries:
        print(f"{word}\t{rel}")
    return EXIT_OK


_COMMANDS = {
    "extract-feature": cmd_extract_feature,
    "train": cmd_train,
    "recognise": cmd_recognise,
    "recognize": cmd_recognise,
    "eval": cmd_eval,
    "synth": cmd_synth,
    "registry": cmd_registry,
}


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0] in parser.subcommands:
        # options may sit between positional file lists (train N D a --word w b)
        args = parser.subcommands[argv[0]].parse_intermixed_args(argv[1:])
        args.command = argv[0]
    else:
        args = parser.parse_args(argv)
    return _COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
