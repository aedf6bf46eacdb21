import sys

from conation.cli import main

sys.exit(main())
