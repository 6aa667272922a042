"""``python -m fgpfe`` dispatches to the CLI."""

import sys

from fgpfe.cli import main

if __name__ == "__main__":
    sys.exit(main())
