"""Enables ``python -m ranklab ...``."""

import sys

from ranklab._cli import main

if __name__ == "__main__":
    sys.exit(main())
