"""
Main entry point: `python -m chromaphase.cli`. See __init__.py.
"""

import sys

from chromaphase.cli import main

if __name__ == "__main__":
    sys.exit(main())
