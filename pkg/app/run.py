"""
Run the cv-oam command line from a source checkout
"""

import sys

from app.main import main

if __name__ == "__main__":
    sys.exit(main())
