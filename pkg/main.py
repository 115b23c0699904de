import sys

from asyncdyna.cli import main

if __name__ == "__main__":
    sys.exit(main())
