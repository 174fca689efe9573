"""
Sparse boundary-aware transformer captioner - command line entry point
"""

from cli import main


if __name__ == "__main__":
    main()
