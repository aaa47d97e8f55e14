"""Entry point for python -m continuum."""

from .cli import main

if __name__ == "__main__":
    main()
