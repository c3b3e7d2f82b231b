"""Entry point for `python -m fmri_semipar`."""

from .cli import main

if __name__ == "__main__":
    raise SystemExit(main())
