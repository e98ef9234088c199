"""`python -m ausculta` entry point."""
import sys

from ausculta.cli import main

sys.exit(main())
