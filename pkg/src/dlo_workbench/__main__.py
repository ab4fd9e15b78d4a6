"""Entry point: `python -m src.dlo_workbench <command>` runs the CLI."""
import sys

from .cli import main

sys.exit(main())
