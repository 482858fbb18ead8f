"""Figure scripts for adaptrial simulation outputs."""

from .driver import build_all, render
from .io import FigureSpec, SchemaError

__version__ = "0.1.0"
