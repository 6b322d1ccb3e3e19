"""vemreg: global registration of low-overlap partial scans with a visibility error metric."""

__version__ = "0.1.0"
