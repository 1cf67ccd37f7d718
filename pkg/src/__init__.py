"""Source root; the toolkit lives in ``src.maxprune``."""
