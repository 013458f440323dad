"""Long/short-term temporal meta-learning for CTR prediction on synthetic
multi-source interaction logs."""

__version__ = "0.1.0"
