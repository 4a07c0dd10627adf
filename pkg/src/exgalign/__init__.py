"""Two-level contrastive alignment of EEG and other physiological signals."""

__version__ = "0.1.0"
