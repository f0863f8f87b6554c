"""Urban sound tagging: features, augmentation, CNN training, evaluation."""

__version__ = "0.1.0"
