"""canlm: calibrated tokenization and masked-LM pretraining for decoded CAN signals."""

__version__ = "0.1.0"
