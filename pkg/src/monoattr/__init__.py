"""Token attributions for a small transformer classifier, with SAE features and learned explanation optimizers."""

__version__ = "0.1.0"
