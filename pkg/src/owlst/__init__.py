"""Non-neural building blocks for open-vocabulary detection self-training."""

__version__ = "0.1.0"
