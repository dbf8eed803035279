"""Grid encodings of taxi trajectories and a simplified (non-shifted) Swin
Transformer for destination prediction."""

__version__ = "0.1.0"
