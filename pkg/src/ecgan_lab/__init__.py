"""Energy-based conditional GAN lab: losses, presets, small trainers and exact oracles."""

__version__ = "0.1.0"
