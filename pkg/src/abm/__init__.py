"""Image-to-LaTeX math recognizer with two opposite-direction decoders that distill into each other."""

__version__ = "0.1.0"
