"""litedepth: self-supervised monocular depth estimation at desk scale."""

__version__ = "0.1.0"
