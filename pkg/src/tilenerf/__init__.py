"""Out-of-core training of tiled neural radiance fields over overhead imagery."""

__version__ = "0.1.0"
