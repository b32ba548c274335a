"""Low-light image enhancement with wavelet-domain conditional diffusion,
high-frequency spectral perception and visual-language guidance."""

__version__ = "0.1.0"
