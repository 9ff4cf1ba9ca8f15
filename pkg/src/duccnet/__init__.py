"""Dual-channel crack classification network built from scratch on numpy.

Engine layout convention: images are (height, width, channels), kernel banks
are (kh, kw, in_channels, out_channels), batches prepend a leading dimension.
The engine computes in float32; float64 is reserved for gradient verification.
"""

__version__ = "0.1.0"
