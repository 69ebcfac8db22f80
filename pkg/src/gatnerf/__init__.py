"""Dynamic neural radiance field conditioned on expression vectors and per-frame latent codes.

The network, autodiff tape, renderer and trainer are plain numpy; a small
compiled extension accelerates compositing, PDF sampling and layer norm
when it is built (see :mod:`gatnerf.kernels`).
"""

__version__ = "0.1.0"
