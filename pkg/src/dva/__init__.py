"""Multi-scale encoder-decoder saliency network in numpy.

Modules:
  tensor     arrays, seeded random streams, elementwise helpers
  kernels    numba / numpy inner loops (im2col, col2im, max-pooling, FNV-1a)
  layers     convolution, deconvolution, pooling, activations
  network    topology, forward / backward, weight files
  objective  deep-supervision loss, momentum SGD, training loop
  metrics    EMD, NSS, CC, SIM, AUC-Judd, AUC-Borji, shuffled AUC
  data       manifests, ground truth, map I/O, synthetic data
  config     flat key = value run configuration
  cli        the ``dva`` command
"""

from .errors import ConfigError, DvaError, InputError, IntegrityError, NumericalError, ShapeError
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ConfigError",
    "DvaError",
    "InputError",
    "IntegrityError",
    "NumericalError",
    "ShapeError",
    "__version__",
]
