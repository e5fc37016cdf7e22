"""Joint depth-from-defocus and deblurring toolkit.

Self-contained numpy stack: a reverse-mode autodiff tensor engine, thin-lens
defocus synthesis, a shared-encoder two-decoder network, hybrid losses,
evaluation metrics, a dataset pipeline, and a deterministic trainer with a
command-line front end.
"""

from . import autodiff, data, gradcheck, losses, metrics, network, optics, optim, trainer

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "data",
    "gradcheck",
    "losses",
    "metrics",
    "network",
    "optics",
    "optim",
    "trainer",
    "__version__",
]
