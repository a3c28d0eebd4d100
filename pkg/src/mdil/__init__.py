"""Multi-domain incremental semantic segmentation on a small numpy autodiff engine."""

__version__ = "0.1.0"

from mdil.kernels import BACKEND  # noqa: E402,F401
