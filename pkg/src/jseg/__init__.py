"""Two-branch video object segmentation on a self-contained autodiff core."""

__version__ = "0.1.0"

from .tensor import Tape, Tensor, backward, elementwise  # noqa: F401
