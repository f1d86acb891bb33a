"""cmseg: copy-move forgery segmentation, synthesis and evaluation at desk scale."""

__version__ = "0.1.0"

from .tensor import Tensor, ConvParams, backward  # noqa: F401
