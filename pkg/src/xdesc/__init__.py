"""Cross-descriptor translation, joint embedding and matching."""

from .descriptors import AlgorithmSpec, CorrespondenceDataset, DescriptorMatrix
from .errors import XdescError

__version__ = "0.1.0"

__all__ = ["AlgorithmSpec", "CorrespondenceDataset", "DescriptorMatrix", "XdescError", "__version__"]
