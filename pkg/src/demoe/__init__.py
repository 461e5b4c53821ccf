"""All-in-one deblurring with a mixture-of-experts decoder.

A self-contained stack: a small rank-4 tensor engine with reverse-mode
autodiff, the router-gated expert decoder network, synthetic blur data
generation and curation, two-stage training, weight-similarity analysis
(Pearson / CKA), reference quality metrics, and a batch CLI.
"""

__version__ = "0.1.0"

from .net import ArchConfig, Model  # noqa: F401
from .tensor import Tape, Tensor, backward  # noqa: F401
