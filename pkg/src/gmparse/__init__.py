"""Model parsing for toy generative models.

Fingerprint estimation under frequency-domain constraints, a parsing
network that predicts architecture hyperparameters and loss types, a
synthetic generator zoo with exact ground truth, and the evaluation
harness around them.
"""

__version__ = "0.1.0"

from .fingerprint import FenConfig, FingerprintLossWeights, FingerprintNet, fingerprint_loss  # noqa: E402
from .parser import ModelParser, PnConfig, build_parser, load_parser, save_parser  # noqa: E402
from .zoo import GmSpec, ZooConfig, build_zoo, ground_truth_vector, sample_images, train_toy_gm  # noqa: E402

__all__ = [
    "FenConfig",
    "FingerprintLossWeights",
    "FingerprintNet",
    "GmSpec",
    "ModelParser",
    "PnConfig",
    "ZooConfig",
    "build_parser",
    "build_zoo",
    "fingerprint_loss",
    "ground_truth_vector",
    "load_parser",
    "sample_images",
    "save_parser",
    "train_toy_gm",
    "__version__",
]
