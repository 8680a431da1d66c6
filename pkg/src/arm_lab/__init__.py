"""Self-contained lab for sub-pixel feature amendment on small images.

Everything numerical is implemented directly on NumPy arrays: the tensor
primitives, the rearrangement and weighting stages, padding-erosion
analysis, balanced resampling, and the Adam trainer. See the README for the
command line interface.
"""

from .arm import ArmConfig, ArmHead, GapHead, Network, arm_param_count, build_network
from .arrange import ShuffleSpec, max_shuffle_ratio, pixel_shuffle, pixel_unshuffle
from .data import DatasetIndex, load_dataset, mrr_epoch_sample, synth_dataset
from .erosion import albino_map, cluster_weight_profile, k_sweep, perception_map
from .tensor import ConvGeometry, Tensor
from .train import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "ArmConfig",
    "ArmHead",
    "ConvGeometry",
    "DatasetIndex",
    "GapHead",
    "Network",
    "ShuffleSpec",
    "Tensor",
    "TrainConfig",
    "__version__",
    "albino_map",
    "arm_param_count",
    "build_network",
    "cluster_weight_profile",
    "k_sweep",
    "load_dataset",
    "max_shuffle_ratio",
    "mrr_epoch_sample",
    "perception_map",
    "pixel_shuffle",
    "pixel_unshuffle",
    "synth_dataset",
    "train",
]
