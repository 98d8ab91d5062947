"""Frame interpolation via adaptive separable convolutions.

A kernel-prediction network maps two frames to per-pixel separable 1-D
kernels; filtering the (replicate-padded) originals with those kernels and
normalizing by the filtered ones mask synthesizes the middle frame. The
convolution core is compiled (Cython + OpenMP) when available, with a
bit-identical pure-numpy fallback selected at import.
"""

from .backend import DEFAULT_BACKEND, available_backends
from .dataset import TrainingSample, synth_dataset
from .errors import (
    CheckpointError,
    ConfigMismatch,
    ContractViolation,
    DataError,
    TrainingDiverged,
)
from .losses import FeatureExtractor, contextual_loss, l1_loss, make_feature_extractor
from .net import KPNet, KPNetConfig, parameter_count
from .pipeline import (
    EnsembleConfig,
    EnsembleTransform,
    NormalizationStats,
    affine_invariance_probe,
    compute_norm_stats,
    interpolate,
    interpolate_ensemble,
)
from .sepconv import (
    OperatorTape,
    SeparableKernelField,
    full2d_oracle,
    interpolate_with_kernels,
    normalization_denominator,
    sepconv_backward,
    sepconv_forward,
)
from .tensorops import kahan_sum, psnr, replicate_pad, spatial_transform
from .training import (
    LossConfig,
    TrainConfig,
    motion_localization_report,
    train,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
