"""Parameter-conditioned image operator networks.

A weight-learning network maps an operator-parameter vector to the weights
of a convolutional base network, so one model serves a whole family of
parameterized image operators; a single-adjustable-layer mode makes
interactive parameter sweeps cheap by caching all activations before that
layer.  Reference operator implementations synthesize training data, and
analysis tools inspect what the trained networks do.
"""

from .autodiff import Tape, Tensor, backward
from .basenet import BaseNetConfig, WeightSet, count_parameters, forward_base, init_weights, instance_norm
from .checkpoint import LoadedCheckpoint, load_checkpoint, save_checkpoint
from .corpus import make_corpus
from .errors import (
    CacheInvalidError,
    ContractViolation,
    DimensionError,
    NumericError,
    ParameterError,
    RegistryError,
)
from .hypernet import (
    ActivationCache,
    LearnedSlotSpec,
    WeightLearningNet,
    build_cache,
    cached_forward,
    multipath_expand,
    predict_cheap,
    predict_weights,
)
from .operators import (
    OperatorSpec,
    add_gaussian_noise,
    apply_operator,
    bicubic_resize,
    degrade_sr,
    edge_map,
    gaussian_blur,
    get_operator,
    joint_bilateral,
    l0_smooth,
    normalize_gamma,
    operator_specs,
    register_operator,
    rgf_smooth,
    sample_parameter,
    wls_smooth,
)
from .training import Adam, EvalReport, HyperConfig, TrainConfig, evaluate, l2_loss, make_pair, psnr, ssim, train
from .analysis import (
    CountReport,
    ErfMask,
    InterpolationReport,
    MultipathReport,
    WeightStats,
    count_report,
    effective_receptive_field,
    interpolation_eval,
    theoretical_receptive_field,
    verify_multipath,
    weight_statistics,
)

__version__ = "0.1.0"
