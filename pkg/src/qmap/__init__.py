"""qmap: quantitative MRI parameter mapping from inversion-recovery series.

Estimates per-voxel (T1, PD, inversion efficiency) maps from magnitude
weighted-image series via three routes — a conditional diffusion model with
repeat-inference uncertainty, a per-voxel least-squares fit, and a direct
regression CNN — plus synthetic phantom data generation and an evaluation
harness.
"""

from . import backend
from .container import (
    ContainerError,
    HeaderError,
    MagicError,
    TruncatedPayloadError,
    read_container,
    read_header,
    write_container,
)
from .ddpm import (
    DdpmModel,
    NoiseSchedule,
    TrainConfig,
    load_model,
    make_schedule,
    q_sample,
    sample,
    save_model,
    scale_map,
    train,
    unscale_map,
)
from .evaluate import (
    RoiReport,
    RoiSpec,
    UncertaintyResult,
    error_metrics,
    repeat_sample,
    roi_stats,
    uncertainty_error_correlation,
)
from .mle import FitOptions, FitResult, crlb_t1, fit_map, fit_voxel
from .phantom import (
    Dataset,
    DatasetManifest,
    QuantMap,
    SPHERE_T1_SECONDS,
    TissueSpec,
    WeightedSeries,
    make_brain_phantom,
    make_sphere_phantom,
    realise_dataset,
)
from .regression import RegressionConfig, predict, train_regressor
from .signal import (
    DEFAULT_TIS_SECONDS,
    NoiseSpec,
    NullPointError,
    Protocol,
    TissueParams,
    add_noise,
    signal,
    signal_jacobian,
    signal_series,
)

__version__ = "0.1.0"
