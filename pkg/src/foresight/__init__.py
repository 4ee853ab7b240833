"""Feature-space video forecasting.

Encode frames into dense feature grids, compress with PCA, train a factorized
spatio-temporal masked transformer to predict future feature frames, and score
forecasts through frozen linear readout heads.
"""

from .errors import (
    DataError,
    DimensionError,
    ForesightError,
    FormatError,
    NumericError,
    ParameterError,
)
from .evaluation import (
    EvalItem,
    MetricReport,
    ReadoutHead,
    depth_metrics,
    evaluate_pipeline,
    fit_readout,
    miou,
    normal_metrics,
)
from .features import (
    FeatureSequence,
    PcaModel,
    concat_layers,
    fit_pca,
    pca_decode,
    pca_encode,
)
from .inference import (
    RolloutSchedule,
    copy_last,
    forecast_next,
    rollout,
    sliding_window_forecast,
)
from .model import (
    ForecasterConfig,
    ForecasterWeights,
    MaskPlan,
    count_parameters,
    forward,
    init_weights,
    interpolate_positions,
    named_params,
    spatial_attention,
    temporal_attention,
)
from .synthetic import SceneSpec, generate_corpus
from .training import (
    GradCheckReport,
    OptimizerState,
    TrainConfig,
    Phase2Config,
    adam_step,
    effective_lr,
    gradient_check,
    loss_and_grads,
    make_mask_plan,
    mfm_loss,
    run_training,
    smooth_l1,
)

__version__ = "0.1.0"
