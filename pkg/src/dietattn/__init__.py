"""Multi-head attention with decoupled positional and segment encodings.

Pure-stdlib at runtime, with an optional compiled kernel backend. See the
README for the CLI and the verification suites.
"""

__version__ = "0.1.0"

from .backend import active as active_backend
from .errors import (
    ConfigError,
    DietAttnError,
    DimensionError,
    DivergenceError,
    InputError,
    MeasurementError,
    NumericError,
    SchemeError,
    StaleCacheError,
)
from .rng import Rng
from .tensor import (
    Matrix,
    add,
    hadamard,
    matmul,
    matmul_nt,
    matmul_tn,
    max_abs_diff,
    numerical_rank,
    randn_matrix,
    scale_by,
    singular_values,
    softmax_rows,
    sub,
    svd,
    transpose,
)
from .config import AttentionConfig, PositionScheme
from .encodings import (
    SegmentMap,
    build_cache,
    init_params,
    load_params,
    positional_bias,
    save_params,
    sinusoidal_table,
    t5_bucket,
)
from .attention import (
    HeadWeights,
    attention_head,
    multi_head,
    multi_head_backward,
    scores_diet_abs,
    scores_diet_rel,
    scores_input_additive,
    scores_linformer_diet_abs,
    scores_shaw,
    scores_t5,
    scores_vanilla,
)
from .model import (
    Adam,
    Model,
    PositionProbe,
    SelectiveCopy,
    Sgd,
    evaluate_accuracy,
    load_model,
    loss_and_grads,
    make_optimizer,
    save_model,
    train,
)
from .analysis import (
    export_heatmap,
    gradient_check,
    position_cosine_stats,
    rank_scan,
    read_heatmap,
    verify_theorem1,
    verify_theorem2,
    zero_param_check,
)
from .bench import bench_backends, bench_scheme, compare_all, scaling_scan
