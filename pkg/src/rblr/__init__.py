"""rblr: fully reversible multilevel networks with symmetric block-low-rank
3-D convolution layers.

The building blocks are dense 5-D state tensors with a zero-copy block-vector
view, a block matrix of 3x3x3 convolution stencils and its exact adjoint, an
orthonormal 3-D Haar coarsening, and a conservative three-level time stepper
whose states can be reconstructed exactly during the backward pass — so
training memory stays constant in depth. On top sit a trainer with adaptive
block rank, a closed-form memory accountant, bit-exact file formats, a
scikit-learn style estimator, and the ``rblr`` command line tool.
"""

# Thread capping must happen before the first numpy import anywhere in the
# process, because the BLAS pools size themselves at load time.
import os as _os
import sys as _sys

if "RBLR_THREADS" in _os.environ and "numpy" not in _sys.modules:
    for _var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
        "VECLIB_MAXIMUM_THREADS",
    ):
        _os.environ.setdefault(_var, _os.environ["RBLR_THREADS"])

from .tensor import (  # noqa: E402
    Shape,
    Tensor5D,
    add,
    axpy,
    block_vector,
    flatten_view,
    inner,
    neg,
    norm,
    rel_error,
    scale,
    unflatten,
)
from .convops import (  # noqa: E402
    KERNEL_SIZE,
    ConvCounter,
    KernelStack,
    apply_block,
    apply_block_t,
    as_kernel,
    conv3d,
    conv3d_adjoint,
    count_convolutions,
    delta_kernel,
    flip_kernel,
    neighbor_columns,
    weight_gradient,
)
from .haar import (  # noqa: E402
    SUBBAND_ORDER,
    ResolutionChange,
    channels_after_coarsening,
    haar_forward,
    haar_inverse,
)
from .layer import (  # noqa: E402
    IDENTITY,
    RELU,
    Activation,
    IdentityActivation,
    ReLU,
    layer_apply,
    layer_quadratic_form,
    layer_vjp,
)
from .network import (  # noqa: E402
    LayerSpec,
    LinearHead,
    NetworkSpec,
    StateLedger,
    forward,
    forward_step,
    forward_with_history,
    gradient,
    gradient_stored,
    init_params,
    reconstruct_states,
    reverse_reconstruct,
    reverse_step,
    softmax_channels,
    track_states,
)
from .memory import (  # noqa: E402
    BYTES_PER_SCALAR,
    MB,
    REFERENCE_GROUPS,
    REFERENCE_INPUT_SHAPE,
    STATE_COPIES,
    TAPS,
    MemoryReport,
    SweepRow,
    build_multilevel_layers,
    build_multilevel_spec,
    format_report,
    kernel_memory,
    kernel_memory_layer,
    memory_curves,
    reference_layers,
    reference_network,
    report,
    state_memory,
    sweep_csv,
)
from .training import (  # noqa: E402
    Optimizer,
    RankEvent,
    SegmentationTask,
    TrainConfig,
    TrainResult,
    TrainingDivergedError,
    decrease_rank,
    evaluate,
    increase_rank,
    masked_cross_entropy,
    mean_iou,
    metrics_to_csv,
    plateau_detect,
    predict_labels,
    predict_proba,
    train,
)
from .dataio import (  # noqa: E402
    BadMagicError,
    Checkpoint,
    TensorFileError,
    TruncatedPayloadError,
    UnknownDtypeError,
    import_frames,
    load_checkpoint,
    make_synthetic_task,
    make_synthetic_video,
    read_array,
    read_tensor,
    save_checkpoint,
    write_array,
    write_tensor,
)
from .estimator import ReversibleVideoSegmenter, validate_labels, validate_video  # noqa: E402
from .config import ConfigError, RunConfig, load_config  # noqa: E402
from .selfcheck import CheckResult, run_all  # noqa: E402

__version__ = "1.0.0"

__all__ = [
    "Shape", "Tensor5D", "add", "axpy", "block_vector", "flatten_view", "inner",
    "neg", "norm", "rel_error", "scale", "unflatten",
    "KERNEL_SIZE", "ConvCounter", "KernelStack", "apply_block", "apply_block_t",
    "as_kernel", "conv3d", "conv3d_adjoint", "count_convolutions", "delta_kernel",
    "flip_kernel", "neighbor_columns", "weight_gradient",
    "SUBBAND_ORDER", "ResolutionChange", "channels_after_coarsening",
    "haar_forward", "haar_inverse",
    "IDENTITY", "RELU", "Activation", "IdentityActivation", "ReLU",
    "layer_apply", "layer_quadratic_form", "layer_vjp",
    "LayerSpec", "LinearHead", "NetworkSpec", "StateLedger", "forward",
    "forward_step", "forward_with_history", "gradient", "gradient_stored",
    "init_params", "reconstruct_states", "reverse_reconstruct", "reverse_step",
    "softmax_channels", "track_states",
    "BYTES_PER_SCALAR", "MB", "REFERENCE_GROUPS", "REFERENCE_INPUT_SHAPE",
    "STATE_COPIES", "TAPS", "MemoryReport", "SweepRow",
    "build_multilevel_layers", "build_multilevel_spec", "format_report",
    "kernel_memory", "kernel_memory_layer", "memory_curves",
    "reference_layers", "reference_network", "report", "state_memory",
    "sweep_csv",
    "Optimizer", "RankEvent", "SegmentationTask", "TrainConfig", "TrainResult",
    "TrainingDivergedError", "decrease_rank", "evaluate", "increase_rank",
    "masked_cross_entropy", "mean_iou", "metrics_to_csv", "plateau_detect",
    "predict_labels", "predict_proba", "train",
    "BadMagicError", "Checkpoint", "TensorFileError", "TruncatedPayloadError",
    "UnknownDtypeError", "import_frames", "load_checkpoint",
    "make_synthetic_task", "make_synthetic_video", "read_array", "read_tensor",
    "save_checkpoint",
    "write_array", "write_tensor",
    "ReversibleVideoSegmenter", "validate_labels", "validate_video",
    "ConfigError", "RunConfig", "load_config",
    "CheckResult", "run_all",
    "__version__",
]
