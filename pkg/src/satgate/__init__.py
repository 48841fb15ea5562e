"""satgate: gated skip connections for small encoder-decoder segmenters.

A self-contained numpy implementation of a select-attend-transfer skip
gate and its ablations (pass-through, select-only, attend-only) inside
miniature U-Net / V-Net / Tiramisu networks, with reverse-mode autodiff,
ADADELTA/SGD training, Dice/FPR/FNR evaluation, synthetic data, and
bit-exact file formats. See the ``satgate`` command for the CLI.
"""

from .tensor import (
    Tensor,
    Parameter,
    ShapeError,
    NotFiniteError,
    no_grad,
    ewise,
    sum_all,
    backward,
    finite_diff_grad,
    tensor_from,
)
from .ops import (
    ConvSpec,
    BatchNormState,
    conv_nd,
    trelu,
    relu,
    sigmoid,
    batchnorm,
    maxpool,
    upsample_nearest,
    concat_channels,
    slice_channels,
)
from .gate import (
    GateVariant,
    GateParams,
    GateOutput,
    select,
    attend,
    gate_forward,
    transfer_channels,
    channels_off,
)
from .networks import (
    ArchSpec,
    Model,
    build_model,
    forward,
    count_params,
    concat_input_width,
    reference_spec,
)
from .training import (
    glorot_uniform,
    AdadeltaState,
    adadelta_step,
    Adadelta,
    SGDMomentum,
    dice_loss,
    bce_loss,
    TrainConfig,
    TrainHistory,
    make_optimizer,
    train,
    evaluate,
)
from .metrics import (
    ConfusionCounts,
    binarize,
    dice_fpr_fnr,
    sparsity_report,
    export_gray_image,
)
from .data import (
    SyntheticSpec,
    SegSample,
    generate_synthetic,
    save_tensor,
    load_tensor,
    save_dataset,
    load_dataset,
    save_checkpoint,
    load_checkpoint,
)
from .gradcheck import run_checks

__version__ = "0.1.0"

__all__ = [
    "Tensor", "Parameter", "ShapeError", "NotFiniteError", "no_grad",
    "ewise", "sum_all", "backward", "finite_diff_grad", "tensor_from",
    "ConvSpec", "BatchNormState", "conv_nd", "trelu", "relu", "sigmoid",
    "batchnorm", "maxpool", "upsample_nearest", "concat_channels",
    "slice_channels",
    "GateVariant", "GateParams", "GateOutput", "select", "attend",
    "gate_forward", "transfer_channels", "channels_off",
    "ArchSpec", "Model", "build_model", "forward", "count_params",
    "concat_input_width", "reference_spec",
    "glorot_uniform", "AdadeltaState", "adadelta_step", "Adadelta",
    "SGDMomentum", "dice_loss", "bce_loss", "TrainConfig", "TrainHistory",
    "make_optimizer",
    "train", "evaluate",
    "ConfusionCounts", "binarize", "dice_fpr_fnr", "sparsity_report",
    "export_gray_image",
    "SyntheticSpec", "SegSample", "generate_synthetic", "save_tensor",
    "load_tensor", "save_dataset", "load_dataset", "save_checkpoint",
    "load_checkpoint",
    "run_checks",
    "__version__",
]
