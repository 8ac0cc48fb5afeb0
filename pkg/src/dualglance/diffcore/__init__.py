from .engine import (
    NumericalError,
    ShapeError,
    Tape,
    Tensor,
    add,
    affine,
    clamp_warning_count,
    concat,
    conv2d,
    exp,
    log,
    matmul,
    maxpool2d,
    mul,
    record,
    reduce_bag,
    reduce_max,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    scale,
    scale_rows,
    sigmoid,
    slice_rows,
    softmax_cross_entropy,
    stack,
    sub,
    take_row,
    tensor,
    zeros,
)
from .gradcheck import grad_check, numeric_gradient, primitive_suite
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
