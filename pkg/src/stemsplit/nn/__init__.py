from .tensor import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    batchnorm,
    bilstm_group,
    bilstm_layer,
    concat,
    div,
    exp,
    getitem,
    linear,
    log,
    lstm_cell,
    matmul,
    mean,
    mean_over,
    mul,
    no_grad,
    relu,
    reshape,
    sigmoid,
    slice_,
    square,
    stack,
    sub,
    sum,
    tanh,
    transpose,
)
from .spectral import masked_istft
from .optim import Adam, PlateauHalver, adam_step, lr_schedule
