from .tensor import (
    active_graph,
    Graph,
    OpRecord,
    Tensor,
    add,
    as_tensor,
    add_const,
    backward,
    concat,
    conv1d_same,
    conv2d3_depthwise,
    exp,
    linear_op_kinds,
    log,
    log_floored,
    matmul,
    mean,
    moveaxis,
    mul,
    neg,
    record,
    reduce_sum,
    register_op,
    relu,
    reshape,
    scale,
    sigmoid,
    slice_,
    softplus,
    sub,
    tanh,
)
from .nn import MlpWeights, mlp_apply, mlp_init, mlp_zero_init
from .gradcheck import grad_check
