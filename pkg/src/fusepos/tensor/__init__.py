from .core import (
    SELU_ALPHA,
    SELU_LAMBDA,
    Tensor,
    absolute,
    backward,
    concat,
    conv2d,
    cos,
    exp,
    global_avg_pool,
    log,
    lstm_cell,
    lstm_gates,
    matmul,
    maxpool2d,
    mean,
    no_grad,
    norm,
    pad,
    reshape,
    selu,
    sigmoid,
    sin,
    softmax,
    sqrt,
    square,
    stack,
    tanh,
    transpose,
)
from .core import tsum as sum  # noqa: A001
from .checkpoint import content_hash, load_checkpoint, save_checkpoint
from .gradcheck import GradCheckResult, check_tensors, grad_check, grad_check_detail
from .nn import LSTM, Conv2d, Dense, LSTMCell, Module, parameter
from .optim import NonFiniteGradient, Optimizer, OptimizerState, optimizer_step
from .rng import RngStream
