from .functional import (conv2d, dense, flatten, l2_normalize, log_softmax_rows, max_pool2d,
                         softmax_cross_entropy_rows)
from .optim import Adam, ParameterSet, adam_step
from .tensor import (Parameter, Tensor, add, clip, concat, div, exp, log, matmul, mean, minimum, mul,
                     no_grad, relu, reshape, set_nan_guard, square, sub, sum_)

__all__ = [
    "Adam", "Parameter", "ParameterSet", "Tensor", "adam_step", "add", "clip", "concat", "conv2d", "dense",
    "div", "exp", "flatten", "l2_normalize", "log", "log_softmax_rows", "matmul", "max_pool2d", "mean",
    "minimum", "mul", "no_grad", "relu", "reshape", "set_nan_guard", "softmax_cross_entropy_rows",
    "square", "sub", "sum_",
]
