from msilax.numerics.tensor import Tensor, as_tensor, backward, no_grad, is_grad_enabled
from msilax.numerics.ops import (
    add, sub, mul, div, matmul, neg, exp, log, relu, sigmoid, max_scalar,
    sum, mean, reshape, flatten, softmax, log_softmax, cross_entropy,
    conv2d, max_pool2d, upsample_bilinear, bilinear_matrix,
)
from msilax.numerics.optim import Adam, AdamState
from msilax.numerics.rng import make_rng, spawn
from msilax.numerics.kernels import BACKEND
