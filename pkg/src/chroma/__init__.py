"""Weakly supervised color naming with a learned visual-attention branch."""

from chroma.tensor import (
    Tensor,
    ShapeError,
    OptimizerState,
    no_grad,
    conv2d,
    deconv2d,
    maxpool2d,
    global_avgpool,
    batchnorm,
    relu,
    channel_softmax,
    vector_softmax,
    concat_channels,
    fully_connected,
    cross_entropy,
    sgd_step,
    finite_diff_check,
)

__version__ = "0.1.0"
