"""Numerical core: tensors, tape-based gradients, kernels and Adam."""

from .functional import (
    BatchNormState,
    affine,
    batchnorm,
    dropout,
    embedding_lookup,
    lengths_to_mask,
    margin_loss_logits,
    masked_time_sum,
    pair_logits,
    recurrent_forward,
    sigmoid,
    temporal_downsample,
    total,
)
from .gradcheck import gradcheck, numerical_grad, relative_error
from .optim import Adam
from .tensor import Tape, Tensor, backward

__all__ = [
    "Adam",
    "BatchNormState",
    "Tape",
    "Tensor",
    "affine",
    "backward",
    "batchnorm",
    "dropout",
    "embedding_lookup",
    "gradcheck",
    "lengths_to_mask",
    "margin_loss_logits",
    "masked_time_sum",
    "numerical_grad",
    "pair_logits",
    "recurrent_forward",
    "relative_error",
    "sigmoid",
    "temporal_downsample",
    "total",
]
