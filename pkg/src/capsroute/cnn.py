"""CNN comparison model: three size-preserving conv blocks with zero-padded
max pooling, a 512-wide fully connected head with dropout, and L2-regularized
softmax cross-entropy.

Pooling windows are 2x2 for 32x32 inputs and 4x2 for 64x32 inputs (the larger
window along the frequency-stacked axis), stride 2 with zero padding, so every
block exactly halves both spatial extents.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .config import TrainConfig
from .tensor import Tensor, affine, conv2d, cross_entropy_logits, dropout, maxpool2d, pad2d, relu, truncated_normal

__all__ = ["CnnParams", "cnn_forward", "cnn_loss", "cnn_train_defaults"]

DROPOUT_KEEP = 0.5
L2_BETA = 0.001


@dataclass
class CnnParams:
    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    conv3_w: Tensor
    conv3_b: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    out_w: Tensor
    out_b: Tensor
    input_hw: tuple
    pool_window: tuple
    dropout_keep: float = DROPOUT_KEEP
    l2_beta: float = L2_BETA

    @classmethod
    def init(
        cls,
        input_hw: tuple = (32, 32),
        rng: Optional[np.random.Generator] = None,
        dtype=np.float64,
        filters: tuple = (32, 64, 128),
        fc_hidden: int = 512,
        dropout_keep: float = DROPOUT_KEEP,
        l2_beta: float = L2_BETA,
    ) -> "CnnParams":
        if rng is None:
            rng = np.random.default_rng(0)
        h, w = input_hw
        pool_window = (4, 2) if h == 2 * w else (2, 2)
        ph, pw = h, w
        for _ in range(3):
            ph = -(-ph // 2)
            pw = -(-pw // 2)
        flat = filters[2] * ph * pw

        def weight(shape):
            return Tensor(truncated_normal(rng, shape, std=0.1, dtype=dtype), requires_grad=True)

        def zeros(shape):
            return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

        f1, f2, f3 = filters
        return cls(
            conv1_w=weight((f1, 1, 3, 3)),
            conv1_b=zeros(f1),
            conv2_w=weight((f2, f1, 3, 3)),
            conv2_b=zeros(f2),
            conv3_w=weight((f3, f2, 3, 3)),
            conv3_b=zeros(f3),
            fc1_w=weight((fc_hidden, flat)),
            fc1_b=zeros(fc_hidden),
            out_w=weight((2, fc_hidden)),
            out_b=zeros(2),
            input_hw=tuple(input_hw),
            pool_window=pool_window,
            dropout_keep=dropout_keep,
            l2_beta=l2_beta,
        )

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [
            ("conv1_w", self.conv1_w),
            ("conv1_b", self.conv1_b),
            ("conv2_w", self.conv2_w),
            ("conv2_b", self.conv2_b),
            ("conv3_w", self.conv3_w),
            ("conv3_b", self.conv3_b),
            ("fc1_w", self.fc1_w),
            ("fc1_b", self.fc1_b),
            ("out_w", self.out_w),
            ("out_b", self.out_b),
        ]

    def weight_tensors(self) -> list[Tensor]:
        return [self.conv1_w, self.conv2_w, self.conv3_w, self.fc1_w, self.out_w]

    def fingerprint(self) -> dict:
        return {
            "arch": "cnn-v1",
            "input_hw": list(self.input_hw),
            "filters": [int(self.conv1_w.shape[0]), int(self.conv2_w.shape[0]), int(self.conv3_w.shape[0])],
            "fc_hidden": int(self.fc1_w.shape[0]),
            "pool_window": list(self.pool_window),
            "dropout_keep": self.dropout_keep,
            "l2_beta": self.l2_beta,
            "dtype": str(self.conv1_w.dtype),
        }


def _block(x: Tensor, kernels: Tensor, bias: Tensor, pool_window: tuple) -> Tensor:
    padded = pad2d(x, (1, 1, 1, 1))
    activated = relu(conv2d(padded, kernels, bias, stride=1))
    return maxpool2d(activated, pool_window, stride=2, zero_pad=True)


def cnn_forward(image: np.ndarray, params: CnnParams, training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Three conv/pool blocks, flatten, FC head. Dropout only when training.

    Dropout uses inverted scaling, so inference applies no rescale and is
    deterministic.
    """
    pixels = np.asarray(image)
    dtype = params.conv1_w.dtype
    if pixels.dtype == np.uint8:
        pixels = pixels.astype(dtype) / 255.0
    batched = pixels.ndim == 3
    px = pixels if batched else pixels[None]
    if px.shape[1:] != params.input_hw:
        raise ValueError(f"image {px.shape[1:]} does not match model input {params.input_hw}")
    x = Tensor(px[:, None, :, :].astype(dtype, copy=False))

    x = _block(x, params.conv1_w, params.conv1_b, params.pool_window)
    x = _block(x, params.conv2_w, params.conv2_b, params.pool_window)
    x = _block(x, params.conv3_w, params.conv3_b, params.pool_window)
    flat = x.reshape(x.shape[0], x.shape[1] * x.shape[2] * x.shape[3])
    hidden = relu(affine(flat, params.fc1_w, params.fc1_b))
    if training:
        if rng is None:
            raise ValueError("training-mode forward needs an rng for dropout")
        hidden = dropout(hidden, params.dropout_keep, rng)
    logits = affine(hidden, params.out_w, params.out_b)
    return logits if batched else logits.reshape(2)


def cnn_loss(logits: Tensor, labels, params: CnnParams) -> Tensor:
    """Softmax cross-entropy plus l2_beta * sum of squared weights (biases excluded)."""
    ce = cross_entropy_logits(logits, labels)
    l2 = None
    for w in params.weight_tensors():
        term = w.square().sum()
        l2 = term if l2 is None else l2 + term
    return ce + params.l2_beta * l2


def cnn_train_defaults() -> TrainConfig:
    """The comparison model's published training settings."""
    return TrainConfig(
        kind="cnn",
        epochs=500,
        batch_size=32,
        learning_rate=1e-3,
        dropout_keep=DROPOUT_KEEP,
        l2_beta=L2_BETA,
    )
