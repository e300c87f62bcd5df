"""Shallow baseline: one 512-unit hidden layer on raw pixels."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import Tensor, affine, relu, truncated_normal

__all__ = ["MlpParams", "mlp_forward"]


@dataclass
class MlpParams:
    fc1_w: Tensor
    fc1_b: Tensor
    out_w: Tensor
    out_b: Tensor
    input_hw: tuple

    @classmethod
    def init(cls, input_hw: tuple = (32, 32), rng: Optional[np.random.Generator] = None, dtype=np.float64, hidden: int = 512) -> "MlpParams":
        if rng is None:
            rng = np.random.default_rng(0)
        pixels = input_hw[0] * input_hw[1]
        return cls(
            fc1_w=Tensor(truncated_normal(rng, (hidden, pixels), std=0.1, dtype=dtype), requires_grad=True),
            fc1_b=Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True),
            out_w=Tensor(truncated_normal(rng, (2, hidden), std=0.1, dtype=dtype), requires_grad=True),
            out_b=Tensor(np.zeros(2, dtype=dtype), requires_grad=True),
            input_hw=tuple(input_hw),
        )

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [("fc1_w", self.fc1_w), ("fc1_b", self.fc1_b), ("out_w", self.out_w), ("out_b", self.out_b)]

    def fingerprint(self) -> dict:
        return {
            "arch": "mlp-v1",
            "input_hw": list(self.input_hw),
            "hidden": int(self.fc1_w.shape[0]),
            "dtype": str(self.fc1_w.dtype),
        }


def mlp_forward(image: np.ndarray, params: MlpParams) -> Tensor:
    pixels = np.asarray(image)
    dtype = params.fc1_w.dtype
    if pixels.dtype == np.uint8:
        pixels = pixels.astype(dtype) / 255.0
    batched = pixels.ndim == 3
    px = pixels if batched else pixels[None]
    if px.shape[1:] != params.input_hw:
        raise ValueError(f"image {px.shape[1:]} does not match model input {params.input_hw}")
    flat = Tensor(px.reshape(px.shape[0], -1).astype(dtype, copy=False))
    hidden = relu(affine(flat, params.fc1_w, params.fc1_b))
    logits = affine(hidden, params.out_w, params.out_b)
    return logits if batched else logits.reshape(2)
