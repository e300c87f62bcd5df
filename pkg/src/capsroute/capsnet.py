"""Capsule network: conv stem, primary capsules, routing-by-agreement, decoder.

The conv stem (valid padding, stride 2) feeds a primary capsule layer of
16-dim vectors, which vote for two 10-dim secondary capsules through five
unrolled routing iterations. Secondary capsule lengths are class scores; a
three-layer decoder reconstructs the input from the masked winning capsule
as a 0.0005-weighted regularizer.

Gradients flow through every routing iteration; the agreement update and the
coupling softmax are ordinary recorded operations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .tensor import Tensor, affine, conv2d, einsum2, relu, sigmoid, softmax_axis, truncated_normal

__all__ = [
    "SQUASH_EPS",
    "ROUTING_ITERATIONS",
    "CapsNetParams",
    "RoutingState",
    "CapsNetOutput",
    "squash",
    "primary_capsules",
    "votes",
    "dynamic_routing",
    "classify",
    "margin_loss",
    "decoder_input",
    "decode",
    "total_loss",
    "capsnet_forward",
]

SQUASH_EPS = 1e-9
_NORM_GUARD = 1e-30  # keeps sqrt differentiable at exactly-zero vectors
ROUTING_ITERATIONS = 5
MARGIN_POS = 0.9
MARGIN_NEG = 0.1
MARGIN_LAMBDA = 0.5
RECON_SCALE = 5e-4
N_CLASSES = 2


@dataclass
class RoutingState:
    """Snapshot of the agreement logits and couplings after routing."""

    logits: np.ndarray  # b, [P, 2] (or [B, P, 2])
    couplings: np.ndarray  # c, rows sum to 1 over the secondary index
    iteration: int


@dataclass
class CapsNetOutput:
    v: Tensor  # secondary capsules, [2, 10] or [B, 2, 10]
    probabilities: np.ndarray  # capsule lengths
    predictions: np.ndarray  # argmax class indices (ties -> 0, Alert)
    reconstruction: Tensor  # decoder output in (0, 1)
    routing: RoutingState


@dataclass
class CapsNetParams:
    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    routing_w: Tensor  # [P, 2, secondary_dim, capsule_dim]
    dec1_w: Tensor
    dec1_b: Tensor
    dec2_w: Tensor
    dec2_b: Tensor
    dec3_w: Tensor
    dec3_b: Tensor
    input_hw: tuple
    conv1_stride: int = 2
    conv2_stride: int = 2
    capsule_dim: int = 16
    secondary_dim: int = 10
    routing_iterations: int = ROUTING_ITERATIONS

    @classmethod
    def init(
        cls,
        input_hw: tuple = (32, 32),
        rng: Optional[np.random.Generator] = None,
        dtype=np.float64,
        conv1_filters: int = 64,
        conv1_kernel: int = 5,
        conv1_stride: int = 2,
        conv2_filters: int = 128,
        conv2_kernel: int = 9,
        conv2_stride: int = 2,
        capsule_dim: int = 16,
        secondary_dim: int = 10,
        decoder_hidden: tuple = (512, 1024),
        routing_iterations: int = ROUTING_ITERATIONS,
    ) -> "CapsNetParams":
        if rng is None:
            rng = np.random.default_rng(0)
        if conv2_filters % capsule_dim != 0:
            raise ValueError(f"conv2 filters {conv2_filters} not divisible by capsule dim {capsule_dim}")
        h, w = input_hw
        h1 = (h - conv1_kernel) // conv1_stride + 1
        w1 = (w - conv1_kernel) // conv1_stride + 1
        h2 = (h1 - conv2_kernel) // conv2_stride + 1
        w2 = (w1 - conv2_kernel) // conv2_stride + 1
        if h2 < 1 or w2 < 1:
            raise ValueError(f"input {input_hw} too small for the conv stem")
        num_primary = h2 * w2 * (conv2_filters // capsule_dim)
        pixels = h * w

        def weight(shape):
            return Tensor(truncated_normal(rng, shape, std=0.1, dtype=dtype), requires_grad=True)

        def zeros(shape):
            return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

        d1, d2 = decoder_hidden
        return cls(
            conv1_w=weight((conv1_filters, 1, conv1_kernel, conv1_kernel)),
            conv1_b=zeros(conv1_filters),
            conv2_w=weight((conv2_filters, conv1_filters, conv2_kernel, conv2_kernel)),
            conv2_b=zeros(conv2_filters),
            routing_w=weight((num_primary, N_CLASSES, secondary_dim, capsule_dim)),
            dec1_w=weight((d1, N_CLASSES * secondary_dim)),
            dec1_b=zeros(d1),
            dec2_w=weight((d2, d1)),
            dec2_b=zeros(d2),
            dec3_w=weight((pixels, d2)),
            dec3_b=zeros(pixels),
            input_hw=tuple(input_hw),
            conv1_stride=conv1_stride,
            conv2_stride=conv2_stride,
            capsule_dim=capsule_dim,
            secondary_dim=secondary_dim,
            routing_iterations=routing_iterations,
        )

    @property
    def num_primary(self) -> int:
        return self.routing_w.shape[0]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [
            ("conv1_w", self.conv1_w),
            ("conv1_b", self.conv1_b),
            ("conv2_w", self.conv2_w),
            ("conv2_b", self.conv2_b),
            ("routing_w", self.routing_w),
            ("dec1_w", self.dec1_w),
            ("dec1_b", self.dec1_b),
            ("dec2_w", self.dec2_w),
            ("dec2_b", self.dec2_b),
            ("dec3_w", self.dec3_w),
            ("dec3_b", self.dec3_b),
        ]

    def fingerprint(self) -> dict:
        return {
            "arch": "capsnet-v1",
            "input_hw": list(self.input_hw),
            "conv1": [int(s) for s in self.conv1_w.shape] + [self.conv1_stride],
            "conv2": [int(s) for s in self.conv2_w.shape] + [self.conv2_stride],
            "capsule_dim": self.capsule_dim,
            "secondary_dim": self.secondary_dim,
            "num_primary": int(self.num_primary),
            "decoder_hidden": [int(self.dec1_w.shape[0]), int(self.dec2_w.shape[0])],
            "routing_iterations": self.routing_iterations,
            "dtype": str(self.conv1_w.dtype),
        }


# ---------------------------------------------------------------------------
# capsule primitives
# ---------------------------------------------------------------------------


def squash(s: Tensor) -> Tensor:
    """v = (|s|^2 / (1 + |s|^2)) * (s / (|s| + eps)) along the last axis.

    Zero vectors map to zero; output lengths are strictly below 1.
    """
    n2 = s.square().sum(axis=-1, keepdims=True)
    norm = (n2 + _NORM_GUARD).sqrt()
    scale = n2 / ((n2 + 1.0) * (norm + SQUASH_EPS))
    return s * scale


def primary_capsules(conv2_out: Tensor, capsule_dim: int = 16) -> Tensor:
    """Regroup [C, h, w] conv features into h*w*(C/capsule_dim) squashed capsules.

    Channels split into capsule types of ``capsule_dim`` consecutive channels;
    capsules are ordered cell-major, then by type.
    """
    batched = conv2_out.ndim == 4
    x = conv2_out if batched else conv2_out.reshape((1,) + conv2_out.shape)
    b, c, h, w = x.shape
    if c % capsule_dim != 0:
        raise ValueError(f"channel count {c} not divisible by capsule dim {capsule_dim}")
    types = c // capsule_dim
    u = (
        x.reshape(b, types, capsule_dim, h, w)
        .transpose((0, 3, 4, 1, 2))
        .reshape(b, h * w * types, capsule_dim)
    )
    u = squash(u)
    return u if batched else u.reshape(u.shape[1], u.shape[2])


def votes(u: Tensor, w: Tensor) -> Tensor:
    """Per-pair predictions u_hat[p, j] = W[p, j] @ u[p]."""
    if w.ndim != 4 or u.shape[-1] != w.shape[-1] or u.shape[-2] != w.shape[0]:
        raise ValueError(f"votes shapes disagree: u {u.shape}, W {w.shape}")
    if u.ndim == 2:
        return einsum2("pjdk,pk->pjd", w, u)
    if u.ndim == 3:
        return einsum2("pjdk,bpk->bpjd", w, u)
    raise ValueError(f"votes expects [P, dim] or [B, P, dim] capsules, got {u.shape}")


def dynamic_routing(u_hat: Tensor, iterations: int = ROUTING_ITERATIONS) -> tuple[Tensor, RoutingState]:
    """Iterative agreement routing over votes [P, J, D] (or batched [B, P, J, D]).

    Logits start at zero; each iteration takes the coupling softmax over the
    secondary index, forms the weighted vote sum, squashes it, and adds the
    vote/output agreement back onto the logits.
    """
    if iterations < 1:
        raise ValueError(f"routing needs at least 1 iteration, got {iterations}")
    batched = u_hat.ndim == 4
    uh = u_hat if batched else u_hat.reshape((1,) + u_hat.shape)
    bsz, p, j, d = uh.shape
    b = Tensor(np.zeros((bsz, p, j), dtype=uh.dtype))
    v = None
    c = None
    for _ in range(iterations):
        c = softmax_axis(b, axis=2)
        s = einsum2("bpj,bpjd->bjd", c, uh)
        v = squash(s)
        agreement = einsum2("bpjd,bjd->bpj", uh, v)
        b = b + agreement
    state = RoutingState(
        logits=b.data if batched else b.data[0],
        couplings=c.data if batched else c.data[0],
        iteration=iterations,
    )
    return (v if batched else v.reshape(j, d)), state


def capsule_lengths(v: Union[Tensor, np.ndarray]) -> np.ndarray:
    data = v.data if isinstance(v, Tensor) else np.asarray(v)
    return np.sqrt((data**2).sum(axis=-1))


def classify(v: Union[Tensor, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Capsule lengths as class probabilities; argmax label, ties toward class 0."""
    lengths = capsule_lengths(v)
    # reversed argmax of the reversed array would break the tie toward class 1;
    # plain argmax returns the first maximum, i.e. Alert on ties
    return lengths, lengths.argmax(axis=-1)


def margin_loss(v: Tensor, labels) -> Tensor:
    """Hinge-squared loss on capsule lengths, averaged over the batch.

    L = sum_k T_k max(0, 0.9 - |v_k|)^2 + 0.5 (1 - T_k) max(0, |v_k| - 0.1)^2
    """
    batched = v.ndim == 3
    vv = v if batched else v.reshape((1,) + v.shape)
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if lab.shape[0] != vv.shape[0]:
        raise ValueError(f"margin_loss got {lab.shape[0]} labels for {vv.shape[0]} samples")
    n2 = vv.square().sum(axis=-1)
    length = (n2 + _NORM_GUARD).sqrt()
    onehot = np.zeros(length.shape, dtype=vv.dtype)
    onehot[np.arange(lab.shape[0]), lab] = 1.0
    t = Tensor(onehot)
    anti = Tensor(1.0 - onehot)
    pos = relu(MARGIN_POS - length).square()
    neg = relu(length - MARGIN_NEG).square()
    per_sample = (t * pos + anti * neg * MARGIN_LAMBDA).sum(axis=-1)
    return per_sample.mean()


def decoder_input(v: Tensor, mask: np.ndarray) -> Tensor:
    """Masked concatenation: the non-selected capsule is zeroed, then flattened.

    This is the one place that fixes the decoder-input convention (20-dim
    masked pair rather than the bare 10-dim winner).
    """
    batched = v.ndim == 3
    vv = v if batched else v.reshape((1,) + v.shape)
    m = np.atleast_2d(np.asarray(mask, dtype=vv.dtype))
    masked = vv * Tensor(m[:, :, None])
    flat = masked.reshape(vv.shape[0], vv.shape[1] * vv.shape[2])
    return flat if batched else flat.reshape(flat.shape[1])


def decode(v: Tensor, mask: np.ndarray, params: CapsNetParams) -> Tensor:
    """Three affine layers (ReLU, ReLU, Sigmoid) from the masked capsule pair."""
    x = decoder_input(v, mask)
    h1 = relu(affine(x, params.dec1_w, params.dec1_b))
    h2 = relu(affine(h1, params.dec2_w, params.dec2_b))
    return sigmoid(affine(h2, params.dec3_w, params.dec3_b))


def total_loss(image, v: Tensor, reconstruction: Tensor, labels) -> Tensor:
    """Margin loss plus 0.0005 * summed squared reconstruction error.

    ``image`` must already be scaled to [0, 1] and flattened to match the
    reconstruction (leading batch axis optional).
    """
    target = np.asarray(image, dtype=reconstruction.dtype)
    if target.shape != reconstruction.shape:
        raise ValueError(f"image {target.shape} does not match reconstruction {reconstruction.shape}")
    margin = margin_loss(v, labels)
    per_sample = (reconstruction - Tensor(target)).square().sum(axis=-1)
    return margin + RECON_SCALE * per_sample.mean()


def _one_hot(indices: np.ndarray, dtype) -> np.ndarray:
    out = np.zeros((indices.shape[0], N_CLASSES), dtype=dtype)
    out[np.arange(indices.shape[0]), indices] = 1.0
    return out


def capsnet_forward(image: np.ndarray, params: CapsNetParams, mode: str = "eval", labels=None) -> CapsNetOutput:
    """Full forward pass; images are [H, W] or [B, H, W], uint8 or [0, 1] floats.

    In ``train`` mode the decoder sees the true capsule (labels required); in
    ``eval`` mode it sees the predicted one.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    pixels = np.asarray(image)
    dtype = params.conv1_w.dtype
    if pixels.dtype == np.uint8:
        pixels = pixels.astype(dtype) / 255.0
    batched = pixels.ndim == 3
    px = pixels if batched else pixels[None]
    if px.shape[1:] != params.input_hw:
        raise ValueError(f"image {px.shape[1:]} does not match model input {params.input_hw}")
    x = Tensor(px[:, None, :, :].astype(dtype, copy=False))

    h1 = relu(conv2d(x, params.conv1_w, params.conv1_b, stride=params.conv1_stride))
    h2 = relu(conv2d(h1, params.conv2_w, params.conv2_b, stride=params.conv2_stride))
    u = primary_capsules(h2, params.capsule_dim)
    u_hat = votes(u, params.routing_w)
    v, state = dynamic_routing(u_hat, params.routing_iterations)
    probabilities, predictions = classify(v)

    if mode == "train":
        if labels is None:
            raise ValueError("train mode needs labels for decoder masking")
        mask_idx = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    else:
        mask_idx = np.atleast_1d(predictions)
    mask = _one_hot(mask_idx, dtype)
    recon = decode(v, mask, params)
    if not batched:
        v = v.reshape(v.shape[1], v.shape[2])
        recon = recon.reshape(recon.shape[1])
        probabilities = probabilities[0]
        predictions = predictions[0]
        state = RoutingState(logits=state.logits[0], couplings=state.couplings[0], iteration=state.iteration)
    return CapsNetOutput(v=v, probabilities=probabilities, predictions=predictions, reconstruction=recon, routing=state)
