"""Training loops for the three model kinds, checkpointing, and evaluation."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .capsnet import CapsNetParams, capsnet_forward, total_loss
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .cnn import CnnParams, cnn_forward, cnn_loss
from .config import TrainConfig
from .metrics import ConfusionMatrix
from .mlp import MlpParams, mlp_forward
from .optim import adam_init, adam_step
from .signal import Label, SpectrogramImage
from .tensor import NumericError, cross_entropy_logits, no_grad

__all__ = [
    "TrainingError",
    "LeakageError",
    "images_to_arrays",
    "build_params",
    "train_model",
    "predict",
    "evaluate",
    "save_model",
    "load_model",
]

ModelParams = Union[CapsNetParams, CnnParams, MlpParams]


class TrainingError(RuntimeError):
    pass


class LeakageError(RuntimeError):
    pass


def images_to_arrays(images: Sequence[SpectrogramImage]) -> tuple[np.ndarray, np.ndarray]:
    """Stack pixels to [N, H, W] uint8 and labels to [N] (Alert 0, Drowsy 1)."""
    if not images:
        raise TrainingError("empty image list")
    shape = images[0].pixels.shape
    for i, img in enumerate(images):
        if img.pixels.shape != shape:
            raise TrainingError(f"image {i} has shape {img.pixels.shape}, expected {shape}")
    pixels = np.stack([img.pixels for img in images])
    labels = np.array([1 if img.label == Label.DROWSY else 0 for img in images], dtype=np.int64)
    return pixels, labels


def build_params(kind: str, input_hw: tuple, rng: np.random.Generator, dtype=np.float64, cfg: Optional[TrainConfig] = None) -> ModelParams:
    if kind == "capsnet":
        return CapsNetParams.init(input_hw, rng, dtype=dtype)
    if kind == "cnn":
        if cfg is not None:
            return CnnParams.init(input_hw, rng, dtype=dtype, dropout_keep=cfg.dropout_keep, l2_beta=cfg.l2_beta)
        return CnnParams.init(input_hw, rng, dtype=dtype)
    if kind == "mlp":
        return MlpParams.init(input_hw, rng, dtype=dtype)
    raise TrainingError(f"unknown model kind {kind!r}")


def _forward_loss(kind: str, params: ModelParams, px: np.ndarray, labels: np.ndarray, dropout_rng: Optional[np.random.Generator]):
    if kind == "capsnet":
        out = capsnet_forward(px, params, mode="train", labels=labels)
        dtype = params.conv1_w.dtype
        target = (px.astype(dtype) / 255.0).reshape(px.shape[0], -1)
        loss = total_loss(target, out.v, out.reconstruction, labels)
        return loss, out.predictions
    if kind == "cnn":
        logits = cnn_forward(px, params, training=True, rng=dropout_rng)
        return cnn_loss(logits, labels, params), logits.data.argmax(axis=-1)
    logits = mlp_forward(px, params)
    return cross_entropy_logits(logits, labels), logits.data.argmax(axis=-1)


def train_model(kind: str, train_images: Sequence[SpectrogramImage], cfg: TrainConfig) -> tuple[ModelParams, list[dict]]:
    """Adam-driven epochs over shuffled mini-batches; deterministic in cfg.seed.

    Returns trained parameters and the per-epoch curve (mean loss, train
    accuracy). A non-finite loss aborts with the offending epoch and batch.
    """
    pixels, labels = images_to_arrays(train_images)
    n = len(labels)
    params = build_params(kind, pixels.shape[1:], np.random.default_rng((cfg.seed, 0x1)), dtype=cfg.dtype, cfg=cfg)
    named = params.named_parameters()
    state = adam_init([p.data for _, p in named], lr=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    shuffle_rng = np.random.default_rng((cfg.seed, 0x2))
    dropout_rng = np.random.default_rng((cfg.seed, 0x3))

    curve = []
    for epoch in range(cfg.epochs):
        perm = shuffle_rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        for batch_start in range(0, n, cfg.batch_size):
            idx = perm[batch_start : batch_start + cfg.batch_size]
            try:
                loss, preds = _forward_loss(kind, params, pixels[idx], labels[idx], dropout_rng)
                for _, p in named:
                    p.zero_grad()
                loss.backward()
            except NumericError as exc:
                raise TrainingError(f"non-finite value at epoch {epoch} batch {batch_start // cfg.batch_size}: {exc}") from exc
            new_data, state = adam_step([p.data for _, p in named], [p.grad for _, p in named], state)
            for (_, p), d in zip(named, new_data):
                p.data = d
            loss_sum += loss.item() * len(idx)
            correct += int((preds == labels[idx]).sum())
        mean_loss = loss_sum / n
        accuracy = correct / n
        if not np.isfinite(mean_loss):
            raise TrainingError(f"non-finite epoch loss at epoch {epoch}")
        curve.append({"epoch": epoch, "mean_loss": mean_loss, "train_accuracy": accuracy})
        if cfg.early_stop_train_acc is not None and accuracy >= cfg.early_stop_train_acc:
            break
    return params, curve


def predict(kind: str, params: ModelParams, pixels: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Class indices for [N, H, W] pixels; inference mode, no recorded graph."""
    preds = []
    with no_grad():
        for start in range(0, len(pixels), batch_size):
            chunk = pixels[start : start + batch_size]
            if kind == "capsnet":
                preds.append(capsnet_forward(chunk, params, mode="eval").predictions)
            elif kind == "cnn":
                preds.append(cnn_forward(chunk, params, training=False).data.argmax(axis=-1))
            else:
                preds.append(mlp_forward(chunk, params).data.argmax(axis=-1))
    return np.concatenate(preds)


def _kind_of(params: ModelParams) -> str:
    return {"CapsNetParams": "capsnet", "CnnParams": "cnn", "MlpParams": "mlp"}[type(params).__name__]


def evaluate(
    model: Union[ModelParams, Path, str],
    test_images: Sequence[SpectrogramImage],
    train_paths: Optional[set] = None,
) -> ConfusionMatrix:
    """Confusion counts over the test images, drowsy positive.

    ``model`` is either a trained params object or a checkpoint path. When
    ``train_paths`` is given, any test image whose source path appears there
    is a lineage violation.
    """
    if isinstance(model, (str, Path)):
        kind, params = load_model(model)
    else:
        params, kind = model, _kind_of(model)
    if train_paths is not None:
        for img in test_images:
            if img.source_path and img.source_path in train_paths:
                raise LeakageError(f"test image {img.source_path} appears in the training lineage")
    pixels, labels = images_to_arrays(test_images)
    preds = predict(kind, params, pixels)
    tp = int(((preds == 1) & (labels == 1)).sum())
    fn = int(((preds == 0) & (labels == 1)).sum())
    fp = int(((preds == 1) & (labels == 0)).sum())
    tn = int(((preds == 0) & (labels == 0)).sum())
    return ConfusionMatrix(tp=tp, fn=fn, fp=fp, tn=tn)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_model(path: Path, params: ModelParams) -> None:
    save_checkpoint(path, {name: p.data for name, p in params.named_parameters()}, params.fingerprint())


def _dtype_from(fp: dict):
    return np.float32 if fp["dtype"] == "float32" else np.float64


def load_model(path: Union[Path, str]) -> tuple[str, ModelParams]:
    """Rebuild a model from its checkpoint, validating the stored fingerprint."""
    arrays, fp = load_checkpoint(path)
    arch = fp.get("arch")
    if arch == "capsnet-v1":
        params = CapsNetParams.init(
            tuple(fp["input_hw"]),
            np.random.default_rng(0),
            dtype=_dtype_from(fp),
            conv1_filters=fp["conv1"][0],
            conv1_kernel=fp["conv1"][2],
            conv1_stride=fp["conv1"][4],
            conv2_filters=fp["conv2"][0],
            conv2_kernel=fp["conv2"][2],
            conv2_stride=fp["conv2"][4],
            capsule_dim=fp["capsule_dim"],
            secondary_dim=fp["secondary_dim"],
            decoder_hidden=tuple(fp["decoder_hidden"]),
            routing_iterations=fp["routing_iterations"],
        )
        kind = "capsnet"
    elif arch == "cnn-v1":
        params = CnnParams.init(
            tuple(fp["input_hw"]),
            np.random.default_rng(0),
            dtype=_dtype_from(fp),
            filters=tuple(fp["filters"]),
            fc_hidden=fp["fc_hidden"],
            dropout_keep=fp["dropout_keep"],
            l2_beta=fp["l2_beta"],
        )
        kind = "cnn"
    elif arch == "mlp-v1":
        params = MlpParams.init(tuple(fp["input_hw"]), np.random.default_rng(0), dtype=_dtype_from(fp), hidden=fp["hidden"])
        kind = "mlp"
    else:
        raise CheckpointError(f"unknown architecture {arch!r} in {path}")
    if params.fingerprint() != fp:
        raise CheckpointError(f"rebuilt fingerprint disagrees with stored one for {path}")
    for name, p in params.named_parameters():
        if name not in arrays:
            raise CheckpointError(f"checkpoint {path} is missing tensor {name!r}")
        if arrays[name].shape != p.data.shape:
            raise CheckpointError(f"tensor {name!r} has shape {arrays[name].shape}, expected {p.data.shape}")
        p.data = arrays[name].astype(p.data.dtype, copy=False)
    return kind, params
