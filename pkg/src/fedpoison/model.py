"""Lightweight VT-CNN2 classifier built on :mod:`fedpoison.grad_core`.

Frames (``l x 2``) enter as a single-channel ``2 x l`` image: row 0 is I,
row 1 is Q.  The second convolution's height-2 kernel is what fuses them.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fedpoison import binio
from fedpoison import grad_core as gc
from fedpoison.datakit import LabeledDataset
from fedpoison.errors import ConfigurationError, FormatError, InputError, NumericError
from fedpoison.grad_core import GradResult, ParamSet, Trace

CHECKPOINT_MAGIC = b"FPCKPT1"


@dataclass(frozen=True)
class ModelConfig:
    length: int = 128
    num_classes: int = 10
    conv1_maps: int = 16
    conv1_kernel: tuple[int, int] = (1, 3)
    conv2_maps: int = 80
    conv2_kernel: tuple[int, int] = (2, 3)
    dense_units: int = 256
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.length < 8:
            raise ConfigurationError(f"window length must be at least 8, got {self.length}")
        if self.num_classes < 2:
            raise ConfigurationError(f"need at least 2 classes, got {self.num_classes}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        """Activation shapes (per sample) after each layer; validates the geometry."""
        h1, w1 = 2 - self.conv1_kernel[0] + 1, self.length - self.conv1_kernel[1] + 1
        h2, w2 = h1 - self.conv2_kernel[0] + 1, w1 - self.conv2_kernel[1] + 1
        if min(h1, w1, h2, w2) < 1:
            raise ConfigurationError(
                f"window length {self.length} too small for kernels {self.conv1_kernel} and {self.conv2_kernel}"
            )
        return {
            "conv1": (self.conv1_maps, h1, w1),
            "conv2": (self.conv2_maps, h2, w2),
            "flatten": (self.conv2_maps * h2 * w2,),
            "dense1": (self.dense_units,),
            "out": (self.num_classes,),
        }


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 128
    local_epochs: int = 1
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1 or self.local_epochs < 1:
            raise ConfigurationError(f"invalid training config {self}")


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    per_class_accuracy: tuple[float | None, ...]
    mean_loss: float


def build(config: ModelConfig) -> ParamSet:
    shapes = config.layer_shapes()
    rng = np.random.default_rng(config.seed)
    dt = np.dtype(config.dtype)
    c1, (k1h, k1w) = config.conv1_maps, config.conv1_kernel
    c2, (k2h, k2w) = config.conv2_maps, config.conv2_kernel
    flat = shapes["flatten"][0]
    d, C = config.dense_units, config.num_classes
    init = gc.glorot_uniform
    return ParamSet(
        [
            ("conv1.kernel", init((c1, 1, k1h, k1w), k1h * k1w, c1 * k1h * k1w, rng, dt)),
            ("conv1.bias", np.zeros(c1, dt)),
            ("conv2.kernel", init((c2, c1, k2h, k2w), c1 * k2h * k2w, c2 * k2h * k2w, rng, dt)),
            ("conv2.bias", np.zeros(c2, dt)),
            ("dense1.weight", init((d, flat), flat, d, rng, dt)),
            ("dense1.bias", np.zeros(d, dt)),
            ("out.weight", init((C, d), d, C, rng, dt)),
            ("out.bias", np.zeros(C, dt)),
        ]
    )


def _to_images(frames: np.ndarray, dtype) -> tuple[np.ndarray, bool]:
    x = np.asarray(frames)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[-1] != 2:
        raise InputError(f"frames must be l x 2 or N x l x 2, got shape {np.shape(frames)}")
    # N x l x 2 -> N x 1 x 2 x l
    return np.ascontiguousarray(x.transpose(0, 2, 1)[:, None].astype(dtype, copy=False)), single


def forward(params: ParamSet, frames: np.ndarray, record: bool = False) -> tuple[np.ndarray, Trace | None]:
    """Class probabilities for one frame or a batch; optionally with a trace for backward()."""
    x, single = _to_images(frames, params.dtype)
    expected = params["conv1.kernel"].shape[-1] - 1 + params["conv2.kernel"].shape[-1] - 1
    width = params["dense1.weight"].shape[1] // params["conv2.kernel"].shape[0]
    if x.shape[-1] != width + expected:
        raise InputError(f"frame length {x.shape[-1]} does not match the model (expects {width + expected})")
    trace = Trace(x, single) if record else None
    h = gc.traced_conv2d(trace, "conv1", x, params, "conv1.kernel", "conv1.bias")
    h = gc.traced_relu(trace, "relu1", h)
    h = gc.traced_conv2d(trace, "conv2", h, params, "conv2.kernel", "conv2.bias")
    h = gc.traced_relu(trace, "relu2", h)
    h = gc.traced_reshape(trace, "flatten", h, (h.shape[0], -1))
    h = gc.traced_dense(trace, "dense1", h, params, "dense1.weight", "dense1.bias")
    h = gc.traced_relu(trace, "relu3", h)
    logits = gc.traced_dense(trace, "out", h, params, "out.weight", "out.bias")
    if not np.isfinite(logits).all():
        raise NumericError("non-finite logits", "out")
    probs = gc.softmax(logits)
    if trace is not None:
        trace.probs = probs
    return (probs[0] if single else probs), trace


def gradients(
    params: ParamSet, frames: np.ndarray, labels, reduction: str = "mean", need_input_grad: bool = True
) -> GradResult:
    """Loss gradients w.r.t. parameters and input frames.

    ``input_grad`` comes back in the frame layout (``l x 2`` per sample).
    """
    _, trace = forward(params, frames, record=True)
    res = gc.backward(trace, labels, reduction=reduction, need_input_grad=need_input_grad)
    if not need_input_grad:
        return res
    g = res.input_grad  # (N x) 1 x 2 x l
    g = g[0].T if trace.single else g[:, 0].transpose(0, 2, 1)
    return GradResult(res.param_grads, np.ascontiguousarray(g), res.loss)


def predict(params: ParamSet, frame: np.ndarray) -> tuple[np.ndarray, int]:
    probs, _ = forward(params, frame)
    # np.argmax returns the first maximum: ties go to the lowest class id
    return probs, int(np.argmax(probs))


def predict_batch(params: ParamSet, frames: np.ndarray, chunk: int = 512) -> np.ndarray:
    out = [forward(params, frames[i : i + chunk])[0] for i in range(0, len(frames), chunk)]
    if not out:
        return np.zeros((0, params["out.bias"].shape[0]), dtype=params.dtype)
    return np.concatenate(out)


def local_train_round(params_in: ParamSet, shard: LabeledDataset, tc: TrainConfig) -> ParamSet:
    """Shuffled mini-batch SGD on mean cross-entropy, starting from ``params_in``."""
    if len(shard) == 0:
        raise InputError("cannot train on an empty shard")
    rng = np.random.default_rng(tc.shuffle_seed)
    params = params_in
    batch_index = 0
    for _ in range(tc.local_epochs):
        order = rng.permutation(len(shard))
        for start in range(0, len(order), tc.batch_size):
            idx = order[start : start + tc.batch_size]
            try:
                res = gradients(params, shard.frames[idx], shard.labels[idx], need_input_grad=False)
            except NumericError as exc:
                raise NumericError(str(exc), f"batch {batch_index}") from exc
            if not np.isfinite(res.loss):
                raise NumericError("non-finite loss", f"batch {batch_index}")
            params = gc.sgd_step(params, res.param_grads, tc.lr)
            batch_index += 1
    return params


def evaluate(params: ParamSet, dataset: LabeledDataset, chunk: int = 512) -> EvalResult:
    if len(dataset) == 0:
        raise InputError("cannot evaluate on an empty dataset")
    probs = predict_batch(params, dataset.frames, chunk)
    pred = np.argmax(probs, axis=1)
    correct = pred == dataset.labels
    p_true = probs[np.arange(len(dataset)), dataset.labels].astype(np.float64)
    mean_loss = float(np.mean(-np.log(np.maximum(p_true, gc.LOG_EPS))))
    per_class = tuple(
        float(correct[dataset.labels == c].mean()) if np.any(dataset.labels == c) else None
        for c in range(dataset.num_classes)
    )
    return EvalResult(float(correct.mean()), per_class, mean_loss)


# --------------------------------------------------------------- checkpoints


def params_to_bytes(params: ParamSet) -> bytes:
    w = binio.Writer()
    w.pack("I", len(params))
    for name, arr in params.items():
        w.string(name)
        w.pack("I", arr.ndim)
        w.pack(f"{arr.ndim}I", *arr.shape)
    for arr in params.values():
        w.raw(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return binio.frame(CHECKPOINT_MAGIC, w.payload())


def params_from_bytes(data: bytes) -> ParamSet:
    r = binio.unframe(data, CHECKPOINT_MAGIC)
    (n,) = r.unpack("I", "tensor count")
    header = []
    for i in range(n):
        name = r.string(f"tensor {i} name")
        (ndim,) = r.unpack("I", f"tensor {name!r} rank")
        shape = r.unpack(f"{ndim}I", f"tensor {name!r} shape")
        header.append((name, shape))
    tensors = []
    for name, shape in header:
        count = int(np.prod(shape)) if shape else 1
        tensors.append((name, r.array("<f4", count, f"tensor {name!r} data").reshape(shape).astype(np.float32)))
    if r.offset != len(r.data):
        raise FormatError(f"{len(r.data) - r.offset} unexpected trailing bytes", r.offset)
    return ParamSet(tensors)


def save_params(params: ParamSet, path: str | os.PathLike) -> None:
    binio.atomic_write_bytes(path, params_to_bytes(params))


def load_params(path: str | os.PathLike) -> ParamSet:
    return params_from_bytes(Path(path).read_bytes())
