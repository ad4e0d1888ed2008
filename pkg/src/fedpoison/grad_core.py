"""Small reverse-mode autodiff over numpy arrays.

Only the layers the modulation classifier needs are provided: valid 2-D
convolution, dense, ReLU and a softmax/cross-entropy head.  Every layer
accepts either a single sample or a leading batch axis.  A forward pass
records its backward closures on a :class:`Trace`; :func:`backward` walks
them in reverse and returns gradients for both the parameters and the
network input.
"""

from __future__ import annotations

import hashlib
from collections.abc import Callable, Iterable, Iterator, Mapping
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from fedpoison.errors import ConfigurationError, InputError, NumericError

LOG_EPS = 1e-12


class ParamSet(Mapping):
    """Ordered, read-only mapping of parameter name -> array.

    Iteration order is the insertion order and is what aggregation and
    checkpointing rely on.  Arrays are copied on construction and marked
    non-writeable, so updates always build a new ParamSet.
    """

    __slots__ = ("_tensors",)

    def __init__(self, tensors: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]):
        items = tensors.items() if isinstance(tensors, Mapping) else tensors
        store = {}
        for name, value in items:
            arr = np.array(value, copy=True)
            arr.setflags(write=False)
            store[name] = arr
        self._tensors = store

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __repr__(self) -> str:
        body = ", ".join(f"{k}: {v.shape}" for k, v in self._tensors.items())
        return f"ParamSet({body})"

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._tensors.items()}

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self._tensors.values())).dtype

    def size(self) -> int:
        return sum(v.size for v in self._tensors.values())

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> ParamSet:
        return ParamSet((k, fn(v)) for k, v in self._tensors.items())

    def astype(self, dtype) -> ParamSet:
        return self.map(lambda a: a.astype(dtype))

    def check_compatible(self, other: Mapping[str, np.ndarray], what: str = "parameters") -> None:
        if list(self) != list(other):
            raise ConfigurationError(f"{what}: names differ: {list(self)} vs {list(other)}")
        for name in self:
            if self[name].shape != np.shape(other[name]):
                raise ConfigurationError(
                    f"{what}: shape mismatch for {name!r}: {self[name].shape} vs {np.shape(other[name])}"
                )

    def flatten(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self._tensors.values()])

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, arr in self._tensors.items():
            h.update(name.encode())
            h.update(str(arr.shape).encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def allclose(self, other: ParamSet, **kw) -> bool:
        return list(self) == list(other) and all(
            self[k].shape == other[k].shape and np.allclose(self[k], other[k], **kw) for k in self
        )

    def equal(self, other: ParamSet) -> bool:
        return list(self) == list(other) and all(np.array_equal(self[k], other[k]) for k in self)


@dataclass(frozen=True)
class GradResult:
    param_grads: ParamSet
    input_grad: np.ndarray
    loss: float


def _batched(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    if x.ndim == ndim:
        return x[None], True
    if x.ndim == ndim + 1:
        return x, False
    raise ConfigurationError(f"expected {ndim}-d input (or batched {ndim + 1}-d), got shape {x.shape}")


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError("non-finite values", where)


# --------------------------------------------------------------------- layers


def _conv_check(xb: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None) -> None:
    if kernel.ndim != 4:
        raise ConfigurationError(f"conv kernel must be 4-d, got shape {kernel.shape}")
    _, cin, h, w = xb.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ConfigurationError(f"conv input channels {cin} != kernel input channels {kcin}")
    if kh > h or kw > w:
        raise ConfigurationError(f"conv kernel {kh}x{kw} larger than input {h}x{w}")
    if bias is not None and bias.shape != (cout,):
        raise ConfigurationError(f"conv bias shape {bias.shape} != ({cout},)")


def im2col(xb: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """``N x Cin x H x W`` -> ``(N*H'*W') x (Cin*kh*kw)`` patch matrix."""
    n, cin, h, w = xb.shape
    ho, wo = h - kh + 1, w - kw + 1
    cols = np.empty((n, ho, wo, cin, kh, kw), dtype=xb.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[..., i, j] = xb[:, :, i : i + ho, j : j + wo].transpose(0, 2, 3, 1)
    return cols.reshape(n * ho * wo, cin * kh * kw)


def col2im(dcols: np.ndarray, x_shape: tuple[int, ...], kh: int, kw: int) -> np.ndarray:
    n, cin, h, w = x_shape
    ho, wo = h - kh + 1, w - kw + 1
    d = dcols.reshape(n, ho, wo, cin, kh, kw)
    gx = np.zeros(x_shape, dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i : i + ho, j : j + wo] += d[..., i, j].transpose(0, 3, 1, 2)
    return gx


def _conv_from_cols(cols: np.ndarray, kernel: np.ndarray, bias: np.ndarray, n: int, ho: int, wo: int) -> np.ndarray:
    cout = kernel.shape[0]
    out = cols @ kernel.reshape(cout, -1).T + bias  # N*H'*W' x Cout
    return np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))


def _conv_backward_cols(cols, x_shape, kernel, gb_out, need_input_grad):
    cout, cin, kh, kw = kernel.shape
    g = np.ascontiguousarray(gb_out.transpose(0, 2, 3, 1)).reshape(-1, cout)  # N*H'*W' x Cout
    g_kernel = (g.T @ cols).reshape(kernel.shape)
    g_bias = g.sum(axis=0)
    g_x = col2im(g @ kernel.reshape(cout, -1), x_shape, kh, kw) if need_input_grad else None
    return g_x, g_kernel, g_bias


def conv2d_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Valid (no padding), stride-1 cross-correlation.

    ``x`` is ``Cin x H x W`` or ``N x Cin x H x W``; ``kernel`` is
    ``Cout x Cin x kh x kw``.
    """
    xb, single = _batched(np.asarray(x), 3)
    _conv_check(xb, kernel, bias)
    n, _, h, w = xb.shape
    _, _, kh, kw = kernel.shape
    out = _conv_from_cols(im2col(xb, kh, kw), kernel, bias, n, h - kh + 1, w - kw + 1)
    return out[0] if single else out


def conv2d_backward(
    x: np.ndarray, kernel: np.ndarray, grad_out: np.ndarray, need_input_grad: bool = True
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients ``(d input, d kernel, d bias)`` given ``d output``."""
    xb, single = _batched(np.asarray(x), 3)
    _conv_check(xb, kernel, None)
    gb_out = grad_out[None] if single else grad_out
    cols = im2col(xb, kernel.shape[2], kernel.shape[3])
    g_x, g_k, g_b = _conv_backward_cols(cols, xb.shape, kernel, gb_out, need_input_grad)
    if single and g_x is not None:
        g_x = g_x[0]
    return g_x, g_k, g_b


def dense_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """``weight @ x + bias`` for ``x`` of shape ``n`` or ``N x n``."""
    xb, single = _batched(np.asarray(x), 1)
    if weight.ndim != 2 or weight.shape[1] != xb.shape[1]:
        raise ConfigurationError(f"dense weight {weight.shape} does not accept input of size {xb.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise ConfigurationError(f"dense bias shape {bias.shape} != ({weight.shape[0]},)")
    out = xb @ weight.T + bias
    return out[0] if single else out


def dense_backward(
    x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray, need_input_grad: bool = True
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    xb, single = _batched(np.asarray(x), 1)
    gb_out = grad_out[None] if single else grad_out
    g_w = gb_out.T @ xb
    g_b = gb_out.sum(axis=0)
    g_x = None
    if need_input_grad:
        g_x = gb_out @ weight
        if single:
            g_x = g_x[0]
    return g_x, g_w, g_b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax along the last axis, stabilised by max subtraction."""
    logits = np.asarray(logits)
    if logits.shape[-1] < 2:
        raise ConfigurationError("softmax needs at least two classes")
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def one_hot(labels, num_classes: int, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise InputError(f"labels must lie in [0, {num_classes})")
    out = np.zeros(labels.shape + (num_classes,), dtype=dtype)
    np.put_along_axis(out, labels[..., None].astype(np.intp), 1, axis=-1)
    return out


def _validate_one_hot(label: np.ndarray) -> None:
    ok = np.isin(label, (0, 1)).all() and np.all(label.sum(axis=-1) == 1)
    if not ok:
        raise InputError("label is not one-hot")


def cross_entropy(pred: np.ndarray, label: np.ndarray) -> float:
    """Negative log-likelihood ``-sum(y log p)`` with ``log`` clamped at ``log(1e-12)``.

    A batch (``N x C``) returns the mean over samples.
    """
    pred = np.asarray(pred, dtype=np.float64)
    label = np.asarray(label)
    if pred.shape != label.shape:
        raise InputError(f"prediction shape {pred.shape} != label shape {label.shape}")
    _validate_one_hot(label)
    per_sample = -(label * np.log(np.maximum(pred, LOG_EPS))).sum(axis=-1)
    return float(np.mean(per_sample))


# ---------------------------------------------------------------------- trace

BackwardFn = Callable[[np.ndarray, bool], tuple[np.ndarray | None, dict[str, np.ndarray]]]


class Trace:
    """Tape of one forward pass.

    Layers push ``(name, fn)`` where ``fn(grad_out, need_input_grad)``
    returns ``(grad_in, {param_name: grad})``.  The network's final softmax
    probabilities go in :attr:`probs`.
    """

    def __init__(self, inputs: np.ndarray, single: bool):
        self.inputs = inputs
        self.single = single
        self.steps: list[tuple[str, BackwardFn]] = []
        self.param_names: list[str] = []
        self.probs: np.ndarray | None = None

    def push(self, name: str, fn: BackwardFn, param_names: Iterable[str] = ()) -> None:
        self.steps.append((name, fn))
        self.param_names.extend(param_names)


def traced_conv2d(trace: Trace | None, name: str, x, params: Mapping[str, np.ndarray], kname: str, bname: str):
    """Batched convolution that keeps its patch matrix for the backward pass."""
    kernel, bias = params[kname], params[bname]
    _conv_check(x, kernel, bias)
    n, _, h, w = x.shape
    _, _, kh, kw = kernel.shape
    cols = im2col(x, kh, kw)
    y = _conv_from_cols(cols, kernel, bias, n, h - kh + 1, w - kw + 1)
    if trace is not None:
        x_shape = x.shape

        def fn(g, need_gx):
            gx, gk, gb = _conv_backward_cols(cols, x_shape, kernel, g, need_gx)
            return gx, {kname: gk, bname: gb}

        trace.push(name, fn, (kname, bname))
    return y


def traced_dense(trace: Trace | None, name: str, x, params: Mapping[str, np.ndarray], wname: str, bname: str):
    weight, bias = params[wname], params[bname]
    y = dense_forward(x, weight, bias)
    if trace is not None:

        def fn(g, need_gx):
            gx, gw, gb = dense_backward(x, weight, g, need_gx)
            return gx, {wname: gw, bname: gb}

        trace.push(name, fn, (wname, bname))
    return y


def traced_relu(trace: Trace | None, name: str, x):
    y = relu(x)
    if trace is not None:
        mask = x > 0
        trace.push(name, lambda g, _: (g * mask, {}))
    return y


def traced_reshape(trace: Trace | None, name: str, x, shape):
    y = x.reshape(shape)
    if trace is not None:
        in_shape = x.shape
        trace.push(name, lambda g, _: (g.reshape(in_shape), {}))
    return y


def backward(
    trace: Trace,
    labels,
    reduction: str = "mean",
    need_input_grad: bool = True,
) -> GradResult:
    """Gradients of the clamped cross-entropy w.r.t. parameters and input.

    ``labels`` are integer class ids or one-hot rows.  With
    ``reduction="mean"`` the loss (and every gradient) is averaged over the
    batch; ``"sum"`` keeps per-sample scale, which is what per-frame input
    gradients want.
    """
    if trace.probs is None:
        raise ConfigurationError("backward() called before the forward pass completed")
    if reduction not in ("mean", "sum"):
        raise ConfigurationError(f"unknown reduction {reduction!r}")
    probs = trace.probs
    n, c = probs.shape
    labels = np.asarray(labels)
    if labels.dtype.kind == "f" and labels.size == n * c and labels.shape[-1] == c:
        y = labels.reshape(n, c)
        _validate_one_hot(y)
    else:
        y = one_hot(labels.reshape(n), c, dtype=probs.dtype)
    y = y.astype(probs.dtype, copy=False)

    p_true = (probs * y).sum(axis=1)
    clamped = p_true <= LOG_EPS
    per_sample = -np.log(np.maximum(p_true.astype(np.float64), LOG_EPS))
    scale = 1.0 / n if reduction == "mean" else 1.0
    loss = float(per_sample.mean() if reduction == "mean" else per_sample.sum())

    # d/dlogits of -log softmax_y is p - y; zero where the log is clamped.
    g = (probs - y) * (~clamped)[:, None] * probs.dtype.type(scale)

    grads: dict[str, np.ndarray] = {}
    last = len(trace.steps) - 1
    for i in range(last, -1, -1):
        name, fn = trace.steps[i]
        g, pg = fn(g, need_input_grad or i > 0)
        for pname, arr in pg.items():
            _check_finite(arr, f"{name}/{pname}")
            grads[pname] = arr
        if g is not None:
            _check_finite(g, name)

    ordered = ParamSet((k, grads[k]) for k in _ordered_names(trace))
    if need_input_grad:
        input_grad = g[0] if trace.single else g
    else:
        input_grad = np.zeros(0)
    return GradResult(param_grads=ordered, input_grad=input_grad, loss=loss)


def _ordered_names(trace: Trace) -> list[str]:
    seen = []
    for name in trace.param_names:
        if name not in seen:
            seen.append(name)
    return seen


# ------------------------------------------------------------------ training


def sgd_step(params: ParamSet, grads: Mapping[str, np.ndarray], lr: float) -> ParamSet:
    if lr < 0:
        raise ConfigurationError(f"learning rate must be non-negative, got {lr}")
    params.check_compatible(grads, "sgd_step")
    return ParamSet((k, params[k] - params.dtype.type(lr) * np.asarray(grads[k], dtype=params[k].dtype)) for k in params)


def glorot_uniform(shape, fan_in: int, fan_out: int, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)
