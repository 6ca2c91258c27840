"""Minimal differentiable-computation engine.

Just enough machinery to train the shape classifiers: tensors with
reverse-mode gradients, dense and Chebyshev graph-convolution layers,
softmax cross-entropy, Adam, the linear-ascent exponential-decay learning
rate schedule, and a central finite-difference gradient checker.

Everything runs in float64; training loops are single-threaded and seeded,
so repeated runs are bitwise identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from .errors import ConfigError, DataError, NumericError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Linear warm-up spans epochs 1..15; decay runs from epoch 16 to k_max.
WARMUP_EPOCHS = 15


class Tensor:
    """Array value plus the plumbing to backpropagate into it."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backprop",
                 "_needs_grad")

    def __init__(self, values, requires_grad: bool = False, _parents=(),
                 _backprop=None):
        self.values = np.asarray(values, np.float64)
        if not np.all(np.isfinite(self.values)):
            raise NumericError("non-finite tensor values")
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backprop = _backprop
        self._needs_grad = requires_grad or any(p._needs_grad for p in _parents)

    @property
    def shape(self):
        return self.values.shape

    def _accumulate(self, grad):
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += grad

    def backward(self):
        """Populate gradients of every contributing tensor; loss must be scalar."""
        if self.values.size != 1:
            raise DataError("backward requires a scalar loss")
        order = []
        seen = set()

        def visit(t):
            if id(t) in seen or not t._needs_grad:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            order.append(t)

        visit(self)
        self._accumulate(np.ones_like(self.values))
        for t in reversed(order):
            if t._backprop is not None:
                t._backprop(t.grad)


def parameter(values, rng: np.random.Generator | None = None,
              scale: float | None = None) -> Tensor:
    """Trainable tensor; pass an rng plus shape-tuple values to initialize."""
    if rng is not None:
        shape = tuple(values)
        if scale is None:
            scale = 1.0 / np.sqrt(max(shape[0], 1))
        values = rng.uniform(-scale, scale, size=shape)
    return Tensor(values, requires_grad=True)


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Differentiable ops
# ---------------------------------------------------------------------------

def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine layer: x @ W + b, for x of shape (n_in,) or (batch, n_in)."""
    x, weights, bias = _as_tensor(x), _as_tensor(weights), _as_tensor(bias)
    if weights.values.ndim != 2 or x.values.shape[-1] != weights.values.shape[0] \
            or bias.values.shape != (weights.values.shape[1],):
        raise DataError(
            f"dense shape mismatch: x {x.values.shape}, W {weights.values.shape}, "
            f"b {bias.values.shape}")
    out_values = x.values @ weights.values + bias.values

    def backprop(grad):
        x._accumulate(grad @ weights.values.T)
        if x.values.ndim == 1:
            weights._accumulate(np.outer(x.values, grad))
            bias._accumulate(grad)
        else:
            weights._accumulate(x.values.T @ grad)
            bias._accumulate(grad.sum(axis=0))

    return Tensor(out_values, _parents=(x, weights, bias), _backprop=backprop)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.values > 0

    def backprop(grad):
        x._accumulate(grad * mask)

    return Tensor(np.where(mask, x.values, 0.0), _parents=(x,),
                  _backprop=backprop)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors (latent fusion)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.shape != b.values.shape:
        raise DataError("add shape mismatch")

    def backprop(grad):
        a._accumulate(grad)
        b._accumulate(grad)

    return Tensor(a.values + b.values, _parents=(a, b), _backprop=backprop)


def mean_pool(x: Tensor) -> Tensor:
    """Global mean over nodes: (n_nodes, features) -> (features,)."""
    x = _as_tensor(x)
    if x.values.ndim != 2:
        raise DataError("mean_pool expects a node-feature matrix")
    n = x.values.shape[0]

    def backprop(grad):
        x._accumulate(np.broadcast_to(grad / n, x.values.shape))

    return Tensor(x.values.mean(axis=0), _parents=(x,), _backprop=backprop)


def graph_operator(n_nodes: int, edges: np.ndarray) -> sparse.csr_matrix:
    """Scaled graph operator -D^{-1/2} A D^{-1/2} used by cheb_conv.

    This is the symmetric normalized Laplacian rescaled by its standard
    spectral bound (factor 2/lambda_max with lambda_max fixed at 2) minus
    the identity. Rows of isolated nodes are zero.
    """
    edges = np.asarray(edges)
    n = int(n_nodes)
    if len(edges) == 0:
        return sparse.csr_matrix((n, n))
    if edges.min() < 0 or edges.max() >= n:
        raise DataError("edge index out of range")
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    adj = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    degree = np.asarray(adj.sum(axis=1)).ravel()
    inv_sqrt = np.zeros(n)
    nz = degree > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(degree[nz])
    d = sparse.diags(inv_sqrt)
    return (-(d @ adj @ d)).tocsr()


def cheb_conv(operator, x: Tensor, w0: Tensor, w1: Tensor) -> Tensor:
    """Width-2 Chebyshev graph convolution: Y = X W0 + (L X) W1.

    `operator` is the matrix from graph_operator (or a KidneyGraph, from
    which it is built). No bias term.
    """
    if hasattr(operator, "node_features"):
        operator = graph_operator(operator.n_nodes, operator.edges)
    x, w0, w1 = _as_tensor(x), _as_tensor(w0), _as_tensor(w1)
    if x.values.ndim != 2 or x.values.shape[0] != operator.shape[0]:
        raise DataError("cheb_conv node count mismatch")
    if w0.values.shape != w1.values.shape \
            or x.values.shape[1] != w0.values.shape[0]:
        raise DataError("cheb_conv weight shape mismatch")
    lx = operator @ x.values
    out = x.values @ w0.values + lx @ w1.values

    def backprop(grad):
        x._accumulate(grad @ w0.values.T + operator.T @ (grad @ w1.values.T))
        w0._accumulate(x.values.T @ grad)
        w1._accumulate(lx.T @ grad)

    return Tensor(out, _parents=(x, w0, w1), _backprop=backprop)


def softmax_xent(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of softmax(logits) against integer labels.

    Accepts (n_classes,) with a scalar label or (batch, n_classes) with a
    label vector; gradient is softmax minus one-hot (averaged over the batch).
    """
    logits = _as_tensor(logits)
    squeeze = logits.values.ndim == 1
    values = logits.values[None, :] if squeeze else logits.values
    label_arr = np.atleast_1d(np.asarray(labels, np.intp))
    batch, n_classes = values.shape
    if n_classes < 2:
        raise DataError("softmax_xent needs at least 2 classes")
    if label_arr.shape != (batch,):
        raise DataError("label count does not match batch")
    if label_arr.min() < 0 or label_arr.max() >= n_classes:
        raise DataError(f"label out of range for {n_classes} classes")
    shifted = values - values.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - log_z[:, None]
    loss = -log_probs[np.arange(batch), label_arr].mean()

    def backprop(grad):
        g = np.exp(log_probs)
        g[np.arange(batch), label_arr] -= 1.0
        g *= grad / batch
        logits._accumulate(g[0] if squeeze else g)

    return Tensor(loss, _parents=(logits,), _backprop=backprop)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Plain softmax for inference-time probabilities."""
    logits = np.asarray(logits, np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Per-parameter moment accumulators for Adam."""

    first: list = field(default_factory=list)
    second: list = field(default_factory=list)
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def for_params(cls, params) -> "AdamState":
        arrays = [p.values if isinstance(p, Tensor) else np.asarray(p)
                  for p in params]
        return cls(first=[np.zeros_like(a) for a in arrays],
                   second=[np.zeros_like(a) for a in arrays])


def adam_step(params, grads, state: AdamState, lr: float):
    """Bias-corrected Adam update, in place on the parameter arrays."""
    arrays = [p.values if isinstance(p, Tensor) else p for p in params]
    if len(arrays) != len(grads) or len(arrays) != len(state.first):
        raise DataError("parameter, gradient and state counts differ")
    state.step += 1
    t = state.step
    correct1 = 1.0 - state.beta1**t
    correct2 = 1.0 - state.beta2**t
    for i, (p, g) in enumerate(zip(arrays, grads)):
        g = np.asarray(g, np.float64)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient at parameter {i} "
                               f"(step {t})")
        m = state.first[i]
        v = state.second[i]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / correct1) / (np.sqrt(v / correct2) + state.eps)
    return params


# ---------------------------------------------------------------------------
# Learning rate schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Schedule:
    """Linear-ascent exponential-decay learning rate schedule."""

    lr_min: float
    lr_max: float
    a: float
    k_max: int

    def __post_init__(self):
        if not (self.lr_max >= self.lr_min > 0):
            raise ConfigError("schedule requires lr_max >= lr_min > 0")
        if self.a <= 0:
            raise ConfigError("schedule decay constant must be positive")
        if self.k_max <= 16:
            raise ConfigError("schedule requires k_max > 16")


PRETRAIN_SCHEDULE = Schedule(lr_min=1e-4, lr_max=4e-3, a=4.0, k_max=500)
FINETUNE_SCHEDULE = Schedule(lr_min=1e-4, lr_max=5e-4, a=3.0, k_max=100)


def lr_at(schedule: Schedule, k: int) -> float:
    """Learning rate at epoch k (1-based).

    Linear rise over the first 15 epochs, exponential decay afterwards; the
    decay's denominator vanishes at k_max, where the rate is defined as its
    analytic limit, 0.
    """
    if k != int(k) or not (1 <= k <= schedule.k_max):
        raise ConfigError(f"epoch {k} outside [1, {schedule.k_max}]")
    k = int(k)
    if k <= WARMUP_EPOCHS:
        return schedule.lr_max * ((k - 1) / WARMUP_EPOCHS) + schedule.lr_min
    if k == schedule.k_max:
        return 0.0
    return schedule.lr_max * float(
        np.exp(-schedule.a * (k - 16) / (schedule.k_max - k)))


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

def finite_difference_check(loss_fn, params, h: float = 1e-4,
                            rel_tol: float = 1e-4) -> float:
    """Compare analytic gradients with central finite differences.

    `loss_fn(params) -> scalar Tensor`; every element of every parameter is
    perturbed by +-h. Returns the worst relative error and raises
    NumericError if it exceeds rel_tol.
    """
    loss = loss_fn(params)
    zero_grads(params)
    loss.backward()
    analytic = [np.array(p.grad if p.grad is not None else
                         np.zeros_like(p.values)) for p in params]
    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.values.ravel()
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            hi = loss_fn(params).values.item()
            flat[i] = saved - h
            lo = loss_fn(params).values.item()
            flat[i] = saved
            numeric = (hi - lo) / (2.0 * h)
            a = grad.ravel()[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    if worst > rel_tol:
        raise NumericError(f"gradient check failed: relative error {worst:.3e}")
    return worst


# ---------------------------------------------------------------------------
# Weight serialization: JSON manifest + little-endian f64 payload
# ---------------------------------------------------------------------------

def save_weights(named_params: dict, path: str | Path, meta: dict | None = None):
    """Write named arrays as <stem>.json (manifest) + <stem>.raw (f64 payload)."""
    base = Path(path)
    if base.suffix in (".json", ".raw"):
        base = base.with_suffix("")
    entries = []
    chunks = []
    offset = 0
    for name, value in named_params.items():
        arr = np.ascontiguousarray(
            value.values if isinstance(value, Tensor) else value, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape),
                        "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    manifest = {"entries": entries, "total": offset, "dtype": "f64",
                "meta": meta or {}}
    base.with_suffix(".json").write_text(json.dumps(manifest, indent=1) + "\n")
    base.with_suffix(".raw").write_bytes(b"".join(chunks))


def load_weights(path: str | Path):
    """Read arrays written by save_weights; returns (dict of arrays, meta)."""
    base = Path(path)
    if base.suffix in (".json", ".raw"):
        base = base.with_suffix("")
    try:
        manifest = json.loads(base.with_suffix(".json").read_text())
        entries = manifest["entries"]
        total = manifest["total"]
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"unreadable weight manifest {base}: {exc}") from None
    payload = np.frombuffer(base.with_suffix(".raw").read_bytes(), dtype="<f8")
    if payload.size != total:
        raise DataError(f"weight payload has {payload.size} values, "
                        f"manifest says {total}")
    out = {}
    for entry in entries:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        out[entry["name"]] = payload[start:start + size].reshape(shape).copy()
    return out, manifest.get("meta", {})
