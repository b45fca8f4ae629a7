"""Small reverse-mode numeric core.

Only the operations the distillers need are implemented: affine maps, layer
norm, row softmax, GELU, dropout, multi-head self-attention, a post-norm
transformer encoder layer and mean pooling. Arrays may carry leading batch
axes; every op works on the last one or two axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
from scipy.special import erf


class DimensionError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class Tensor:
    """An array plus the closure that pushes its gradient to its parents."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this tensor; a scalar gets seed gradient 1."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got {self.data.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in node._backward(g):
                if not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise / structural ops
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: ((a, _unbroadcast(g, a.shape)), (b, -_unbroadcast(g, b.shape))),
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: ((a, g * c),))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: ((a, _unbroadcast(g * b.data, a.shape)), (b, _unbroadcast(g * a.data, b.shape))),
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (a, _unbroadcast(ga, a.shape)), (b, _unbroadcast(gb, b.shape))

    return _make(a.data @ b.data, (a, b), back)


def take(a, index) -> Tensor:
    """``a[index]`` for a basic (slice/int) index."""
    a = as_tensor(a)

    def back(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return ((a, full),)

    return _make(a.data[index], (a,), back)


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.asarray(a.data.sum()), (a,), lambda g: ((a, np.broadcast_to(g, a.shape).copy()),))


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    return _make(np.asarray(a.data.mean()), (a,), lambda g: ((a, np.full(a.shape, g / n, dtype=a.data.dtype)),))


def squared_norm(a) -> Tensor:
    """Sum of squares over the last axis."""
    a = as_tensor(a)
    return _make((a.data**2).sum(axis=-1), (a,), lambda g: ((a, 2.0 * a.data * g[..., None]),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: ((a, g.reshape(old)),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: ((a, np.transpose(g, inv)),))


def gelu(x) -> Tensor:
    """Exact (erf) GELU."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.data**2) / math.sqrt(2.0 * math.pi)
    return _make(x.data * cdf, (x,), lambda g: ((x, g * (cdf + x.data * pdf)),))


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when not training or rate is 0."""
    x = as_tensor(x)
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ConfigurationError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: ((x, g * keep),))


# --------------------------------------------------------------------------
# layer-level ops
# --------------------------------------------------------------------------


def linear(x, W, b) -> Tensor:
    """y = xW + b, with b broadcast over rows."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.data.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise DimensionError(f"linear: input shape {x.shape} incompatible with weight shape {W.shape}")
    if b.shape != (W.shape[1],):
        raise DimensionError(f"linear: bias shape {b.shape} incompatible with weight shape {W.shape}")

    def back(g):
        xs = x.data.reshape(-1, x.shape[-1])
        gs = g.reshape(-1, g.shape[-1])
        return (
            (x, g @ W.data.T),
            (W, xs.T @ gs),
            (b, gs.sum(axis=0)),
        )

    return _make(x.data @ W.data + b.data, (x, W, b), back)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Per-row standardisation over the last axis followed by an affine map."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if eps <= 0:
        raise ConfigurationError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        return (
            (x, gx),
            (gamma, (flat_g * xhat.reshape(-1, d)).sum(axis=0)),
            (beta, flat_g.sum(axis=0)),
        )

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), back)


def softmax_rows(x) -> Tensor:
    """Softmax over the last axis, with max subtraction."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return ((x, p * (g - (g * p).sum(axis=-1, keepdims=True))),)

    return _make(p, (x,), back)


def mean_pool(rows, axis: int = -2) -> Tensor:
    """Column means over the row axis (gradient 1/n to every row)."""
    rows = as_tensor(rows)
    if rows.data.ndim < 2:
        raise DimensionError(f"mean_pool expects a matrix, got shape {rows.shape}")
    n = rows.shape[axis]
    if n == 0:
        raise ValueError("mean_pool of an empty row set")

    def back(g):
        return ((rows, np.repeat(np.expand_dims(g, axis) / n, n, axis=axis)),)

    return _make(rows.data.mean(axis=axis), (rows,), back)


def multi_head_self_attention(x, params: dict, num_heads: int, dropout_rate: float = 0.0,
                              training: bool = False, rng=None) -> Tensor:
    """Scaled dot-product self-attention over the rows of ``x``.

    ``params`` holds ``wq, bq, wk, bk, wv, bv, wo, bo``. Residual and norm
    are the caller's job. Dropout is applied to the projected output only.
    """
    x = as_tensor(x)
    L, d = x.shape[-2], x.shape[-1]
    if d % num_heads:
        raise ConfigurationError(f"model width {d} not divisible by {num_heads} heads")
    hd = d // num_heads
    lead = x.shape[:-2]

    def heads(t):
        t = reshape(t, lead + (L, num_heads, hd))
        nd = t.data.ndim
        axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        return transpose(t, axes)  # (..., heads, L, hd)

    q = heads(linear(x, params["wq"], params["bq"]))
    k = heads(linear(x, params["wk"], params["bk"]))
    v = heads(linear(x, params["wv"], params["bv"]))
    nd = q.data.ndim
    kt = transpose(k, tuple(range(nd - 2)) + (nd - 1, nd - 2))
    scores = scale(matmul(q, kt), 1.0 / math.sqrt(hd))
    attn = softmax_rows(scores)
    ctx = matmul(attn, v)  # (..., heads, L, hd)
    ctx = transpose(ctx, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
    ctx = reshape(ctx, lead + (L, d))
    out = linear(ctx, params["wo"], params["bo"])
    return dropout(out, dropout_rate, training, rng)


def transformer_encoder_layer(x, params: dict, config: "EncoderConfig", training: bool = False,
                              rng=None) -> Tensor:
    """Post-norm encoder layer: LN(x + MHSA(x)) then LN(y + FFN(y))."""
    x = as_tensor(x)
    if x.data.ndim < 2 or x.shape[-2] < 1:
        raise DimensionError(f"encoder layer expects at least one row, got shape {x.shape}")
    attn = multi_head_self_attention(x, params, config.num_heads, config.dropout, training, rng)
    y1 = layer_norm(add(x, attn), params["ln1_g"], params["ln1_b"], config.eps)
    h = gelu(linear(y1, params["w1"], params["b1"]))
    ff = dropout(linear(h, params["w2"], params["b2"]), config.dropout, training, rng)
    return layer_norm(add(y1, ff), params["ln2_g"], params["ln2_b"], config.eps)


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EncoderConfig:
    dim: int
    num_heads: int = 8
    ffn_mult: int = 4
    dropout: float = 0.1
    eps: float = 1e-5

    def __post_init__(self):
        if self.dim % self.num_heads:
            raise ConfigurationError(f"dim {self.dim} not divisible by num_heads {self.num_heads}")


class ParamStore:
    """Named parameter tensors, each with its own gradient slot."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def group(self, prefix: str) -> dict[str, Tensor]:
        """Parameters under ``prefix.``, keyed by their short names."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self._params.items() if k.startswith(p)}

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = np.zeros_like(t.data)

    def astype(self, dtype) -> None:
        for t in self._params.values():
            t.data = t.data.astype(dtype)
            t.grad = None

    def num_values(self) -> int:
        return sum(t.data.size for t in self._params.values())


def init_encoder_params(store: ParamStore, prefix: str, cfg: EncoderConfig,
                        rng: np.random.Generator, dtype=np.float32) -> None:
    """Uniform(±1/sqrt(fan_in)) projections, unit/zero layer-norm affine."""
    d, m = cfg.dim, cfg.ffn_mult * cfg.dim

    def proj(fan_in, fan_out):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)

    for nm in ("q", "k", "v", "o"):
        store.add(f"{prefix}.w{nm}", proj(d, d))
        store.add(f"{prefix}.b{nm}", np.zeros(d, dtype))
    store.add(f"{prefix}.ln1_g", np.ones(d, dtype))
    store.add(f"{prefix}.ln1_b", np.zeros(d, dtype))
    store.add(f"{prefix}.w1", proj(d, m))
    store.add(f"{prefix}.b1", np.zeros(m, dtype))
    store.add(f"{prefix}.w2", proj(m, d))
    store.add(f"{prefix}.b2", np.zeros(d, dtype))
    store.add(f"{prefix}.ln2_g", np.ones(d, dtype))
    store.add(f"{prefix}.ln2_b", np.zeros(d, dtype))


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    tol: float
    max_error: float = 0.0
    worst: str | None = None
    checked: int = 0
    errors: dict[str, float] = field(default_factory=dict)
    failure: str | None = None

    @property
    def passed(self) -> bool:
        return self.failure is None and self.max_error < self.tol


def check_gradients(params: ParamStore, loss_fn: Callable[[], Tensor], step: float = 1e-4,
                    tol: float = 1e-4, max_coords: int | None = None,
                    rng: np.random.Generator | None = None,
                    analytic: dict[str, np.ndarray] | None = None) -> GradCheckReport:
    """Compare backprop gradients with central differences.

    ``loss_fn`` must rebuild the graph from the current parameter values and
    return a scalar tensor. Parameters are promoted to float64 for the check.
    Error metric per coordinate: |analytic - numeric| / max(1, |analytic|).
    ``analytic`` overrides the backprop gradients (used for negative controls).
    When ``max_coords`` is set, that many coordinates per parameter are
    sampled; otherwise every coordinate is checked.
    """
    params.astype(np.float64)
    report = GradCheckReport(tol=tol)
    params.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        report.failure = "non-finite loss at the unperturbed point"
        return report
    loss.backward()
    grads = analytic if analytic is not None else {n: t.grad.copy() for n, t in params.items()}
    rng = rng or np.random.default_rng(0)
    for name, t in params.items():
        flat = t.data.reshape(-1)
        g = grads[name].reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            lp = float(loss_fn().data)
            flat[i] = orig - step
            lm = float(loss_fn().data)
            flat[i] = orig
            if not (math.isfinite(lp) and math.isfinite(lm)):
                report.failure = f"non-finite loss while perturbing {name}[{i}]"
                return report
            num = (lp - lm) / (2.0 * step)
            err = abs(g[i] - num) / max(1.0, abs(g[i]))
            worst = max(worst, err)
            report.checked += 1
        report.errors[name] = worst
        if worst >= report.max_error:
            report.max_error = worst
            report.worst = name
    return report
