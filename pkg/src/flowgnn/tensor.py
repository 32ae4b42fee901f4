"""Minimal dense numerical substrate: float64 tensors with reverse-mode
gradients over the fixed set of operations the flow-graph model needs,
plus losses, the Adam optimizer, a seeded RNG, and a finite-difference
gradient checker.

Everything is numpy under the hood; gradients are implemented per
operation on a small tape (parent links + backward closures).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

_MASK64 = (1 << 64) - 1


class Tensor:
    """A float64 ndarray plus an accumulated gradient.

    Tensors are immutable through the public ops; building an op records
    parent links and a backward closure so that a later `backward()` call
    on a scalar result fills `.grad` on every tensor that contributed.
    """

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar output."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar, got shape {self.data.shape}")
        # Iterative topological order (graphs can chain many adds).
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


def constant(data) -> Tensor:
    return Tensor(data)


# ---------------------------------------------------------------------------
# primitive ops


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also covers the (n, d) + (d,) bias pattern."""
    out_data = a.data + b.data

    def bw(g):
        a._accum(g if a.data.shape == g.shape else g.sum(axis=0))
        b._accum(g if b.data.shape == g.shape else g.sum(axis=0))

    return Tensor(out_data, parents=(a, b), backward=bw)


def scale(a: Tensor, s: float) -> Tensor:
    def bw(g):
        a._accum(g * s)

    return Tensor(a.data * s, parents=(a,), backward=bw)


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Multiply by a non-differentiated constant (masks, weightings)."""
    c = np.asarray(c, dtype=np.float64)

    def bw(g):
        a._accum(g * c)

    return Tensor(a.data * c, parents=(a,), backward=bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")

    def bw(g):
        a._accum(g @ b.data.T)
        b._accum(a.data.T @ g)

    return Tensor(a.data @ b.data, parents=(a, b), backward=bw)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    """max(x, slope*x) elementwise; subgradient `slope` at the kink."""
    pos = x.data > 0

    def bw(g):
        x._accum(g * np.where(pos, 1.0, slope))

    return Tensor(np.where(pos, x.data, slope * x.data), parents=(x,), backward=bw)


def identity(x: Tensor) -> Tensor:
    return x


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "leaky_relu": leaky_relu,
    "identity": identity,
}


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    sizes = [p.data.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            p._accum(g[lo:hi])

    return Tensor(np.concatenate([p.data for p in parts], axis=0),
                  parents=tuple(parts), backward=bw)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    sizes = [p.data.shape[1] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            p._accum(g[:, lo:hi])

    return Tensor(np.concatenate([p.data for p in parts], axis=1),
                  parents=tuple(parts), backward=bw)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        buf = np.zeros_like(x.data)
        np.add.at(buf, idx, g)
        x._accum(buf)

    return Tensor(x.data[idx], parents=(x,), backward=bw)


def segment_sum(x: Tensor, seg: np.ndarray, num_segments: int) -> Tensor:
    """Row i of x is added into output row seg[i]; empty segments are zero."""
    seg = np.asarray(seg, dtype=np.int64)
    out = np.zeros((num_segments, x.data.shape[1]))
    np.add.at(out, seg, x.data)

    def bw(g):
        x._accum(g[seg])

    return Tensor(out, parents=(x,), backward=bw)


def segment_mean(x: Tensor, seg: np.ndarray, num_segments: int) -> Tensor:
    seg = np.asarray(seg, dtype=np.int64)
    counts = np.bincount(seg, minlength=num_segments).astype(np.float64)
    denom = np.maximum(counts, 1.0)
    out = np.zeros((num_segments, x.data.shape[1]))
    np.add.at(out, seg, x.data)
    out /= denom[:, None]

    def bw(g):
        x._accum(g[seg] / denom[seg][:, None])

    return Tensor(out, parents=(x,), backward=bw)


def segment_max(x: Tensor, seg: np.ndarray, num_segments: int) -> Tensor:
    """Per-segment columnwise max; gradient routes to the first row
    attaining the max (deterministic tie-break). Empty segments are zero.
    """
    seg = np.asarray(seg, dtype=np.int64)
    n_rows, d = x.data.shape
    out = np.full((num_segments, d), -np.inf)
    np.maximum.at(out, seg, x.data)
    counts = np.bincount(seg, minlength=num_segments)
    out[counts == 0] = 0.0

    is_max = x.data == out[seg]
    cand = np.where(is_max, np.arange(n_rows)[:, None], n_rows)
    argmin = np.full((num_segments, d), n_rows, dtype=np.int64)
    np.minimum.at(argmin, seg, cand)

    def bw(g):
        buf = np.zeros_like(x.data)
        s_idx, c_idx = np.nonzero(argmin < n_rows)
        buf_rows = argmin[s_idx, c_idx]
        np.add.at(buf, (buf_rows, c_idx), g[s_idx, c_idx])
        x._accum(buf)

    return Tensor(out, parents=(x,), backward=bw)


SEGMENT_REDUCERS = {
    "sum": segment_sum,
    "mean": segment_mean,
    "max": segment_max,
}


def sum_all(x: Tensor) -> Tensor:
    def bw(g):
        x._accum(np.full_like(x.data, float(g)))

    return Tensor(np.sum(x.data), parents=(x,), backward=bw)


# ---------------------------------------------------------------------------
# losses


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: Tensor, targets: np.ndarray,
                  class_weights: np.ndarray | None = None,
                  reduction: str = "mean") -> Tensor:
    """Mean (or sum) over rows of the weighted negative log-softmax of the
    target class, stabilized by max-subtraction.
    """
    targets = np.asarray(targets, dtype=np.int64)
    n, num_classes = logits.data.shape
    if num_classes < 2:
        raise ValueError("cross_entropy needs at least 2 classes")
    if targets.min(initial=0) < 0 or (n > 0 and targets.max() >= num_classes):
        raise ValueError(f"target index out of range for {num_classes} classes")
    if class_weights is not None:
        class_weights = np.asarray(class_weights, dtype=np.float64)
        if np.any(class_weights <= 0):
            raise ValueError("class weights must be positive")
        row_w = class_weights[targets]
    else:
        row_w = np.ones(n)

    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    nll = lse - z[np.arange(n), targets]
    total = float(np.sum(row_w * nll))
    denom = float(n) if reduction == "mean" else 1.0
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")

    def bw(g):
        dz = _softmax(z)
        dz[np.arange(n), targets] -= 1.0
        dz *= row_w[:, None]
        logits._accum(dz * (float(g) / denom))

    return Tensor(total / denom, parents=(logits,), backward=bw)


def binary_cross_entropy(logits: Tensor, targets: np.ndarray,
                         reduction: str = "mean") -> Tensor:
    """Sigmoid BCE from logits, stabilized via the log-sum-exp identity."""
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    z = logits.data.reshape(-1)
    if z.shape != t.shape:
        raise ValueError(f"logit/target shape mismatch: {z.shape} vs {t.shape}")
    n = z.shape[0]
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    total = float(per.sum())
    denom = float(n) if reduction == "mean" else 1.0
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")

    def bw(g):
        sig = 1.0 / (1.0 + np.exp(-z))
        logits._accum(((sig - t) * (float(g) / denom)).reshape(logits.data.shape))

    return Tensor(total / denom, parents=(logits,), backward=bw)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """Per-parameter Adam moments keyed by parameter name."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              state: AdamState) -> None:
    """One bias-corrected Adam update, in place on `params` and `state`."""
    state.step += 1
    t = state.step
    for name in params:
        p = params[name]
        g = np.asarray(grads.get(name)) if grads.get(name) is not None \
            else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape mismatch for {name!r}: "
                             f"{g.shape} vs {p.data.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def zero_grads(params: Mapping[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------------------
# rng


def derive_seed(seed: int, tag: str) -> int:
    """Stable 64-bit child seed from a parent seed and a string tag."""
    h = hashlib.blake2b(f"{seed & _MASK64}:{tag}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


class Rng:
    """Seeded random stream backed by PCG64.

    Identical seeds produce identical streams on every platform; `child`
    derives independent, reproducible sub-streams by tag.
    """

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, tag: str) -> "Rng":
        return Rng(derive_seed(self.seed, tag))

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, std, size=shape)

    def uniform(self, low: float, high: float, shape=None) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=None):
        return self._gen.integers(low, high, size=shape)

    def shuffle(self, seq: list) -> None:
        self._gen.shuffle(seq)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


# ---------------------------------------------------------------------------
# gradient check


def check_gradients(f: Callable[[Mapping[str, Tensor]], Tensor],
                    params: Mapping[str, Tensor],
                    eps: float = 1e-5) -> float:
    """Worst relative error between analytic gradients of `f` and central
    finite differences, over every coordinate of every parameter.

    Relative error is |a - n| / (1 + |a| + |n|), which degrades to absolute
    error for tiny gradients instead of blowing up on them.
    """
    zero_grads(params)
    out = f(params)
    out.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f(params).item()
            flat[i] = orig - eps
            f_minus = f(params).item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = a_flat[i]
            err = abs(a - numeric) / (1.0 + abs(a) + abs(numeric))
            if err > worst:
                worst = err
    return worst
