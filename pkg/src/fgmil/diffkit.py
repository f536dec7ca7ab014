"""Minimal reverse-mode autodiff over float64 numpy arrays.

Provides exactly the operations the training pipeline needs: matrix
products, masked softmax/means, scaled dot-product attention, soft-target
cross-entropy, an AdamW step with decoupled weight decay, and a central
finite-difference gradient checker. The computation graph is rebuilt on
every forward pass and discarded after ``backward``.

Masks are plain boolean numpy arrays; gradients never flow to them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    DegenerateRowError,
    DeterminismError,
    FgmilError,
    NormalizationError,
    ShapeError,
    StaleGradientError,
)

_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle finite-value assertions after every operation."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = enabled


def _as_f64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return np.ascontiguousarray(arr)


class Tensor:
    """Dense float64 array with optional participation in the gradient graph.

    Values are validated finite at construction; operation outputs are
    re-validated when debug checks are on. Treat tensors as immutable once
    built -- only the optimizer and the gradient checker touch ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, _check: bool = True):
        self.data = _as_f64(data)
        if (_check or _DEBUG_CHECKS) and not np.all(np.isfinite(self.data)):
            raise FgmilError("tensor contains non-finite values")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, _check=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(data, _check=False)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    if _DEBUG_CHECKS and not np.all(np.isfinite(out.data)):
        raise FgmilError("operation produced non-finite values")
    return out


def _require_2d(t: Tensor, op: str) -> None:
    if t.data.ndim != 2:
        raise ShapeError(f"{op} expects a 2-D tensor, got shape {t.shape}")


# ---------------------------------------------------------------------------
# elementwise and structural primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub shapes differ: {a.shape} vs {b.shape}")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return _make(out_data, (a,), lambda g: (g * out_data,))


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)
    return _make(out_data, (a,), lambda g: (g * (1.0 - out_data * out_data),))


def clamp_max(a: Tensor, cap: float) -> Tensor:
    """Elementwise min(a, cap); gradient passes only where a <= cap."""
    cap = float(cap)
    keep = a.data <= cap
    return _make(np.minimum(a.data, cap), (a,), lambda g: (g * keep,))


def scale_by(a: Tensor, s: Tensor) -> Tensor:
    """Multiply tensor ``a`` by scalar tensor ``s`` elementwise."""
    if s.size != 1:
        raise ShapeError(f"scale_by expects a scalar tensor, got shape {s.shape}")
    sval = float(s.data.reshape(()))

    def vjp(g: np.ndarray):
        return g * sval, np.sum(g * a.data).reshape(s.shape)

    return _make(a.data * sval, (a, s), vjp)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    new = a.data.reshape(shape)
    return _make(new, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor) -> Tensor:
    _require_2d(a, "transpose")
    return _make(np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,))


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack 2-D tensors along axis 0; gradients are split back per part."""
    if not parts:
        raise ShapeError("concat_rows of an empty list")
    for p in parts:
        _require_2d(p, "concat_rows")
    cols = parts[0].shape[1]
    if any(p.shape[1] != cols for p in parts):
        raise ShapeError(f"concat_rows column mismatch: {[p.shape for p in parts]}")
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def vjp(g: np.ndarray):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=0), tuple(parts), vjp)


def concat_vec(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two 1-D tensors."""
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise ShapeError(f"concat_vec expects 1-D tensors: {a.shape}, {b.shape}")
    n = a.shape[0]
    return _make(
        np.concatenate([a.data, b.data]), (a, b), lambda g: (g[:n], g[n:])
    )


def sum_all(a: Tensor) -> Tensor:
    return _make(
        np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),)
    )


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require_2d(a, "matmul")
    _require_2d(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")

    def vjp(g: np.ndarray):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), vjp)


def _as_bool_mask(mask, length_hint: str = "") -> np.ndarray:
    m = np.asarray(mask)
    if m.dtype != np.bool_:
        m = m.astype(bool)
    return m


def masked_softmax(logits: Tensor, mask) -> Tensor:
    """Row softmax over valid positions; masked entries are exactly zero.

    Uses max-subtraction over the valid entries of each row. Rows with no
    valid entry are a hard error.
    """
    _require_2d(logits, "masked_softmax")
    m = _as_bool_mask(mask)
    if m.shape != logits.shape:
        raise ShapeError(f"mask shape {m.shape} != logits shape {logits.shape}")
    if not m.any(axis=1).all():
        bad = int(np.flatnonzero(~m.any(axis=1))[0])
        raise DegenerateRowError(f"masked_softmax row {bad} has no valid entries")

    z = np.where(m, logits.data, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.where(m, np.exp(z), 0.0)
    p = e / e.sum(axis=1, keepdims=True)

    def vjp(g: np.ndarray):
        inner = (g * p).sum(axis=1, keepdims=True)
        return (np.where(m, p * (g - inner), 0.0),)

    return _make(p, (logits,), vjp)


def masked_mean_rows(x: Tensor, mask) -> Tensor:
    """Arithmetic mean over the valid rows of an L x D matrix."""
    _require_2d(x, "masked_mean_rows")
    m = _as_bool_mask(mask)
    if m.shape != (x.shape[0],):
        raise ShapeError(f"row mask shape {m.shape} != ({x.shape[0]},)")
    count = int(m.sum())
    if count == 0:
        raise DegenerateRowError("masked_mean_rows with no valid rows")
    mean = (x.data * m[:, None]).sum(axis=0) / count

    def vjp(g: np.ndarray):
        return ((m[:, None] / count) * g[None, :],)

    return _make(mean, (x,), vjp)


def l2_normalize_rows(x: Tensor, tiny: float = 1e-300) -> Tensor:
    """Scale every row of an N x D matrix to unit Euclidean norm."""
    _require_2d(x, "l2_normalize_rows")
    norms = np.linalg.norm(x.data, axis=1, keepdims=True)
    if np.any(norms <= tiny):
        bad = int(np.flatnonzero(norms.ravel() <= tiny)[0])
        raise NormalizationError(f"row {bad} has zero norm")
    unit = x.data / norms

    def vjp(g: np.ndarray):
        inner = (g * unit).sum(axis=1, keepdims=True)
        return ((g - unit * inner) / norms,)

    return _make(unit, (x,), vjp)


def attention(q: Tensor, k: Tensor, v: Tensor, key_mask) -> Tensor:
    """Single-head scaled dot-product attention with a key validity mask.

    Computes masked_softmax(q k^T / sqrt(D)) v; projections are the
    caller's responsibility. Requires at least one valid key.
    """
    _require_2d(q, "attention")
    _require_2d(k, "attention")
    _require_2d(v, "attention")
    d = q.shape[1]
    if k.shape[1] != d:
        raise ShapeError(f"attention q/k dims differ: {q.shape} vs {k.shape}")
    if v.shape[0] != k.shape[0]:
        raise ShapeError(f"attention k/v row counts differ: {k.shape} vs {v.shape}")
    m = _as_bool_mask(key_mask)
    if m.shape != (k.shape[0],):
        raise ShapeError(f"key mask shape {m.shape} != ({k.shape[0]},)")
    if not m.any():
        raise DegenerateRowError("attention with all keys masked")

    scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(d))
    weights = masked_softmax(scores, np.broadcast_to(m, scores.shape))
    return matmul(weights, v)


def soft_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy between row-softmaxed logits and row-stochastic targets.

    ``targets`` is a constant (numpy array or tensor); each row must be
    non-negative and sum to 1. Gradient flows to ``logits`` only.
    """
    _require_2d(logits, "soft_cross_entropy")
    y = targets.data if isinstance(targets, Tensor) else _as_f64(targets)
    if y.shape != logits.shape:
        raise ShapeError(f"targets shape {y.shape} != logits shape {logits.shape}")
    if np.any(y < -1e-12):
        raise FgmilError("soft_cross_entropy targets contain negative entries")
    row_sums = y.sum(axis=1)
    if not np.allclose(row_sums, 1.0, atol=1e-9):
        raise FgmilError("soft_cross_entropy target rows must sum to 1")

    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -(y * log_probs).sum() / n
    p = np.exp(log_probs)

    def vjp(g: np.ndarray):
        return (float(g.reshape(())) * (p - y) / n,)

    return _make(np.asarray(loss), (logits,), vjp)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor, store: "ParamStore | None" = None) -> None:
    """Reverse-accumulate gradients from a scalar loss.

    Fills ``grad`` on every participating tensor. When ``store`` is given,
    parameters that did not participate in the computation receive an
    exact-zero gradient instead of None.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    for node in topo:
        node.grad = None
    loss.grad = np.ones_like(loss.data)

    for node in reversed(topo):
        if node._vjp is None or node.grad is None:
            continue
        contributions = node._vjp(node.grad)
        for parent, contrib in zip(node._parents, contributions):
            if not parent.requires_grad or contrib is None:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += contrib

    if store is not None:
        for _, param in store.items():
            if param.requires_grad and param.grad is None:
                param.grad = np.zeros_like(param.data)


# ---------------------------------------------------------------------------
# parameters and optimizer
# ---------------------------------------------------------------------------


@dataclass
class _AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


class ParamStore:
    """Named parameter registry with per-parameter AdamW state.

    Names are unique and iteration is always sorted by name, which keeps
    checkpoints and gradient reports deterministic.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._state: dict[str, _AdamState] = {}

    def add(self, name: str, data, requires_grad: bool = True) -> Tensor:
        if name in self._params:
            raise FgmilError(f"duplicate parameter name: {name!r}")
        t = data if isinstance(data, Tensor) else Tensor(data)
        t.requires_grad = requires_grad
        self._params[name] = t
        return t

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(n, self._params[n]) for n in self.names()]

    def trainable_items(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.items() if p.requires_grad]

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad = None

    def opt_state(self, name: str) -> _AdamState:
        if name not in self._state:
            param = self._params[name]
            self._state[name] = _AdamState(
                m=np.zeros_like(param.data), v=np.zeros_like(param.data)
            )
        state = self._state[name]
        if state.m.shape != self._params[name].data.shape:
            raise ShapeError(f"optimizer state shape mismatch for {name!r}")
        return state


def adamw_step(
    store: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.98,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    names: Iterable[str] | None = None,
) -> None:
    """One AdamW update with decoupled weight decay.

    Decay is applied to the parameter before the moment update; moments use
    standard bias correction. ``names`` restricts the update to a subset of
    parameters (used by few-shot fine-tuning).
    """
    selected = set(names) if names is not None else None
    for name, param in store.trainable_items():
        if selected is not None and name not in selected:
            continue
        if param.grad is None:
            raise StaleGradientError(f"parameter {name!r} has no gradient")
        g = param.grad
        theta = param.data
        if weight_decay != 0.0:
            theta = theta - lr * weight_decay * theta
        state = store.opt_state(name)
        state.step += 1
        state.m = beta1 * state.m + (1.0 - beta1) * g
        state.v = beta2 * state.v + (1.0 - beta2) * (g * g)
        m_hat = state.m / (1.0 - beta1 ** state.step)
        v_hat = state.v / (1.0 - beta2 ** state.step)
        param.data = theta - lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

FD_ELEMENT_CAP = 64


@dataclass
class GradReport:
    """Per-parameter max relative error between analytic and FD gradients."""

    per_param: dict[str, float] = field(default_factory=dict)
    worst_param: str = ""
    max_rel_err: float = 0.0

    def passes(self, tol: float) -> bool:
        return self.max_rel_err < tol


def _fd_indices(size: int, cap: int) -> np.ndarray:
    if size <= cap:
        return np.arange(size)
    return np.unique(np.linspace(0, size - 1, cap).round().astype(np.intp))


def grad_check(
    build: Callable[[ParamStore], Tensor],
    store: ParamStore,
    epsilon: float = 1e-5,
    element_cap: int = FD_ELEMENT_CAP,
) -> GradReport:
    """Compare analytic gradients against central finite differences.

    ``build`` must be a deterministic closure producing a scalar loss from
    the store's parameters; two forward passes are compared bit-for-bit to
    catch hidden nondeterminism. Large parameters are probed at up to
    ``element_cap`` evenly spaced elements.
    """
    loss_a = build(store).item()
    loss_b = build(store).item()
    if loss_a != loss_b:
        raise DeterminismError(
            f"forward passes disagree: {loss_a!r} vs {loss_b!r}"
        )

    store.zero_grads()
    loss = build(store)
    backward(loss, store)

    report = GradReport()
    for name, param in store.trainable_items():
        analytic = param.grad
        assert analytic is not None
        flat = param.data.reshape(-1)
        worst = 0.0
        for idx in _fd_indices(flat.size, element_cap):
            original = flat[idx]
            flat[idx] = original + epsilon
            f_plus = build(store).item()
            flat[idx] = original - epsilon
            f_minus = build(store).item()
            flat[idx] = original
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            a = float(analytic.reshape(-1)[idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
        report.per_param[name] = worst
        if worst >= report.max_rel_err:
            report.max_rel_err = worst
            report.worst_param = name
    return report
