"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything downstream (backbone, losses, training) runs on this engine, so it
stays deliberately small: a Tensor wrapping a numpy array, a handful of ops
with hand-written backward closures, a named parameter store, AdamW with a
one-cycle schedule, a finite-difference harness, and checkpoint IO.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ContractError,
    EmptyGroupError,
    NumericsError,
    ParseError,
    ShapeMismatchError,
)

_MASK64 = (1 << 64) - 1

# Active kink-trace sink, or None. See kink_trace().
_TRACE: list | None = None


class kink_trace:
    """Context manager collecting decision signatures during a forward pass.

    Ops with non-smooth points (relu, clamp, max pool, zero norms) and callers
    making discrete choices (sampling, grouping) append byte signatures here.
    The finite-difference harness compares signatures between perturbed
    evaluations to exclude coordinates that crossed a kink.
    """

    def __init__(self):
        self.events: list[bytes] = []

    def __enter__(self):
        global _TRACE
        if _TRACE is not None:
            raise ContractError("kink_trace does not nest")
        _TRACE = self.events
        return self

    def __exit__(self, *exc):
        global _TRACE
        _TRACE = None
        return False

    def digest(self) -> bytes:
        import hashlib

        h = hashlib.sha256()
        for e in self.events:
            h.update(e)
        return h.digest()


def trace_event(arr) -> None:
    """Record a discrete decision (index array, bool mask) in the active trace."""
    if _TRACE is not None:
        _TRACE.append(np.ascontiguousarray(arr).tobytes())


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericsError(f"non-finite values in {what}")
    return arr


class Tensor:
    """A float64 array plus the tape wiring needed for reverse mode.

    Values must be finite on construction; any op producing NaN/Inf raises
    NumericsError at the op, which is what lets the trainer abort with a
    useful diagnostic instead of silently optimizing garbage.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = _check_finite(arr, "tensor construction")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None

    @staticmethod
    def _op(data: np.ndarray, parents: tuple, backward) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = _check_finite(np.asarray(data, dtype=np.float64), "op result")
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic ---------------------------------------------------------

    @staticmethod
    def _coerce(other) -> "Tensor | float":
        if isinstance(other, Tensor):
            return other
        if isinstance(other, (int, float)):
            return float(other)
        if isinstance(other, np.ndarray):
            return Tensor(other)
        raise TypeError(f"cannot mix Tensor with {type(other).__name__}")

    @staticmethod
    def _bwd_shape(grad: np.ndarray, shape) -> np.ndarray:
        # Undo the supported broadcasts: (N, D) op (D,), (N, D) op (N, 1), scalar.
        if grad.shape == shape:
            return grad
        if len(shape) == 1 and grad.ndim == 2 and grad.shape[1] == shape[0]:
            return grad.sum(axis=0)
        if len(shape) == 2 and shape[1] == 1 and grad.ndim == 2 and grad.shape[0] == shape[0]:
            return grad.sum(axis=1, keepdims=True)
        if shape == ():
            return np.asarray(grad.sum())
        raise ShapeMismatchError(f"cannot reduce grad {grad.shape} to {shape}")

    def _binary(self, other, fwd, bwd_a, bwd_b):
        other = Tensor._coerce(other)
        if isinstance(other, float):
            data = fwd(self.data, other)

            def backward(g, a=self, c=other):
                _acc(a, Tensor._bwd_shape(bwd_a(g, a.data, c), a.data.shape))

            return Tensor._op(data, (self,), backward)
        _check_broadcast(self.data.shape, other.data.shape)
        data = fwd(self.data, other.data)

        def backward(g, a=self, b=other):
            _acc(a, Tensor._bwd_shape(bwd_a(g, a.data, b.data), a.data.shape))
            _acc(b, Tensor._bwd_shape(bwd_b(g, a.data, b.data), b.data.shape))

        return Tensor._op(data, (self, other), backward)

    def __add__(self, other):
        return self._binary(other, lambda a, b: a + b, lambda g, a, b: g, lambda g, a, b: g)

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, lambda a, b: a - b, lambda g, a, b: g, lambda g, a, b: -g)

    def __rsub__(self, other):
        return (-self).__add__(other)

    def __mul__(self, other):
        return self._binary(
            other, lambda a, b: a * b, lambda g, a, b: g * b, lambda g, a, b: g * a
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("Tensor division only supports scalar divisors")
        return self * (1.0 / float(other))

    def __neg__(self):
        def backward(g, a=self):
            _acc(a, -g)

        return Tensor._op(-self.data, (self,), backward)

    def __matmul__(self, other):
        other = Tensor._coerce(other)
        if isinstance(other, float):
            raise TypeError("matmul needs a Tensor")
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ShapeMismatchError("matmul expects 2-D operands")
        if self.data.shape[1] != other.data.shape[0]:
            raise ShapeMismatchError(
                f"matmul inner dims differ: {self.data.shape} @ {other.data.shape}"
            )

        def backward(g, a=self, b=other):
            _acc(a, g @ b.data.T)
            _acc(b, a.data.T @ g)

        return Tensor._op(self.data @ other.data, (self, other), backward)

    # -- elementwise --------------------------------------------------------

    def relu(self):
        mask = self.data > 0.0
        trace_event(mask)

        def backward(g, a=self, m=mask):
            _acc(a, g * m)

        return Tensor._op(np.where(mask, self.data, 0.0), (self,), backward)

    def sigmoid(self):
        x = self.data
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

        def backward(g, a=self, s=s):
            _acc(a, g * s * (1.0 - s))

        return Tensor._op(s, (self,), backward)

    def exp(self):
        e = np.exp(self.data)

        def backward(g, a=self, e=e):
            _acc(a, g * e)

        return Tensor._op(e, (self,), backward)

    def log(self):
        def backward(g, a=self):
            _acc(a, g / a.data)

        return Tensor._op(np.log(self.data), (self,), backward)

    def sqrt(self):
        r = np.sqrt(self.data)

        def backward(g, a=self, r=r):
            _acc(a, g * (0.5 / r))

        return Tensor._op(r, (self,), backward)

    def clamp(self, lo: float, hi: float):
        # Gradient passes strictly inside (lo, hi); zero at and beyond bounds.
        inside = (self.data > lo) & (self.data < hi)
        trace_event(inside)

        def backward(g, a=self, m=inside):
            _acc(a, g * m)

        return Tensor._op(np.clip(self.data, lo, hi), (self,), backward)

    # -- shape / reduction --------------------------------------------------

    def sum(self, axis: int | None = None, keepdims: bool = False):
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g, a=self, axis=axis, keepdims=keepdims):
            if axis is None:
                _acc(a, np.broadcast_to(g, a.data.shape).copy())
            else:
                ge = g if keepdims else np.expand_dims(g, axis)
                _acc(a, np.broadcast_to(ge, a.data.shape).copy())

        return Tensor._op(data, (self,), backward)

    def mean(self):
        n = self.data.size
        return self.sum() * (1.0 / n)

    def reshape(self, *shape):
        data = self.data.reshape(*shape)

        def backward(g, a=self):
            _acc(a, g.reshape(a.data.shape))

        return Tensor._op(data, (self,), backward)

    # -- autodiff driver ----------------------------------------------------

    def backprop(self) -> None:
        """Run reverse mode from this scalar, accumulating into .grad fields."""
        if self.data.size != 1:
            raise ContractError(f"backward root must be scalar, got shape {self.data.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # Interior grads are not reused; drop them to bound memory.
                if node._parents:
                    node.grad = None
        self.grad = np.ones_like(self.data)


def _acc(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad = g.copy() if t.grad is None else t.grad + g


def _check_broadcast(sa, sb) -> None:
    ok = (
        sa == sb
        or sa == ()
        or sb == ()
        or (len(sa) == 2 and len(sb) == 1 and sa[1] == sb[0])
        or (len(sb) == 2 and len(sa) == 1 and sb[1] == sa[0])
        or (len(sa) == 2 and len(sb) == 2 and sa[0] == sb[0] and (sa[1] == 1 or sb[1] == 1))
    )
    if not ok:
        raise ShapeMismatchError(f"cannot broadcast {sa} with {sb}")


def constant(data) -> Tensor:
    """Wrap an array as a non-differentiable Tensor."""
    return Tensor(data)


def concat(parts: list[Tensor], axis: int = 1) -> Tensor:
    widths = [p.data.shape[axis] for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)

    def backward(g, parts=tuple(parts), widths=tuple(widths), axis=axis):
        start = 0
        for p, w in zip(parts, widths):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + w)
            _acc(p, g[tuple(sl)])
            start += w

    return Tensor._op(data, tuple(parts), backward)


def gather_rows(t: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows t[idx]; backward scatter-adds into the source rows."""
    idx = np.asarray(idx, dtype=np.int64)
    data = t.data[idx]

    def backward(g, a=t, idx=idx):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            _acc(a, full)

    return Tensor._op(data, (t,), backward)


def take_cols(t: Tensor, start: int, stop: int) -> Tensor:
    if t.data.ndim != 2:
        raise ShapeMismatchError("take_cols expects a 2-D tensor")
    data = t.data[:, start:stop]

    def backward(g, a=t, start=start, stop=stop):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[:, start:stop] = g
            _acc(a, full)

    return Tensor._op(data, (t,), backward)


def grouped_max_pool(features: Tensor, mask: np.ndarray) -> Tensor:
    """Max over the member axis of (G, K, D) features, honoring a (G, K) mask.

    Masked slots never win. Gradient routes to the argmax entry per (group,
    channel); ties go to the lowest member index. A fully masked group is a
    caller bug and raises EmptyGroupError.
    """
    if features.data.ndim != 3:
        raise ShapeMismatchError("grouped_max_pool expects (G, K, D) features")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != features.data.shape[:2]:
        raise ShapeMismatchError(f"mask {mask.shape} does not cover groups {features.data.shape[:2]}")
    if not mask.any(axis=1).all():
        bad = int(np.flatnonzero(~mask.any(axis=1))[0])
        raise EmptyGroupError(f"group {bad} has no valid members")
    neg = np.where(mask[:, :, None], features.data, -np.inf)
    arg = neg.argmax(axis=1)  # first occurrence == lowest index on ties
    trace_event(arg)
    G, _, D = features.data.shape
    gi = np.arange(G)[:, None]
    di = np.arange(D)[None, :]
    data = features.data[gi, arg, di]

    def backward(g, a=features, arg=arg, gi=gi, di=di):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, (gi, arg, di), g)
            _acc(a, full)

    return Tensor._op(data, (features,), backward)


def rows_l2norm(t: Tensor) -> Tensor:
    """Euclidean norm of each row of a (M, D) tensor; subgradient 0 at zero rows."""
    if t.data.ndim != 2:
        raise ShapeMismatchError("rows_l2norm expects a 2-D tensor")
    n = np.sqrt((t.data * t.data).sum(axis=1))
    zero = n == 0.0
    trace_event(zero)

    def backward(g, a=t, n=n, zero=zero):
        if a.requires_grad:
            safe = np.where(zero, 1.0, n)
            _acc(a, (g / safe)[:, None] * np.where(zero[:, None], 0.0, a.data))

    return Tensor._op(n, (t,), backward)


def smooth_l1(t: Tensor, delta: float = 1.0) -> Tensor:
    """Elementwise smooth L1: 0.5 x^2 / delta inside |x| < delta, |x| - delta/2 outside."""
    x = t.data
    quad = np.abs(x) < delta
    trace_event(quad)
    data = np.where(quad, 0.5 * x * x / delta, np.abs(x) - 0.5 * delta)

    def backward(g, a=t, quad=quad, delta=delta):
        _acc(a, g * np.where(quad, a.data / delta, np.sign(a.data)))

    return Tensor._op(data, (t,), backward)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy of (N, C) logits against integer class targets."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or targets.shape != (logits.data.shape[0],):
        raise ShapeMismatchError("softmax_cross_entropy expects (N, C) logits and (N,) targets")
    onehot = np.zeros_like(logits.data)
    onehot[np.arange(targets.size), targets] = 1.0
    return -(log_softmax(logits) * constant(onehot)).sum() * (1.0 / targets.size)


def log_softmax(logits: Tensor) -> Tensor:
    # Max-shift is a constant offset; it cancels in the gradient.
    shift = logits.data.max(axis=1, keepdims=True)
    z = logits - constant(shift)
    return z - z.exp().sum(axis=1, keepdims=True).log()


# -- parameters --------------------------------------------------------------


def _splitmix64(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    z = z ^ (z >> 31)
    return z, state


class ParamStore:
    """Named map of trainable tensors with a serializable RNG state.

    Paths iterate lexicographically so optimizer sweeps and checkpoints are
    order-stable. rng_state is a 64-bit counter advanced through splitmix64;
    each parameter initialization consumes one draw.
    """

    def __init__(self, seed: int = 0):
        self._params: dict[str, Tensor] = {}
        self.rng_state = int(seed) & _MASK64

    def next_seed(self) -> int:
        out, self.rng_state = _splitmix64(self.rng_state)
        return out

    def create(self, path: str, shape: tuple[int, ...], init: str = "glorot") -> Tensor:
        if path in self._params:
            raise ContractError(f"parameter {path!r} already exists")
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "glorot":
            if len(shape) != 2:
                raise ContractError("glorot init needs a (fan_in, fan_out) shape")
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            rng = np.random.default_rng(self.next_seed())
            data = rng.uniform(-limit, limit, size=shape)
        else:
            raise ContractError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True)
        self._params[path] = t
        return t

    def put(self, path: str, values: np.ndarray) -> Tensor:
        t = Tensor(np.array(values, dtype=np.float64), requires_grad=True)
        self._params[path] = t
        return t

    def __getitem__(self, path: str) -> Tensor:
        return self._params[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __len__(self) -> int:
        return len(self._params)

    def paths(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        for path in self.paths():
            yield path, self._params[path]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def copy(self) -> "ParamStore":
        dup = ParamStore(0)
        dup.rng_state = self.rng_state
        for path, t in self._params.items():
            dup._params[path] = Tensor(t.data.copy(), requires_grad=True)
        return dup


def backward(loss: Tensor, store: ParamStore) -> dict[str, np.ndarray]:
    """Gradient of a scalar loss for every parameter in the store.

    Parameters the loss does not reach get zero gradients. Grads are zeroed
    first; accumulation across calls is done by composing losses in-graph.
    """
    store.zero_grad()
    loss.backprop()
    out = {}
    for path, t in store.items():
        out[path] = np.zeros_like(t.data) if t.grad is None else t.grad
    return out


# -- MLPs ---------------------------------------------------------------------


@dataclass(frozen=True)
class MlpSpec:
    """Widths of an affine stack; hidden layers are relu, final configurable."""

    dims: tuple[int, ...]
    final_activation: str = "none"

    def __post_init__(self):
        if len(self.dims) < 2:
            raise ContractError("MlpSpec needs at least input and output widths")
        if any(d <= 0 for d in self.dims):
            raise ContractError("MlpSpec widths must be positive")
        if self.final_activation not in ("none", "relu", "sigmoid"):
            raise ContractError(f"unknown final activation {self.final_activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1


def init_mlp(store: ParamStore, prefix: str, spec: MlpSpec) -> None:
    """Create glorot weights and zero biases for every layer of the stack."""
    for i in range(spec.n_layers):
        store.create(f"{prefix}.w{i}", (spec.dims[i], spec.dims[i + 1]), "glorot")
        store.create(f"{prefix}.b{i}", (spec.dims[i + 1],), "zeros")


def mlp_forward(store: ParamStore, prefix: str, spec: MlpSpec, x: Tensor) -> Tensor:
    """Apply the affine stack to (N, dims[0]) inputs.

    Raises ShapeMismatchError naming the offending layer when a width
    disagrees with the spec.
    """
    if x.data.ndim != 2:
        raise ShapeMismatchError("mlp_forward expects (N, D) input")
    h = x
    for i in range(spec.n_layers):
        if h.data.shape[1] != spec.dims[i]:
            raise ShapeMismatchError(
                f"layer {i} of {prefix!r} expects width {spec.dims[i]}, got {h.data.shape[1]}"
            )
        h = h @ store[f"{prefix}.w{i}"] + store[f"{prefix}.b{i}"]
        last = i == spec.n_layers - 1
        act = spec.final_activation if last else "relu"
        if act == "relu":
            h = h.relu()
        elif act == "sigmoid":
            h = h.sigmoid()
    return h


# -- optimizer ----------------------------------------------------------------


@dataclass
class OptimizerState:
    """AdamW moments plus the one-cycle schedule settings."""

    peak_lr: float
    total_steps: int
    weight_decay: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_frac: float = 0.3
    floor_div: float = 25.0
    step: int = 0
    trainable: tuple[str, ...] = ()
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def init_optimizer(
    store: ParamStore,
    peak_lr: float,
    total_steps: int,
    trainable: list[str] | None = None,
    **kw,
) -> OptimizerState:
    paths = sorted(trainable) if trainable is not None else store.paths()
    for p in paths:
        if p not in store:
            raise ContractError(f"trainable path {p!r} not in store")
    state = OptimizerState(peak_lr=peak_lr, total_steps=total_steps, trainable=tuple(paths), **kw)
    for p in paths:
        state.m[p] = np.zeros_like(store[p].data)
        state.v[p] = np.zeros_like(store[p].data)
    return state


def one_cycle_lr(state: OptimizerState, step: int | None = None) -> float:
    """Learning rate at a given step: linear warmup to peak, cosine decay to floor.

    The floor is peak / floor_div; warmup covers warmup_frac of total steps.
    Steps past total stay at the floor.
    """
    s = state.step if step is None else step
    floor = state.peak_lr / state.floor_div
    t = min(s / max(state.total_steps, 1), 1.0)
    if t < state.warmup_frac:
        return floor + (state.peak_lr - floor) * (t / state.warmup_frac)
    u = (t - state.warmup_frac) / (1.0 - state.warmup_frac)
    return floor + (state.peak_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * u))


def optimizer_step(store: ParamStore, grads: dict[str, np.ndarray], state: OptimizerState) -> float:
    """One AdamW update over the trainable paths; returns the lr used."""
    if state.step >= 2**63:
        raise OverflowError("optimizer step counter overflow")
    lr = one_cycle_lr(state)
    t = state.step + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for path in state.trainable:
        g = grads[path]
        _check_finite(g, f"gradient of {path}")
        m = state.m[path]
        v = state.v[path]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p = store[path]
        p.data = p.data - lr * update - lr * state.weight_decay * p.data
    state.step = t
    return lr


# -- finite differences --------------------------------------------------------


def finite_diff_check(fn, point: np.ndarray, eps: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    fn maps a Tensor to a scalar Tensor. The relative error denominator is
    max(|analytic|, |numeric|, 1e-8) per coordinate.
    """
    point = np.asarray(point, dtype=np.float64)
    x = Tensor(point.copy(), requires_grad=True)
    out = fn(x)
    if out.data.size != 1:
        raise ContractError("finite_diff_check needs a scalar-valued fn")
    out.backprop()
    analytic = np.zeros_like(point) if x.grad is None else x.grad.copy()
    flat = point.ravel()
    num = np.zeros_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + eps
        hi = fn(Tensor(bumped.reshape(point.shape))).item()
        bumped[i] = flat[i] - eps
        lo = fn(Tensor(bumped.reshape(point.shape))).item()
        num[i] = (hi - lo) / (2.0 * eps)
    a = analytic.ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), 1e-8)
    return float(np.max(np.abs(a - num) / denom))


def finite_diff_check_store(
    loss_fn,
    store: ParamStore,
    paths: list[str] | None = None,
    eps: float = 1e-5,
    exclude_kinks: bool = True,
) -> tuple[float, int]:
    """Finite-difference check of a loss over named store parameters.

    loss_fn() evaluates the loss from the current store contents. Coordinates
    whose +/- eps evaluations cross a discrete decision (relu sign, pooling
    argmax, sampling choice) are excluded when exclude_kinks is set; the count
    of exclusions is returned alongside the max relative error.
    """
    paths = store.paths() if paths is None else sorted(paths)

    def eval_with_sig():
        with kink_trace() as tr:
            val = loss_fn().item()
        return val, tr.digest()

    loss = loss_fn()
    grads = backward(loss, store)
    worst = 0.0
    excluded = 0
    for path in paths:
        t = store[path]
        flat = t.data.ravel()
        gflat = grads[path].ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi, sig_hi = eval_with_sig()
            flat[i] = orig - eps
            lo, sig_lo = eval_with_sig()
            flat[i] = orig
            if exclude_kinks and sig_hi != sig_lo:
                excluded += 1
                continue
            num = (hi - lo) / (2.0 * eps)
            a = gflat[i]
            rel = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, rel)
    return worst, excluded


# -- checkpoints ----------------------------------------------------------------

CKPT_FORMAT = "halo-ckpt-v1"


def _fmt17(v: float) -> str:
    # 17 significant digits round-trips any float64 exactly.
    return format(float(v), ".17g")


def checkpoint_bytes(store: ParamStore, step: int, meta: dict | None = None) -> bytes:
    """Serialize params + rng state as canonical JSON (sorted keys, 17 digits)."""
    parts = ['{"format": "%s"' % CKPT_FORMAT]
    parts.append(', "params": {')
    entries = []
    for path, t in store.items():
        flat = ", ".join(_fmt17(v) for v in t.data.ravel())
        shape = ", ".join(str(d) for d in t.data.shape)
        entries.append(f'{json.dumps(path)}: {{"shape": [{shape}], "values": [{flat}]}}')
    parts.append(", ".join(entries))
    parts.append("}")
    parts.append(f', "rng_state": {store.rng_state}')
    parts.append(f', "step": {int(step)}')
    if meta is not None:
        parts.append(f', "meta": {json.dumps(meta, sort_keys=True)}')
    parts.append("}")
    return "".join(parts).encode("utf-8")


def save_checkpoint(path: str, store: ParamStore, step: int, meta: dict | None = None) -> None:
    blob = checkpoint_bytes(store, step, meta)
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path: str) -> tuple[ParamStore, int, dict | None]:
    if not os.path.exists(path):
        raise ParseError(f"checkpoint file not found: {path}")
    with open(path, "rb") as fh:
        try:
            doc = json.loads(fh.read().decode("utf-8"))
        except json.JSONDecodeError as e:
            raise ParseError(f"checkpoint is not valid JSON: {e}") from None
    for key in ("format", "params", "rng_state", "step"):
        if key not in doc:
            raise ParseError(f"checkpoint missing field {key!r}")
    if doc["format"] != CKPT_FORMAT:
        raise ParseError(f"unsupported checkpoint format {doc['format']!r}")
    store = ParamStore(0)
    store.rng_state = int(doc["rng_state"]) & _MASK64
    for path_, entry in doc["params"].items():
        if "shape" not in entry or "values" not in entry:
            raise ParseError(f"param {path_!r} missing shape/values")
        arr = np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
        store.put(path_, arr)
    return store, int(doc["step"]), doc.get("meta")
