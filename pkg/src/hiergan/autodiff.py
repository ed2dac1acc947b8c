"""Reverse-mode automatic differentiation over dense float64 arrays.

Design: define-by-run Wengert list. A ``Tape`` owns primitive ops as methods;
each call computes the forward value with numpy and appends one record
(inputs, output, backward rule). ``Tape.backward`` walks the records once in
reverse, accumulating adjoints additively, so a tensor feeding several
consumers receives the sum of their contributions. Construction order is a
topological order, which makes the single reverse sweep correct.

Tapes are single-writer and rebuilt per training step. Gradients are exposed
on ``Tensor.grad`` for every tensor created with ``requires_grad=True``; that
includes non-parameter leaves such as images fed to a frozen classifier,
whose input gradient drives the generator.

Checkpoint file layout (little-endian throughout):

    magic   4 bytes  b"HGCK"
    version uint32   currently 1
    count   uint32   number of tensors
    per tensor:
        name_len uint32, name utf-8 bytes,
        rank uint32, dims uint32 * rank,
        data float64 * prod(dims), row-major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "AdamState",
    "adam_step",
    "grad_check",
    "GradCheckReport",
    "NonFiniteError",
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
    "BCE_LOGIT_CLAMP",
]

# bound on the logit magnitude used for the BCE *value*; past this point the
# loss saturates, and the gradient (sigmoid - target) is within 1e-13 of its
# limit, so clipping bounds the loss without stopping learning
BCE_LOGIT_CLAMP = 30.0


class NonFiniteError(ArithmeticError):
    """An op produced a NaN or infinity; the message names the op."""


class CheckpointError(IOError):
    """Checkpoint file is malformed, truncated, or version-incompatible."""


class Tensor:
    """Dense float64 array plus a gradient slot.

    ``requires_grad`` marks leaves whose gradient should be retained by
    ``Tape.backward``; op outputs inherit the flag from their inputs.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.data.shape}, requires_grad={self.requires_grad})"


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    out: Tensor
    # maps the output adjoint to one adjoint per input (None for untracked inputs)
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tape:
    """Ordered record of primitive ops; single-writer, rebuilt per step."""

    def __init__(self):
        self._records: list[_Record] = []

    def __len__(self) -> int:
        return len(self._records)

    # ------------------------------------------------------------------ core

    def _emit(self, op: str, inputs: tuple[Tensor, ...], data: np.ndarray, backward) -> Tensor:
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(f"op {op!r} produced non-finite values")
        out = Tensor(data)
        out.requires_grad = any(t.requires_grad for t in inputs)
        if out.requires_grad:
            self._records.append(_Record(op, inputs, out, backward))
        return out

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Accumulate d(loss)/d(t) for every tracked tensor; return the
        gradients of ``requires_grad`` leaves and set their ``.grad``."""
        if loss.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
        adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaf_grads: dict[Tensor, np.ndarray] = {}
        if loss.requires_grad and not any(r.out is loss for r in self._records):
            leaf_grads[loss] = adjoints[id(loss)]
        for rec in reversed(self._records):
            out_g = adjoints.pop(id(rec.out), None)
            if out_g is None:
                continue
            in_grads = rec.backward(out_g)
            for t, g in zip(rec.inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + g
                else:
                    adjoints[key] = g
        produced = {id(r.out) for r in self._records}
        seen: dict[int, Tensor] = {}
        for rec in self._records:
            for t in rec.inputs:
                seen.setdefault(id(t), t)
        for key, t in seen.items():
            if t.requires_grad and key not in produced and key in adjoints:
                leaf_grads[t] = adjoints[key]
        for t, g in leaf_grads.items():
            t.grad = g
        return leaf_grads

    # ------------------------------------------------------------ primitives

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        ad, bd = a.data, b.data

        def back(g):
            return g @ bd.T, ad.T @ g

        return self._emit("matmul", (a, b), ad @ bd, back)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        data = a.data + b.data

        def back(g):
            return _sum_to_shape(g, a.shape), _sum_to_shape(g, b.shape)

        return self._emit("add", (a, b), data, back)

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        data = a.data - b.data

        def back(g):
            return _sum_to_shape(g, a.shape), _sum_to_shape(-g, b.shape)

        return self._emit("sub", (a, b), data, back)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        ad, bd = a.data, b.data

        def back(g):
            return _sum_to_shape(g * bd, a.shape), _sum_to_shape(g * ad, b.shape)

        return self._emit("mul", (a, b), ad * bd, back)

    def div(self, a: Tensor, b: Tensor) -> Tensor:
        ad, bd = a.data, b.data

        def back(g):
            return _sum_to_shape(g / bd, a.shape), _sum_to_shape(-g * ad / (bd * bd), b.shape)

        return self._emit("div", (a, b), ad / bd, back)

    def scale(self, a: Tensor, s: float) -> Tensor:
        s = float(s)

        def back(g):
            return (g * s,)

        return self._emit("scale", (a,), a.data * s, back)

    def add_const(self, a: Tensor, c: float) -> Tensor:
        def back(g):
            return (g,)

        return self._emit("add_const", (a,), a.data + float(c), back)

    def concat(self, tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
        parts = tuple(tensors)
        sizes = [t.shape[axis] for t in parts]
        offsets = np.cumsum([0] + sizes)

        def back(g):
            return tuple(
                np.take(g, range(offsets[i], offsets[i + 1]), axis=axis) for i in range(len(parts))
            )

        return self._emit("concat", parts, np.concatenate([t.data for t in parts], axis=axis), back)

    def slice(self, a: Tensor, key) -> Tensor:
        data = a.data[key]

        def back(g):
            full = np.zeros_like(a.data)
            # add.at accumulates when the key repeats an index (gather of
            # duplicate rows), where plain assignment would drop contributions
            np.add.at(full, key, g)
            return (full,)

        return self._emit("slice", (a,), data, back)

    def reshape(self, a: Tensor, shape: tuple[int, ...]) -> Tensor:
        old = a.shape

        def back(g):
            return (g.reshape(old),)

        return self._emit("reshape", (a,), a.data.reshape(shape), back)

    def tile_rows(self, a: Tensor, n: int) -> Tensor:
        """Repeat a vector (m,) as n identical rows -> (n, m)."""
        if a.data.ndim != 1:
            raise ValueError(f"tile_rows expects a vector, got shape {a.shape}")

        def back(g):
            return (g.sum(axis=0),)

        return self._emit("tile_rows", (a,), np.tile(a.data, (n, 1)), back)

    def sum(self, a: Tensor) -> Tensor:
        def back(g):
            return (np.full(a.shape, float(g)),)

        return self._emit("sum", (a,), np.asarray(a.data.sum()), back)

    def mean(self, a: Tensor) -> Tensor:
        inv = 1.0 / a.size

        def back(g):
            return (np.full(a.shape, float(g) * inv),)

        return self._emit("mean", (a,), np.asarray(a.data.mean()), back)

    def relu(self, a: Tensor) -> Tensor:
        mask = a.data > 0

        def back(g):
            return (g * mask,)

        return self._emit("relu", (a,), np.where(mask, a.data, 0.0), back)

    def leaky_relu(self, a: Tensor, alpha: float = 0.2) -> Tensor:
        mask = a.data > 0

        def back(g):
            return (np.where(mask, g, g * alpha),)

        return self._emit("leaky_relu", (a,), np.where(mask, a.data, a.data * alpha), back)

    def tanh(self, a: Tensor) -> Tensor:
        data = np.tanh(a.data)

        def back(g):
            return (g * (1.0 - data * data),)

        return self._emit("tanh", (a,), data, back)

    def sigmoid(self, a: Tensor) -> Tensor:
        data = _sigmoid(a.data)

        def back(g):
            return (g * data * (1.0 - data),)

        return self._emit("sigmoid", (a,), data, back)

    def sqrt(self, a: Tensor) -> Tensor:
        data = np.sqrt(a.data)

        def back(g):
            return (g * 0.5 / data,)

        return self._emit("sqrt", (a,), data, back)

    def log(self, a: Tensor) -> Tensor:
        def back(g):
            return (g / a.data,)

        return self._emit("log", (a,), np.log(a.data), back)

    def exp(self, a: Tensor) -> Tensor:
        data = np.exp(a.data)

        def back(g):
            return (g * data,)

        return self._emit("exp", (a,), data, back)

    def softmax(self, a: Tensor, axis: int = -1) -> Tensor:
        data = _softmax(a.data, axis)

        def back(g):
            dot = (g * data).sum(axis=axis, keepdims=True)
            return (data * (g - dot),)

        return self._emit("softmax", (a,), data, back)

    def binary_cross_entropy_with_logits(self, logits: Tensor, target) -> Tensor:
        """Mean BCE over all elements in the overflow-free form
        max(z, 0) - z*t + log1p(exp(-|z|)); gradient is (sigmoid(z) - t) / n.

        The value is computed from logits clipped to +-BCE_LOGIT_CLAMP so a
        saturated discriminator yields a bounded loss; the gradient keeps the
        analytic form at the clipped point (+-1 on the wrong side to ~1e-13),
        so the clamp bounds values without blocking gradient flow.
        """
        t = np.asarray(target, dtype=np.float64)
        z = np.clip(logits.data, -BCE_LOGIT_CLAMP, BCE_LOGIT_CLAMP)
        per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
        n = per.size
        sig = _sigmoid(z)

        def back(g):
            return (float(g) * (sig - t) / n,)

        return self._emit("bce_with_logits", (logits,), np.asarray(per.mean()), back)

    def softmax_cross_entropy(self, logits: Tensor, targets) -> Tensor:
        """Sum over rows of -log softmax(logits)[target].

        ``logits`` is (M,) with an int target or (n, M) with n int targets;
        the logits gradient is softmax minus one-hot, row for row.
        """
        z = logits.data
        squeeze = z.ndim == 1
        z2 = z.reshape(1, -1) if squeeze else z
        idx = np.atleast_1d(np.asarray(targets, dtype=np.int64))
        if z2.ndim != 2 or idx.shape != (z2.shape[0],):
            raise ValueError(f"softmax_cross_entropy shape mismatch: logits {z.shape}, targets {idx.shape}")
        if idx.min() < 0 or idx.max() >= z2.shape[1]:
            raise ValueError(f"softmax_cross_entropy target out of range 0..{z2.shape[1] - 1}")
        shifted = z2 - z2.max(axis=1, keepdims=True)
        logsumexp = np.log(np.exp(shifted).sum(axis=1))
        rows = np.arange(z2.shape[0])
        losses = logsumexp - shifted[rows, idx]
        probs = _softmax(z2, axis=1)

        def back(g):
            gz = probs.copy()
            gz[rows, idx] -= 1.0
            gz *= float(g)
            return (gz.reshape(z.shape) if squeeze else gz,)

        return self._emit("softmax_cross_entropy", (logits,), np.asarray(losses.sum()), back)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------- adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def for_param(cls, p: Tensor) -> "AdamState":
        return cls(m=np.zeros_like(p.data), v=np.zeros_like(p.data))


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    states: Sequence[AdamState],
    lr: float,
    beta1: float = 0.5,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place. Defaults beta1=0.5,
    beta2=0.999 match the GAN training configuration."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    for p, g, st in zip(params, grads, states, strict=True):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter shape {p.data.shape}")
        st.t += 1
        st.m = beta1 * st.m + (1.0 - beta1) * g
        st.v = beta2 * st.v + (1.0 - beta2) * (g * g)
        m_hat = st.m / (1.0 - beta1**st.t)
        v_hat = st.v / (1.0 - beta2**st.t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


# ----------------------------------------------------------------- gradcheck


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst_param: int
    worst_index: int
    analytic: float
    numeric: float

    def __str__(self) -> str:
        verdict = "pass" if self.passed else "FAIL"
        return (
            f"grad_check {verdict}: max rel error {self.max_rel_error:.3e} "
            f"(param {self.worst_param}, flat index {self.worst_index}, "
            f"analytic {self.analytic:+.6e}, numeric {self.numeric:+.6e})"
        )


def grad_check(
    f: Callable[[Tape, Sequence[Tensor]], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    max_per_param: int | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of a deterministic scalar function against
    central finite differences, coordinate by coordinate.

    Relative error uses max(|analytic|, |numeric|, 1e-4) as denominator so
    near-zero entries do not amplify finite-difference noise. For large
    parameter tensors ``max_per_param`` limits the sweep to that many evenly
    spaced coordinates per tensor (always including both ends).
    """
    tape = Tape()
    loss = f(tape, params)
    grads = tape.backward(loss)
    worst = GradCheckReport(True, 0.0, -1, -1, 0.0, 0.0)
    for pi, p in enumerate(params):
        analytic = grads.get(p)
        if analytic is None:
            analytic = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        if max_per_param is None or flat.size <= max_per_param:
            coords = range(flat.size)
        else:
            coords = np.unique(np.linspace(0, flat.size - 1, max_per_param).astype(int))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            hi = f(Tape(), params).item()
            flat[i] = orig - step
            lo = f(Tape(), params).item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * step)
            a = float(analytic.reshape(-1)[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-4)
            if rel > worst.max_rel_error:
                worst = GradCheckReport(rel <= tol, rel, pi, i, a, numeric)
    return worst


# --------------------------------------------------------------- checkpoints

_MAGIC = b"HGCK"
_VERSION = 1


def save_checkpoint(path, named: dict[str, Tensor | np.ndarray]) -> None:
    """Write named tensors in the documented binary layout."""
    chunks = [_MAGIC, struct.pack("<II", _VERSION, len(named))]
    for name, value in named.items():
        arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype=np.float64)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back into an ordered name -> array mapping."""
    with open(path, "rb") as fh:
        blob = fh.read()
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint {path}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != _MAGIC:
        raise CheckpointError(f"{path} is not a parameter checkpoint (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {_VERSION})")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        n_vals = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(8 * n_vals), dtype="<f8").reshape(dims).copy()
        out[name] = data
    if pos != len(view):
        raise CheckpointError(f"{path} has {len(view) - pos} trailing bytes")
    return out
