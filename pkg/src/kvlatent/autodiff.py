"""Minimal dense tensor kernel with reverse-mode differentiation.

Everything the models in this package need — matmuls, row softmaxes, RMS
normalization, rotary pair rotation, embedding lookup and the handful of
elementwise ops — is implemented here as pure functions over :class:`Tensor`
plus an optional explicit :class:`Tape` handle. Storage and arithmetic are
numpy; the tape, every gradient rule and the finite-difference checker are
local so the whole reverse pass can be audited end to end.

Conventions:

* float32 is the working precision for training, float64 the mode used by
  every gradient/oracle test; a graph never mixes the two.
* Any NaN or Inf produced by an op raises :class:`NumericsError` immediately.
* Operands that are plain numpy arrays are treated as constants: no gradient
  is recorded for them (used for masks, rotation tables, teacher targets).
* A tape is single-writer; ops on disjoint tapes are safe to run concurrently.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

__all__ = [
    "NumericsError",
    "Tensor",
    "Tape",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "mul_rowvec",
    "silu",
    "softmax_rows",
    "log_softmax_rows",
    "rms_norm_rows",
    "rotate_pairs",
    "embedding",
    "slice_cols",
    "slice_rows",
    "take_rows",
    "pick_columns",
    "sum_all",
    "mean_all",
    "grad_check",
]

FLOAT_DTYPES = (np.float32, np.float64)


class NumericsError(RuntimeError):
    """Shape mismatch, dtype mix, or a non-finite value produced by an op."""


class Tensor:
    """A dense float32/float64 array participating in the autodiff graph.

    Hashing/identity semantics are intentional: gradients are keyed by object
    identity, so two tensors with equal data are still distinct graph nodes.
    """

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise NumericsError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


class Tape:
    """Ordered record of primitive ops for one reverse pass.

    ``backward`` replays the records in exact reverse order of recording;
    gradients accumulate additively into a per-tape map keyed by tensor
    identity. One backward pass per tape.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._grads: dict[int, np.ndarray] = {}
        self._tensors: dict[int, Tensor] = {}
        self._used = False

    def _record(self, out: Tensor, backward: Callable[[np.ndarray], None]) -> None:
        self._records.append((out, backward))

    def _accum(self, t, g: np.ndarray) -> None:
        if not isinstance(t, Tensor):
            return  # constant operand
        key = id(t)
        cur = self._grads.get(key)
        self._grads[key] = g if cur is None else cur + g
        self._tensors[key] = t

    def backward(self, root: Tensor) -> None:
        if self._used:
            raise NumericsError("tape already consumed by a backward pass")
        if root.data.size != 1:
            raise NumericsError(f"backward root must be scalar, got shape {root.shape}")
        self._used = True
        self._accum(root, np.ones_like(root.data))
        for out, bwd in reversed(self._records):
            g = self._grads.get(id(out))
            if g is not None:
                bwd(g)

    def grad(self, t: Tensor) -> np.ndarray | None:
        """Accumulated gradient for ``t``, or None if it never received one."""
        return self._grads.get(id(t))

    def gradients(self) -> dict[int, np.ndarray]:
        """The id(tensor)-keyed gradient map (what an optimizer consumes)."""
        return self._grads


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values produced by {op}")


def _check_dtypes(op: str, *arrs: np.ndarray) -> None:
    dts = {a.dtype for a in arrs if a.dtype in FLOAT_DTYPES}
    if len(dts) > 1:
        raise NumericsError(f"{op}: mixed dtypes {sorted(str(d) for d in dts)}")


def _out(data: np.ndarray, op: str) -> Tensor:
    _check_finite(data, op)
    t = Tensor.__new__(Tensor)
    t.data = data
    return t


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a, b, tape: Tape | None = None, transpose_b: bool = False,
           accumulate_f64: bool = False) -> Tensor:
    """2-D matrix product ``a @ b`` (or ``a @ b.T``).

    ``accumulate_f64`` runs the product in float64 and rounds back, for
    float32 graphs that want a stable weighted sum.
    """
    ad, bd = _data(a), _data(b)
    _check_dtypes("matmul", ad, bd)
    if ad.ndim != 2 or bd.ndim != 2:
        raise NumericsError(f"matmul expects 2-D operands, got {ad.shape} @ {bd.shape}")
    inner_b = bd.shape[1] if transpose_b else bd.shape[0]
    if ad.shape[1] != inner_b:
        raise NumericsError(f"matmul inner extents differ: {ad.shape} @ {bd.shape}"
                            f"{'(transposed)' if transpose_b else ''}")
    rhs = bd.T if transpose_b else bd
    if accumulate_f64 and ad.dtype == np.float32:
        data = (ad.astype(np.float64) @ rhs.astype(np.float64)).astype(np.float32)
    else:
        data = ad @ rhs
    out = _out(data, "matmul")
    if tape is not None:
        def backward(g):
            if transpose_b:
                tape._accum(a, g @ bd)
                tape._accum(b, g.T @ ad)
            else:
                tape._accum(a, g @ bd.T)
                tape._accum(b, ad.T @ g)
        tape._record(out, backward)
    return out


def _binary(op_name, a, b, fwd, bwd_a, bwd_b, tape):
    ad, bd = _data(a), _data(b)
    _check_dtypes(op_name, ad, bd)
    if ad.shape != bd.shape:
        raise NumericsError(f"{op_name}: shape mismatch {ad.shape} vs {bd.shape}")
    out = _out(fwd(ad, bd), op_name)
    if tape is not None:
        def backward(g):
            tape._accum(a, bwd_a(g, ad, bd))
            tape._accum(b, bwd_b(g, ad, bd))
        tape._record(out, backward)
    return out


def add(a, b, tape: Tape | None = None) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g, tape)


def sub(a, b, tape: Tape | None = None) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g, tape)


def mul(a, b, tape: Tape | None = None) -> Tensor:
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x, tape)


def scale(a, s: float, tape: Tape | None = None) -> Tensor:
    ad = _data(a)
    out = _out(ad * ad.dtype.type(s), "scale")
    if tape is not None:
        def backward(g):
            tape._accum(a, g * ad.dtype.type(s))
        tape._record(out, backward)
    return out


def add_scalar(a, s: float, tape: Tape | None = None) -> Tensor:
    ad = _data(a)
    out = _out(ad + ad.dtype.type(s), "add_scalar")
    if tape is not None:
        def backward(g):
            tape._accum(a, g)
        tape._record(out, backward)
    return out


def mul_rowvec(a, v, tape: Tape | None = None) -> Tensor:
    """Elementwise multiply each row of ``a`` [n, d] by the vector ``v`` [d]."""
    ad, vd = _data(a), _data(v)
    _check_dtypes("mul_rowvec", ad, vd)
    if ad.ndim != 2 or vd.shape != (ad.shape[1],):
        raise NumericsError(f"mul_rowvec: {ad.shape} rows by vector {vd.shape}")
    out = _out(ad * vd, "mul_rowvec")
    if tape is not None:
        def backward(g):
            tape._accum(a, g * vd)
            tape._accum(v, (g * ad).sum(axis=0))
        tape._record(out, backward)
    return out


def silu(a, tape: Tape | None = None) -> Tensor:
    ad = _data(a)
    with np.errstate(over="ignore"):  # exp(-x) for very negative x: sigmoid -> 0
        sig = 1.0 / (1.0 + np.exp(-ad))
    sig = sig.astype(ad.dtype)
    out = _out(ad * sig, "silu")
    if tape is not None:
        def backward(g):
            tape._accum(a, g * (sig * (1.0 + ad * (1.0 - sig))))
        tape._record(out, backward)
    return out


def softmax_rows(a, tape: Tape | None = None) -> Tensor:
    """Row-wise softmax over the last axis, computed with max-subtraction."""
    ad = _data(a)
    if ad.ndim < 1 or ad.shape[-1] < 1:
        raise NumericsError(f"softmax_rows: bad shape {ad.shape}")
    shifted = ad - ad.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    out = _out(p.astype(ad.dtype), "softmax_rows")
    if tape is not None:
        pd = out.data
        def backward(g):
            dot = (g * pd).sum(axis=-1, keepdims=True)
            tape._accum(a, pd * (g - dot))
        tape._record(out, backward)
    return out


def log_softmax_rows(a, tape: Tape | None = None) -> Tensor:
    ad = _data(a)
    if ad.ndim < 1 or ad.shape[-1] < 1:
        raise NumericsError(f"log_softmax_rows: bad shape {ad.shape}")
    shifted = ad - ad.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = _out((shifted - lse).astype(ad.dtype), "log_softmax_rows")
    if tape is not None:
        p = np.exp(out.data)
        def backward(g):
            tape._accum(a, g - p * g.sum(axis=-1, keepdims=True))
        tape._record(out, backward)
    return out


def rms_norm_rows(a, eps: float = 1e-6, tape: Tape | None = None) -> Tensor:
    """Rows scaled to unit root-mean-square: x / sqrt(mean(x^2) + eps)."""
    ad = _data(a)
    if ad.ndim != 2:
        raise NumericsError(f"rms_norm_rows expects 2-D, got {ad.shape}")
    n = ad.shape[1]
    ms = (ad * ad).mean(axis=1, keepdims=True)
    inv = (1.0 / np.sqrt(ms + eps)).astype(ad.dtype)
    out = _out(ad * inv, "rms_norm_rows")
    if tape is not None:
        def backward(g):
            # d/dx [x * inv]: inv * (g - x * <g, x> * inv^2 / n)
            dot = (g * ad).sum(axis=1, keepdims=True)
            tape._accum(a, inv * (g - ad * (dot * inv * inv / n)))
        tape._record(out, backward)
    return out


def rotate_pairs(a, cos, sin, layout: str = "half_split",
                 tape: Tape | None = None) -> Tensor:
    """Rotate channel pairs of each row of ``a`` [n, d] by per-row angles.

    ``cos``/``sin`` are [n, d/2] constants. ``adjacent`` pairs channels
    (2j, 2j+1); ``half_split`` pairs (j, j+d/2). The inverse rotation (sin
    negated) is its own gradient, so backward is another rotation.
    """
    ad = _data(a)
    c, s = np.asarray(cos), np.asarray(sin)
    if ad.ndim != 2 or ad.shape[1] % 2 != 0:
        raise NumericsError(f"rotate_pairs: rows must have even width, got {ad.shape}")
    half = ad.shape[1] // 2
    if c.shape != (ad.shape[0], half) or s.shape != c.shape:
        raise NumericsError(f"rotate_pairs: tables {c.shape} do not match rows {ad.shape}")
    if layout not in ("adjacent", "half_split"):
        raise NumericsError(f"rotate_pairs: unknown layout {layout!r}")
    c = c.astype(ad.dtype, copy=False)
    s = s.astype(ad.dtype, copy=False)
    out = _out(_rotate(ad, c, s, layout), "rotate_pairs")
    if tape is not None:
        def backward(g):
            tape._accum(a, _rotate(g, c, -s, layout))
        tape._record(out, backward)
    return out


def _rotate(x: np.ndarray, c: np.ndarray, s: np.ndarray, layout: str) -> np.ndarray:
    out = np.empty_like(x)
    if layout == "adjacent":
        x1, x2 = x[:, 0::2], x[:, 1::2]
        out[:, 0::2] = x1 * c - x2 * s
        out[:, 1::2] = x2 * c + x1 * s
    else:
        half = x.shape[1] // 2
        x1, x2 = x[:, :half], x[:, half:]
        out[:, :half] = x1 * c - x2 * s
        out[:, half:] = x2 * c + x1 * s
    return out


def embedding(table, ids, tape: Tape | None = None) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add gradient into the table."""
    td = _data(table)
    idx = np.asarray(ids)
    if td.ndim != 2:
        raise NumericsError(f"embedding table must be 2-D, got {td.shape}")
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise NumericsError("embedding ids must be a 1-D integer array")
    if idx.size and (idx.min() < 0 or idx.max() >= td.shape[0]):
        raise NumericsError(f"embedding id out of range [0, {td.shape[0]})")
    out = _out(td[idx], "embedding")
    if tape is not None:
        def backward(g):
            acc = np.zeros_like(td)
            np.add.at(acc, idx, g)
            tape._accum(table, acc)
        tape._record(out, backward)
    return out


def slice_cols(a, lo: int, hi: int, tape: Tape | None = None) -> Tensor:
    ad = _data(a)
    if ad.ndim != 2 or not (0 <= lo < hi <= ad.shape[1]):
        raise NumericsError(f"slice_cols [{lo}:{hi}] of shape {ad.shape}")
    out = _out(ad[:, lo:hi], "slice_cols")
    if tape is not None:
        def backward(g):
            acc = np.zeros_like(ad)
            acc[:, lo:hi] = g
            tape._accum(a, acc)
        tape._record(out, backward)
    return out


def slice_rows(a, lo: int, hi: int, tape: Tape | None = None) -> Tensor:
    ad = _data(a)
    if ad.ndim != 2 or not (0 <= lo < hi <= ad.shape[0]):
        raise NumericsError(f"slice_rows [{lo}:{hi}] of shape {ad.shape}")
    out = _out(ad[lo:hi, :], "slice_rows")
    if tape is not None:
        def backward(g):
            acc = np.zeros_like(ad)
            acc[lo:hi, :] = g
            tape._accum(a, acc)
        tape._record(out, backward)
    return out


def take_rows(a, idx, tape: Tape | None = None) -> Tensor:
    """Select rows by an integer index array (rows may repeat)."""
    ad = _data(a)
    ix = np.asarray(idx)
    if ad.ndim != 2 or ix.ndim != 1 or not np.issubdtype(ix.dtype, np.integer):
        raise NumericsError("take_rows expects a 2-D tensor and 1-D integer index")
    out = _out(ad[ix], "take_rows")
    if tape is not None:
        def backward(g):
            acc = np.zeros_like(ad)
            np.add.at(acc, ix, g)
            tape._accum(a, acc)
        tape._record(out, backward)
    return out


def pick_columns(a, idx, tape: Tape | None = None) -> Tensor:
    """Per-row column gather: out[i] = a[i, idx[i]]."""
    ad = _data(a)
    ix = np.asarray(idx)
    if ad.ndim != 2 or ix.shape != (ad.shape[0],):
        raise NumericsError(f"pick_columns: index {ix.shape} for tensor {ad.shape}")
    rows = np.arange(ad.shape[0])
    out = _out(ad[rows, ix], "pick_columns")
    if tape is not None:
        def backward(g):
            acc = np.zeros_like(ad)
            acc[rows, ix] = g
            tape._accum(a, acc)
        tape._record(out, backward)
    return out


def sum_all(a, tape: Tape | None = None) -> Tensor:
    """Sum of all elements, accumulated in float64, returned in the input dtype."""
    ad = _data(a)
    out = _out(np.asarray(ad.sum(dtype=np.float64), dtype=ad.dtype), "sum_all")
    if tape is not None:
        def backward(g):
            tape._accum(a, np.full_like(ad, g.reshape(())))
        tape._record(out, backward)
    return out


def mean_all(a, tape: Tape | None = None) -> Tensor:
    ad = _data(a)
    out = _out(np.asarray(ad.mean(dtype=np.float64), dtype=ad.dtype), "mean_all")
    if tape is not None:
        inv_n = 1.0 / ad.size
        def backward(g):
            tape._accum(a, np.full_like(ad, g.reshape(()) * inv_n))
        tape._record(out, backward)
    return out


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[Tensor, Tape | None], Tensor], x: Tensor,
               eps: float = 1e-5, rel_floor: float = 1e-6) -> float:
    """Max relative error between tape gradient and central finite differences.

    ``f(x, tape)`` must return a scalar tensor and be differentiable at ``x``;
    float64 only. Per-coordinate relative error uses
    ``|a - b| / max(|a|, |b|, rel_floor)``.
    """
    if x.dtype != np.float64:
        raise NumericsError("grad_check requires a float64 input")
    if not (1e-6 <= eps <= 1e-3):
        raise NumericsError(f"grad_check eps {eps} outside [1e-6, 1e-3]")
    base = Tensor(np.ascontiguousarray(x.data).copy())
    tape = Tape()
    y = f(base, tape)
    if y.data.size != 1:
        raise NumericsError("grad_check: f must be scalar-valued")
    tape.backward(y)
    g = tape.grad(base)
    analytic = (np.zeros_like(base.data) if g is None else g).reshape(-1)

    flat = base.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(Tensor(base.data.copy()), None).item()
        flat[i] = orig - eps
        lo = f(Tensor(base.data.copy()), None).item()
        flat[i] = orig
        numeric = (hi - lo) / (2.0 * eps)
        a = float(analytic[i])
        err = abs(a - numeric) / max(abs(a), abs(numeric), rel_floor)
        worst = max(worst, err)
    return worst
