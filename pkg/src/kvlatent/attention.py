"""Masked self-attention with decoupled query-key / value-output widths.

A head geometry carries five independent extents: the model width, the query
head count, the shared key/value head count, and the two per-head widths
d_qk (scores live in this space, rotary embedding applies here) and d_vo
(the value/output space, what the cache stores besides keys). Nothing ties
n_heads * d_qk or n_heads * d_vo to d_model.

Two execution paths must agree: ``attend_full`` runs a whole sequence through
the tape-differentiable primitives (training), ``attend_incremental`` appends
one token to a cache of already-rotated keys and raw values (decoding). Keys
are stored post-rotation, so cache reads never re-rotate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .rope import RotaryTable

__all__ = [
    "HeadGeometry",
    "AttentionWeights",
    "KvCache",
    "LayerKvCache",
    "scale_factor",
    "causal_mask",
    "block_causal_mask",
    "attend_full",
    "attend_incremental",
]

# Finite stand-in for -inf: exp(-1e9 - rowmax) underflows to exactly 0 in both
# f32 and f64, so masking is exact without poisoning the finiteness checks.
MASK_VALUE = -1e9


@dataclass(frozen=True)
class HeadGeometry:
    """Shape of one attention stack; d_qk and d_vo vary independently."""

    d_model: int
    n_heads: int
    n_kv_heads: int
    d_qk: int
    d_vo: int

    def __post_init__(self):
        if min(self.d_model, self.n_heads, self.n_kv_heads) < 1:
            raise ValueError(f"geometry extents must be positive: {self}")
        if self.n_heads % self.n_kv_heads != 0:
            raise ValueError(
                f"n_heads {self.n_heads} not divisible by n_kv_heads {self.n_kv_heads}")
        if self.d_qk < 2 or self.d_qk % 2 != 0:
            raise ValueError(f"d_qk must be even and >= 2, got {self.d_qk}")
        if self.d_vo < 2:
            raise ValueError(f"d_vo must be >= 2, got {self.d_vo}")

    def kv_head_of(self, head: int) -> int:
        """Key/value head serving query head ``head`` (block-contiguous map)."""
        return head * self.n_kv_heads // self.n_heads


@dataclass
class AttentionWeights:
    """Projection matrices; per-head slices are contiguous column blocks."""

    w_q: Tensor  # [d_model, n_heads * d_qk]
    w_k: Tensor  # [d_model, n_kv_heads * d_qk]
    w_v: Tensor  # [d_model, n_kv_heads * d_vo]
    w_o: Tensor  # [n_heads * d_vo, d_model]

    def check(self, geom: HeadGeometry) -> None:
        expect = {
            "w_q": (geom.d_model, geom.n_heads * geom.d_qk),
            "w_k": (geom.d_model, geom.n_kv_heads * geom.d_qk),
            "w_v": (geom.d_model, geom.n_kv_heads * geom.d_vo),
            "w_o": (geom.n_heads * geom.d_vo, geom.d_model),
        }
        for name, shape in expect.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ValueError(f"{name} has shape {got}, geometry wants {shape}")


def scale_factor(geom: HeadGeometry) -> float:
    """Score scaling 1/sqrt(d_qk) — the query-key width, not d_vo or d_model."""
    return 1.0 / np.sqrt(geom.d_qk)


def causal_mask(seq: int, dtype=np.float32) -> np.ndarray:
    """Additive mask: 0 on and below the diagonal, MASK_VALUE above."""
    m = np.zeros((seq, seq), dtype=dtype)
    m[np.triu_indices(seq, k=1)] = MASK_VALUE
    return m


def block_causal_mask(batch: int, seq: int, dtype=np.float32) -> np.ndarray:
    """Causal mask per sequence, MASK_VALUE across sequence boundaries.

    Lets a batch run as one [batch*seq, d] row block with no cross-talk.
    """
    m = np.full((batch * seq, batch * seq), MASK_VALUE, dtype=dtype)
    one = causal_mask(seq, dtype)
    for b in range(batch):
        m[b * seq:(b + 1) * seq, b * seq:(b + 1) * seq] = one
    return m


def attend_full(hidden, w: AttentionWeights, geom: HeadGeometry, table: RotaryTable,
                tape: Tape | None = None, positions: np.ndarray | None = None,
                mask: np.ndarray | None = None) -> Tensor:
    """Causal attention over a whole sequence of hidden rows [seq, d_model].

    Queries are rotated at their own positions, keys at theirs; scores are
    scaled by 1/sqrt(d_qk); the value-weighted sum accumulates in float64.
    ``positions``/``mask`` default to a single sequence 0..seq-1; training
    passes a block-diagonal mask to run a batch as stacked rows.
    """
    h = hidden if isinstance(hidden, Tensor) else Tensor(hidden)
    if h.data.ndim != 2 or h.shape[1] != geom.d_model:
        raise ValueError(f"hidden has shape {h.shape}, want [seq, {geom.d_model}]")
    w.check(geom)
    seq = h.shape[0]
    if positions is None:
        positions = np.arange(seq)
    if mask is None:
        mask = causal_mask(seq, h.data.dtype)
    if table.config.dim != geom.d_qk:
        raise ValueError(f"rotary table dim {table.config.dim} != d_qk {geom.d_qk}")
    positions = np.asarray(positions)
    if positions.max() >= table.max_pos:
        raise ValueError(f"position {positions.max()} outside rotary table range "
                         f"[0, {table.max_pos})")
    cos, sin = table.cos[positions], table.sin[positions]
    layout = table.config.layout
    inv_scale = scale_factor(geom)

    # one K/V projection per kv head, shared by its query-head group
    ks, vs = [], []
    for g in range(geom.n_kv_heads):
        k = ad.matmul(h, ad.slice_cols(w.w_k, g * geom.d_qk, (g + 1) * geom.d_qk, tape), tape)
        ks.append(ad.rotate_pairs(k, cos, sin, layout, tape))
        vs.append(ad.matmul(h, ad.slice_cols(w.w_v, g * geom.d_vo, (g + 1) * geom.d_vo, tape), tape))

    out = None
    for i in range(geom.n_heads):
        g = geom.kv_head_of(i)
        q = ad.matmul(h, ad.slice_cols(w.w_q, i * geom.d_qk, (i + 1) * geom.d_qk, tape), tape)
        q = ad.rotate_pairs(q, cos, sin, layout, tape)
        scores = ad.scale(ad.matmul(q, ks[g], tape, transpose_b=True), inv_scale, tape)
        probs = ad.softmax_rows(ad.add(scores, mask, tape), tape)
        ctx = ad.matmul(probs, vs[g], tape, accumulate_f64=True)
        head_out = ad.matmul(
            ctx, ad.slice_rows(w.w_o, i * geom.d_vo, (i + 1) * geom.d_vo, tape), tape)
        out = head_out if out is None else ad.add(out, head_out, tape)
    return out


# ---------------------------------------------------------------------------
# incremental path
# ---------------------------------------------------------------------------


class LayerKvCache:
    """Per-layer cache: rotated keys and values for each kv head.

    Append-only; storage doubles geometrically so appends are amortized O(1).
    """

    def __init__(self, geom: HeadGeometry, dtype=np.float32, capacity: int = 16):
        self.geom = geom
        self.len = 0
        self._keys = np.empty((geom.n_kv_heads, capacity, geom.d_qk), dtype=dtype)
        self._values = np.empty((geom.n_kv_heads, capacity, geom.d_vo), dtype=dtype)

    @property
    def keys(self) -> np.ndarray:
        """[n_kv_heads, len, d_qk], rotated at their own positions."""
        return self._keys[:, :self.len]

    @property
    def values(self) -> np.ndarray:
        return self._values[:, :self.len]

    def append(self, k_rot: np.ndarray, v: np.ndarray) -> None:
        if self.len == self._keys.shape[1]:
            self._keys = np.concatenate([self._keys, np.empty_like(self._keys)], axis=1)
            self._values = np.concatenate([self._values, np.empty_like(self._values)], axis=1)
        self._keys[:, self.len] = k_rot
        self._values[:, self.len] = v
        self.len += 1


class KvCache:
    """Whole-model cache: one LayerKvCache per decoder layer."""

    def __init__(self, n_layers: int, geom: HeadGeometry, dtype=np.float32):
        self.layers = [LayerKvCache(geom, dtype) for _ in range(n_layers)]

    @property
    def len(self) -> int:
        return self.layers[0].len if self.layers else 0


def attend_incremental(h: np.ndarray, cache: LayerKvCache, w: AttentionWeights,
                       geom: HeadGeometry, table: RotaryTable, pos: int) -> np.ndarray:
    """One-token attention against the cached prefix; appends this token.

    ``pos`` must equal the current cache length (append-only contract);
    output equals the last row of attend_full over the full prefix.
    """
    if pos != cache.len:
        raise ValueError(f"cache corruption: appending position {pos} to a cache "
                         f"of length {cache.len}")
    h = np.asarray(h)
    if h.shape != (geom.d_model,):
        raise ValueError(f"token hidden state has shape {h.shape}, want ({geom.d_model},)")
    w.check(geom)
    if not (0 <= pos < table.max_pos):
        raise ValueError(f"position {pos} outside rotary table range [0, {table.max_pos})")
    cos, sin = table.cos[pos:pos + 1], table.sin[pos:pos + 1]
    layout = table.config.layout

    def rot(row: np.ndarray) -> np.ndarray:
        return ad.rotate_pairs(Tensor(row[None, :]), cos, sin, layout).data[0]

    k_new = np.stack([
        rot(h @ w.w_k.data[:, g * geom.d_qk:(g + 1) * geom.d_qk])
        for g in range(geom.n_kv_heads)])
    v_new = np.stack([
        h @ w.w_v.data[:, g * geom.d_vo:(g + 1) * geom.d_vo]
        for g in range(geom.n_kv_heads)])
    cache.append(k_new, v_new)

    inv_scale = scale_factor(geom)
    out = np.zeros(geom.d_model, dtype=h.dtype)
    keys, values = cache.keys, cache.values
    for i in range(geom.n_heads):
        g = geom.kv_head_of(i)
        q = rot(h @ w.w_q.data[:, i * geom.d_qk:(i + 1) * geom.d_qk])
        scores = (keys[g] @ q) * inv_scale
        scores -= scores.max()
        e = np.exp(scores)
        probs = e / e.sum()
        ctx = (probs.astype(np.float64) @ values[g].astype(np.float64)).astype(h.dtype)
        out = out + ctx @ w.w_o.data[i * geom.d_vo:(i + 1) * geom.d_vo, :]
    return out
