"""Toy decoder language model: pre-norm blocks, RMS norm, SiLU-gated FFN.

The stack mirrors the LLaMA block family the surgery operates on: embedding,
L decoder blocks (attention + gated FFN, each behind an RMS norm with a
learned gain), a final norm, and an untied unembedding. Hidden states between
blocks can be collected for layer-wise distillation. FFN matrices optionally
carry additive low-rank adapters whose B factor starts at zero, so attaching
them changes nothing until training moves them.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .attention import (
    AttentionWeights,
    HeadGeometry,
    KvCache,
    attend_full,
    attend_incremental,
    block_causal_mask,
    causal_mask,
)
from .rope import RopeConfig, RotaryTable, build_rotary_table

__all__ = [
    "LoraAdapter",
    "DecoderBlockWeights",
    "ModelConfig",
    "Model",
    "init_model",
    "forward",
    "block_forward",
    "log_perplexity",
    "generate_greedy",
    "load_corpus",
]


@dataclass
class LoraAdapter:
    """Additive delta (alpha/rank) * A @ B on a frozen base matrix."""

    a: Tensor  # [in, rank]
    b: Tensor  # [rank, out], zero-initialized
    rank: int
    alpha: float

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        return self.scaling * (self.a.data @ self.b.data)


@dataclass
class DecoderBlockWeights:
    attn: AttentionWeights
    ffn_gate: Tensor  # [d_model, d_ffn]
    ffn_up: Tensor    # [d_model, d_ffn]
    ffn_down: Tensor  # [d_ffn, d_model]
    norm_attn: Tensor  # [d_model] gain
    norm_ffn: Tensor   # [d_model] gain
    lora_gate: LoraAdapter | None = None
    lora_up: LoraAdapter | None = None
    lora_down: LoraAdapter | None = None


@dataclass(frozen=True)
class ModelConfig:
    vocab: int
    n_layers: int
    geom: HeadGeometry
    d_ffn: int
    max_seq: int
    rope: RopeConfig
    norm_eps: float = 1e-6
    lora_rank: int = 0
    lora_alpha: float = 0.0
    frozen_base: bool = False  # surgery output: only attention + LoRA train

    def __post_init__(self):
        if min(self.vocab, self.n_layers, self.d_ffn, self.max_seq) < 1:
            raise ValueError(f"config extents must be positive: {self}")
        if self.rope.dim != self.geom.d_qk:
            raise ValueError(
                f"rope dim {self.rope.dim} must equal d_qk {self.geom.d_qk}")
        if self.lora_rank < 0 or (self.lora_rank > 0 and self.lora_alpha <= 0):
            raise ValueError(f"bad LoRA settings rank={self.lora_rank} "
                             f"alpha={self.lora_alpha}")

    def to_dict(self) -> dict:
        g, r = self.geom, self.rope
        return {
            "vocab": self.vocab, "n_layers": self.n_layers,
            "d_model": g.d_model, "n_heads": g.n_heads, "n_kv_heads": g.n_kv_heads,
            "d_qk": g.d_qk, "d_vo": g.d_vo,
            "d_ffn": self.d_ffn, "max_seq": self.max_seq,
            "rope_theta": r.theta, "rope_mode": r.mode, "rope_layout": r.layout,
            "rope_parent_dim": r.parent_dim, "rope_stride": r.stride,
            "rope_phase": r.phase,
            "norm_eps": self.norm_eps,
            "lora_rank": self.lora_rank, "lora_alpha": self.lora_alpha,
            "frozen_base": self.frozen_base,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        geom = HeadGeometry(d_model=d["d_model"], n_heads=d["n_heads"],
                            n_kv_heads=d["n_kv_heads"], d_qk=d["d_qk"], d_vo=d["d_vo"])
        rope = RopeConfig(dim=d["d_qk"], theta=d["rope_theta"], mode=d["rope_mode"],
                          layout=d["rope_layout"], parent_dim=d["rope_parent_dim"],
                          stride=d["rope_stride"], phase=d["rope_phase"])
        return ModelConfig(vocab=d["vocab"], n_layers=d["n_layers"], geom=geom,
                           d_ffn=d["d_ffn"], max_seq=d["max_seq"], rope=rope,
                           norm_eps=d["norm_eps"], lora_rank=d["lora_rank"],
                           lora_alpha=d["lora_alpha"],
                           frozen_base=d.get("frozen_base", False))


@dataclass
class Model:
    config: ModelConfig
    embed: Tensor          # [vocab, d_model]
    blocks: list[DecoderBlockWeights]
    final_norm: Tensor     # [d_model]
    unembed: Tensor        # [d_model, vocab]
    table: RotaryTable = field(repr=False, default=None)

    def __post_init__(self):
        if self.table is None:
            self.table = build_rotary_table(self.config.rope, self.config.max_seq)

    @property
    def dtype(self):
        return self.embed.data.dtype

    @property
    def frozen_base(self) -> bool:
        return self.config.frozen_base

    def named_parameters(self):
        """Deterministic (name, tensor) walk over every weight."""
        yield "embed", self.embed
        for i, blk in enumerate(self.blocks):
            p = f"blocks.{i}"
            yield f"{p}.attn.w_q", blk.attn.w_q
            yield f"{p}.attn.w_k", blk.attn.w_k
            yield f"{p}.attn.w_v", blk.attn.w_v
            yield f"{p}.attn.w_o", blk.attn.w_o
            yield f"{p}.ffn_gate", blk.ffn_gate
            yield f"{p}.ffn_up", blk.ffn_up
            yield f"{p}.ffn_down", blk.ffn_down
            yield f"{p}.norm_attn", blk.norm_attn
            yield f"{p}.norm_ffn", blk.norm_ffn
            for lname in ("lora_gate", "lora_up", "lora_down"):
                lora = getattr(blk, lname)
                if lora is not None:
                    yield f"{p}.{lname}.a", lora.a
                    yield f"{p}.{lname}.b", lora.b
        yield "final_norm", self.final_norm
        yield "unembed", self.unembed

    def all_parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def recovery_parameters(self) -> list[Tensor]:
        """The trainable set after surgery: attention matrices + LoRA factors."""
        params = []
        for blk in self.blocks:
            params += [blk.attn.w_q, blk.attn.w_k, blk.attn.w_v, blk.attn.w_o]
            for lname in ("lora_gate", "lora_up", "lora_down"):
                lora = getattr(blk, lname)
                if lora is not None:
                    params += [lora.a, lora.b]
        return params


def make_lora(in_dim: int, out_dim: int, rank: int, alpha: float,
              rng: np.random.Generator, dtype=np.float32) -> LoraAdapter:
    """Fresh adapter: A random at 1/sqrt(in) scale, B zero — delta starts at 0."""
    a = rng.normal(0.0, in_dim ** -0.5, size=(in_dim, rank)).astype(dtype)
    return LoraAdapter(a=Tensor(a), b=Tensor(np.zeros((rank, out_dim), dtype=dtype)),
                       rank=rank, alpha=alpha)


def init_model(config: ModelConfig, seed: int = 0, dtype=np.float32,
               init_std: float = 0.02) -> Model:
    rng = np.random.default_rng(seed)
    g = config.geom

    def mat(rows, cols):
        return Tensor(rng.normal(0.0, init_std, size=(rows, cols)).astype(dtype))

    def gain(n):
        return Tensor(np.ones(n, dtype=dtype))

    def lora(in_dim, out_dim):
        if config.lora_rank == 0:
            return None
        return make_lora(in_dim, out_dim, config.lora_rank, config.lora_alpha,
                         rng, dtype)

    blocks = []
    for _ in range(config.n_layers):
        attn = AttentionWeights(
            w_q=mat(g.d_model, g.n_heads * g.d_qk),
            w_k=mat(g.d_model, g.n_kv_heads * g.d_qk),
            w_v=mat(g.d_model, g.n_kv_heads * g.d_vo),
            w_o=mat(g.n_heads * g.d_vo, g.d_model),
        )
        blocks.append(DecoderBlockWeights(
            attn=attn,
            ffn_gate=mat(g.d_model, config.d_ffn),
            ffn_up=mat(g.d_model, config.d_ffn),
            ffn_down=mat(config.d_ffn, g.d_model),
            norm_attn=gain(g.d_model), norm_ffn=gain(g.d_model),
            lora_gate=lora(g.d_model, config.d_ffn),
            lora_up=lora(g.d_model, config.d_ffn),
            lora_down=lora(config.d_ffn, g.d_model),
        ))
    return Model(config=config,
                 embed=mat(config.vocab, g.d_model),
                 blocks=blocks,
                 final_norm=gain(g.d_model),
                 unembed=mat(g.d_model, config.vocab))


def _lora_proj(x, base, lora: LoraAdapter | None, tape):
    out = ad.matmul(x, base, tape)
    if lora is not None:
        delta = ad.scale(ad.matmul(ad.matmul(x, lora.a, tape), lora.b, tape),
                         lora.scaling, tape)
        out = ad.add(out, delta, tape)
    return out


def block_forward(blk: DecoderBlockWeights, hidden, geom: HeadGeometry,
                  table: RotaryTable, positions: np.ndarray, mask: np.ndarray,
                  tape: Tape | None = None, norm_eps: float = 1e-6) -> Tensor:
    """One pre-norm decoder block over stacked rows [n, d_model]."""
    h = hidden if isinstance(hidden, Tensor) else Tensor(hidden)
    a_in = ad.mul_rowvec(ad.rms_norm_rows(h, norm_eps, tape), blk.norm_attn, tape)
    h = ad.add(h, attend_full(a_in, blk.attn, geom, table, tape, positions, mask), tape)
    f_in = ad.mul_rowvec(ad.rms_norm_rows(h, norm_eps, tape), blk.norm_ffn, tape)
    gate = ad.silu(_lora_proj(f_in, blk.ffn_gate, blk.lora_gate, tape), tape)
    up = _lora_proj(f_in, blk.ffn_up, blk.lora_up, tape)
    down = _lora_proj(ad.mul(gate, up, tape), blk.ffn_down, blk.lora_down, tape)
    return ad.add(h, down, tape)


def forward(model: Model, tokens: np.ndarray, tape: Tape | None = None,
            collect_hidden: bool = False):
    """Logits for one sequence [seq] or a batch [batch, seq] of token ids.

    A batch runs as stacked rows under a block-diagonal causal mask, which is
    exactly equivalent to per-sequence evaluation. Returns logits
    [rows, vocab]; with ``collect_hidden`` also the list of hidden states
    H_0..H_L (H_0 = embeddings, H_l = output of block l).
    """
    tokens = np.asarray(tokens)
    squeeze = tokens.ndim == 1
    if squeeze:
        tokens = tokens[None, :]
    batch, seq = tokens.shape
    cfg = model.config
    if seq > cfg.max_seq:
        raise ValueError(f"sequence length {seq} exceeds max_seq {cfg.max_seq}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab:
        raise ValueError(f"token id out of range [0, {cfg.vocab})")

    ids = tokens.reshape(-1)
    positions = np.tile(np.arange(seq), batch)
    mask = (causal_mask(seq, model.dtype) if batch == 1
            else block_causal_mask(batch, seq, model.dtype))

    h = ad.embedding(model.embed, ids, tape)
    hiddens = [h] if collect_hidden else None
    for blk in model.blocks:
        h = block_forward(blk, h, cfg.geom, model.table, positions, mask, tape,
                          cfg.norm_eps)
        if collect_hidden:
            hiddens.append(h)
    final = ad.mul_rowvec(ad.rms_norm_rows(h, cfg.norm_eps, tape), model.final_norm, tape)
    logits = ad.matmul(final, model.unembed, tape)
    if collect_hidden:
        return logits, hiddens
    return logits


def log_perplexity(model: Model, corpus: list[np.ndarray]) -> float:
    """Mean negative log-likelihood (natural log) over all next-token positions."""
    if not corpus:
        raise ValueError("log_perplexity needs a nonempty corpus")
    total, count = 0.0, 0
    for seq in corpus:
        seq = np.asarray(seq)
        if seq.ndim != 1 or seq.size < 2:
            raise ValueError("each corpus sequence needs at least 2 tokens")
        logits = forward(model, seq).data.astype(np.float64)
        shifted = logits - logits.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1))
        rows = np.arange(seq.size - 1)
        total += float((logz[rows] - shifted[rows, seq[1:]]).sum())
        count += seq.size - 1
    return total / count


def generate_greedy(model: Model, prompt: np.ndarray, n_new: int) -> np.ndarray:
    """Greedy continuation via the incremental cache path."""
    prompt = np.asarray(prompt)
    cfg = model.config
    if prompt.ndim != 1 or prompt.size < 1:
        raise ValueError("prompt must be a nonempty 1-D token array")
    if prompt.size + n_new > cfg.max_seq:
        raise ValueError(f"prompt + n_new exceeds max_seq {cfg.max_seq}")
    cache = KvCache(cfg.n_layers, cfg.geom, dtype=model.dtype)
    out = list(prompt)
    logits = None
    for pos, tok in enumerate(prompt):
        logits = _step(model, cache, int(tok), pos)
    for _ in range(n_new):
        nxt = int(np.argmax(logits))
        out.append(nxt)
        logits = _step(model, cache, nxt, len(out) - 1)
    return np.asarray(out[prompt.size:], dtype=prompt.dtype)


def _step(model: Model, cache: KvCache, token: int, pos: int) -> np.ndarray:
    """Single-token forward through every layer using the incremental path."""
    cfg = model.config
    eps = cfg.norm_eps
    h = model.embed.data[token].copy()

    def norm_rows(v, gain):
        return ad.mul_rowvec(ad.rms_norm_rows(Tensor(v[None, :]), eps), gain).data[0]

    for li, blk in enumerate(model.blocks):
        a_in = norm_rows(h, blk.norm_attn)
        h = h + attend_incremental(a_in, cache.layers[li], blk.attn, cfg.geom,
                                   model.table, pos)
        f_in = norm_rows(h, blk.norm_ffn)
        gate = f_in @ blk.ffn_gate.data
        if blk.lora_gate is not None:
            gate = gate + blk.lora_gate.scaling * ((f_in @ blk.lora_gate.a.data) @ blk.lora_gate.b.data)
        up = f_in @ blk.ffn_up.data
        if blk.lora_up is not None:
            up = up + blk.lora_up.scaling * ((f_in @ blk.lora_up.a.data) @ blk.lora_up.b.data)
        act = ad.silu(Tensor(gate[None, :])).data[0] * up
        down = act @ blk.ffn_down.data
        if blk.lora_down is not None:
            down = down + blk.lora_down.scaling * ((act @ blk.lora_down.a.data) @ blk.lora_down.b.data)
        h = h + down
    final = norm_rows(h, model.final_norm)
    return final @ model.unembed.data


def load_corpus(path: str, seq_len: int, limit: int | None = None) -> list[np.ndarray]:
    """Byte-level tokenization of a UTF-8 text file into fixed windows.

    Non-overlapping windows of seq_len + 1 bytes (so each window offers
    seq_len next-token targets); a trailing partial window is dropped.
    """
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    width = seq_len + 1
    n = len(tokens) // width
    if n == 0:
        raise ValueError(f"corpus {path!r} too small for windows of {width} bytes")
    if limit is not None:
        n = min(n, limit)
    return [tokens[i * width:(i + 1) * width] for i in range(n)]
