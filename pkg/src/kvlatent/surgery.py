"""Weight surgery: strided head-channel selection on a trained checkpoint.

Shrinking a head is pure selection, never arithmetic: keep every stride-th
column of each per-head Q/K block and each V block, and the matching rows of
each O block, e.g. ``W[:, (i-1)*d : i*d : 4]`` to cut a head width by three
quarters. Channels within a head are rotationally symmetric so any balanced
subset retains the information; once rotary embeddings are involved the
selection must co-select both channels of every rotation pair, which uniform
striding on the half-split layout does automatically.

The reduced model's rotary schedule is either the matching strided slice of
the parent schedule (``subsampled`` — preserves exact init equivalence:
rotation and selection commute) or the frequency-aware schedule (the
stability fix, the default for training runs). An SVD-based initialization is
deliberately not offered: the factorization does not commute with the
position-dependent rotations, so it cannot preserve attention scores here.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .attention import AttentionWeights, HeadGeometry
from .autodiff import Tensor
from .model import DecoderBlockWeights, Model, ModelConfig, make_lora
from .rope import RopeConfig

__all__ = [
    "downsample_attention",
    "derive_rope_subsample",
    "downsample_model",
    "attach_lora",
    "merge_lora",
    "unmerge_lora",
    "count_parameters",
    "surgery_report",
    "retained_indices",
]


def _strides(geom_old: HeadGeometry, geom_new: HeadGeometry) -> tuple[int, int]:
    if (geom_old.d_model, geom_old.n_heads, geom_old.n_kv_heads) != \
            (geom_new.d_model, geom_new.n_heads, geom_new.n_kv_heads):
        raise ValueError("surgery changes only head widths; "
                         f"{geom_old} -> {geom_new} changes counts")
    if geom_old.d_qk % geom_new.d_qk != 0 or geom_old.d_vo % geom_new.d_vo != 0:
        raise ValueError(f"non-integer stride: ({geom_old.d_qk},{geom_old.d_vo}) -> "
                         f"({geom_new.d_qk},{geom_new.d_vo})")
    return geom_old.d_qk // geom_new.d_qk, geom_old.d_vo // geom_new.d_vo


def retained_indices(width_old: int, width_new: int, strategy: str = "strided",
                     rng: np.random.Generator | None = None) -> np.ndarray:
    """Within-head channel indices kept by the surgery, sorted ascending."""
    stride = width_old // width_new
    if strategy == "strided":
        return np.arange(0, width_old, stride)
    if strategy == "random":
        if rng is None:
            raise ValueError("random selection needs a seeded generator")
        return np.sort(rng.choice(width_old, size=width_new, replace=False))
    raise ValueError(f"unknown selection strategy {strategy!r}")


def downsample_attention(w: AttentionWeights, geom_old: HeadGeometry,
                         geom_new: HeadGeometry, strategy: str = "strided",
                         rng: np.random.Generator | None = None,
                         vo_indices: np.ndarray | None = None) -> AttentionWeights:
    """Select head channels per the stride implied by the two geometries.

    ``strategy="random"`` applies to the V/O channels only; Q/K stays uniform
    so rotation pairs remain co-selected and the subsampled rotary schedule
    stays expressible. ``vo_indices`` overrides the V/O selection (used to
    share one random draw across layers).
    """
    _strides(geom_old, geom_new)
    qk_idx = retained_indices(geom_old.d_qk, geom_new.d_qk, "strided")
    if vo_indices is not None:
        vo_idx = np.asarray(vo_indices)
        if vo_idx.size != geom_new.d_vo:
            raise ValueError(f"{vo_idx.size} vo indices for width {geom_new.d_vo}")
    else:
        vo_idx = retained_indices(geom_old.d_vo, geom_new.d_vo, strategy, rng)

    def take_cols(t: Tensor, n_blocks: int, width: int, idx: np.ndarray) -> Tensor:
        blocks = t.data.reshape(t.data.shape[0], n_blocks, width)
        return Tensor(np.ascontiguousarray(blocks[:, :, idx]).reshape(
            t.data.shape[0], n_blocks * idx.size))

    def take_rows(t: Tensor, n_blocks: int, width: int, idx: np.ndarray) -> Tensor:
        blocks = t.data.reshape(n_blocks, width, t.data.shape[1])
        return Tensor(np.ascontiguousarray(blocks[:, idx, :]).reshape(
            n_blocks * idx.size, t.data.shape[1]))

    out = AttentionWeights(
        w_q=take_cols(w.w_q, geom_old.n_heads, geom_old.d_qk, qk_idx),
        w_k=take_cols(w.w_k, geom_old.n_kv_heads, geom_old.d_qk, qk_idx),
        w_v=take_cols(w.w_v, geom_old.n_kv_heads, geom_old.d_vo, vo_idx),
        w_o=take_rows(w.w_o, geom_old.n_heads, geom_old.d_vo, vo_idx),
    )
    out.check(geom_new)
    return out


def derive_rope_subsample(rope_old: RopeConfig, stride_qk: int) -> RopeConfig:
    """Rotary schedule a strided-downsampled head inherits from its parent.

    Keeps frequencies theta_1, theta_{1+stride}, ... so that for any vector,
    rotating then selecting equals selecting then rotating, bit-exactly.
    Only the half-split layout survives channel striding (adjacent pairs sit
    on consecutive channels and any stride > 1 would split them).
    """
    if stride_qk == 1:
        return rope_old
    if rope_old.layout != "half_split":
        raise ValueError("channel striding splits adjacent-layout pairs; "
                         "only half_split supports subsampling")
    if rope_old.mode == "standard":
        parent_dim, base_stride, phase = rope_old.dim, 1, 0
    elif rope_old.mode == "subsampled":
        parent_dim, base_stride, phase = rope_old.parent_dim, rope_old.stride, rope_old.phase
    else:
        raise ValueError(f"cannot subsample a {rope_old.mode} schedule: its "
                         "frequencies are not a strided slice of any standard schedule")
    return RopeConfig(dim=rope_old.dim // stride_qk, theta=rope_old.theta,
                      mode="subsampled", layout=rope_old.layout,
                      parent_dim=parent_dim, stride=base_stride * stride_qk,
                      phase=phase)


def downsample_model(model: Model, d_qk: int, d_vo: int,
                     rope_mode: str = "frequency_aware",
                     strategy: str = "strided", seed: int = 0) -> Model:
    """New model with reduced head widths, weights selected from ``model``.

    ``rope_mode`` picks the reduced schedule: ``subsampled`` (exact init
    equivalence) or ``frequency_aware`` (stability fix, default). Embeddings,
    FFN and norm weights are copied; the base is marked frozen.
    """
    cfg = model.config
    geom_new = replace(cfg.geom, d_qk=d_qk, d_vo=d_vo)
    stride_qk, _ = _strides(cfg.geom, geom_new)
    if rope_mode == "subsampled":
        rope_new = derive_rope_subsample(cfg.rope, stride_qk)
    elif rope_mode == "frequency_aware":
        rope_new = RopeConfig(dim=d_qk, theta=cfg.rope.theta,
                              mode="frequency_aware", layout=cfg.rope.layout)
    else:
        raise ValueError(f"rope_mode must be subsampled or frequency_aware, "
                         f"got {rope_mode!r}")

    rng = np.random.default_rng(seed) if strategy == "random" else None
    vo_idx = retained_indices(cfg.geom.d_vo, d_vo, strategy, rng)
    blocks = []
    for blk in model.blocks:
        blocks.append(DecoderBlockWeights(
            attn=downsample_attention(blk.attn, cfg.geom, geom_new,
                                      vo_indices=vo_idx),
            ffn_gate=Tensor(blk.ffn_gate.data.copy()),
            ffn_up=Tensor(blk.ffn_up.data.copy()),
            ffn_down=Tensor(blk.ffn_down.data.copy()),
            norm_attn=Tensor(blk.norm_attn.data.copy()),
            norm_ffn=Tensor(blk.norm_ffn.data.copy()),
        ))
    cfg_new = replace(cfg, geom=geom_new, rope=rope_new, frozen_base=True,
                      lora_rank=0, lora_alpha=0.0)
    return Model(config=cfg_new,
                 embed=Tensor(model.embed.data.copy()),
                 blocks=blocks,
                 final_norm=Tensor(model.final_norm.data.copy()),
                 unembed=Tensor(model.unembed.data.copy()))


def attach_lora(model: Model, rank: int, alpha: float, seed: int = 0) -> Model:
    """Attach adapters to gate/up/down of every layer; output is unchanged.

    B factors start at zero so the adapted model is bit-identical to the base
    until training moves them. Marks the base frozen.
    """
    if rank < 1:
        raise ValueError(f"LoRA rank must be >= 1, got {rank}")
    if model.config.lora_rank > 0:
        raise ValueError("LoRA adapters already attached")
    rng = np.random.default_rng(seed)
    cfg = model.config
    d, f = cfg.geom.d_model, cfg.d_ffn
    for blk in model.blocks:
        blk.lora_gate = make_lora(d, f, rank, alpha, rng, model.dtype)
        blk.lora_up = make_lora(d, f, rank, alpha, rng, model.dtype)
        blk.lora_down = make_lora(f, d, rank, alpha, rng, model.dtype)
    model.config = replace(cfg, lora_rank=rank, lora_alpha=float(alpha),
                           frozen_base=True)
    return model


def merge_lora(model: Model) -> None:
    """Fold every adapter delta into its base matrix (delta stays attached)."""
    for blk in model.blocks:
        for base_name, lname in (("ffn_gate", "lora_gate"), ("ffn_up", "lora_up"),
                                 ("ffn_down", "lora_down")):
            lora = getattr(blk, lname)
            if lora is not None:
                base = getattr(blk, base_name)
                base.data = base.data + lora.delta().astype(base.data.dtype)


def unmerge_lora(model: Model) -> None:
    """Undo :func:`merge_lora`."""
    for blk in model.blocks:
        for base_name, lname in (("ffn_gate", "lora_gate"), ("ffn_up", "lora_up"),
                                 ("ffn_down", "lora_down")):
            lora = getattr(blk, lname)
            if lora is not None:
                base = getattr(blk, base_name)
                base.data = base.data - lora.delta().astype(base.data.dtype)


def count_parameters(model: Model) -> dict:
    total = sum(t.data.size for _, t in model.named_parameters())
    attn = sum(t.data.size for n, t in model.named_parameters() if ".attn." in n)
    lora = sum(t.data.size for n, t in model.named_parameters() if ".lora_" in n)
    return {"total": total, "attention": attn, "lora": lora,
            "trainable": attn + lora if model.frozen_base else total}


def surgery_report(old: Model, new: Model, strategy: str = "strided",
                   seed: int = 0) -> dict:
    """JSON-ready description of what the surgery kept and what it costs.

    ``strategy``/``seed`` must match the downsample_model call so the V/O
    index recomputation reflects the actual selection.
    """
    go, gn = old.config.geom, new.config.geom
    rng = np.random.default_rng(seed) if strategy == "random" else None
    return {
        "old_geometry": {"d_model": go.d_model, "n_heads": go.n_heads,
                         "n_kv_heads": go.n_kv_heads, "d_qk": go.d_qk, "d_vo": go.d_vo},
        "new_geometry": {"d_model": gn.d_model, "n_heads": gn.n_heads,
                         "n_kv_heads": gn.n_kv_heads, "d_qk": gn.d_qk, "d_vo": gn.d_vo},
        "rope_mode": new.config.rope.mode,
        "selection_strategy": strategy,
        "selection_seed": seed,
        "retained_qk_indices": retained_indices(go.d_qk, gn.d_qk).tolist(),
        "retained_vo_indices": retained_indices(go.d_vo, gn.d_vo, strategy, rng).tolist(),
        "lora_rank": new.config.lora_rank,
        "lora_alpha": new.config.lora_alpha,
        "parameters_before": count_parameters(old),
        "parameters_after": count_parameters(new),
        "kv_channels_per_token_before": go.n_kv_heads * (go.d_qk + go.d_vo),
        "kv_channels_per_token_after": gn.n_kv_heads * (gn.d_qk + gn.d_vo),
    }
