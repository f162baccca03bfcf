"""Two-stage recovery training plus the plain pretraining loop.

Stage I is in-layer distillation: run the frozen teacher once, keep every
inter-block hidden state, feed each student block the teacher's *input* for
that layer and regress the block output onto the teacher's output with a true
per-element MSE, averaged over layers. Stage II trains the student end to end,
either on next-token cross-entropy or on KL against the teacher's output
distribution (one extra teacher forward per batch). In both stages only the
attention matrices and LoRA factors move; FFN base weights, norms and
embeddings stay bit-identical.

Optimization is AdamW with decoupled weight decay under cosine annealing from
lr down to zero. The reference hyperparameters (also the CLI defaults) are
the PAPER_* constants below.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import IO, Callable

import numpy as np

from . import autodiff as ad
from .autodiff import NumericsError, Tape, Tensor
from .model import Model, block_forward, forward
from .attention import block_causal_mask, causal_mask

__all__ = [
    "PAPER_LR_TRAIN",
    "PAPER_LR_DISTILL",
    "TrainConfig",
    "TrainingDiverged",
    "DistillTrace",
    "AdamState",
    "adamw_step",
    "cosine_lr",
    "teacher_trace",
    "stage1_loss",
    "mse_per_element",
    "ntp_loss",
    "kl_loss",
    "run_stage1",
    "run_stage2",
    "pretrain",
    "write_loss_log",
    "write_manifest",
]

# reference hyperparameters (end-to-end training vs distillation)
PAPER_LR_TRAIN = 2e-5
PAPER_LR_DISTILL = 2e-7
PAPER_BATCH = 8
PAPER_LORA_RANK = 256
PAPER_LORA_ALPHA = 512.0


class TrainingDiverged(RuntimeError):
    """Loss or weights went non-finite; message carries the step index."""


@dataclass
class TrainConfig:
    stage: str               # "one" | "two_ntp" | "two_kl"
    lr: float
    steps: int
    batch: int = PAPER_BATCH
    seq_len: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 2e-4
    weight_decay: float = 0.01
    seed: int = 0
    kl_direction: str = "teacher_student"  # reference distribution first

    def __post_init__(self):
        if self.stage not in ("one", "two_ntp", "two_kl"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.kl_direction not in ("teacher_student", "student_teacher"):
            raise ValueError(f"unknown kl_direction {self.kl_direction!r}")


@dataclass
class DistillTrace:
    """Teacher hidden states H_0..H_L for one batch (L+1 arrays [rows, d])."""

    hidden: list[np.ndarray]
    tokens: np.ndarray  # [batch, seq], the inputs that produced the trace


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def teacher_trace(teacher: Model, tokens: np.ndarray) -> DistillTrace:
    """Frozen-teacher forward retaining every inter-block hidden state."""
    tokens = np.atleast_2d(np.asarray(tokens))
    _, hiddens = forward(teacher, tokens, tape=None, collect_hidden=True)
    return DistillTrace(hidden=[h.data for h in hiddens], tokens=tokens)


def mse_per_element(pred: Tensor, target: np.ndarray, tape: Tape | None = None) -> Tensor:
    """Squared error averaged over every element."""
    diff = ad.sub(pred, target.astype(pred.data.dtype, copy=False), tape)
    return ad.mean_all(ad.mul(diff, diff, tape), tape)


def stage1_loss(trace: DistillTrace, student: Model, tape: Tape | None = None) -> Tensor:
    """Layer-averaged per-element MSE between student blocks and teacher targets.

    Every student block sees the teacher's input for that layer, so layers
    train in parallel from one trace.
    """
    cfg = student.config
    if len(trace.hidden) != cfg.n_layers + 1:
        raise ValueError(f"trace has {len(trace.hidden)} states; student wants "
                         f"{cfg.n_layers + 1}")
    batch, seq = trace.tokens.shape
    positions = np.tile(np.arange(seq), batch)
    mask = (causal_mask(seq, student.dtype) if batch == 1
            else block_causal_mask(batch, seq, student.dtype))
    total = None
    for l, blk in enumerate(student.blocks):
        pred = block_forward(blk, trace.hidden[l], cfg.geom, student.table,
                             positions, mask, tape, cfg.norm_eps)
        term = mse_per_element(pred, trace.hidden[l + 1], tape)
        total = term if total is None else ad.add(total, term, tape)
    return ad.scale(total, 1.0 / cfg.n_layers, tape)


def _predict_index(batch: int, seq: int) -> tuple[np.ndarray, np.ndarray]:
    """Row indices that predict, and a targets gather: rows [b*seq], drop last of each."""
    rows = np.concatenate([np.arange(b * seq, (b + 1) * seq - 1) for b in range(batch)])
    return rows, rows + 1


def ntp_loss(student: Model, tokens: np.ndarray, tape: Tape | None = None) -> Tensor:
    """Mean next-token cross-entropy over positions 1..len-1 of each sequence."""
    tokens = np.atleast_2d(np.asarray(tokens))
    batch, seq = tokens.shape
    if seq < 2:
        raise ValueError("next-token loss needs sequences of >= 2 tokens")
    logits = forward(student, tokens, tape)
    rows, _ = _predict_index(batch, seq)
    targets = tokens.reshape(-1)[rows + 1]
    lsm = ad.log_softmax_rows(ad.take_rows(logits, rows, tape), tape)
    picked = ad.pick_columns(lsm, targets, tape)
    return ad.scale(ad.mean_all(picked, tape), -1.0, tape)


def kl_loss(student: Model, teacher: Model, tokens: np.ndarray,
            tape: Tape | None = None, direction: str = "teacher_student") -> Tensor:
    """Mean KL divergence between output distributions at every position.

    ``teacher_student`` (default) fits the student to the teacher:
    KL(p_teacher || p_student). ``student_teacher`` uses the literal
    student-first argument order.
    """
    tokens = np.atleast_2d(np.asarray(tokens))
    t_logits = forward(teacher, tokens, tape=None).data.astype(np.float64)
    t_lsm = t_logits - t_logits.max(axis=1, keepdims=True)
    t_lsm = t_lsm - np.log(np.exp(t_lsm).sum(axis=1, keepdims=True))
    t_probs = np.exp(t_lsm)
    n = t_probs.shape[0]

    logits = forward(student, tokens, tape)
    dt = logits.data.dtype
    s_lsm = ad.log_softmax_rows(logits, tape)
    if direction == "teacher_student":
        # sum p_t (log p_t - log p_s) / n
        cross = ad.sum_all(ad.mul(s_lsm, t_probs.astype(dt), tape), tape)
        const = float((t_probs * t_lsm).sum()) / n
        return ad.add_scalar(ad.scale(cross, -1.0 / n, tape), const, tape)
    if direction == "student_teacher":
        # sum p_s (log p_s - log p_t) / n
        probs = ad.softmax_rows(logits, tape)
        ent = ad.sum_all(ad.mul(probs, s_lsm, tape), tape)
        cross = ad.sum_all(ad.mul(probs, t_lsm.astype(dt), tape), tape)
        return ad.scale(ad.sub(ent, cross, tape), 1.0 / n, tape)
    raise ValueError(f"unknown direction {direction!r}")


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------


def cosine_lr(step: int, total: int, lr_max: float) -> float:
    """Cosine annealing from lr_max (step 0) to 0 (step == total)."""
    if total <= 0:
        return lr_max
    frac = min(max(step / total, 0.0), 1.0)
    return lr_max * 0.5 * (1.0 + np.cos(np.pi * frac))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)   # id(param) -> first moment
    v: dict = field(default_factory=dict)   # id(param) -> second moment
    t: int = 0


def adamw_step(params: list[Tensor], grads: dict, state: AdamState,
               cfg: TrainConfig, lr: float) -> list[Tensor]:
    """One AdamW update with decoupled weight decay; mutates params in place.

    ``grads`` maps id(param) -> gradient array (a Tape's gradient map works);
    params without a gradient are skipped.
    """
    state.t += 1
    bc1 = 1.0 - cfg.beta1 ** state.t
    bc2 = 1.0 - cfg.beta2 ** state.t
    for p in params:
        g = grads.get(id(p))
        if g is None:
            continue
        g = g.astype(p.data.dtype, copy=False)
        m = state.m.get(id(p))
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[id(p)]
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * (g * g)
        state.m[id(p)], state.v[id(p)] = m, v
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps) + cfg.weight_decay * p.data
        p.data = p.data - p.data.dtype.type(lr) * update
        if not np.all(np.isfinite(p.data)):
            raise NumericsError("non-finite parameter after AdamW update")
    return params


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------


def _sample_batch(corpus: list[np.ndarray], batch: int,
                  rng: np.random.Generator) -> np.ndarray:
    idx = rng.integers(0, len(corpus), size=batch)
    return np.stack([corpus[i] for i in idx])


def _train(loss_fn: Callable[[np.ndarray, Tape], Tensor], params: list[Tensor],
           corpus: list[np.ndarray], cfg: TrainConfig) -> list[tuple[int, float, float]]:
    if not corpus:
        raise ValueError("training corpus is empty")
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    log = []
    for step in range(cfg.steps):
        tokens = _sample_batch(corpus, cfg.batch, rng)
        lr = cosine_lr(step, cfg.steps, cfg.lr)
        try:
            tape = Tape()
            loss = loss_fn(tokens, tape)
            loss_val = loss.item()
            tape.backward(loss)
            adamw_step(params, tape.gradients(), state, cfg, lr)
        except NumericsError as e:
            raise TrainingDiverged(f"diverged at step {step}: {e}") from e
        log.append((step, loss_val, lr))
    return log


def run_stage1(teacher: Model, student: Model, corpus: list[np.ndarray],
               cfg: TrainConfig) -> list[tuple[int, float, float]]:
    """In-layer distillation; trains the student's attention + LoRA in place."""
    if student.config.n_layers != teacher.config.n_layers:
        raise ValueError("teacher and student must have the same layer count")
    if not student.frozen_base:
        raise ValueError("stage 1 expects a surgery-produced student (frozen base)")

    def loss_fn(tokens, tape):
        return stage1_loss(teacher_trace(teacher, tokens), student, tape)

    return _train(loss_fn, student.recovery_parameters(), corpus, cfg)


def run_stage2(teacher: Model | None, student: Model, corpus: list[np.ndarray],
               cfg: TrainConfig) -> list[tuple[int, float, float]]:
    """End-to-end recovery: next-token CE (``two_ntp``) or KL (``two_kl``)."""
    if not student.frozen_base:
        raise ValueError("stage 2 expects a surgery-produced student (frozen base)")
    if cfg.stage == "two_kl":
        if teacher is None:
            raise ValueError("two_kl needs the teacher for its extra forward pass")

        def loss_fn(tokens, tape):
            return kl_loss(student, teacher, tokens, tape, cfg.kl_direction)
    else:
        def loss_fn(tokens, tape):
            return ntp_loss(student, tokens, tape)

    return _train(loss_fn, student.recovery_parameters(), corpus, cfg)


def pretrain(model: Model, corpus: list[np.ndarray],
             cfg: TrainConfig) -> list[tuple[int, float, float]]:
    """Plain next-token training of every parameter (builds the toy teacher)."""

    def loss_fn(tokens, tape):
        return ntp_loss(model, tokens, tape)

    return _train(loss_fn, model.all_parameters(), corpus, cfg)


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------


def write_loss_log(log: list[tuple[int, float, float]], out: IO[str] | str) -> None:
    """Loss log CSV: ``step,loss,lr`` with 9-significant-digit floats."""
    if isinstance(out, str):
        with open(out, "w", encoding="utf-8") as fh:
            write_loss_log(log, fh)
        return
    out.write("step,loss,lr\n")
    for step, loss, lr in log:
        out.write(f"{step},{loss:.9g},{lr:.9g}\n")


def write_manifest(cfg: TrainConfig, out: IO[str] | str, extra: dict | None = None) -> None:
    """Run manifest: config echo plus anything the caller wants on record."""
    if isinstance(out, str):
        with open(out, "w", encoding="utf-8") as fh:
            write_manifest(cfg, fh, extra)
        return
    for k in ("stage", "lr", "steps", "batch", "seq_len", "beta1", "beta2",
              "eps", "weight_decay", "seed", "kl_direction"):
        out.write(f"{k} = {getattr(cfg, k)}\n")
    for k, v in (extra or {}).items():
        out.write(f"{k} = {v}\n")
