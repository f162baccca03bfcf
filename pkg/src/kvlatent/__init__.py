"""Latent-space KV cache reduction toolkit.

Library + CLI covering: decoupled-dimension attention heads (separate
query-key and value-output widths) with grouped key/value heads and an
incremental cache, rotary position embeddings in both channel layouts plus a
frequency-aware schedule and its stability analytics, strided weight surgery
on trained checkpoints, two-stage recovery training, and exact cache budget
arithmetic.
"""

import os as _os

# Honor KVL_THREADS before numpy initializes its BLAS thread pool. This must
# run ahead of any submodule import, hence its position at the very top.
_cap = _os.environ.get("KVL_THREADS")
if _cap:
    for _k in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
               "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_k, _cap)
del _os, _cap

from .autodiff import NumericsError, Tape, Tensor, grad_check  # noqa: E402
from .rope import (  # noqa: E402
    DecaySeries,
    RopeConfig,
    RotaryTable,
    apply_rope,
    band_series,
    build_rotary_table,
    decay_series,
    ideal_curve,
    make_frequencies,
    rope_similarity,
    stability_metrics,
)
from .attention import (  # noqa: E402
    AttentionWeights,
    HeadGeometry,
    KvCache,
    attend_full,
    attend_incremental,
    scale_factor,
)
from .model import (  # noqa: E402
    Model,
    ModelConfig,
    forward,
    generate_greedy,
    init_model,
    log_perplexity,
)
from .checkpoint import CheckpointError, load_model, save_model  # noqa: E402
from .surgery import (  # noqa: E402
    attach_lora,
    derive_rope_subsample,
    downsample_attention,
    downsample_model,
    surgery_report,
)
from .training import (  # noqa: E402
    TrainConfig,
    TrainingDiverged,
    adamw_step,
    cosine_lr,
    kl_loss,
    ntp_loss,
    pretrain,
    run_stage1,
    run_stage2,
    stage1_loss,
    teacher_trace,
)
from .budget import (  # noqa: E402
    CacheBudgetReport,
    budget_report,
    cache_size,
    kv_bytes_per_token,
    max_tokens,
)

__version__ = "0.1.0"
