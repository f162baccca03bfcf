"""Command-line surface: curve generation, surgery, training, eval, budgets.

Every command is deterministic given its ``--seed``: identical invocations
produce byte-identical artifacts. All CSVs carry a header row. Exit codes:
0 success, 2 usage error, 3 numeric divergence, 4 I/O or format error.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import budget as bd
from . import rope as rp
from .attention import HeadGeometry
from .autodiff import NumericsError
from .checkpoint import CheckpointError, load_model, save_model
from .model import Model, ModelConfig, init_model, load_corpus, log_perplexity
from .rope import RopeConfig
from .surgery import attach_lora, downsample_model, surgery_report
from .training import (
    PAPER_LORA_ALPHA,
    PAPER_LORA_RANK,
    PAPER_LR_TRAIN,
    TrainConfig,
    TrainingDiverged,
    pretrain,
    run_stage1,
    run_stage2,
    write_loss_log,
    write_manifest,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DIVERGED = 3
EXIT_IO = 4


class UsageError(ValueError):
    pass


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kvlatent",
        description="latent-space KV cache reduction: curves, surgery, "
                    "recovery training, eval, budgets")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("rope-curve", help="emit a positional-similarity decay curve")
    p.add_argument("--theta", type=float, default=10000.0)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--mode", choices=["standard", "freq-aware", "subsampled"],
                   default="standard")
    p.add_argument("--layout", choices=["half-split", "adjacent"], default="half-split")
    p.add_argument("--max-pos", type=int, default=8192)
    p.add_argument("--parent-dim", type=int, help="subsampled mode: parent head width")
    p.add_argument("--stride", type=int, default=1, help="subsampled mode")
    p.add_argument("--phase", type=int, default=0, help="subsampled mode")
    p.add_argument("--band", metavar="LO:HI",
                   help="restrict to channels LO..HI (1-indexed, pairs (2j-1,2j))")
    p.add_argument("--ideal", action="store_true",
                   help="add the infinite-dimension quadrature column")
    p.add_argument("--ideal-steps", type=int, default=rp.DEFAULT_IDEAL_STEPS)
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--plot", help="also render a PNG figure here")

    p = sub.add_parser("init", help="create a randomly initialized checkpoint")
    p.add_argument("--vocab", type=int, default=256)
    p.add_argument("--d-model", type=int, default=128)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--kv-heads", type=int, default=2)
    p.add_argument("--dqk", type=int, default=32)
    p.add_argument("--dvo", type=int, default=32)
    p.add_argument("--ffn", type=int, default=512)
    p.add_argument("--max-seq", type=int, default=256)
    p.add_argument("--theta", type=float, default=10000.0)
    p.add_argument("--layout", choices=["half-split", "adjacent"], default="half-split")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("surgery", help="downsample a checkpoint's attention heads")
    p.add_argument("--in", dest="input", required=True, metavar="CKPT")
    p.add_argument("--out", required=True, metavar="CKPT")
    p.add_argument("--dqk", type=int, required=True)
    p.add_argument("--dvo", type=int, required=True)
    p.add_argument("--rope", choices=["subsampled", "freq-aware"], default="freq-aware")
    p.add_argument("--strategy", choices=["strided", "random"], default="strided")
    p.add_argument("--lora-rank", type=int, default=PAPER_LORA_RANK)
    p.add_argument("--lora-alpha", type=float, default=PAPER_LORA_ALPHA)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", help="write a JSON surgery report here")

    p = sub.add_parser("train", help="pretrain, stage-1 distill, or stage-2 recover")
    p.add_argument("--stage", choices=["pre", "1", "2"], required=True)
    p.add_argument("--loss", choices=["ce", "kl"], default="ce", help="stage 2 only")
    p.add_argument("--teacher", metavar="CKPT",
                   help="required for stage 1 and stage 2 with --loss kl")
    p.add_argument("--student", required=True, metavar="CKPT")
    p.add_argument("--corpus", required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--lr", type=float, default=PAPER_LR_TRAIN)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--seq-len", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kl-direction", choices=["teacher-student", "student-teacher"],
                   default="teacher-student")
    p.add_argument("--log", help="write the loss log CSV here")
    p.add_argument("--plot", help="also render the loss curve PNG here")
    p.add_argument("--out", required=True, metavar="CKPT")

    p = sub.add_parser("eval", help="log perplexity of a checkpoint on a corpus")
    p.add_argument("--model", required=True, metavar="CKPT")
    p.add_argument("--corpus", required=True)
    p.add_argument("--seq-len", type=int, default=64)
    p.add_argument("--csv", action="store_true")

    p = sub.add_parser("budget", help="KV cache footprint arithmetic")
    p.add_argument("--layers", type=int, required=True)
    p.add_argument("--kv-heads", type=int, required=True)
    p.add_argument("--dqk", type=int, required=True)
    p.add_argument("--dvo", type=int, required=True)
    p.add_argument("--dtype", choices=sorted(bd.DTYPE_BYTES), default="bf16")
    p.add_argument("--tokens", type=int, default=4000)
    p.add_argument("--mem", type=int, default=60 * 2**30, metavar="BYTES")
    p.add_argument("--baseline-dqk", type=int, default=128)
    p.add_argument("--baseline-dvo", type=int, default=128)
    p.add_argument("--csv", action="store_true")

    return parser


# ---------------------------------------------------------------------------
# command bodies
# ---------------------------------------------------------------------------


def _parse_band(band: str, dim: int) -> tuple[int, int]:
    try:
        lo_s, hi_s = band.split(":")
        lo, hi = int(lo_s), int(hi_s)
    except ValueError:
        raise UsageError(f"--band wants LO:HI, got {band!r}") from None
    if not (1 <= lo <= hi <= dim):
        raise UsageError(f"--band {band} outside channels [1, {dim}]")
    if lo % 2 == 0 or hi % 2 == 1:
        raise UsageError(f"--band {band} splits a rotation pair; LO must be odd "
                         "and HI even")
    return (lo + 1) // 2, hi // 2


def _cmd_rope_curve(args) -> int:
    mode = {"standard": "standard", "freq-aware": "frequency_aware",
            "subsampled": "subsampled"}[args.mode]
    layout = args.layout.replace("-", "_")
    if args.band is not None:
        if mode != "standard":
            raise UsageError("--band applies to the standard schedule only")
        pair_lo, pair_hi = _parse_band(args.band, args.dim)
        series = rp.band_series(args.theta, args.dim, (pair_lo, pair_hi), args.max_pos)
    else:
        kw = {}
        if mode == "subsampled":
            if args.parent_dim is None:
                raise UsageError("subsampled mode needs --parent-dim")
            kw = dict(parent_dim=args.parent_dim, stride=args.stride, phase=args.phase)
        config = RopeConfig(dim=args.dim, theta=args.theta, mode=mode,
                            layout=layout, **kw)
        series = rp.decay_series(config, args.max_pos)
    ideal = None
    if args.ideal:
        ideal = np.array([rp.ideal_curve(args.theta, float(x), args.ideal_steps)
                          for x in series.positions])
    rp.write_series_csv(series, args.out, ideal)
    if args.plot:
        from .plotting import plot_series
        curves = [(series.label, series.positions, series.values)]
        if ideal is not None:
            curves.append(("ideal limit", series.positions, ideal))
        plot_series(curves, args.plot)
    return EXIT_OK


def _cmd_init(args) -> int:
    geom = HeadGeometry(d_model=args.d_model, n_heads=args.heads,
                        n_kv_heads=args.kv_heads, d_qk=args.dqk, d_vo=args.dvo)
    rope = RopeConfig(dim=args.dqk, theta=args.theta,
                      layout=args.layout.replace("-", "_"))
    config = ModelConfig(vocab=args.vocab, n_layers=args.layers, geom=geom,
                         d_ffn=args.ffn, max_seq=args.max_seq, rope=rope)
    save_model(init_model(config, seed=args.seed), args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_surgery(args) -> int:
    model = load_model(args.input)
    rope_mode = "frequency_aware" if args.rope == "freq-aware" else "subsampled"
    reduced = downsample_model(model, args.dqk, args.dvo, rope_mode=rope_mode,
                               strategy=args.strategy, seed=args.seed)
    if args.lora_rank > 0:
        attach_lora(reduced, args.lora_rank, args.lora_alpha, seed=args.seed)
    save_model(reduced, args.out)
    if args.report:
        report = surgery_report(model, reduced, args.strategy, args.seed)
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    student = load_model(args.student)
    corpus = load_corpus(args.corpus, args.seq_len)
    stage = {"pre": "two_ntp", "1": "one",
             "2": "two_kl" if args.loss == "kl" else "two_ntp"}[args.stage]
    cfg = TrainConfig(stage=stage, lr=args.lr, steps=args.steps, batch=args.batch,
                      seq_len=args.seq_len, seed=args.seed,
                      kl_direction=args.kl_direction.replace("-", "_"))
    teacher = None
    if args.stage == "1" or (args.stage == "2" and args.loss == "kl"):
        if args.teacher is None:
            raise UsageError(f"stage {args.stage} with --loss {args.loss} "
                             "needs --teacher")
        teacher = load_model(args.teacher)
    if args.stage == "pre":
        log = pretrain(student, corpus, cfg)
    elif args.stage == "1":
        log = run_stage1(teacher, student, corpus, cfg)
    else:
        log = run_stage2(teacher, student, corpus, cfg)
    save_model(student, args.out)
    if args.log:
        write_loss_log(log, args.log)
        write_manifest(cfg, args.log + ".manifest.txt",
                       extra={"teacher": args.teacher, "student": args.student,
                              "corpus": args.corpus, "out": args.out})
    if args.plot:
        from .plotting import plot_loss_log
        plot_loss_log(log, args.plot, title=f"stage {args.stage} loss")
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    model = load_model(args.model)
    corpus = load_corpus(args.corpus, args.seq_len)
    ppl = log_perplexity(model, corpus)
    if args.csv:
        print("metric,value")
        print(f"log_ppl,{ppl:.9g}")
    else:
        print(f"log_ppl {ppl:.9g}")
    return EXIT_OK


def _cmd_budget(args) -> int:
    def geom(dqk, dvo):
        return HeadGeometry(d_model=1, n_heads=args.kv_heads,
                            n_kv_heads=args.kv_heads, d_qk=dqk, d_vo=dvo)

    report = bd.budget_report(
        geom(args.dqk, args.dvo), args.layers, bd.DTYPE_BYTES[args.dtype],
        args.tokens, args.mem, baseline=geom(args.baseline_dqk, args.baseline_dvo))
    sys.stdout.write(bd.format_report(report, csv=args.csv))
    return EXIT_OK


_COMMANDS = {
    "rope-curve": _cmd_rope_curve,
    "init": _cmd_init,
    "surgery": _cmd_surgery,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "budget": _cmd_budget,
}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError,) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, NumericsError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CheckpointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
