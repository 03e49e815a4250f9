"""Command-line entry point: ``skeletr <subcommand> [flags]``.

Machine-readable results go to stdout (JSON unless noted); logs go to stderr.
Exit status: 0 on success, 1 on a runtime failure, 2 on bad flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

log = logging.getLogger("skeletr")

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="JSON config file; explicit flags override its values")
    p.add_argument("--seed", type=int, default=None, help="seed for every random choice (default 0)")
    p.add_argument("--threads", type=int, default=None, help="BLAS thread count")
    p.add_argument("--out", help="output path (default: stdout where applicable)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="skeletr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic skeleton dataset (JSONL)")
    p.add_argument("--spec", help="JSON generator spec (fields of SynthSpec)")
    p.add_argument("--preset", choices=["interaction", "motion"], default="motion")
    p.add_argument("--num-videos", type=int, default=None)
    p.add_argument("--task", choices=["video", "instance", "group"], default=None)

    p = sub.add_parser("sequence-stats", parents=[common], help="tracklet and identity-purity summary")
    p.add_argument("--data", required=True)
    p.add_argument("--T", type=int, default=30, help="sequence length (even)")
    p.add_argument("--iou", type=float, default=None, help="tracker IoU threshold (default 0.3)")

    p = sub.add_parser("train", parents=[common], help="train a model; --out is the checkpoint path")
    p.add_argument("--data", required=True, action="append", help="training set; repeat for joint training")
    p.add_argument("--val", action="append", default=None, help="validation set per --data, in order")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--mode", choices=["transformer", "na", "add_global", "concat_global", "nonlocal"],
                   default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None, help="BCE loss weight (default 100)")
    p.add_argument("--curves", help="loss-curve CSV path (default: <out>.csv)")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--head", default=None)

    p = sub.add_parser("infer", parents=[common], help="sliding-window scores per proposal")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--head", default=None)
    p.add_argument("--window", type=float, default=2.0, help="window length in seconds")
    p.add_argument("--step", type=float, default=1.0, help="window step in seconds")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--all", action="store_true", help="run every case (default)")
    p.add_argument("--case", action="append", default=None, help="run only the named case(s)")

    p = sub.add_parser("stats", parents=[common], help="parameter and FLOP report")
    p.add_argument("--backbone", choices=["s", "l"], default="s")
    p.add_argument("--T", type=int, default=300)
    p.add_argument("--M", type=int, default=1)
    p.add_argument("--head", action="store_true", help="include the interaction head")
    p.add_argument("--streams", default=None, help="comma-separated pooling streams, e.g. 1x1,Tx1,1xP")

    p = sub.add_parser("attn-dump", parents=[common], help="write attention maps of one clip as JSON")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0, help="video index in the dataset")
    return parser


# ---------------------------------------------------------------------------


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return cfg


def _emit(obj, out: str | None = None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, default=_jsonable)
    if out:
        with open(out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _jsonable(o):
    import numpy as np
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if hasattr(o, "to_dict"):
        return o.to_dict()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def cmd_synth(args, cfg) -> int:
    from .data import SynthSpec, interaction_spec, motion_spec, save_dataset, dumps, synth_generate
    spec_d = dict(cfg.get("synth", {}))
    if args.spec:
        spec_d.update(_load_config(args.spec))
    if spec_d.get("classes"):
        if args.num_videos is not None:
            spec_d["num_videos"] = args.num_videos
        if args.task:
            spec_d["task"] = args.task
        spec = SynthSpec.from_dict(spec_d)
    else:
        extra = {k: v for k, v in spec_d.items() if k != "num_videos"}
        if args.task:
            extra["task"] = args.task
        n = args.num_videos or spec_d.get("num_videos", 12)
        spec = (interaction_spec if args.preset == "interaction" else motion_spec)(n, **extra)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    records = synth_generate(spec, seed)
    if args.out:
        save_dataset(records, args.out)
        _emit({"videos": len(records), "path": args.out, "seed": seed, "spec": spec.to_dict()})
    else:
        sys.stdout.write(dumps(records))
    return 0


def cmd_sequence_stats(args, cfg) -> int:
    import numpy as np
    from .data import load_dataset
    from .sequencing import identity_purity, sample_sequences, score_based_baseline
    records = load_dataset(args.data)
    thr = args.iou if args.iou is not None else cfg.get("iou_threshold", 0.3)
    counts, purity, base = [], [], []
    for rec in records:
        seqs = sample_sequences(rec, args.T, thr)
        counts.append(len(seqs))
        purity += [identity_purity(s) for s in seqs if s.valid_mask.any()]
        base += [identity_purity(s) for s in score_based_baseline(rec) if s.valid_mask.any()]
    _emit({"videos": len(records), "T": args.T, "iou_threshold": thr,
           "sequences_total": int(sum(counts)),
           "sequences_per_video": {"min": int(min(counts, default=0)), "max": int(max(counts, default=0)),
                                   "mean": float(np.mean(counts)) if counts else 0.0},
           "tracklet_purity": float(np.mean(purity)) if purity else None,
           "score_rank_purity": float(np.mean(base)) if base else None}, args.out)
    return 0


def _build(cls, fields: dict, section: str):
    """Construct a config dataclass, reporting unknown or malformed keys as ValueError."""
    try:
        return cls(**fields)
    except TypeError as exc:
        raise ValueError(f"bad {section!r} config: {exc}") from None


def _model_config(cfg: dict, heads: dict, mode: str | None, seed: int):
    from .model import ModelConfig
    d = dict(cfg.get("model", {}))
    d["heads"] = heads
    if mode:
        d["mode"] = mode
    d["seed"] = seed
    if isinstance(d.get("backbone"), dict):
        from .backbone import GcnConfig
        d["backbone"] = _build(GcnConfig, d["backbone"], "model.backbone")
    if isinstance(d.get("encoder"), dict):
        from .interaction import EncoderConfig
        d["encoder"] = _build(EncoderConfig, d["encoder"], "model.encoder")
    return _build(ModelConfig, d, "model")


def cmd_train(args, cfg) -> int:
    from .data import load_dataset
    from .heads import LossSpec
    from .model import SkeleTR
    from .train import TaskData, TrainConfig, prepare_samples, save_checkpoint, train
    if not args.out:
        raise ValueError("train needs --out for the checkpoint")
    tcfg = dict(cfg.get("train", {}))
    for key, val in (("epochs", args.epochs), ("batch_size", args.batch_size), ("base_lr", args.lr),
                     ("seed", args.seed)):
        if val is not None:
            tcfg[key] = val
    if args.epochs is not None and "milestones" not in cfg.get("train", {}):
        tcfg["milestones"] = [m for m in (int(args.epochs * 0.6), int(args.epochs * 0.8)) if 0 < m < args.epochs]
        tcfg["milestones"] = sorted(set(tcfg["milestones"]))
    config = _build(TrainConfig, tcfg, "train")
    lam = args.lam if args.lam is not None else cfg.get("lambda", 100.0)
    vals = args.val or []
    if vals and len(vals) != len(args.data):
        raise ValueError("give one --val per --data")
    tasks, heads = [], {}
    for i, path in enumerate(args.data):
        records = load_dataset(path)
        if not records:
            raise ValueError(f"{path}: empty dataset")
        task = records[0].task
        name = f"d{i}"
        kind = "instance" if task == "instance" else task
        heads[name] = [kind, records[0].num_classes]
        loss = LossSpec("bce", lam) if task == "instance" else LossSpec("ce")
        val = prepare_samples(load_dataset(vals[i]), config.T, config.iou_threshold) if vals else []
        tasks.append(TaskData(name, prepare_samples(records, config.T, config.iou_threshold), val, name, loss))
    model = SkeleTR(_model_config(cfg, heads, args.mode, config.seed))
    result = train(config, model, tasks)
    save_checkpoint(args.out, model, {"train": config.to_dict(), "lambda": lam,
                                      "datasets": list(args.data)})
    curves = args.curves or f"{args.out}.csv"
    result.write_csv(curves)
    last = {r["split"]: r["loss"] for r in result.curves if r["epoch"] == config.epochs - 1}
    _emit({"checkpoint": args.out, "curves": curves, "final_losses": last, "final_lr": result.final_lr})
    return 0


def _policy(extra: dict):
    from .sequencing import MPolicy
    t = extra.get("train", {})
    return MPolicy(t.get("m_min", 2), t.get("m_max", 20)), t.get("T", 16), t.get("iou_threshold", 0.3)


def cmd_eval(args, cfg) -> int:
    from .data import load_dataset
    from .train import evaluate, load_checkpoint, prepare_samples
    model, extra = load_checkpoint(args.checkpoint)
    policy, T_len, thr = _policy(extra)
    head = args.head or next(iter(model.heads))
    samples = prepare_samples(load_dataset(args.data), T_len, thr)
    multilabel = model.heads[head].kind == "instance"
    report = evaluate(model, samples, head, policy, multilabel=multilabel)
    _emit(report.to_dict(), args.out)
    return 0


def cmd_infer(args, cfg) -> int:
    from .data import load_dataset
    from .train import instance_scorer, load_checkpoint, sliding_window_infer
    model, extra = load_checkpoint(args.checkpoint)
    policy, T_len, thr = _policy(extra)
    head = args.head or next(iter(model.heads))
    scorer = instance_scorer(model, head, T_len, policy, thr)
    out = []
    for rec in load_dataset(args.data):
        for r in sliding_window_infer(scorer, rec, args.window, args.step):
            p = r["proposal"]
            out.append({"video_id": rec.video_id, "frame_index": p.frame_index, "bbox": list(p.bbox),
                        "person_id": p.person_id, "windows": r["windows"], "scores": r["scores"]})
    _emit(out, args.out)
    return 0


def cmd_gradcheck(args, cfg) -> int:
    from .gradcheck import TOLERANCE, all_cases, run_all
    import time
    seed = args.seed if args.seed is not None else 0
    t0 = time.time()
    if args.case:
        from .tensor import grad_check
        cases = all_cases(seed)
        unknown = sorted(set(args.case) - set(cases))
        if unknown:
            raise ValueError(f"unknown gradcheck case(s) {unknown}; choose from {sorted(cases)}")
        import numpy as np
        from . import tensor as T
        T.set_default_dtype(np.float64)
        errors = {c: grad_check(*cases[c]) for c in args.case}
    else:
        errors = run_all(seed)
    width = max(len(k) for k in errors)
    lines = [f"{'case':<{width}}  max_rel_err  status"]
    for name, err in errors.items():
        lines.append(f"{name:<{width}}  {err:11.3e}  {'ok' if err < TOLERANCE else 'FAIL'}")
    ok = all(e < TOLERANCE for e in errors.values())
    lines.append(f"{len(errors)} cases, worst {max(errors.values()):.3e}, "
                 f"{'all below' if ok else 'NOT all below'} {TOLERANCE:g} ({time.time() - t0:.1f}s)")
    text = "\n".join(lines)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0 if ok else 1


def cmd_stats(args, cfg) -> int:
    from .backbone import GcnConfig, VARIANTS, model_stats
    from .interaction import EncoderConfig
    from .model import ModelConfig
    from .train import run_stats
    bb = GcnConfig(**{**VARIANTS[args.backbone].to_dict(), **cfg.get("model", {}).get("backbone", {})})
    report = {"backbone": args.backbone, **model_stats(bb, args.T, args.M)}
    report["param_count_M"] = report["param_count"] / 1e6
    report["gflops"] = report["flops"] / 1e9
    report["flop_convention"] = "multiply-accumulates"
    if args.head:
        mcfg = dict(cfg.get("model", {}))
        mcfg["backbone"] = bb
        mcfg.setdefault("heads", {"video": ["video", 60]})
        if args.streams:
            mcfg["streams"] = tuple(s.strip() for s in args.streams.split(","))
        full = run_stats(ModelConfig(**mcfg), args.T, args.M)
        report["head"] = full
        report["head_gflops"] = full["head_flops"] / 1e9
    _emit(report, args.out)
    return 0


def cmd_attn_dump(args, cfg) -> int:
    from .data import load_dataset
    from .model import attention_export
    from .sequencing import sample_sequences
    from .train import load_checkpoint
    model, extra = load_checkpoint(args.checkpoint)
    policy, T_len, thr = _policy(extra)
    records = load_dataset(args.data)
    if not 0 <= args.index < len(records):
        raise ValueError(f"--index {args.index} outside [0, {len(records)})")
    rec = records[args.index]
    from .sequencing import select_m
    clip = select_m(sample_sequences(rec, T_len, thr), policy, mode="test", video_id=rec.video_id)
    ex = attention_export(model, clip)
    payload = {"video_id": rec.video_id, "labels": ex["labels"],
               "layers": [{"layer": i, "heads": [{"head": h, "matrix": m} for h, m in enumerate(layer)]}
                          for i, layer in enumerate(ex["layers"])]}
    _emit(payload, args.out)
    return 0


COMMANDS = {
    "synth": cmd_synth, "sequence-stats": cmd_sequence_stats, "train": cmd_train, "eval": cmd_eval,
    "infer": cmd_infer, "gradcheck": cmd_gradcheck, "stats": cmd_stats, "attn-dump": cmd_attn_dump,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        if args.threads < 1:
            parser.error("--threads must be >= 1")
        for var in _THREAD_VARS:
            os.environ[var] = str(args.threads)
    try:
        cfg = _load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except (OSError, ValueError, KeyError, FloatingPointError) as exc:
        print(f"skeletr {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
