"""selfens command line: train, eval, gen-data, preview-aug, gradcheck.

Exit codes: 0 success, 1 gradient check above tolerance, 2 configuration or
input error, 3 numeric abort during training. Errors print one line on
stderr of the form ``selfens: error: <reason>``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import augment, checkpoint, data, gradcheck, models, trainer
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, build_domains, build_spec, synthetic_from_dict
from .data import IdxFormatError

EXIT_OK, EXIT_GRADCHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_TOL = 1e-4

log = logging.getLogger("selfens")


class UsageError(Exception):
    pass


def _fail(code: int, msg: str) -> int:
    print(f"selfens: error: {' '.join(str(msg).split())}", file=sys.stderr)
    return code


def _load_config(path, seed=None, out=None) -> RunConfig:
    cfg = RunConfig.load(path)
    if seed is not None:
        cfg.train = replace(cfg.train, seed=seed)
    if out is not None:
        cfg.output.dir = str(out)
    return cfg


# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.seed, args.out)
    source, target = build_domains(cfg)
    spec = build_spec(cfg, source.train.shape, source.train.class_count)
    src_aug, tgt_aug = cfg.augment.resolve()
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    resolved = cfg.to_dict()
    (out / "resolved-config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")

    def progress(m):
        log.info(
            "epoch %d/%d ce=%.4f se=%.5f cb=%.4f pass=%.3f teacher src=%.3f tgt=%.3f",
            m.epoch, cfg.train.epochs, m.ce_loss, m.se_loss, m.cb_loss, m.pass_rate,
            m.teacher_src_acc, m.teacher_tgt_acc,
        )

    result = trainer.run_training(
        source, target, spec, cfg.train, src_aug, tgt_aug,
        on_epoch=progress, extra_config={"run": resolved},
    )
    trainer.write_metrics_csv(out / "metrics.csv", result.history)
    checkpoint.save(out / "final.ckpt", result.final)
    checkpoint.save(out / "early_stop.ckpt", result.early_stopped)
    best = result.history[result.early_stopped.epoch - 1]
    print(json.dumps({
        "out": str(out),
        "epochs": len(result.history),
        "early_stop_epoch": result.early_stopped.epoch,
        "pass_rate": best.pass_rate,
        "teacher_tgt_acc": best.teacher_tgt_acc,
        "student_tgt_acc": best.student_tgt_acc,
    }))
    return EXIT_OK


def _eval_config(args, ck) -> RunConfig:
    if args.data is not None:
        path = Path(args.data)
        try:
            d = json.loads(path.read_text())
        except OSError as e:
            raise ConfigError(f"cannot read data spec {path}: {e.strerror}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from None
        if isinstance(d, dict) and "data" not in d:
            d = {"data": d}
        return RunConfig.from_dict(d, path.parent)
    run = ck.config.get("run")
    if run is None:
        raise UsageError("checkpoint carries no data description; pass --data")
    return RunConfig.from_dict({"data": run["data"]})


def cmd_eval(args) -> int:
    ck = checkpoint.load(args.checkpoint)
    cfg = _eval_config(args, ck)
    source, target = build_domains(cfg)
    ds = getattr({"source": source, "target": target}[args.domain], args.split)
    if ds.shape != tuple(ck.spec.input_shape):
        raise ConfigError(f"data shape {ds.shape} does not match network input {tuple(ck.spec.input_shape)}")
    params = ck.teacher if args.network == "teacher" else ck.student
    ev = trainer.evaluate(ck.spec, params, ds)
    print(json.dumps({
        "network": args.network,
        "dataset": ds.name,
        "epoch": ck.epoch,
        "accuracy": ev.accuracy,
        "mean_class_accuracy": ev.mean_class_accuracy,
        "confusion": ev.confusion.tolist(),
    }))
    return EXIT_OK


SPLIT_FILES = {
    f"{role}_{split}": (f"{role}-{split}-images.idx", f"{role}-{split}-labels.idx")
    for role in ("source", "target")
    for split in ("train", "test")
}


def cmd_gen_data(args) -> int:
    path = Path(args.spec)
    try:
        d = json.loads(path.read_text())
    except OSError as e:
        raise ConfigError(f"cannot read synthetic spec {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from None
    spec = synthetic_from_dict(d)
    raw = data.synthetic_raw(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for key, (img, lab) in SPLIT_FILES.items():
        data.save_idx(raw[key], out / img, out / lab)
    section = {
        role: {
            "train_images": SPLIT_FILES[f"{role}_train"][0],
            "train_labels": SPLIT_FILES[f"{role}_train"][1],
            "test_images": SPLIT_FILES[f"{role}_test"][0],
            "test_labels": SPLIT_FILES[f"{role}_test"][1],
            "class_count": spec.class_count,
        }
        for role in ("source", "target")
    }
    (out / "data.json").write_text(json.dumps(section, indent=2) + "\n")
    print(json.dumps({"out": str(out), "files": sorted(p for pair in SPLIT_FILES.values() for p in pair)}))
    return EXIT_OK


def cmd_preview_aug(args) -> int:
    cfg = _load_config(args.config)
    source, target = build_domains(cfg)
    src_aug, tgt_aug = cfg.augment.resolve()
    dom, aug_cfg = (source, src_aug) if args.domain == "source" else (target, tgt_aug)
    n = min(args.count, len(dom.train))
    if n < 1:
        raise UsageError("--count must be >= 1")
    before = dom.train.images[:n]
    after = augment.augment_batch(before, aug_cfg, np.random.default_rng(args.seed))
    cols = max(1, int(np.ceil(np.sqrt(n))))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lo, hi = float(before.min()), float(before.max())
    for name, imgs in (("before", before), ("after", after)):
        c = imgs.shape[-1]
        for ch in range(c):
            suffix = "" if c == 1 else f"-c{ch}"
            augment.write_pgm(out / f"{name}{suffix}.pgm", augment.grid(imgs[..., ch:ch + 1], cols), lo, hi)
    print(json.dumps({"out": str(out), "count": n, "domain": args.domain}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    presets = models.PRESETS if args.arch == "all" else (args.arch,)
    worst = 0.0
    for preset in presets:
        for r in gradcheck.check_preset(preset, seeds=range(args.seeds)):
            worst = max(worst, r.max_rel_err)
            status = "ok" if r.max_rel_err <= GRADCHECK_TOL else "FAIL"
            print(f"{preset:<11} {r.layer:<18} max_rel_err={r.max_rel_err:.3e} probed={r.probed} kinks_skipped={r.skipped_kinks} {status}")
    print(f"worst max_rel_err={worst:.3e} tolerance={GRADCHECK_TOL:.0e}")
    return EXIT_OK if worst <= GRADCHECK_TOL else EXIT_GRADCHECK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="selfens", description="Self-ensembling domain adaptation.")
    p.add_argument("-q", "--quiet", action="store_true", help="suppress per-epoch progress on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a student/teacher pair from a run config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, default=None, help="override train.seed")
    t.add_argument("--out", default=None, help="override output.dir")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", default=None, help="run config or data section JSON (default: the checkpoint's own)")
    e.add_argument("--network", choices=("student", "teacher"), default="teacher")
    e.add_argument("--domain", choices=("source", "target"), default="target")
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gen-data", help="write a synthetic domain pair as IDX files")
    g.add_argument("--spec", required=True, help="JSON synthetic spec")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    a = sub.add_parser("preview-aug", help="write before/after PGM grids of augmented samples")
    a.add_argument("--config", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--count", type=int, default=16)
    a.add_argument("--domain", choices=("source", "target"), default="source")
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(func=cmd_preview_aug)

    c = sub.add_parser("gradcheck", help="finite-difference gradient check of a preset")
    c.add_argument("--arch", choices=models.PRESETS + ("all",), default="all")
    c.add_argument("--seeds", type=int, default=20)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except trainer.TrainingAborted as e:
        return _fail(EXIT_NUMERIC, e)
    except (ConfigError, CheckpointError, IdxFormatError, UsageError) as e:
        return _fail(EXIT_CONFIG, e)
    except FileNotFoundError as e:
        return _fail(EXIT_CONFIG, f"{e.filename}: no such file")
    except (ValueError, OSError) as e:
        return _fail(EXIT_CONFIG, e)


if __name__ == "__main__":
    sys.exit(main())
