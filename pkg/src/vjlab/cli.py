"""`lab` command line: gendata | pretrain | probe | verify | sweep | report.

Every subcommand takes --config PATH (key = value file), --seed N and
--out DIR; flags override the config file, which overrides variant
defaults. The sweep/report pair writes and reads one JSON summary per
run directory so results survive across invocations.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

from .config import (
    RunConfig,
    apply_overrides,
    load_config,
    save_config,
    variant_defaults,
)
from .model import load_checkpoint, load_into
from .objectives import VARIANTS
from .probing import synthetic_benchmark
from .synth import gen_motion_dataset, load_dataset, save_dataset
from .training import CHECKPOINT_NAME, METRICS_NAME, init_state, run_pretrain
from .verify import run_verify

DATASET_NAME = "dataset.synv"
PROBE_NAME = "probe.json"
SWEEP_NAME = "sweep.json"


def _build_config(args) -> RunConfig:
    if args.config is not None:
        cfg = load_config(args.config)
    else:
        cfg = variant_defaults(getattr(args, "variant", None) or "Baseline")
    overrides = {}
    if getattr(args, "variant", None) is not None and args.config is not None:
        overrides["variant"] = args.variant
    return apply_overrides(cfg, seed=args.seed, out=args.out, **overrides)


def _load_run_dataset(cfg: RunConfig):
    path = Path(cfg.out) / DATASET_NAME
    if path.exists():
        return load_dataset(path)
    return gen_motion_dataset(cfg.n_per_class, cfg.seed,
                              t=cfg.frames, h=cfg.height, w=cfg.width)


def cmd_gendata(args) -> int:
    cfg = _build_config(args)
    ds = gen_motion_dataset(cfg.n_per_class, cfg.seed,
                            t=cfg.frames, h=cfg.height, w=cfg.width)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(out / DATASET_NAME, ds)
    labels = [clip.label for clip in ds.clips]
    print(f"wrote {len(ds.clips)} clips ({len(set(labels))} classes) "
          f"to {out / DATASET_NAME}")
    return 0


def _final_total(out: str) -> float:
    path = Path(out) / METRICS_NAME
    lines = path.read_text().splitlines() if path.exists() else []
    return json.loads(lines[-1])["total"] if lines else float("nan")


def cmd_pretrain(args) -> int:
    cfg = _build_config(args)
    ds = _load_run_dataset(cfg)
    t0 = time.time()
    state = run_pretrain(cfg, dataset=ds, resume=args.resume,
                         log=print if args.verbose else None)
    print(f"{cfg.variant}: {state.step} steps in {time.time() - t0:.1f}s, "
          f"final total {_final_total(cfg.out):.6f} "
          f"-> {Path(cfg.out) / CHECKPOINT_NAME}")
    return 0


def cmd_probe(args) -> int:
    cfg = _build_config(args)
    ck = Path(cfg.out) / CHECKPOINT_NAME
    if not ck.exists():
        print(f"no checkpoint at {ck}; run `lab pretrain` first", file=sys.stderr)
        return 1
    state = init_state(cfg)
    load_into(state.student.named(), load_checkpoint(ck))
    cfg = dataclasses.replace(cfg, probe_kind=args.probe)
    rep = synthetic_benchmark(state.student, cfg,
                              n_train_per_class=args.train_per_class,
                              n_test_per_class=args.test_per_class)
    payload = {
        "variant": rep.variant, "kind": rep.kind, "accuracy": rep.accuracy,
        "n_train": rep.n_train, "n_test": rep.n_test,
        "per_class": rep.per_class, "seed": cfg.seed,
    }
    path = Path(cfg.out) / PROBE_NAME
    path.write_text(json.dumps(payload, indent=2) + "\n")
    per_class = " ".join(f"{name}={a:.2f}" for name, a in rep.per_class.items())
    print(f"{rep.variant} {rep.kind} probe: top-1 {rep.accuracy:.4f} "
          f"(n_test {rep.n_test}; {per_class})")
    return 0


def cmd_verify(args) -> int:
    results = run_verify(args.seed if args.seed is not None else 0)
    width = max(len(r.name) for r in results)
    failures = 0
    for r in results:
        tag = "PASS" if r.ok else "FAIL"
        line = f"[{tag}] {r.name:<{width}}"
        if r.detail:
            line += f"  {r.detail}"
        print(line)
        failures += 0 if r.ok else 1
    print(f"{len(results) - failures}/{len(results)} checks passed")
    return 0 if failures == 0 else 1


def cmd_sweep(args) -> int:
    if args.variants == "all":
        names = list(VARIANTS)
    else:
        names = [v.strip() for v in args.variants.split(",") if v.strip()]
        for name in names:
            if name not in VARIANTS:
                print(f"unknown variant {name!r}", file=sys.stderr)
                return 1
    base = _build_config(args)
    root = Path(base.out)
    rows = []
    for name in names:
        cfg = variant_defaults(name)
        cfg = dataclasses.replace(
            base, variant=name,
            lambda_hw=cfg.lambda_hw,
            motion_guided=cfg.motion_guided,
            motion_guided_strength=cfg.motion_guided_strength,
            motion_guided_random_rate=cfg.motion_guided_random_rate,
            full_complement=cfg.full_complement,
            max_temporal_keep=cfg.max_temporal_keep,
            out=str(root / cfg.out.split("/")[-1]),
        ).validate()
        ds = _load_run_dataset(cfg)
        t0 = time.time()
        state = run_pretrain(cfg, dataset=ds)
        rep = synthetic_benchmark(state.student, cfg,
                                  n_train_per_class=args.train_per_class,
                                  n_test_per_class=args.test_per_class)
        row = {
            "variant": name, "accuracy": rep.accuracy,
            "final_total": _final_total(cfg.out),
            "steps": state.step, "seconds": round(time.time() - t0, 1),
            "seed": cfg.seed,
        }
        rows.append(row)
        save_config(cfg, Path(cfg.out) / "config.lab")
        print(f"{name:>14}: acc {rep.accuracy:.4f} "
              f"total {row['final_total']:.4f} ({row['seconds']}s)", flush=True)
    root.mkdir(parents=True, exist_ok=True)
    (root / SWEEP_NAME).write_text(json.dumps(rows, indent=2) + "\n")
    print(f"wrote {root / SWEEP_NAME}")
    return 0


def _collect_rows(root: Path) -> list[dict]:
    rows = []
    sweep = root / SWEEP_NAME
    if sweep.exists():
        rows.extend(json.loads(sweep.read_text()))
    for probe in sorted(root.glob(f"**/{PROBE_NAME}")):
        rows.append(json.loads(probe.read_text()))
    return rows


def cmd_report(args) -> int:
    root = Path(args.out if args.out is not None else "runs")
    rows = _collect_rows(root)
    if not rows:
        print(f"no {SWEEP_NAME} or {PROBE_NAME} under {root}", file=sys.stderr)
        return 1
    seen = {}
    for row in rows:  # later probe rows refresh earlier sweep entries
        seen[(row["variant"], row.get("kind", "linear"))] = row
    ordered = sorted(seen.values(), key=lambda r: -r["accuracy"])
    base = next((r["accuracy"] for r in ordered if r["variant"] == "Baseline"), None)
    print(f"{'variant':>14}  {'top-1':>7}  {'vs base':>8}")
    for row in ordered:
        delta = "" if base is None else f"{100 * (row['accuracy'] - base):+8.2f}"
        print(f"{row['variant']:>14}  {row['accuracy']:7.4f}  {delta:>8}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lab", description="desk-scale video representation laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, variant_flag=True):
        p.add_argument("--config", type=str, default=None,
                       help="key = value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=str, default=None)
        if variant_flag:
            p.add_argument("--variant", type=str, default=None,
                           choices=sorted(VARIANTS))

    p = sub.add_parser("gendata", help="write a synthetic motion dataset")
    common(p)
    p.set_defaults(fn=cmd_gendata)

    p = sub.add_parser("pretrain", help="train one variant")
    common(p)
    p.add_argument("--resume", action="store_true",
                   help="continue from the checkpoint in --out")
    p.add_argument("--verbose", action="store_true", help="print per-step metrics")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("probe", help="evaluate a pretrained checkpoint")
    common(p)
    p.add_argument("--probe", choices=("linear", "attentive"), default="linear")
    p.add_argument("--train-per-class", type=int, default=32)
    p.add_argument("--test-per-class", type=int, default=16)
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("verify", help="run the named self-check battery")
    common(p, variant_flag=False)
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("sweep", help="pretrain + probe a list of variants")
    common(p, variant_flag=False)
    p.add_argument("--variants", type=str, default="all",
                   help="comma-separated labels, or 'all'")
    p.add_argument("--train-per-class", type=int, default=32)
    p.add_argument("--test-per-class", type=int, default=16)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("report", help="tabulate sweep/probe results under --out")
    common(p, variant_flag=False)
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
