"""Command-line entry points.

Exit codes: 0 success, 2 bad input (flags, config, data validation), 1 any
other failure. Every command that does work first writes
``run_manifest.json`` into its output directory and refuses to reuse a
non-empty directory unless ``--overwrite`` is given.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from umpe.config import ConfigError, TrainConfig, config_hash, load_config, save_config
from umpe.geometry import GeometryError
from umpe.ingest import IngestError
from umpe.metrics import MetricError

log = logging.getLogger("umpe")

MANIFEST = "run_manifest.json"
VALIDATION_ERRORS = (ConfigError, GeometryError, IngestError, MetricError, FileNotFoundError)


class UsageError(ValueError):
    pass


@dataclass
class RunManifest:
    command: str
    output_dir: str
    config_path: str | None = None
    config_hash: str | None = None
    seeds: list = field(default_factory=list)
    argv: list = field(default_factory=list)
    started: str = ""

    def write(self) -> Path:
        self.started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        p = Path(self.output_dir) / MANIFEST
        p.write_text(json.dumps(asdict(self), indent=1) + "\n")
        return p


def prepare_out(path: str | Path, overwrite: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise UsageError(f"{out} is not empty; pass --overwrite to replace it")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def parse_subset(text: str) -> tuple[int, ...]:
    from umpe.constants import ALL_SOURCES

    if text in ("none", ""):
        return (0, 0, 0, 0)
    names = text.split("+") if "+" in text else text.split(",")
    unknown = set(names) - set(ALL_SOURCES)
    if unknown:
        raise UsageError(f"unknown sources in subset: {sorted(unknown)}")
    return tuple(int(s in names) for s in ALL_SOURCES)


def parse_sets(items: list[str]) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


def resolve_config(args) -> TrainConfig:
    overrides = parse_sets(args.set)
    for key, attr in (("data_dir", "data"), ("out_dir", "out"), ("seed", "seed"), ("fusion_order", "fusion_order")):
        v = getattr(args, attr, None)
        if v is not None:
            overrides[key] = v
    return load_config(args.config, overrides)


# --------------------------------------------------------------------------
# commands


def cmd_synth_data(args) -> int:
    from umpe.synth import NoiseSpec, noise_dict, synth_dataset

    noise = NoiseSpec(**json.loads(Path(args.noise).read_text())) if args.noise else NoiseSpec()
    out = prepare_out(args.out, args.overwrite)
    RunManifest("synth-data", str(out), args.noise, config_hash(noise_dict(noise)), [args.seed], args.argv).write()
    synth_dataset(out, args.seed, args.frames, noise)
    print(f"wrote {args.frames} frames to {out}")
    return 0


def cmd_ingest(args) -> int:
    from umpe.ingest import ingest_fixtures

    out = prepare_out(args.out, args.overwrite)
    RunManifest("ingest", str(out), argv=args.argv).write()
    paths = ingest_fixtures(args.src, out, stroke_px=args.stroke_px)
    print(f"wrote {len(paths)} bundles to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    if args.print_config:
        print(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
        return 0
    if not cfg.data_dir:
        raise ConfigError("data_dir is required (--data or config)")
    from umpe.train import train_two_stage

    out = prepare_out(cfg.out_dir, args.overwrite)
    RunManifest("train", str(out), args.config, cfg.hash(), [cfg.seed], args.argv).write()
    save_config(cfg, out / "config.json")
    _, records = train_two_stage(cfg, out_dir=out)
    last = records[-1]
    print(f"trained {cfg.epochs} epochs; final loss {last.get('total', float('nan')):.4f}; checkpoint {out / 'checkpoint.pt'}")
    return 0


def _load_eval_inputs(args):
    from umpe.train import load_checkpoint, load_frames

    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint {ckpt} not found")
    model, cfg = load_checkpoint(ckpt)
    return model, cfg, load_frames(args.data)


def cmd_eval(args) -> int:
    from umpe.train import evaluate, subset_name

    bits = parse_subset(args.subset) if args.subset is not None else None
    out = prepare_out(args.out, args.overwrite)
    model, cfg, frames = _load_eval_inputs(args)
    RunManifest("eval", str(out), args.checkpoint, cfg.hash(), [cfg.seed], args.argv).write()
    res = evaluate(model, frames, bits, order=args.fusion_order)
    res["subset"] = subset_name(bits) if bits is not None else "trained"
    (out / "eval.json").write_text(json.dumps(res, indent=1) + "\n")
    print(json.dumps(res))
    return 0


def cmd_powerset(args) -> int:
    from umpe.train import eval_powerset

    out = prepare_out(args.out, args.overwrite)
    model, cfg, frames = _load_eval_inputs(args)
    RunManifest("powerset", str(out), args.checkpoint, cfg.hash(), [cfg.seed], args.argv).write()
    rows = eval_powerset(model, frames)
    (out / "powerset.json").write_text(json.dumps(rows, indent=1) + "\n")
    print(f"{'subset':<20} mIoU")
    for r in rows:
        print(f"{r['subset']:<20} {100 * r['miou']:.2f}")
    return 0


def cmd_gradcheck(args) -> int:
    from umpe.gradcheck import run_all

    out = prepare_out(args.out, args.overwrite)
    RunManifest("gradcheck", str(out), seeds=[args.seed], argv=args.argv).write()
    results = run_all(args.seed)
    (out / "gradcheck.json").write_text(json.dumps([r.to_dict() for r in results], indent=1) + "\n")
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:<26} rel_err={r.rel_error:.2e}")
    if all(r.passed for r in results):
        return 0
    raise RuntimeError("gradient check failed")


def cmd_plot(args) -> int:
    from umpe import plot

    out = prepare_out(args.out, args.overwrite)
    RunManifest("plot", str(out), argv=args.argv).write()
    made = []
    if args.powerset:
        made.append(plot.plot_powerset(json.loads(Path(args.powerset).read_text()), out / "powerset.png"))
    if args.metrics:
        logs = {Path(p).parent.name or p: p for p in args.metrics}
        made.append(plot.plot_training_curves(logs, out / "training_curves.png"))
    if args.summary:
        s = json.loads(Path(args.summary).read_text())
        orders = {k: list(s["miou"][v].values()) for k, v in (("VR", "all"), ("RV", "all_rv")) if v in s["miou"]}
        if orders:
            made.append(plot.plot_fusion_order(orders, out / "fusion_order.png"))
    if not made:
        raise UsageError("nothing to plot: pass --powerset, --metrics or --summary")
    for p in made:
        print(p)
    return 0


def cmd_trend(args) -> int:
    from umpe.trend import VARIANTS, run_trend

    bad = set(args.variants) - set(VARIANTS)
    if bad:
        raise UsageError(f"unknown variants {sorted(bad)}")
    out = Path(args.out)
    if not args.resume:
        prepare_out(out, args.overwrite)
    out.mkdir(parents=True, exist_ok=True)
    overrides = parse_sets(args.set)
    RunManifest("trend", str(out), None, config_hash(overrides), list(args.seeds), args.argv).write()
    summary = run_trend(args.train, args.test, out, args.seeds, args.variants, overrides, resume=args.resume)
    print(json.dumps(summary.get("mean_miou", {}), indent=1))
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="umpe", description="Map-prior encoder experiments on a synthetic BEV task.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_out(sp, required=True, default=None):
        sp.add_argument("--out", required=required, default=default, help="output directory")
        sp.add_argument("--overwrite", action="store_true", help="replace a non-empty output directory")

    s = sub.add_parser("synth-data", help="generate a synthetic dataset of prior bundles")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--frames", type=int, default=2000)
    s.add_argument("--noise", help="JSON file of NoiseSpec fields")
    with_out(s)
    s.set_defaults(fn=cmd_synth_data)

    s = sub.add_parser("ingest", help="turn a fixture directory into bundles")
    s.add_argument("--src", required=True)
    s.add_argument("--stroke-px", type=int, default=1)
    with_out(s)
    s.set_defaults(fn=cmd_ingest)

    s = sub.add_parser("train", help="two-stage training")
    s.add_argument("--config", help="JSON config file")
    s.add_argument("--data")
    s.add_argument("--out")
    s.add_argument("--overwrite", action="store_true")
    s.add_argument("--seed", type=int)
    s.add_argument("--fusion-order", choices=("vr", "rv"))
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")
    s.add_argument("--print-config", action="store_true", help="print the effective config and exit")
    s.set_defaults(fn=cmd_train)

    for name, fn, helptext in (("eval", cmd_eval, "evaluate a checkpoint under one subset"),
                               ("powerset", cmd_powerset, "evaluate a checkpoint under all 16 subsets")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--data", required=True)
        if name == "eval":
            s.add_argument("--subset", help="'none' or sources joined by '+' or ',', e.g. hd+sat")
            s.add_argument("--fusion-order", choices=("vr", "rv"))
        with_out(s)
        s.set_defaults(fn=fn)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    s.add_argument("--seed", type=int, default=0)
    with_out(s, required=False, default="runs/gradcheck")
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("plot", help="figures from metric logs")
    s.add_argument("--powerset", help="powerset.json")
    s.add_argument("--metrics", nargs="*", help="metrics.jsonl files")
    s.add_argument("--summary", help="trend summary.json (fusion-order figure)")
    with_out(s)
    s.set_defaults(fn=cmd_plot)

    s = sub.add_parser("trend", help="multi-seed variant sweep")
    s.add_argument("--train", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    s.add_argument("--variants", nargs="+", default=["none", "vector", "raster", "all", "all_rv"])
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.add_argument("--resume", action="store_true", help="keep finished runs in --out")
    with_out(s)
    s.set_defaults(fn=cmd_trend)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    args.argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.fn(args)
    except (UsageError, *VALIDATION_ERRORS) as e:
        print(f"umpe {args.command}: error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"umpe {args.command}: failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
