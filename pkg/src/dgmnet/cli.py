"""Command-line entry point: ``dgm <command> ...``.

Exit codes: 0 success, 1 verification failure, 2 usage or config error,
3 I/O error.
"""

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _accel
from .errors import ConfigError, DGMError, FieldFileError, NumericError
from .fieldio import read_field, read_mask, write_field
from .losses import OHEM_MIN_KEPT, OHEM_THRESHOLD, POS_WEIGHT

logger = logging.getLogger("dgmnet")

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_USAGE = 2
EXIT_IO = 3

CONFIG_NAME = "run_config.json"
CASCADE_KINDS = ("iso3", "cascade")
PRIOR_FILES = ("vmap", "flow", "curv", "dcoarse")
BENCH_HEADER = ("h", "w", "pixels", "madds", "seconds")
DEFAULT_BENCH_SIZES = "32x32,32x64,64x64,64x128,128x128"


@dataclass
class RunConfig:
    """Everything needed to reproduce one command run."""

    command: str
    seed: int = 0
    channels: int = 8
    state_size: int = 4
    size: int = 32
    cascade: str = "cascade"
    ohem_threshold: float = OHEM_THRESHOLD
    ohem_min_kept: float = OHEM_MIN_KEPT
    pos_weight: float = POS_WEIGHT
    schedule: str = "linear"
    extra: dict = field(default_factory=dict)

    def validate(self):
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")
        if self.channels < 1 or self.state_size < 1:
            raise ConfigError("channels and state_size must be >= 1")
        if self.size < 2:
            raise ConfigError("size must be >= 2")
        if self.cascade not in CASCADE_KINDS:
            raise ConfigError(f"cascade must be one of {CASCADE_KINDS}")
        if not 0.0 < self.ohem_threshold <= 1.0:
            raise ConfigError("ohem threshold must lie in (0, 1]")
        if not 0.0 < self.ohem_min_kept <= 1.0:
            raise ConfigError("ohem minimum kept fraction must lie in (0, 1]")
        if self.pos_weight <= 0:
            raise ConfigError("pos_weight must be positive")
        return self

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def write(self, directory):
        path = Path(directory) / CONFIG_NAME
        path.write_text(self.to_json(), encoding="utf-8")
        return path


def _fmt(x):
    """Shortest round-trip repr; independent of the process locale."""
    x = float(x)
    return repr(x) if np.isfinite(x) else ("nan" if np.isnan(x) else ("inf" if x > 0 else "-inf"))


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _emit(text, out, config):
    """Write CSV text to ``out`` (plus a RunConfig beside it) or to stdout."""
    if out is None:
        sys.stdout.write(text)
        return
    path = Path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    config.write(path.parent)


def _base_config(args, command, **extra):
    cfg = RunConfig(command=command, seed=args.seed,
                    channels=getattr(args, "channels", 8),
                    state_size=getattr(args, "state_size", 4),
                    size=getattr(args, "size", 32), extra=extra)
    return cfg.validate()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_priors(args):
    from .priors import make_priors

    mask = read_mask(args.mask)
    priors = make_priors(mask, soften=args.soften)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, arr in priors.fields().items():
        write_field(out / f"{name}.dgmf", arr, np.float64)
        print(f"{name}: min={_fmt(arr.min())} max={_fmt(arr.max())} mean={_fmt(arr.mean())}")
    RunConfig(command="priors", size=int(max(mask.shape)),
              extra={"mask": str(args.mask), "soften": bool(args.soften),
                     "shape": list(mask.shape)}).validate().write(out)
    return EXIT_OK


def load_priors(directory):
    from .priors import GeometricPriors

    d = Path(directory)
    vmap, flow, curv, dcoarse = (read_field(d / f"{n}.dgmf") for n in PRIOR_FILES)
    if flow.shape[0] != 2 or vmap.shape[0] != 1 or curv.shape[0] != 1 or dcoarse.shape[0] != 1:
        raise ConfigError("prior files have unexpected channel counts")
    return GeometricPriors(vmap[0].astype(np.float64), flow.astype(np.float64),
                           curv[0].astype(np.float64), dcoarse[0].astype(np.float64))


def cmd_scan(args):
    from .gmamba import CascadeConfig, cascade_forward

    feats = read_field(args.features).astype(np.float64)
    priors = load_priors(args.priors_dir)
    if priors.shape != feats.shape[1:]:
        raise ConfigError(f"features {feats.shape[1:]} and priors {priors.shape} differ in size")
    C = feats.shape[0]
    config = CascadeConfig.init(C, args.state_size, args.seed)
    context, delta_d = cascade_forward(feats, config, priors if args.mode == "geo" else None)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_field(out, context, np.float64)
    write_field(out.with_name(out.stem + "_delta" + out.suffix), delta_d, np.float64)
    RunConfig(command="scan", seed=args.seed, channels=C, state_size=args.state_size,
              size=int(max(feats.shape[1:])),
              cascade="cascade" if args.mode == "geo" else "iso3",
              extra={"features": str(args.features), "priors_dir": str(args.priors_dir),
                     "mode": args.mode}).validate().write(out.parent)
    return EXIT_OK


def leakage_rows(seeds, channels, state_size, size, feature_scale):
    from .gmamba import CascadeConfig, leakage_ratio, two_region_scene

    rows = []
    for seed in seeds:
        config = CascadeConfig.init(channels, state_size, seed)
        scene = two_region_scene(channels, size, seed, feature_scale)
        guided, iso = leakage_ratio(config, scene)
        ratio = guided / iso if iso > 0 else float("nan")
        rows.append((seed, guided, iso, ratio))
    return rows


def cmd_leakage(args):
    seeds = [args.seed + k for k in range(args.sweep)] if args.sweep else [args.seed]
    rows = leakage_rows(seeds, args.channels, args.state_size, args.size, args.feature_scale)
    config = _base_config(args, "leakage", sweep=args.sweep, feature_scale=args.feature_scale)
    text = _csv_text(("seed", "guided", "isotropic", "ratio"),
                     [(s, _fmt(g), _fmt(i), _fmt(r)) for s, g, i, r in rows])
    _emit(text, args.out, config)
    if len(rows) > 1:
        ratios = np.array([r[3] for r in rows])
        print(f"median ratio over {len(rows)} seeds: {_fmt(np.nanmedian(ratios))}",
              file=sys.stderr)
    return EXIT_OK


def parse_sizes(text):
    sizes = []
    for item in text.split(","):
        item = item.strip().lower()
        if not item:
            continue
        try:
            h, _, w = item.partition("x")
            H, W = int(h), int(w or h)
        except ValueError:
            raise ConfigError(f"bad size {item!r}; use HxW or N") from None
        if H < 3 or W < 3:
            raise ConfigError(f"size {item!r} is below the 3x3 minimum")
        sizes.append((H, W))
    if not sizes:
        raise ConfigError("no sizes given")
    return sizes


def cmd_bench(args):
    from .gmamba import CascadeConfig
    from .metrics import measure_scan_cost

    sizes = parse_sizes(args.sizes)
    config = CascadeConfig.init(args.channels, args.state_size, args.seed)
    reports = measure_scan_cost(config, sizes, seed=args.seed, repeats=args.repeats)
    rows = [(r.height, r.width, r.pixels, r.madds, f"{r.seconds:.6f}") for r in reports]
    run = _base_config(args, "bench", sizes=[list(s) for s in sizes], repeats=args.repeats,
                       backend=_accel.backend())
    _emit(_csv_text(BENCH_HEADER, rows), args.out, run)
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradcheck import TOLERANCE, run_gradcheck

    reports = run_gradcheck(args.scope, instances=args.instances, seed=args.seed,
                            corrupt=args.corrupt_gradient)
    rows = [(r.op, _fmt(r.max_rel_error), r.worst_arg, _fmt(r.step),
             "pass" if r.passed(TOLERANCE) else "FAIL") for r in reports]
    run = _base_config(args, "gradcheck", scope=args.scope, instances=args.instances)
    _emit(_csv_text(("op", "max_rel_error", "worst_arg", "step", "status"), rows), args.out, run)
    failed = [r.op for r in reports if not r.passed(TOLERANCE)]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_overfit(args):
    from .losses import LossReport
    from .overfit import run_overfit

    run = RunConfig(command="overfit", seed=args.seed, channels=args.channels,
                    state_size=args.state_size, size=args.size,
                    ohem_threshold=args.ohem_threshold, ohem_min_kept=args.ohem_min_kept,
                    pos_weight=args.pos_weight,
                    extra={"steps": args.steps, "lr": args.lr}).validate()
    try:
        history = run_overfit(steps=args.steps, seed=args.seed, channels=args.channels,
                              state_size=args.state_size, size=args.size, lr=args.lr,
                              ohem_threshold=args.ohem_threshold,
                              ohem_min_kept=args.ohem_min_kept, pos_weight=args.pos_weight)
    except NumericError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    names = list(LossReport.__dataclass_fields__)
    rows = [[step] + [_fmt(getattr(rep, n)) for n in names] for step, rep in history]
    _emit(_csv_text(["step"] + names, rows), args.out, run)
    first, last = history[0][1].total, history[-1][1].total
    print(f"total loss {_fmt(first)} -> {_fmt(last)} (ratio {_fmt(last / first)})",
          file=sys.stderr)
    return EXIT_OK


def cmd_miou(args):
    from .metrics import miou

    pred = read_mask(args.pred)
    gt = read_mask(args.gt)
    value, per_class = miou(pred, gt, args.classes, args.ignore_label)
    rows = [(k, _fmt(v)) for k, v in enumerate(per_class)]
    rows.append(("mean", _fmt(value)))
    run = RunConfig(command="miou", extra={"pred": str(args.pred), "gt": str(args.gt),
                                           "classes": args.classes,
                                           "ignore_label": args.ignore_label}).validate()
    _emit(_csv_text(("class", "iou"), rows), args.out, run)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _model_opts(p, size=32):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--state-size", type=int, default=4)
    p.add_argument("--size", type=int, default=size)


def build_parser():
    parser = argparse.ArgumentParser(prog="dgm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("priors", help="geometric prior fields from a label mask")
    p.add_argument("mask", help="P5 PGM or single-channel label field file")
    p.add_argument("out_dir")
    p.add_argument("--soften", action="store_true", help="3x3 box-average the boundary map")
    p.set_defaults(func=cmd_priors)

    p = sub.add_parser("scan", help="run the three-block cascade on a feature field")
    p.add_argument("features")
    p.add_argument("priors_dir")
    p.add_argument("--mode", choices=("iso", "geo"), default="geo")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--state-size", type=int, default=4)
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("leakage", help="cross-boundary leakage, guided vs isotropic")
    _model_opts(p)
    p.add_argument("--sweep", type=int, default=0, help="run N consecutive seeds")
    p.add_argument("--feature-scale", type=float, default=1.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_leakage)

    p = sub.add_parser("bench", help="multiply-add counts and wall time per size")
    _model_opts(p)
    p.add_argument("--sizes", default=DEFAULT_BENCH_SIZES, help="comma list of HxW")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference gradient certification")
    p.add_argument("--scope", choices=("scan", "goad", "losses", "all"), default="all")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("overfit", help="toy gradient-descent run on a synthetic scene")
    _model_opts(p)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--ohem-threshold", type=float, default=OHEM_THRESHOLD)
    p.add_argument("--ohem-min-kept", type=float, default=OHEM_MIN_KEPT)
    p.add_argument("--pos-weight", type=float, default=POS_WEIGHT)
    p.add_argument("--out")
    p.set_defaults(func=cmd_overfit)

    p = sub.add_parser("miou", help="per-class IoU and mean IoU of two label maps")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--ignore-label", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_miou)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _accel.apply_thread_cap()
        return args.func(args)
    except (FieldFileError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DGMError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
