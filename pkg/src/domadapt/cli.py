"""Command-line entry point: `run` a grid, `report` tables/figures, `check` claims.

Every flag can also come from a key=value config file (`--config FILE`);
explicit flags win over the file, the file wins over built-in defaults.
"""

import argparse
import sys
from pathlib import Path

from .harness import (
    ALL_METHOD_IDS, GridSpec, emit_report, load_results, ordering_verdicts,
    run_grid,
)

_TRUE = ("1", "true", "yes", "on")
_FALSE = ("0", "false", "no", "off")


def _parse_bool(text):
    v = text.strip().lower()
    if v in _TRUE:
        return True
    if v in _FALSE:
        return False
    raise ValueError(f"not a boolean: {text!r}")


# name -> (cast, default); None default means "required on the command line".
_RUN_OPTIONS = {
    "methods": (str, "all"),
    "dataset": (list, None),
    "steps": (int, 4000),
    "seeds": (str, "0,1,2,3,4"),
    "batch_size": (int, 64),
    "out": (str, None),
    "weight_norm": (_parse_bool, False),
    "burn_in": (int, 0),
    "eval_every": (int, 200),
    "jobs": (int, 1),
    "hidden": (int, 64),
    "feat_dim": (int, 32),
    "lr": (float, 1e-3),
    "lr_target": (float, 5e-4),
    "eval_head": (str, ""),
}
_REPORT_OPTIONS = {"in": (str, None), "format": (str, "md")}
_CHECK_OPTIONS = {"in": (str, None)}


def _load_config(path):
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise SystemExit(f"{path}:{lineno}: expected key=value, got {raw!r}")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _resolve(args, options, config):
    """Merge precedence: explicit flag > config file > built-in default."""
    known = set()
    for sub_options in (_RUN_OPTIONS, _REPORT_OPTIONS, _CHECK_OPTIONS):
        known.update(sub_options)
    for key in config:
        if key not in known:
            raise SystemExit(f"unknown config key: {key}")
    resolved = {}
    for name, (cast, default) in options.items():
        flag_value = getattr(args, name)
        if flag_value is not None:
            resolved[name] = flag_value
        elif name in config:
            if cast is list:
                resolved[name] = [v.strip() for v in config[name].split(";")]
            else:
                resolved[name] = cast(config[name])
        else:
            resolved[name] = default
        if resolved[name] is None:
            raise SystemExit(f"missing required option --{name.replace('_', '-')}")
    return argparse.Namespace(**resolved)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="domadapt",
        description="Domain-adaptation experiment harness: adversarial feature "
                    "alignment with confidence-weighted pseudo labeling.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train a grid of (method, dataset, seed) cells")
    run.add_argument("--methods", help="comma-separated method ids or 'all'")
    run.add_argument("--dataset", action="append", dest="dataset", metavar="SPEC",
                     help="moons:rot=45 | gauss:shift=2.0 | idx:IMG,LBL,IMG,LBL "
                          "(repeatable)")
    run.add_argument("--steps", type=int)
    run.add_argument("--seeds", help="comma-separated integer seeds")
    run.add_argument("--batch-size", type=int, dest="batch_size")
    run.add_argument("--out", help="output directory")
    run.add_argument("--weight-norm", action="store_const", const=True,
                     dest="weight_norm", help="normalize weighted losses by sum(w)")
    run.add_argument("--burn-in", type=int, dest="burn_in")
    run.add_argument("--eval-every", type=int, dest="eval_every")
    run.add_argument("--jobs", type=int, help="parallel worker processes")
    run.add_argument("--hidden", type=int)
    run.add_argument("--feat-dim", type=int, dest="feat_dim")
    run.add_argument("--lr", type=float)
    run.add_argument("--lr-target", type=float, dest="lr_target")
    run.add_argument("--eval-head", dest="eval_head", choices=("task", "target"),
                     help="override the evaluation head for every method")
    run.add_argument("--config", help="key=value file mirroring these flags")

    report = sub.add_parser("report", help="render tables and figures from results")
    report.add_argument("--in", dest="in", metavar="DIR")
    report.add_argument("--format", choices=("md", "csv"))
    report.add_argument("--config")

    check = sub.add_parser("check", help="evaluate the ordering claims")
    check.add_argument("--in", dest="in", metavar="DIR")
    check.add_argument("--config")
    return parser


def cmd_run(opts):
    methods = list(ALL_METHOD_IDS) if opts.methods == "all" else [
        m.strip() for m in opts.methods.split(",") if m.strip()]
    seeds = [int(s) for s in opts.seeds.split(",") if s.strip()]
    overrides = {
        "steps": opts.steps,
        "batch_size": opts.batch_size,
        "weight_norm": opts.weight_norm,
        "burn_in": opts.burn_in,
        "hidden": opts.hidden,
        "feat_dim": opts.feat_dim,
        "lr_main": opts.lr,
        "lr_target": opts.lr_target,
    }
    if opts.eval_head:
        overrides["eval_head"] = opts.eval_head
    spec = GridSpec(methods=methods, datasets=opts.dataset, seeds=seeds,
                    overrides=overrides, eval_every=opts.eval_every)

    def progress(result):
        status = f"test_acc={result.test_acc:.3f}" if result.error is None \
            else f"ERROR {result.error}"
        print(f"[{result.method} | {result.dataset} | seed {result.seed}] "
              f"{status} ({result.wall_time:.1f}s)")

    results = run_grid(spec, out_dir=opts.out, jobs=opts.jobs, progress=progress)
    failed = [r for r in results if r.error is not None]
    print(f"{len(results) - len(failed)}/{len(results)} cells ok; "
          f"results in {opts.out}/results.csv")
    return 1 if failed else 0


def cmd_report(opts):
    in_dir = Path(getattr(opts, "in"))
    results = load_results(in_dir / "results.csv")
    table, verdicts = emit_report(results, out_dir=in_dir)
    print(table.to_markdown(verdicts) if opts.format == "md" else table.to_csv())
    return 0


def cmd_check(opts):
    in_dir = Path(getattr(opts, "in"))
    verdicts = ordering_verdicts(load_results(in_dir / "results.csv"))
    for v in verdicts:
        print(v.describe())
    return 1 if any(v.passed is False for v in verdicts) else 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    config = _load_config(args.config) if args.config else {}
    if args.command == "run":
        return cmd_run(_resolve(args, _RUN_OPTIONS, config))
    if args.command == "report":
        return cmd_report(_resolve(args, _REPORT_OPTIONS, config))
    return cmd_check(_resolve(args, _CHECK_OPTIONS, config))


if __name__ == "__main__":
    sys.exit(main())
