"""Experiment grid: run method variants over dataset pairs and seeds,
select checkpoints on the labeled holdout, and render comparison tables.

A grid cell is one (method, dataset, seed) training run. Cells are fully
independent: each derives everything it needs from its own arguments, so
execution order and parallel fan-out cannot change any result.
"""

import csv
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Tensor, GradTape
from .models import (
    forward_domain, forward_features, forward_target, forward_task,
    init_mlp, load_bundle, save_bundle,
)
from .losses import disc_loss
from .data import gen_gauss_shift, gen_two_moons, load_idx, preprocess_pair
from .training import (
    Adam, MetricsWriter, TrainConfig, TrainingAborted, slots_of, train,
)

DEFAULT_EVAL_EVERY = 200
SPILL_THRESHOLD = 32 * 2 ** 20  # checkpoint bundles above this spill to disk

# Acceptance thresholds for the ordering claims.
ADAPTATION_GAIN = 0.03
PSEUDO_MARGIN = 0.005


@dataclass(frozen=True)
class MethodRow:
    id: str
    display: str
    method: str
    confidence: str | None
    eval_head: str


METHOD_ROWS = (
    MethodRow("no-adapt", "No Adaptation", "no-adapt", None, "task"),
    MethodRow("dann", "DANN", "dann", None, "task"),
    MethodRow("instance-task", "Instance (task)", "instance", "task", "target"),
    MethodRow("instance-domain", "Instance (domain)", "instance", "domain", "target"),
    MethodRow("pseudo-noadv-task", "Pseudo-NoAdv (task)", "pseudo-noadv", "task", "target"),
    MethodRow("pseudo-noadv-domain", "Pseudo-NoAdv (domain)", "pseudo-noadv", "domain", "target"),
    MethodRow("pseudo-taskc-task", "Pseudo-TaskC (task)", "pseudo", "task", "task"),
    MethodRow("pseudo-taskc-domain", "Pseudo-TaskC (domain)", "pseudo", "domain", "task"),
    MethodRow("pseudo-task", "Pseudo (task)", "pseudo", "task", "target"),
    MethodRow("pseudo-domain", "Pseudo (domain)", "pseudo", "domain", "target"),
)
METHOD_BY_ID = {row.id: row for row in METHOD_ROWS}
ALL_METHOD_IDS = tuple(row.id for row in METHOD_ROWS)

_PSEUDO_IDS = tuple(m for m in ALL_METHOD_IDS if m.startswith("pseudo"))
_INSTANCE_IDS = tuple(m for m in ALL_METHOD_IDS if m.startswith("instance"))


@dataclass
class RunResult:
    """One grid cell: accuracies of the holdout-selected checkpoint."""

    method: str
    dataset: str
    seed: int
    best_step: int = 0
    holdout_acc: float | None = None
    test_acc: float | None = None
    wall_time: float = 0.0
    gate_reads: int = 0
    error: str | None = None


@dataclass
class GridSpec:
    methods: list
    datasets: list
    seeds: list
    overrides: dict = field(default_factory=dict)
    eval_every: int = DEFAULT_EVAL_EVERY

    def __post_init__(self):
        if not self.methods or not self.datasets or not self.seeds:
            raise ValueError("methods, datasets, and seeds must be non-empty")
        unknown = [m for m in self.methods if m not in METHOD_BY_ID]
        if unknown:
            raise ValueError(f"unknown methods: {unknown}")


def evaluate(bundle, dataset, head="task"):
    """Fraction of argmax-correct predictions through the chosen head."""
    feats = forward_features(bundle.extractor, dataset.features, None)
    if head == "task":
        logp = forward_task(bundle.task_head, feats, None)
    elif head == "target":
        logp = forward_target(bundle.target_head, feats, None)
    else:
        raise ValueError(f"unknown head {head!r}")
    return float((logp.data.argmax(axis=1) == dataset.labels).mean())


class Checkpoint:
    """Holdout-scored bundle snapshot, spilled to disk when oversized."""

    def __init__(self, step, holdout_acc, bundle, spill_dir=None,
                 spill_threshold=SPILL_THRESHOLD):
        self.step = step
        self.holdout_acc = holdout_acc
        snap = bundle.clone()
        if spill_dir is not None and snap.nbytes() > spill_threshold:
            self._path = Path(spill_dir) / f"step{step:08d}.bundle"
            save_bundle(snap, self._path)
            self._bundle = None
        else:
            self._path = None
            self._bundle = snap

    def bundle(self):
        return self._bundle if self._bundle is not None else load_bundle(self._path)


def model_select(checkpoints):
    """Checkpoint with the best holdout accuracy; ties go to the earliest step."""
    if not checkpoints:
        raise ValueError("no checkpoints recorded")
    best = checkpoints[0]
    for c in checkpoints[1:]:
        if c.holdout_acc > best.holdout_acc:
            best = c
    return best


def select_and_score(checkpoints, pair, head):
    """Apply holdout selection, then score the selected bundle on the test split."""
    best = model_select(checkpoints)
    test_acc = evaluate(best.bundle(), pair.target_test, head)
    return best.step, best.holdout_acc, test_acc


def make_pair(spec):
    """Build a DomainPair from a dataset spec string.

    Grammar: `moons:rot=45[,noise=][,n=][,nsrc=][,seed=]`,
    `gauss:shift=2.0[,scale=][,classes=][,dim=][,n=][,seed=]`, or
    `idx:<src_images>,<src_labels>,<tgt_images>,<tgt_labels>`.
    """
    kind, _, rest = spec.partition(":")
    if kind == "moons":
        opts = _parse_opts(rest, {"rot": 45.0, "noise": 0.1, "n": 2400,
                                  "nsrc": 1000, "seed": 7})
        src = gen_two_moons(int(opts["nsrc"]), opts["noise"], 0.0, int(opts["seed"]))
        tgt = gen_two_moons(int(opts["n"]), opts["noise"], opts["rot"],
                            int(opts["seed"]) + 1, domain="target")
        return preprocess_pair(src, tgt, seed=int(opts["seed"]) + 2)
    if kind == "gauss":
        opts = _parse_opts(rest, {"shift": 2.0, "scale": 1.0, "classes": 3,
                                  "dim": 5, "n": 2400, "seed": 11})
        dim = int(opts["dim"])
        shift_vec = np.full(dim, opts["shift"] / np.sqrt(dim))
        return gen_gauss_shift(int(opts["n"]), int(opts["classes"]), dim,
                               shift_vec, opts["scale"], int(opts["seed"]))
    if kind == "idx":
        paths = rest.split(",")
        if len(paths) != 4:
            raise ValueError("idx spec needs 4 comma-separated paths")
        src = load_idx(paths[0], paths[1])
        tgt = load_idx(paths[2], paths[3], domain="target")
        return preprocess_pair(src, tgt, seed=0)
    raise ValueError(f"unknown dataset kind {kind!r} in {spec!r}")


def _parse_opts(rest, defaults):
    opts = dict(defaults)
    if rest:
        for item in rest.split(","):
            key, _, value = item.partition("=")
            if key not in opts:
                raise ValueError(f"unknown dataset option {key!r}")
            opts[key] = float(value)
    return opts


def run_cell(method_id, dataset_spec, seed, overrides=None, out_dir=None,
             eval_every=DEFAULT_EVAL_EVERY, pair=None):
    """Train one grid cell and score its holdout-selected checkpoint."""
    row = METHOD_BY_ID[method_id]
    if pair is None:
        pair = make_pair(dataset_spec)
    opts = dict(overrides or {})
    eval_head = opts.pop("eval_head", None) or row.eval_head
    config = TrainConfig(method=row.method, confidence=row.confidence,
                         eval_head=eval_head, seed=seed, **opts)
    sink = None
    spill_dir = None
    if out_dir is not None:
        runs_dir = Path(out_dir) / "runs"
        runs_dir.mkdir(parents=True, exist_ok=True)
        sink = MetricsWriter(runs_dir / f"{run_name(method_id, dataset_spec, seed)}.csv")
        spill_dir = runs_dir
    checkpoints = []

    def on_eval(step, bundle):
        acc = evaluate(bundle, pair.target_holdout, config.eval_head)
        checkpoints.append(Checkpoint(step, acc, bundle, spill_dir=spill_dir))

    start = time.perf_counter()
    try:
        train(config, pair, metrics_sink=sink, eval_every=eval_every, on_eval=on_eval)
        best_step, holdout_acc, test_acc = select_and_score(checkpoints, pair,
                                                            config.eval_head)
        return RunResult(method_id, dataset_spec, seed, best_step, holdout_acc,
                         test_acc, time.perf_counter() - start,
                         pair.target_train_gate.access_count)
    except TrainingAborted as exc:
        return RunResult(method_id, dataset_spec, seed,
                         wall_time=time.perf_counter() - start,
                         gate_reads=pair.target_train_gate.access_count,
                         error=str(exc))
    finally:
        if sink is not None:
            sink.close()


def run_name(method_id, dataset_spec, seed):
    safe = "".join(c if c.isalnum() or c in ".=-" else "_" for c in dataset_spec)
    return f"{method_id}__{safe}__s{seed}"


_PAIR_CACHE = {}


def _cached_pair(dataset_spec):
    pair = _PAIR_CACHE.get(dataset_spec)
    if pair is None:
        pair = make_pair(dataset_spec)
        _PAIR_CACHE[dataset_spec] = pair
    return pair


def _grid_cell(args):
    method_id, dataset_spec, seed, overrides, out_dir, eval_every = args
    try:
        return run_cell(method_id, dataset_spec, seed, overrides, out_dir,
                        eval_every, pair=_cached_pair(dataset_spec))
    except Exception as exc:  # a failed cell must not sink the grid
        return RunResult(method_id, dataset_spec, seed, error=f"{type(exc).__name__}: {exc}")


def run_grid(spec, out_dir=None, jobs=1, progress=None):
    """Execute every (method, dataset, seed) cell; failures are recorded, not raised."""
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    tasks = [(m, d, s, spec.overrides, str(out_dir) if out_dir else None, spec.eval_every)
             for d in spec.datasets for m in spec.methods for s in spec.seeds]
    results = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for result in pool.map(_grid_cell, tasks):
                results.append(result)
                if progress:
                    progress(result)
    else:
        for task in tasks:
            result = _grid_cell(task)
            results.append(result)
            if progress:
                progress(result)
    if out_dir is not None:
        save_results(results, Path(out_dir) / "results.csv")
    return results


_RESULT_COLUMNS = ("method", "dataset", "seed", "best_step", "holdout_acc",
                   "test_acc", "wall_time", "gate_reads", "error")


def save_results(results, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_RESULT_COLUMNS)
        for r in results:
            writer.writerow([r.method, r.dataset, r.seed, r.best_step,
                             "" if r.holdout_acc is None else repr(r.holdout_acc),
                             "" if r.test_acc is None else repr(r.test_acc),
                             repr(r.wall_time), r.gate_reads, r.error or ""])


def load_results(path):
    results = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            results.append(RunResult(
                method=row["method"], dataset=row["dataset"], seed=int(row["seed"]),
                best_step=int(row["best_step"]),
                holdout_acc=float(row["holdout_acc"]) if row["holdout_acc"] else None,
                test_acc=float(row["test_acc"]) if row["test_acc"] else None,
                wall_time=float(row["wall_time"]), gate_reads=int(row["gate_reads"]),
                error=row["error"] or None))
    return results


class ReportTable:
    """Seed-averaged accuracy table; derived numbers are recomputed on demand."""

    def __init__(self, results):
        self._cells = {}
        self._datasets = []
        for r in results:
            if r.error is not None or r.test_acc is None:
                continue
            if r.dataset not in self._datasets:
                self._datasets.append(r.dataset)
            self._cells.setdefault((r.method, r.dataset), []).append(r.test_acc)

    def datasets(self):
        return list(self._datasets)

    def methods(self):
        present = {m for m, _ in self._cells}
        ordered = [row.id for row in METHOD_ROWS if row.id in present]
        ordered += sorted(present - set(ordered))
        return ordered

    def cell(self, method, dataset):
        return self._cells.get((method, dataset))

    def mean(self, method, dataset):
        vals = self._cells.get((method, dataset))
        return None if not vals else float(np.mean(vals))

    def std(self, method, dataset):
        vals = self._cells.get((method, dataset))
        return None if not vals else float(np.std(vals))

    def average(self, method):
        means = [m for ds in self._datasets if (m := self.mean(method, ds)) is not None]
        return None if not means else float(np.mean(means))

    def column_value(self, method, column):
        return self.average(method) if column == "Average" else self.mean(method, column)

    def best(self, column):
        best_method, best_val = None, None
        for m in self.methods():
            v = self.column_value(m, column)
            if v is not None and (best_val is None or v > best_val):
                best_method, best_val = m, v
        return best_method

    def columns(self):
        return self._datasets + ["Average"]

    def to_markdown(self, verdicts=None):
        cols = self.columns()
        lines = ["| Method | " + " | ".join(cols) + " |",
                 "|---" * (len(cols) + 1) + "|"]
        best = {c: self.best(c) for c in cols}
        for m in self.methods():
            cells = []
            for c in cols:
                v = self.column_value(m, c)
                if v is None:
                    cells.append("—")
                else:
                    text = f"{v:.3f}"
                    cells.append(f"**{text}**" if best[c] == m else text)
            lines.append(f"| {display_name(m)} | " + " | ".join(cells) + " |")
        if verdicts:
            lines.append("")
            lines.append("## Ordering checks")
            for v in verdicts:
                lines.append(f"- {v.describe()}")
        return "\n".join(lines) + "\n"

    def to_csv(self):
        cols = self.columns()
        rows = [["method"] + cols]
        for m in self.methods():
            row = [display_name(m)]
            for c in cols:
                v = self.column_value(m, c)
                row.append("" if v is None else f"{v:.6f}")
            rows.append(row)
        return "\n".join(",".join(str(x) for x in row) for row in rows) + "\n"


def display_name(method_id):
    row = METHOD_BY_ID.get(method_id)
    return row.display if row else method_id


@dataclass(frozen=True)
class Verdict:
    claim: str
    dataset: str
    passed: bool | None  # None: prerequisites missing, claim not evaluable
    detail: str

    def describe(self):
        status = "SKIP" if self.passed is None else ("PASS" if self.passed else "FAIL")
        return f"[{status}] {self.claim} on {self.dataset}: {self.detail}"


def ordering_verdicts(results):
    """The three ordering claims, evaluated per dataset from seed-mean accuracies."""
    table = ReportTable(results)
    verdicts = []
    for ds in table.datasets():
        means = {m: table.mean(m, ds) for m in table.methods()
                 if table.mean(m, ds) is not None}
        verdicts.extend(_dataset_verdicts(ds, means))
    return verdicts


def _best_of(means, ids):
    vals = {m: v for m, v in means.items() if m in ids}
    if not vals:
        return None, None
    best = max(vals, key=vals.get)
    return best, vals[best]


def _dataset_verdicts(ds, means):
    out = []
    noadapt = means.get("no-adapt")
    adapt_id, adapt_best = _best_of(means, set(means) - {"no-adapt"})
    if noadapt is None or adapt_best is None:
        out.append(Verdict("adaptation beats no-adaptation", ds, None,
                           "needs no-adapt plus at least one adaptation method"))
    else:
        gain = adapt_best - noadapt
        out.append(Verdict(
            "adaptation beats no-adaptation", ds, gain >= ADAPTATION_GAIN,
            f"best adaptation {display_name(adapt_id)} {adapt_best:.3f} vs "
            f"no-adapt {noadapt:.3f} (gain {gain:+.3f}, need >= {ADAPTATION_GAIN})"))

    pseudo_id, pseudo_best = _best_of(means, _PSEUDO_IDS)
    inst_id, inst_best = _best_of(means, _INSTANCE_IDS)
    if pseudo_best is None or inst_best is None:
        out.append(Verdict("pseudo labeling matches instance weighting", ds, None,
                           "needs at least one pseudo and one instance method"))
    else:
        out.append(Verdict(
            "pseudo labeling matches instance weighting", ds,
            pseudo_best >= inst_best - PSEUDO_MARGIN,
            f"best pseudo {display_name(pseudo_id)} {pseudo_best:.3f} vs best "
            f"instance {display_name(inst_id)} {inst_best:.3f} "
            f"(margin {PSEUDO_MARGIN})"))

    dann = means.get("dann")
    if pseudo_best is None or dann is None:
        out.append(Verdict("pseudo labeling matches adversarial baseline", ds, None,
                           "needs dann plus at least one pseudo method"))
    else:
        out.append(Verdict(
            "pseudo labeling matches adversarial baseline", ds,
            pseudo_best >= dann - PSEUDO_MARGIN,
            f"best pseudo {display_name(pseudo_id)} {pseudo_best:.3f} vs "
            f"dann {dann:.3f} (margin {PSEUDO_MARGIN})"))
    return out


def emit_report(results, out_dir=None, formats=("md", "csv"), figures=True):
    """Render tables (plus verdicts and figures) from grid results."""
    table = ReportTable(results)
    verdicts = ordering_verdicts(results)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        if "md" in formats:
            (out_dir / "table.md").write_text(table.to_markdown(verdicts))
        if "csv" in formats:
            (out_dir / "table.csv").write_text(table.to_csv())
        if figures:
            from . import plots
            plots.render_figures(table, results, out_dir)
    return table, verdicts


def domain_probe(pair, hidden=32, steps=800, batch_size=64, seed=0, lr=1e-3):
    """Train a fresh source-vs-target classifier on raw inputs; return its
    held-out balanced accuracy (~0.5 means the domains are indistinguishable)."""
    rng = np.random.default_rng(seed)
    xs = pair.source.features.data
    xt = pair.target_train.features.data
    s_tr, s_ev = _probe_split(xs, rng)
    t_tr, t_ev = _probe_split(xt, rng)
    probe = init_mlp((xs.shape[1], hidden, 1), rng)
    opt = Adam(slots_of(probe))
    for _ in range(steps):
        bs = Tensor(s_tr[rng.integers(0, len(s_tr), batch_size)])
        bt = Tensor(t_tr[rng.integers(0, len(t_tr), batch_size)])
        tape = GradTape()
        loss = disc_loss(forward_domain(probe, bs, tape),
                         forward_domain(probe, bt, tape), tape)
        opt.step(tape.backward(loss), lr, term="probe_loss")
    n = min(len(s_ev), len(t_ev))
    d_s = forward_domain(probe, Tensor(s_ev[:n]), None).data
    d_t = forward_domain(probe, Tensor(t_ev[:n]), None).data
    return float(((d_s < 0.5).sum() + (d_t >= 0.5).sum()) / (2 * n))


def _probe_split(x, rng, eval_frac=0.25):
    perm = rng.permutation(len(x))
    cut = max(1, int(len(x) * eval_frac))
    return x[perm[cut:]], x[perm[:cut]]


def domain_disc_accuracy(bundle, pair, n=512, seed=0):
    """Trained discriminator's balanced accuracy on held-out feature rows."""
    rng = np.random.default_rng(seed)
    n = min(n, len(pair.target_holdout), len(pair.source))
    xs = pair.source.features.data[rng.choice(len(pair.source), n, replace=False)]
    xt = pair.target_holdout.features.data[:n]
    d_s = forward_domain(bundle.domain_head,
                         forward_features(bundle.extractor, Tensor(xs), None), None).data
    d_t = forward_domain(bundle.domain_head,
                         forward_features(bundle.extractor, Tensor(xt), None), None).data
    return float(((d_s < 0.5).sum() + (d_t >= 0.5).sum()) / (2 * n))
