"""Training loop, comparison and diagnosis runs driven by an ExperimentConfig."""
import csv
import hashlib
import io
import json
import os
import time
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from . import diagnostics as dg
from . import optim
from . import tasks
from .config import ExperimentConfig
from .errors import ConfigError, NumericFailure
from .fields import forward, init_params

METRICS_FILE = "metrics.csv"
CHECKPOINT_FILE = "checkpoint.nfpc"

# rng stream tags; each (seed, tag, counter) triple is an independent stream
PROBE_STREAM = 104729
DIAG_STREAM = 15485863
EVAL_STREAM = 1


def probe_rng(seed, it, stream=PROBE_STREAM):
    return np.random.default_rng([int(seed), stream, int(it)])


# ---------------------------------------------------------------------------
# problems


@dataclass
class Problem:
    """A task bound to a parameterization: losses, evaluation and batching."""

    kind: str
    n_params: int
    layout: Optional[tuple]
    digest: str
    train: Optional[tasks.Dataset]
    held_out: Optional[tasks.Dataset]
    spec: object = None
    scales: Optional[np.ndarray] = None
    batch_size: int = 1

    @property
    def batches_per_epoch(self):
        if self.train is None:
            return 1
        return -(-len(self.train) // self.batch_size)

    def batch(self, seed, it):
        """(inputs, targets) used by iteration ``it``."""
        if self.train is None:
            return None, None
        bpe = self.batches_per_epoch
        idx = tasks.epoch_batches(len(self.train), self.batch_size, seed, it // bpe)[it % bpe]
        return self.train.inputs[idx], self.train.targets[idx]

    def loss_fn(self, X, Y):
        if self.kind == "quadratic":
            s = self.scales
            return lambda th: 0.5 * (th * th * s).sum()
        spec, loss = self.spec, tasks.loss_for(self.kind)
        return lambda th: loss(forward(spec, th, X), Y)

    def predict(self, flat, X):
        return forward(self.spec, flat, X)

    def evaluate(self, flat):
        """Full-data loss and the task metric."""
        if self.kind == "quadratic":
            with np.errstate(over="ignore"):
                loss = float(0.5 * np.sum(self.scales * flat * flat))
            return loss, "loss", loss
        pred = self.predict(flat, self.train.inputs)
        loss = float(np.asarray(tasks.loss_for(self.kind)(pred, self.train.targets)))
        if self.kind == "image":
            return loss, "psnr", tasks.psnr(np.clip(pred, 0.0, 1.0), self.train.targets)
        if self.kind == "occupancy":
            ho = self.held_out
            prob = tasks.sigmoid(self.predict(flat, ho.inputs))
            return loss, "iou", float(tasks.iou(prob, ho.targets))
        return loss, "mse", loss

    def init(self, cfg):
        if self.kind == "quadratic":
            rng = np.random.default_rng([int(cfg.seed), 0])
            return rng.uniform(-1.0, 1.0, self.n_params)
        return init_params(self.spec, cfg.seed, cfg.net.init_gain, cfg.net.init_hidden_gain).flat.copy()


def build_problem(cfg: ExperimentConfig) -> Problem:
    t = cfg.task
    if t.kind == "quadratic":
        scales = np.asarray(t.scales, dtype=np.float64)
        digest = hashlib.sha256(json.dumps(["quadratic", list(t.scales)]).encode()).hexdigest()
        return Problem("quadratic", scales.size, None, digest, None, None, scales=scales)
    held_out = None
    if t.kind == "1d":
        data = tasks.make_1d_task(t.n_points)
    elif t.kind == "image":
        data = tasks.make_image_task(t.source, t.size)
    else:
        data = tasks.make_occupancy_task(t.shape, t.n_points, cfg.seed)
        n_eval = t.n_eval or t.n_points
        held_out = tasks.make_occupancy_task(t.shape, n_eval, [int(cfg.seed), EVAL_STREAM])
    spec = cfg.network_spec()
    batch = min(t.batch_size, len(data)) if t.batch_size > 0 else len(data)
    return Problem(t.kind, spec.n_params, spec.layout(), spec.digest(), data, held_out,
                   spec=spec, batch_size=batch)


def total_iterations(cfg: ExperimentConfig, problem: Problem):
    if cfg.train.iterations is not None:
        return int(cfg.train.iterations)
    return int(cfg.train.epochs) * problem.batches_per_epoch


# ---------------------------------------------------------------------------
# metrics files


def write_metrics(path, records):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(dg.CSV_FIELDS)
    for r in records:
        w.writerow(r.row())
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def _opt_float(s):
    return float(s) if s != "" else None


def read_metrics(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append(dg.MetricsRecord(
            int(r["iteration"]), int(r["epoch"]), float(r["loss"]), r["metric_name"],
            float(r["metric_value"]), _opt_float(r["wall_ms"]), _opt_float(r["sparsity_global"]),
            _opt_float(r["kappa_raw"]), _opt_float(r["kappa_jacobi"]), _opt_float(r["kappa_equilibrated"])))
    return out


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    out_dir: str
    records: list
    params: np.ndarray
    iterations: int
    failure: Optional[BaseException] = None

    @property
    def final(self):
        return self.records[-1]


def _make_checkpoint(problem, it, bpe, params, state):
    return ckpt.Checkpoint(problem.digest, it, it // bpe, params, state.arrays(), state.scalars())


def train(cfg: ExperimentConfig, resume=False, write=True) -> TrainResult:
    """Run (or resume) training; rows are recorded before step ``it``.

    Resuming from a checkpoint at iteration k keeps the CSV rows before k and
    replays nothing else, so an interrupted and an uninterrupted run produce
    identical files.
    """
    problem = build_problem(cfg)
    total = total_iterations(cfg, problem)
    if total < 0:
        raise ConfigError("iteration count must be >= 0")
    bpe = problem.batches_per_epoch
    tracker = dg.Tracker(cfg.diag, problem.n_params, cfg.train.eval_interval)
    state = optim.init_state(cfg.optim, problem.n_params)
    params = problem.init(cfg)
    start = 0
    out = cfg.out_dir
    metrics_path = os.path.join(out, METRICS_FILE)
    ck_path = os.path.join(out, CHECKPOINT_FILE)
    if write:
        os.makedirs(out, exist_ok=True)
    if resume:
        ck = ckpt.load(ck_path, expect_digest=problem.digest)
        params = ck.params.copy()
        state.restore(ck.arrays, ck.scalars)
        start = ck.iteration
        if start > total:
            raise ConfigError(f"checkpoint is at iteration {start}, beyond the requested {total}")
        if os.path.exists(metrics_path):
            tracker.records = [r for r in read_metrics(metrics_path) if r.iteration < start]
    elif write:
        ckpt.save(ck_path, _make_checkpoint(problem, 0, bpe, params, state))

    def hvp_at(flat, it):
        X, Y = problem.batch(cfg.seed, it)
        v = optim.rademacher(probe_rng(cfg.seed, it, DIAG_STREAM), problem.n_params)
        return ad.hvp(problem.loss_fn(X, Y), flat, v), problem.layout

    def hessian_at(flat, it):
        X, Y = problem.batch(cfg.seed, it)
        return dg.full_hessian(problem.loss_fn(X, Y), flat, cfg.diag.kappa_limit)

    wall = None
    failure = None
    it = start
    try:
        for it in range(start, total + 1):
            if tracker.due(it, total):
                loss, mname, mval = problem.evaluate(params)
                cur = params
                tracker.record(it, it // bpe, loss, mname, mval,
                               wall if cfg.wall_time else None,
                               hvp_fn=lambda i, p=cur: hvp_at(p, i),
                               hessian_fn=lambda p=cur, i=it: hessian_at(p, i))
            if it == total:
                break
            X, Y = problem.batch(cfg.seed, it)
            fn = problem.loss_fn(X, Y)
            rng = probe_rng(cfg.seed, it)
            probes = optim.draw_probes(cfg.optim, state, rng)
            if probes:
                _, g, hv = ad.value_grad_hvp(fn, params, probes[0])
                pairs = [(probes[0], hv)] + [(v, ad.hvp(fn, params, v)) for v in probes[1:]]
            else:
                _, g = ad.value_and_grad(fn, params)
                pairs = []
            t0 = time.perf_counter()
            new = optim.apply_step(cfg.optim, state, params, g, pairs, problem.layout)
            wall = (time.perf_counter() - t0) * 1e3
            if not np.isfinite(new).all():
                raise NumericFailure(f"non-finite parameters after step {it}")
            params = new
            ce = cfg.train.checkpoint_every
            if write and ce and (it + 1) % ce == 0 and it + 1 < total:
                ckpt.save(ck_path, _make_checkpoint(problem, it + 1, bpe, params, state))
    except NumericFailure as exc:
        exc.args = (f"at iteration {it}: {exc.args[0] if exc.args else exc}",) + exc.args[1:]
        failure = exc
    if write:
        write_metrics(metrics_path, tracker.records)
        if failure is None:
            ckpt.save(ck_path, _make_checkpoint(problem, total, bpe, params, state))
            if cfg.train.snapshots or problem.kind == "image":
                _write_snapshot(out, problem, params)
    if failure is not None:
        raise failure
    return TrainResult(out, tracker.records, params, total)


def _write_snapshot(out, problem, flat):
    if problem.kind != "image":
        return
    pred = problem.predict(flat, problem.train.inputs)
    tasks.write_ppm(os.path.join(out, "prediction.ppm"), tasks.render_image(problem.train, pred))


# ---------------------------------------------------------------------------
# comparison

UNREACHED = "unreached"
LOWER_IS_BETTER = {"mse", "loss"}


def _better(name, a, b):
    return a < b if name in LOWER_IS_BETTER else a > b


def _reached(name, value, threshold):
    return value <= threshold if name in LOWER_IS_BETTER else value >= threshold


def compare(runs, threshold=None):
    """Join per-run records by iteration and summarize.

    ``runs`` is a list of (label, config, records). Returns (header, rows,
    summary rows).
    """
    if not runs:
        raise ConfigError("nothing to compare")
    base = runs[0][1]
    for label, cfg, _ in runs[1:]:
        if cfg.task != base.task:
            raise ConfigError(f"run {label!r} uses a different task")
        if cfg.train.eval_interval != base.train.eval_interval:
            raise ConfigError(f"run {label!r} uses a different eval interval")
    labels = []
    for label, _, _ in runs:
        name, k = label, 2
        while name in labels:
            name, k = f"{label}#{k}", k + 1
        labels.append(name)
    metric = runs[0][2][0].metric_name
    by_iter = [{r.iteration: r for r in recs} for _, _, recs in runs]
    iters = sorted(set().union(*by_iter))
    header = ["iteration"]
    for lab in labels:
        header += [f"{lab}.loss", f"{lab}.{metric}"]
    for lab in labels[1:]:
        header += [f"{lab}.{metric}_diff"]
    rows = []
    for i in iters:
        row = [str(i)]
        for recs in by_iter:
            r = recs.get(i)
            row += [repr(r.loss), repr(r.metric_value)] if r else ["", ""]
        r0 = by_iter[0].get(i)
        for recs in by_iter[1:]:
            r = recs.get(i)
            row.append(repr(r.metric_value - r0.metric_value) if (r and r0) else "")
        rows.append(row)
    if threshold is None:
        threshold = runs[0][2][-1].metric_value
    summary = [["run", "final_" + metric, "best_" + metric, f"iterations_to_{metric}_threshold"]]
    for lab, (_, _, recs) in zip(labels, runs):
        best = recs[0].metric_value
        hit = UNREACHED
        for r in recs:
            if _better(metric, r.metric_value, best):
                best = r.metric_value
            if hit == UNREACHED and _reached(metric, r.metric_value, threshold):
                hit = str(r.iteration)
        summary.append([lab, repr(recs[-1].metric_value), repr(best), hit])
    return header, rows, summary, threshold


def write_compare(path, header, rows, summary, threshold):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    root, ext = os.path.splitext(path)
    with open(f"{root}.summary{ext or '.csv'}", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerows(summary)
        w.writerow(["threshold", repr(float(threshold)), "", ""])


def run_compare(configs, out_path, threshold=None, rerun=True):
    """Train every config (or reuse its metrics.csv) and write the joined report."""
    runs = []
    for cfg in configs:
        mpath = os.path.join(cfg.out_dir, METRICS_FILE)
        if rerun or not os.path.exists(mpath):
            recs = train(cfg).records
        else:
            recs = read_metrics(mpath)
        runs.append((cfg.label, cfg, recs))
    header, rows, summary, thr = compare(runs, threshold)
    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    write_compare(out_path, header, rows, summary, thr)
    return header, rows, summary


# ---------------------------------------------------------------------------
# diagnosis


def diagnose(cfg: ExperimentConfig, checkpoint_path=None, kappa=True, sparsity=True, out_dir=None):
    """Spectrum and sparsity reports at a checkpoint (or the initial point)."""
    problem = build_problem(cfg)
    out_dir = out_dir or cfg.out_dir
    if checkpoint_path:
        ck = ckpt.load(checkpoint_path, expect_digest=problem.digest)
        params, it = ck.params, ck.iteration
    else:
        params, it = problem.init(cfg), 0
    X, Y = problem.batch(cfg.seed, it)
    if problem.kind != "quadratic" and problem.batch_size < len(problem.train):
        X, Y = problem.train.inputs, problem.train.targets
    fn = problem.loss_fn(X, Y)
    os.makedirs(out_dir, exist_ok=True)
    result = {}
    if kappa:
        if problem.n_params > cfg.diag.kappa_limit:
            raise dg.RefusalError(
                f"full Hessian needs {problem.n_params} HVPs; limit is {cfg.diag.kappa_limit} parameters",
                limit=cfg.diag.kappa_limit)
        if problem.n_params == 0:
            raise dg.DegenerateSpectrum("no parameters")
        H = dg.full_hessian(fn, params, cfg.diag.kappa_limit)
        trip = dg.kappa_triplet(H, cfg.diag.kappa_cutoff, cfg.diag.kappa_damping)
        with open(os.path.join(out_dir, "spectrum.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "kind", "kappa", "lambda_max", "lambda_min_kept", "n_dropped", "n_params", "cutoff"])
            for kind in ("raw", "jacobi", "equilibrated"):
                r = trip[kind]
                w.writerow([it, kind, repr(r.kappa), repr(r.lambda_max), repr(r.lambda_min_kept),
                            r.n_dropped, r.n_params, repr(r.cutoff)])
        result["spectrum"] = trip
    if sparsity:
        v = optim.rademacher(probe_rng(cfg.seed, it, DIAG_STREAM), problem.n_params)
        rec = dg.hvp_sparsity(ad.hvp(fn, params, v), problem.layout, cfg.diag.tau, it)
        with open(os.path.join(out_dir, "sparsity.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "layer", "sparsity", "tau", "degenerate"])
            for layer, frac in rec.per_layer.items():
                w.writerow([it, layer, repr(frac), repr(rec.tau), int(rec.degenerate)])
            w.writerow([it, "global", repr(rec.global_fraction), repr(rec.tau), int(rec.degenerate)])
        result["sparsity"] = rec
    return result
