import csv
import os

import numpy as np
import pytest

from nfprecond import checkpoint as ck
from nfprecond import cli
from nfprecond import config as C
from nfprecond import experiment as E
from nfprecond.diagnostics import CSV_FIELDS
from nfprecond.errors import ConfigError, NumericFailure

TINY_1D = """seed={seed}
out_dir={out}
task.kind=1d
task.n_points=32
task.batch_size=8
net.activation=gaussian
net.sigma=0.5
net.hidden=6,5
optim.algorithm={algo}
optim.eta={eta}
optim.refresh_every=3
train.iterations={iters}
train.eval_interval=4
diag.sparsity=true
diag.kappa={kappa}
"""


def write_cfg(tmp_path, name="run", seed=0, algo="esgd", eta=0.05, iters=20, kappa="true", extra=""):
    out = tmp_path / name
    path = tmp_path / f"{name}.cfg"
    path.write_text(TINY_1D.format(seed=seed, out=out, algo=algo, eta=eta, iters=iters, kappa=kappa) + extra)
    return str(path), out


def read(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_zero_iterations_gives_step_zero_row(tmp_path):
    cfg, out = write_cfg(tmp_path, iters=0)
    assert cli.main(["train", cfg]) == 0
    rows = read(out / "metrics.csv")
    assert rows[0] == list(CSV_FIELDS)
    assert len(rows) == 2 and rows[1][0] == "0"


def test_rows_and_schema(tmp_path):
    cfg, out = write_cfg(tmp_path, iters=10)
    cli.main(["train", cfg])
    rows = read(out / "metrics.csv")
    assert [r[0] for r in rows[1:]] == ["0", "4", "8", "10"]
    for r in rows[1:]:
        assert r[3] == "mse" and r[5] == "" and r[6] != "" and r[7] != ""


def test_rerun_is_byte_identical(tmp_path):
    cfg, out = write_cfg(tmp_path)
    cli.main(["train", cfg])
    first = (out / "metrics.csv").read_bytes(), (out / "checkpoint.nfpc").read_bytes()
    cli.main(["train", cfg])
    assert ((out / "metrics.csv").read_bytes(), (out / "checkpoint.nfpc").read_bytes()) == first


@pytest.mark.parametrize("algo", ["esgd", "adam", "shampoo", "adahessian_j", "esgd_max"])
def test_resume_matches_uninterrupted_run(tmp_path, algo):
    full_cfg, full_out = write_cfg(tmp_path, "full", algo=algo, eta=0.01, iters=20)
    cli.main(["train", full_cfg])
    part_cfg, part_out = write_cfg(tmp_path, "part", algo=algo, eta=0.01, iters=20)
    assert cli.main(["train", part_cfg, "--iters", "9"]) == 0
    assert ck.load(part_out / "checkpoint.nfpc").iteration == 9
    assert cli.main(["train", part_cfg, "--resume"]) == 0
    assert (part_out / "metrics.csv").read_bytes() == (full_out / "metrics.csv").read_bytes()
    a, b = ck.load(part_out / "checkpoint.nfpc"), ck.load(full_out / "checkpoint.nfpc")
    assert a.params.tobytes() == b.params.tobytes() and a.scalars == b.scalars


def test_periodic_checkpoints_and_resume_without_gap(tmp_path):
    cfg_path, out = write_cfg(tmp_path, iters=12, extra="train.checkpoint_every=5\n")
    cfg = C.load(cfg_path)
    E.train(cfg)
    ref = read(out / "metrics.csv")
    ckp = ck.load(out / "checkpoint.nfpc")
    assert ckp.iteration == 12
    # interrupt after the checkpoint at 10 by truncating the budget
    from dataclasses import replace
    short = replace(cfg, out_dir=str(tmp_path / "short"), train=replace(cfg.train, iterations=11))
    E.train(short)
    E.train(replace(short, train=cfg.train), resume=True)
    assert read(tmp_path / "short" / "metrics.csv") == ref


def test_resume_with_wrong_network_is_config_error(tmp_path):
    cfg, out = write_cfg(tmp_path)
    cli.main(["train", cfg])
    other, _ = write_cfg(tmp_path, "other")
    text = open(other).read().replace("net.hidden=6,5", "net.hidden=6,6").replace(str(tmp_path / "other"), str(out))
    open(other, "w").write(text)
    assert cli.main(["train", other, "--resume"]) == 2


def test_numeric_failure_keeps_last_good_checkpoint(tmp_path, capsys):
    path = tmp_path / "q.cfg"
    out = tmp_path / "q"
    path.write_text(f"seed=0\nout_dir={out}\ntask.kind=quadratic\ntask.scales=1,2\n"
                    "optim.algorithm=sgd\noptim.eta=1e200\ntrain.iterations=10\ntrain.eval_interval=1\n"
                    "train.checkpoint_every=1\ndiag.sparsity=false\n")
    assert cli.main(["train", str(path)]) == 3
    assert "numeric failure" in capsys.readouterr().err
    good = ck.load(out / "checkpoint.nfpc")
    assert np.isfinite(good.params).all() and good.iteration >= 1
    assert len(read(out / "metrics.csv")) > 1


def test_compare_with_itself(tmp_path):
    cfg, _ = write_cfg(tmp_path, kappa="false")
    report = tmp_path / "cmp.csv"
    assert cli.main(["compare", cfg, cfg, "--out", str(report), "--threshold", "-1"]) == 0
    rows = read(report)
    diff_col = rows[0].index(next(h for h in rows[0] if h.endswith("_diff")))
    assert all(float(r[diff_col]) == 0.0 for r in rows[1:])
    summary = read(tmp_path / "cmp.summary.csv")
    assert summary[1][1:] == summary[2][1:]
    assert summary[1][3] == E.UNREACHED


def test_compare_rejects_different_tasks(tmp_path):
    a, _ = write_cfg(tmp_path, "a", kappa="false")
    b, _ = write_cfg(tmp_path, "b", kappa="false")
    open(b, "a").write("task.n_points=40\n")
    assert cli.main(["compare", a, b, "--out", str(tmp_path / "c.csv")]) == 2


def test_compare_threshold_hits():
    cfg = C.preset("1d-gauss", "adam")
    from nfprecond.diagnostics import MetricsRecord
    recs = [MetricsRecord(i, 0, v, "mse", v) for i, v in ((0, 1.0), (10, 0.5), (20, 0.1))]
    _, _, summary, _ = E.compare([("a", cfg, recs)], threshold=0.4)
    assert summary[1] == ["a", "0.1", "0.1", "20"]


def test_diagnose_identity_quadratic(tmp_path, capsys):
    path = tmp_path / "id.cfg"
    path.write_text(f"seed=0\nout_dir={tmp_path / 'id'}\ntask.kind=quadratic\ntask.scales=1,1,1,1\n")
    assert cli.main(["diagnose", str(path), "--kappa"]) == 0
    rows = read(tmp_path / "id" / "spectrum.csv")
    assert [float(r[2]) for r in rows[1:]] == [1.0, 1.0, 1.0]
    assert "kappa[equilibrated] = 1" in capsys.readouterr().out


def test_diagnose_zero_parameters_and_refusal(tmp_path):
    path = tmp_path / "z.cfg"
    path.write_text(f"seed=0\nout_dir={tmp_path / 'z'}\ntask.kind=quadratic\ntask.scales=\n")
    assert cli.main(["diagnose", str(path), "--kappa"]) == 3
    assert cli.main(["diagnose", "preset:img-gauss", "--kappa", "--out-dir", str(tmp_path / "r")]) == 4


def test_diagnose_checkpoint_midway(tmp_path):
    cfg, out = write_cfg(tmp_path, iters=8, kappa="false")
    cli.main(["train", cfg])
    assert cli.main(["diagnose", cfg, "--checkpoint", str(out / "checkpoint.nfpc"), "--kappa", "--sparsity"]) == 0
    sp = read(out / "sparsity.csv")
    assert sp[-1][1] == "global" and 0.0 <= float(sp[-1][2]) <= 1.0
    assert len(read(out / "spectrum.csv")) == 4


def test_bad_config_exit_code(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("optim.eta=1\n")
    assert cli.main(["train", str(path)]) == 2
    assert cli.main(["train", str(tmp_path / "nope.cfg")]) == 2


def test_presets_command(capsys):
    assert cli.main(["presets"]) == 0
    names = capsys.readouterr().out.split()
    assert "img-gauss" in names and "1d-gauss" in names
    assert cli.main(["presets", "img-sine", "--algorithm", "esgd", "--seed", "2"]) == 0
    assert C.loads(capsys.readouterr().out) == C.preset("img-sine", "esgd", 2)


def test_image_run_writes_snapshot(tmp_path):
    path = tmp_path / "img.cfg"
    out = tmp_path / "img"
    path.write_text(f"seed=1\nout_dir={out}\ntask.kind=image\ntask.size=8\ntask.batch_size=16\n"
                    "net.activation=sine\nnet.omega0=10\nnet.hidden=8,8\ntrain.epochs=2\ntrain.eval_interval=4\n")
    assert cli.main(["train", str(path)]) == 0
    from nfprecond.tasks import read_ppm
    assert read_ppm(out / "prediction.ppm").shape == (8, 8, 3)
    rows = read(out / "metrics.csv")
    assert rows[-1][0] == "8" and rows[-1][1] == "2" and rows[-1][3] == "psnr"


def test_occupancy_run_reports_iou(tmp_path):
    path = tmp_path / "occ.cfg"
    out = tmp_path / "occ"
    path.write_text(f"seed=1\nout_dir={out}\ntask.kind=occupancy\ntask.n_points=300\ntask.n_eval=200\n"
                    "task.batch_size=100\nnet.activation=gaussian\nnet.sigma=0.3\nnet.hidden=8\n"
                    "train.epochs=1\ntrain.eval_interval=1\ndiag.sparsity=false\n")
    res = E.train(C.load(str(path)))
    assert [r.iteration for r in res.records] == [0, 1, 2, 3]
    assert all(r.metric_name == "iou" and 0.0 <= r.metric_value <= 1.0 for r in res.records)


def test_wall_time_is_opt_in(tmp_path):
    cfg, out = write_cfg(tmp_path, iters=4, kappa="false", extra="wall_time=true\n")
    cli.main(["train", cfg])
    rows = read(out / "metrics.csv")
    assert rows[1][5] == "" and all(r[5] != "" for r in rows[2:])
