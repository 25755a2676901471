import os

import numpy as np
import pytest

from equisearch import nas_evo, reports, train


def fake_training_records(n=40):
    rng = np.random.default_rng(0)
    return [{"step": i, "loss": float(2.0 * np.exp(-i / 15) + rng.normal(0, 0.02))}
            for i in range(n)]


def fake_evo_rows():
    rng = np.random.default_rng(1)
    rows = []
    for g in range(4):
        for lin in range(3 + g):
            rows.append({
                "gen": g, "lineage": lin, "parent": max(0, lin - 1),
                "genotype": "D4-D4-C4-C4", "params": int(rng.integers(500, 5000)),
                "steps_trained": 10 * (g + 1),
                "val_loss": float(rng.uniform(0.5, 2.0)),
                "val_acc": float(rng.uniform(0.2, 0.9)),
                "selected": int(lin < 2),
            })
    return rows


def fake_diff_rows(n_layers=3, n=25):
    rng = np.random.default_rng(2)
    rows = []
    for i in range(n):
        row = {"iter": i * 4, "loss_z": float(rng.uniform(1, 2)),
               "loss_w": float(rng.uniform(1, 2))}
        for l in range(n_layers):
            z = rng.dirichlet(np.ones(6))
            for name, v in zip(reports.GROUP_ORDER, z):
                row[f"z{l}_{name}"] = float(v)
        rows.append(row)
    return rows


def test_plot_training_writes_svg(tmp_path):
    p = reports.plot_training(fake_training_records(), str(tmp_path / "t.svg"))
    assert os.path.getsize(p) > 1000
    with open(p) as f:
        assert "<svg" in f.read(200)


def test_plot_evo_writes_svg(tmp_path):
    p = reports.plot_evo(fake_evo_rows(), str(tmp_path / "e.svg"))
    assert os.path.getsize(p) > 1000


def test_plot_diff_writes_svg(tmp_path):
    p = reports.plot_diff(fake_diff_rows(), str(tmp_path / "d.svg"))
    assert os.path.getsize(p) > 1000


def test_plot_diff_detects_layer_count(tmp_path):
    # 5 layers forces a second row of panels
    p = reports.plot_diff(fake_diff_rows(n_layers=5), str(tmp_path / "d5.svg"))
    assert os.path.getsize(p) > 1000


def test_same_rows_same_bytes(tmp_path):
    rows = fake_evo_rows()
    p1 = reports.plot_evo(rows, str(tmp_path / "a.svg"))
    p2 = reports.plot_evo(rows, str(tmp_path / "b.svg"))
    with open(p1, "rb") as f1, open(p2, "rb") as f2:
        assert f1.read() == f2.read()


def test_accepts_csv_string_rows(tmp_path):
    # rows that round-tripped through disk arrive as strings
    path = str(tmp_path / "train_log.csv")
    train.write_rows(path, ["step", "loss"], fake_training_records())
    rows = train.read_rows(path)
    assert isinstance(rows[0]["loss"], str)
    p = reports.plot_training(rows, str(tmp_path / "t.svg"))
    assert os.path.getsize(p) > 1000


def test_render_run_dir_discovers_csvs(tmp_path):
    run = tmp_path / "run"
    run.mkdir()
    train.write_rows(str(run / "train_log.csv"), ["step", "loss"],
                     fake_training_records())
    train.write_rows(str(run / "evo_history.csv"), nas_evo.EVO_FIELDS,
                     fake_evo_rows())
    written = reports.render_run_dir(str(run))
    assert sorted(os.path.basename(p) for p in written) == \
        ["evo.svg", "training.svg"]
    for p in written:
        assert os.path.getsize(p) > 0


def test_render_run_dir_separate_out_dir(tmp_path):
    run, out = tmp_path / "run", tmp_path / "figs"
    run.mkdir()
    rows = fake_diff_rows(n_layers=2)
    fields = ["iter", "loss_z", "loss_w"] + [
        f"z{l}_{g}" for l in range(2) for g in reports.GROUP_ORDER]
    train.write_rows(str(run / "diff_trajectory.csv"), fields, rows)
    written = reports.render_run_dir(str(run), str(out))
    assert written == [str(out / "diff.svg")]
    assert os.path.exists(out / "diff.svg")


def test_render_empty_dir(tmp_path):
    assert reports.render_run_dir(str(tmp_path)) == []
