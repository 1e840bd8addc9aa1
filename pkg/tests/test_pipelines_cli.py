"""End-to-end pipeline stages and the command-line front end."""

import json
from pathlib import Path

import numpy as np
import pytest

from gpdistill import cli, pipelines
from gpdistill.checkpoint import load_checkpoint
from gpdistill.config import parse_config
from gpdistill.errors import ParameterError

TINY_INI = """
[data]
kind = blobs
n_train = 48
n_test = 32
n_inducing = 16
seed = 0

[predictor]
arch = mlp
hidden = 8
iters = 80
batch = 16
lr = 0.01

[gp]
kernel_dim = 6

[mapper]
arch = dense
hidden = 8

[distill]
max_iter = 12
batch_query = 16
batch_inducing = 8
probe_every = 5

[explain]
k = 3

[debug]
corrupt_frac = 0.4
n_random_orders = 5

[sweep]
m_values = 4,8
n_splits = 2
"""

BARS_INI = """
[data]
kind = bars8x8
n_train = 40
n_test = 20
n_inducing = 12
seed = 0

[predictor]
arch = conv
channels = 4,4
dense_width = 8
iters = 60
batch = 16
lr = 0.01

[gp]
kernel_dim = 4

[mapper]
arch = conv
channels = 4

[distill]
max_iter = 6
batch_query = 12
batch_inducing = 6
probe_every = 5

[explain]
k = 3
"""


@pytest.fixture(scope="module")
def tiny_cfg():
    return parse_config(TINY_INI, origin="tiny")


@pytest.fixture(scope="module")
def bars_cfg():
    return parse_config(BARS_INI, origin="bars")


@pytest.fixture(scope="module")
def trained(tmp_path_factory, tiny_cfg):
    out = tmp_path_factory.mktemp("train")
    res = pipelines.run_train_ann(tiny_cfg, seed=0, out=out)
    return {"out": out, **res}


@pytest.fixture(scope="module")
def bars_trained(tmp_path_factory, bars_cfg):
    out = tmp_path_factory.mktemp("bars_train")
    res = pipelines.run_train_ann(bars_cfg, seed=0, out=out)
    return {"out": out, **res}


# ------------------------------------------------------------- build helpers


def test_build_datasets_sizes_and_inducing_subset(tiny_cfg):
    train, test, inducing = pipelines.build_datasets(tiny_cfg)
    assert (train.n, test.n, inducing.n) == (48, 32, 16)
    train_rows = {row.tobytes() for row in train.instances}
    for row in inducing.instances:
        assert row.tobytes() in train_rows
    # train and test are distinct draws
    assert not np.array_equal(train.instances[:20], test.instances[:20])


def test_build_datasets_deterministic(tiny_cfg):
    a = pipelines.build_datasets(tiny_cfg)
    b = pipelines.build_datasets(tiny_cfg)
    for da, db in zip(a, b):
        np.testing.assert_array_equal(da.instances, db.instances)
        np.testing.assert_array_equal(da.labels, db.labels)


def test_build_datasets_validation(tiny_cfg):
    from dataclasses import replace
    bad = replace(tiny_cfg, data=replace(tiny_cfg.data, n_inducing=500))
    with pytest.raises(ParameterError, match="n_inducing"):
        pipelines.build_datasets(bad)
    idx = replace(tiny_cfg, data=replace(tiny_cfg.data, kind="idx"))
    with pytest.raises(ParameterError, match="train_images"):
        pipelines.build_datasets(idx)


def test_derive_seed_spread():
    seeds = {pipelines.derive_seed(s, k) for s in range(6) for k in range(50)}
    assert len(seeds) == 6 * 50


# -------------------------------------------------------------- train stage


def test_train_ann_artifacts(trained):
    out = trained["out"]
    assert (out / "model.ckpt").exists()
    assert (out / "model.ckpt.json").exists()
    report = json.loads((out / "train_ann.json").read_text())
    assert report["schema"] == 1
    assert report["stage"] == "train-ann"
    assert report["n_inducing"] == 16
    # well-separated blobs: the tiny MLP should classify them essentially
    # perfectly even with this little training
    assert report["test_accuracy"] >= 0.9
    data = load_checkpoint(out / "model.ckpt")
    assert data.store.n_rows == 16
    assert data.hyper.kernel_dim == 6


# ------------------------------------------------------------ distill stage


def test_distill_from_checkpoint_writes_reports(tmp_path, tiny_cfg, trained):
    res = pipelines.run_distill(tiny_cfg, seed=0, out=tmp_path,
                                checkpoint_path=trained["checkpoint"])
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "iter,loss," + ",".join(f"r_head_{h}" for h in range(2))
    assert len(lines) == 1 + 12
    report = json.loads((tmp_path / "distill.json").read_text())
    assert report["iterations"] == 12
    assert len(report["per_head_pearson"]) == 2
    assert report["n_probe"] == 32
    # checkpoint written after the final full row refresh matches memory
    data = load_checkpoint(tmp_path / "distilled.ckpt")
    for h in range(2):
        np.testing.assert_array_equal(data.store.u[h], res["store"].u[h])
        np.testing.assert_array_equal(data.store.v[h], res["store"].v[h])


def test_distill_max_iter_zero_keeps_initial_store(tmp_path, tiny_cfg, trained):
    pipelines.run_distill(tiny_cfg, seed=0, out=tmp_path,
                          checkpoint_path=trained["checkpoint"], max_iter=0)
    init = load_checkpoint(trained["checkpoint"])
    final = load_checkpoint(tmp_path / "distilled.ckpt")
    for h in range(2):
        np.testing.assert_array_equal(final.store.u[h], init.store.u[h])
        np.testing.assert_array_equal(final.store.v[h], init.store.v[h])
    np.testing.assert_array_equal(final.store.index_map, init.store.index_map)
    for got, want in zip(final.mapper.backbone + sum(final.mapper.branches, []),
                         init.mapper.backbone + sum(init.mapper.branches, [])):
        for a, b in zip(got.__dict__.values(), want.__dict__.values()):
            if isinstance(a, np.ndarray):
                np.testing.assert_array_equal(a, b)


def test_distill_inline_without_checkpoint(tmp_path, tiny_cfg):
    res = pipelines.run_distill(tiny_cfg, seed=0, out=tmp_path)
    assert (tmp_path / "trace.csv").exists()
    assert (tmp_path / "distilled.ckpt").exists()
    assert len(res["trace"].losses) == 12


# ------------------------------------------------------- faithfulness stage


def test_faithfulness_csv(tmp_path, tiny_cfg, trained):
    res = pipelines.run_faithfulness(tiny_cfg, seed=0, out=tmp_path,
                                     checkpoint_path=trained["checkpoint"])
    lines = (tmp_path / "faithfulness.csv").read_text().splitlines()
    assert lines[0] == "head,pearson,n_probe"
    assert len(lines) == 3
    for h, line in enumerate(lines[1:]):
        head, r, n = line.split(",")
        assert int(head) == h
        float(r)  # parseable (may be nan)
        assert int(n) == 32
    assert res["faithfulness"].n_probe == 32


def test_faithfulness_requires_checkpoint(tmp_path, tiny_cfg):
    with pytest.raises(ParameterError, match="checkpoint"):
        pipelines.run_faithfulness(tiny_cfg, seed=0, out=tmp_path,
                                   checkpoint_path=None)


# ------------------------------------------------------------ explain stage


def test_explain_conv_writes_maps(tmp_path, bars_cfg, bars_trained):
    res = pipelines.run_explain(bars_cfg, seed=0, out=tmp_path,
                                checkpoint_path=bars_trained["checkpoint"],
                                indices=[0, 1])
    report = json.loads((tmp_path / "explain.json").read_text())
    assert len(report["explanations"]) == 2
    for entry in report["explanations"]:
        assert len(entry["neighbor_indices"]) == 3
        sims = entry["similarities"]
        assert sims == sorted(sims, reverse=True)
        assert entry["images"] is not None
        for key in ("test_maps", "neighbor_maps", "neighbors"):
            assert (tmp_path / entry["images"][key]["file"]).exists()
    assert res["report"]["k"] == 3


def test_explain_dense_has_no_images(tmp_path, tiny_cfg, trained):
    pipelines.run_explain(tiny_cfg, seed=0, out=tmp_path,
                          checkpoint_path=trained["checkpoint"], indices=[5])
    report = json.loads((tmp_path / "explain.json").read_text())
    entry = report["explanations"][0]
    assert entry["images"] is None
    assert len(entry["neighbor_indices"]) == 3
    assert list(tmp_path.glob("*.pgm")) == []


def test_explain_validates_indices(tmp_path, tiny_cfg, trained):
    with pytest.raises(ParameterError, match="outside"):
        pipelines.run_explain(tiny_cfg, seed=0, out=tmp_path,
                              checkpoint_path=trained["checkpoint"],
                              indices=[999])
    with pytest.raises(ParameterError, match="at least one"):
        pipelines.run_explain(tiny_cfg, seed=0, out=tmp_path,
                              checkpoint_path=trained["checkpoint"], indices=[])


# -------------------------------------------------------------- debug stage


def test_debug_dataset_report(tmp_path, tiny_cfg):
    res = pipelines.run_debug_dataset(tiny_cfg, seed=0, out=tmp_path)
    report = json.loads((tmp_path / "debug.json").read_text())
    n = report["n_train"]
    assert n == 48
    assert report["n_corrupted"] == round(0.4 * 48)
    curve = report["guided_curve"]
    assert len(curve) == n
    assert curve[-1] == report["n_corrupted"]
    assert all(b - a in (0, 1) for a, b in zip(curve, curve[1:]))
    assert len(report["random_mean_curve"]) == n
    # the mean random curve also ends at the full corruption count
    assert report["random_mean_curve"][-1] == pytest.approx(report["n_corrupted"])
    assert res["mask"].sum() == report["n_corrupted"]


# -------------------------------------------------------------- sweep stage


def test_sweep_inducing_report(tmp_path, tiny_cfg):
    res = pipelines.run_sweep_inducing(tiny_cfg, seed=0, out=tmp_path)
    report = json.loads((tmp_path / "sweep.json").read_text())
    assert report["m_values"] == [4, 8]
    arr = np.asarray(report["per_split"])
    assert arr.shape == (2, 2)
    assert np.isfinite(arr).all()
    assert len(report["mean"]) == 2 and len(report["stderr"]) == 2
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0] == "m,split,pearson_mean"
    assert len(lines) == 1 + 4
    np.testing.assert_allclose(res["mean"], arr.mean(axis=0))


# ---------------------------------------------------------------------- CLI


@pytest.fixture(scope="module")
def ini_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.ini"
    path.write_text(TINY_INI)
    return path


def test_cli_usage_errors_exit_2(capsys):
    assert cli.main(["no-such-command"]) == 2
    assert cli.main(["distill", "--no-such-flag"]) == 2
    assert cli.main(["faithfulness"]) == 2  # --checkpoint is required
    assert cli.main([]) == 2
    capsys.readouterr()


def test_cli_train_ann_and_distill_roundtrip(tmp_path, ini_path):
    out1 = tmp_path / "a"
    code = cli.main(["train-ann", "--config", str(ini_path),
                     "--out", str(out1)])
    assert code == 0
    assert (out1 / "model.ckpt").exists()
    out2 = tmp_path / "b"
    code = cli.main(["distill", "--config", str(ini_path), "--out", str(out2),
                     "--checkpoint", str(out1 / "model.ckpt"),
                     "--max-iter", "4"])
    assert code == 0
    lines = (out2 / "trace.csv").read_text().splitlines()
    assert len(lines) == 1 + 4
    code = cli.main(["explain", "--config", str(ini_path),
                     "--out", str(tmp_path / "c"),
                     "--checkpoint", str(out2 / "distilled.ckpt"),
                     "--indices", "0,1"])
    assert code == 0
    code = cli.main(["faithfulness", "--config", str(ini_path),
                     "--out", str(tmp_path / "d"),
                     "--checkpoint", str(out2 / "distilled.ckpt")])
    assert code == 0
    assert (tmp_path / "d" / "faithfulness.csv").exists()


def test_cli_runtime_failures_exit_1(tmp_path, ini_path, capsys):
    code = cli.main(["faithfulness", "--config", str(ini_path),
                     "--out", str(tmp_path),
                     "--checkpoint", str(tmp_path / "absent.ckpt")])
    assert code == 1
    assert "gpdistill: error:" in capsys.readouterr().err

    bad_cfg = tmp_path / "bad.ini"
    bad_cfg.write_text("[data]\nkind = hexagons\n")
    code = cli.main(["train-ann", "--config", str(bad_cfg),
                     "--out", str(tmp_path)])
    assert code == 1
    assert "kind" in capsys.readouterr().err


def test_cli_distill_runs_are_byte_identical(tmp_path, ini_path):
    outs = [tmp_path / "r1", tmp_path / "r2"]
    for out in outs:
        code = cli.main(["distill", "--config", str(ini_path),
                         "--out", str(out), "--seed", "7"])
        assert code == 0
    for name in ("trace.csv", "distill.json", "distilled.ckpt",
                 "distilled.ckpt.json"):
        a = (outs[0] / name).read_bytes()
        b = (outs[1] / name).read_bytes()
        assert a == b, f"{name} differs between identical runs"
