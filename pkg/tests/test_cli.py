"""End-to-end tests for the fednoisy CLI subcommands."""

import csv
import json
import os

import numpy as np
import pytest

from fednoisy.cli import main


def base_config(out_dir, **overrides):
    cfg = {
        "dataset": {"kind": "synthetic", "classes": 3, "dims": 6, "spread": 0.3},
        "subset_size": 120, "test_size": 60, "hidden_dims": [8],
        "client": {"lr": 0.1, "local_epochs": 2, "batch_size": 16},
        "server": {"aggregator": "fedavg", "rounds": 4, "num_clients": 4},
        "noise": {"clean_prob": 1.0},
        "seed": 1, "out_dir": str(out_dir),
    }
    for key, value in overrides.items():
        if isinstance(value, dict):
            cfg.setdefault(key, {}).update(value)
        else:
            cfg[key] = value
    return cfg


def write_config(tmp_path, cfg, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


# ---------------------------------------------------------------------- run

def test_run_clean_synthetic(tmp_path):
    out = tmp_path / "out"
    path = write_config(tmp_path, base_config(out))
    assert main(["run", "--config", path]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["final_accuracy"] >= 0.95
    for name in ("metrics.csv", "metrics.jsonl", "config_echo.json",
                 "summary.json", "timings.log"):
        assert (out / name).exists()


def test_run_invalid_config_exits_2(tmp_path):
    path = write_config(tmp_path, base_config(tmp_path / "o",
                                              server={"beta": -1}))
    assert main(["run", "--config", path]) == 2


def test_run_missing_config_exits_2(tmp_path):
    assert main(["run", "--config", str(tmp_path / "absent.json")]) == 2


def test_run_deterministic_bytes(tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    path = write_config(tmp_path, base_config(out1))
    assert main(["run", "--config", path]) == 0
    assert main(["run", "--config", path, "--out", str(out2)]) == 0
    assert (out1 / "metrics.csv").read_bytes() == (out2 / "metrics.csv").read_bytes()
    assert (out1 / "metrics.jsonl").read_bytes() == (out2 / "metrics.jsonl").read_bytes()
    assert (out1 / "summary.json").read_bytes() == (out2 / "summary.json").read_bytes()


def test_run_worker_count_invariance(tmp_path):
    out1, out2 = tmp_path / "w1", tmp_path / "w2"
    path = write_config(tmp_path, base_config(out1))
    assert main(["run", "--config", path, "--workers", "1"]) == 0
    assert main(["run", "--config", path, "--out", str(out2),
                 "--workers", "3"]) == 0
    assert (out1 / "metrics.csv").read_bytes() == (out2 / "metrics.csv").read_bytes()


def test_run_seed_override_changes_outputs(tmp_path):
    out1, out2 = tmp_path / "s1", tmp_path / "s2"
    path = write_config(tmp_path, base_config(out1))
    assert main(["run", "--config", path]) == 0
    assert main(["run", "--config", path, "--out", str(out2),
                 "--seed", "77"]) == 0
    assert (out1 / "metrics.csv").read_bytes() != (out2 / "metrics.csv").read_bytes()


def test_run_outputs_stay_in_out_dir(tmp_path):
    out = tmp_path / "only_here"
    path = write_config(tmp_path, base_config(out))
    before = set(os.listdir(tmp_path))
    assert main(["run", "--config", path]) == 0
    after = set(os.listdir(tmp_path))
    assert after - before == {"only_here"}


# ------------------------------------------------------------------ compare

def test_compare_writes_wide_csv(tmp_path):
    out = tmp_path / "cmp"
    cfg = base_config(out, noise={"clean_prob": 0.5, "within_rate": 1.0},
                      server={"rounds": 3})
    path = write_config(tmp_path, cfg)
    assert main(["compare", "--config", path,
                 "--aggregators", "fedavg,fed_ncl"]) == 0
    with open(out / "comparison.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["round", "fedavg", "fed_ncl"]
    assert len(rows) == 1 + 3
    assert (out / "fedavg" / "metrics.csv").exists()
    assert (out / "fed_ncl" / "metrics.csv").exists()


def test_compare_clean_runs_agree(tmp_path):
    out = tmp_path / "cmp2"
    cfg = base_config(out, server={"rounds": 5})
    path = write_config(tmp_path, cfg)
    assert main(["compare", "--config", path,
                 "--aggregators", "fedavg,fed_ncl"]) == 0
    rows = list(csv.reader(open(out / "comparison.csv")))
    final = rows[-1]
    assert abs(float(final[1]) - float(final[2])) <= 0.02


def test_compare_requires_two_aggregators(tmp_path):
    path = write_config(tmp_path, base_config(tmp_path / "x"))
    assert main(["compare", "--config", path, "--aggregators", "fedavg"]) == 2
    assert main(["compare", "--config", path,
                 "--aggregators", "fedavg,krum"]) == 2


# ------------------------------------------------------------ noise-preview

def test_noise_preview_profile(tmp_path):
    out = tmp_path / "np"
    cfg = base_config(out, subset_size=4000, test_size=30,
                      noise={"clean_prob": 0.5, "within_rate": 0.8},
                      server={"num_clients": 8, "rounds": 1})
    path = write_config(tmp_path, cfg)
    assert main(["noise-preview", "--config", path]) == 0
    with open(out / "noise_profile.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 8
    for row in rows:
        rate = float(row["rate"])
        realized = float(row["realized_flip_fraction"])
        assert rate in (0.0, 0.8)
        if int(row["n_samples"]) >= 500:
            assert abs(realized - rate) < 0.05
    assert not (out / "metrics.csv").exists()  # no training happened


def test_noise_preview_bernoulli_noisy_count_band(tmp_path):
    # binomial(20, 0.2): ~4 noisy clients expected, allow +-3 sigma
    out = tmp_path / "np_band"
    cfg = base_config(out, subset_size=400, test_size=30,
                      noise={"clean_prob": 0.8, "within_rate": 1.0},
                      server={"num_clients": 20, "rounds": 1})
    path = write_config(tmp_path, cfg)
    assert main(["noise-preview", "--config", path]) == 0
    rows = list(csv.DictReader(open(out / "noise_profile.csv")))
    noisy = sum(float(r["rate"]) == 1.0 for r in rows)
    assert 0 <= noisy <= 10


def test_noise_preview_deterministic_bytes(tmp_path):
    out1, out2 = tmp_path / "n1", tmp_path / "n2"
    cfg = base_config(out1, noise={"clean_prob": 0.6})
    path = write_config(tmp_path, cfg)
    assert main(["noise-preview", "--config", path]) == 0
    assert main(["noise-preview", "--config", path, "--out", str(out2)]) == 0
    assert (out1 / "noise_profile.csv").read_bytes() == \
        (out2 / "noise_profile.csv").read_bytes()


def test_noise_preview_trunc_gauss_rates_in_bounds(tmp_path):
    out = tmp_path / "np2"
    cfg = base_config(out, noise={"mode": "trunc_gauss", "mean": 0.3,
                                  "std": 0.4},
                      server={"num_clients": 20, "rounds": 1})
    path = write_config(tmp_path, cfg)
    assert main(["noise-preview", "--config", path]) == 0
    rows = list(csv.DictReader(open(out / "noise_profile.csv")))
    assert len(rows) == 20
    assert all(0.0 <= float(r["rate"]) <= 1.0 for r in rows)


# ---------------------------------------------------------------------- cka

def cka_run(tmp_path, rounds=4, every=2):
    out = tmp_path / "cka"
    cfg = base_config(out, save_checkpoints=True, checkpoint_every=every,
                      noise={"mode": "fixed", "rates": [0.0, 0.0, 1.0, 1.0]},
                      server={"aggregator": "fed_ncl", "rounds": rounds})
    path = write_config(tmp_path, cfg)
    assert main(["run", "--config", path]) == 0
    return out, path


def test_cka_reports_from_checkpoints(tmp_path):
    out, path = cka_run(tmp_path)
    assert main(["cka", "--config", path]) == 0
    mats = sorted(p.name for p in out.glob("cka_layer_*.csv"))
    assert mats == ["cka_layer_0.csv", "cka_layer_1.csv"]
    rows = list(csv.reader(open(out / "cka_layer_0.csv")))
    names = [r[0] for r in rows[1:]]
    assert names == ["client0", "client1", "client2", "client3", "global"]
    mat = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    assert np.allclose(mat, mat.T, atol=1e-9)
    assert np.allclose(np.diag(mat), 1.0, atol=1e-9)
    depth = list(csv.DictReader(open(out / "cka_mean_depth.csv")))
    assert len(depth) == 2


def test_cka_round_selector(tmp_path):
    out, path = cka_run(tmp_path, rounds=4, every=2)
    assert main(["cka", "--config", path, "--round", "2"]) == 0
    assert main(["cka", "--config", path, "--round", "3"]) == 1  # not stored


def test_cka_without_checkpoints_fails_with_paths(tmp_path, capsys):
    out = tmp_path / "none"
    cfg = base_config(out)
    path = write_config(tmp_path, cfg)
    assert main(["run", "--config", path]) == 0
    assert main(["cka", "--config", path]) == 1
    err = capsys.readouterr().err
    assert "checkpoints" in err


def test_cka_outputs_deterministic(tmp_path):
    out, path = cka_run(tmp_path)
    assert main(["cka", "--config", path, "--round", "4"]) == 0
    first = (out / "cka_layer_0.csv").read_bytes()
    assert main(["cka", "--config", path, "--round", "4"]) == 0
    assert (out / "cka_layer_0.csv").read_bytes() == first


def test_identical_checkpoints_give_unit_matrices(tmp_path):
    # zero local epochs are disallowed; emulate identical models via lr -> tiny
    out = tmp_path / "ident"
    cfg = base_config(out, save_checkpoints=True, checkpoint_every=1,
                      client={"lr": 1e-12, "local_epochs": 1},
                      server={"aggregator": "fedavg", "rounds": 1})
    path = write_config(tmp_path, cfg)
    assert main(["run", "--config", path]) == 0
    assert main(["cka", "--config", path, "--round", "1"]) == 0
    rows = list(csv.reader(open(out / "cka_layer_0.csv")))
    mat = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    assert np.allclose(mat, 1.0, atol=1e-6)
