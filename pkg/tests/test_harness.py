import csv
import io
import json
import math

import numpy as np
import pytest

from dpsgd import accountant, bench, cli, config, data, experiments, models, training


def small(**kw):
    base = dict(model="logreg", n=2000, d=10, classes=2, separation=5.0, epochs=2, batch_size=100, max_lr=0.5,
                seed=0)
    base.update(kw)
    return config.ExperimentConfig(**base)


def run_cli(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


# ---------------------------------------------------------------------------
# config


def test_config_validation():
    with pytest.raises(config.ConfigError, match="exactly one"):
        small().validate()
    with pytest.raises(config.ConfigError, match="exactly one"):
        small(noise_multiplier=1.0, target_epsilon=2.0).validate()
    small(noise_multiplier=1.0).validate()
    with pytest.raises(config.ConfigError, match="lr_grid"):
        small(noise_multiplier=0.0).validate(sweeping=("lr_grid",))
    with pytest.raises(config.ConfigError):
        small(target_epsilon=1.0, clip_norm=None).validate()
    with pytest.raises(config.ConfigError):
        small(noise_multiplier=1.0, delta=1.0).validate()


def test_config_overrides_and_load(tmp_path):
    cfg = config.apply_overrides(small(), ["epochs=3", "lr_grid=[0.1, 0.2]", "model=mlp:8", "clip_norm=null"])
    assert cfg.epochs == 3 and cfg.lr_grid == [0.1, 0.2] and cfg.model == "mlp:8" and cfg.clip_norm is None
    with pytest.raises(config.ConfigError):
        config.apply_overrides(cfg, ["bogus=1"])
    with pytest.raises(config.ConfigError):
        config.apply_overrides(cfg, ["epochs"])
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.to_dict()))
    assert config.load(p) == cfg
    p.write_text("{not json")
    with pytest.raises(config.ConfigError):
        config.load(p)
    p.write_text('{"nope": 1}')
    with pytest.raises(config.ConfigError):
        config.load(p)


def test_warmup_default():
    assert small(epochs=10).resolved_warmup == 1.0
    assert small(epochs=11).resolved_warmup == 5.0
    assert small(epochs=30, warmup_epochs=2).resolved_warmup == 2


# ---------------------------------------------------------------------------
# train


def test_non_private_logreg_separable():
    cfg = small(n=10000, d=20, separation=10.0, epochs=5, batch_size=256, clip_norm=None, noise_multiplier=0.0)
    rec = training.train(cfg)
    assert rec.final_test_acc >= 0.99
    assert rec.privacy is None


def test_epsilon_target_met():
    rec = training.train(small(target_epsilon=3.0, delta=1e-5))
    assert rec.privacy["epsilon"] == pytest.approx(3.0, rel=1e-3)
    assert rec.metrics[-1]["epsilon"] == rec.privacy["epsilon"]
    p = rec.privacy
    again = accountant.compute_epsilon(p["sigma"], p["q"], p["steps"], p["delta"])
    assert again == p["epsilon"]


def test_train_is_deterministic_and_self_reproducing():
    cfg = small(noise_multiplier=1.0, sampler="poisson")
    a = training.train(cfg)
    b = training.train(cfg)
    assert a.metrics_csv() == b.metrics_csv()
    c = training.train(config.from_dict(json.loads(a.to_json())["config"]))
    assert c.metrics_csv() == a.metrics_csv()
    header = a.metrics_csv().splitlines()[0]
    assert header == ",".join(training.METRICS_FIELDS)


def test_record_write(tmp_path):
    rec = training.train(small(noise_multiplier=1.0))
    rec.write(tmp_path)
    body = json.loads((tmp_path / "run.json").read_text())
    assert set(body["privacy"]) >= {"epsilon", "delta", "sigma", "q", "steps", "order"}
    assert len(body["epoch_wall_time_s"]) == 2
    model = models.load_model(tmp_path / "run_model.ckpt")
    assert model.params.flatten().tobytes() == rec.params.flatten().tobytes()


def test_shuffled_sampler_flags_mismatch():
    rec = training.train(small(noise_multiplier=1.0, sampler="shuffled"))
    assert rec.privacy["sampling_mismatch"] is True
    rec = training.train(small(noise_multiplier=1.0))
    assert rec.privacy["sampling_mismatch"] is False


def test_virtual_steps_keep_effective_batch():
    q, spe = training.sampling_plan(small(batch_size=50, virtual_steps=4), 2000)
    assert q == 0.1 and spe == 10
    with pytest.raises(ValueError):
        training.sampling_plan(small(batch_size=3000), 2000)


def test_unreachable_target_raises():
    with pytest.raises(accountant.PrivacyTargetError):
        training.train(small(target_epsilon=1e-9, delta=1e-5))


# ---------------------------------------------------------------------------
# CLI


def test_cli_epsilon(capsys):
    code, out, _ = run_cli(capsys, "accountant", "epsilon", "--sigma", "1.5", "--q", "0.01", "--steps", "10000",
                           "--delta", "1e-5")
    assert code == 0
    body = json.loads(out)
    assert abs(body["epsilon"] - 3.45) / 3.45 < 0.1
    assert len(out.strip().splitlines()) == 1


def test_cli_sigma_round_trip(capsys):
    _, out, _ = run_cli(capsys, "accountant", "sigma", "--epsilon", "10", "--q", "0.01", "--steps", "5000",
                        "--delta", "1e-5")
    sigma = json.loads(out)["sigma"]
    _, out, _ = run_cli(capsys, "accountant", "epsilon", "--sigma", repr(sigma), "--q", "0.01", "--steps", "5000",
                        "--delta", "1e-5")
    assert json.loads(out)["epsilon"] == pytest.approx(10.0, rel=1e-3)


def test_cli_batch_curve(capsys):
    code, out, _ = run_cli(capsys, "accountant", "batch-curve")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert [int(r["batch_size"]) for r in rows] == [1024 * 4 ** i for i in range(6)]
    eps = [float(r["epsilon"]) for r in rows]
    assert all(math.isfinite(e) for e in eps)
    assert all(a > b for a, b in zip(eps, eps[1:]))


def test_cli_delta_curve(tmp_path, capsys):
    out_path = tmp_path / "curve.csv"
    code, _, _ = run_cli(capsys, "accountant", "delta-curve", "--sigma", "1.0", "--q", "0.01", "--steps", "1000",
                         "--points", "5", "--out", str(out_path))
    assert code == 0
    rows = list(csv.DictReader(out_path.open()))
    assert len(rows) == 5
    eps = [float(r["epsilon"]) for r in rows]
    assert all(a >= b for a, b in zip(eps, eps[1:]))


@pytest.mark.parametrize("argv", [
    ["accountant", "epsilon", "--sigma", "1", "--q", "2", "--steps", "10", "--delta", "1e-5"],
    ["accountant", "epsilon", "--sigma", "1", "--q", "0.1", "--steps", "10", "--delta", "0"],
    ["accountant", "epsilon", "--q", "0.1", "--steps", "10", "--delta", "1e-5"],
    ["frobnicate"],
])
def test_cli_usage_errors(capsys, argv):
    with pytest.raises(SystemExit) as e:
        cli.main(argv)
    assert e.value.code == 2
    err = capsys.readouterr().err
    assert "usage" in err
    assert json.loads(err.strip().splitlines()[-1])["error"] == "usage"


def test_cli_runtime_error_json(capsys):
    code, _, err = run_cli(capsys, "accountant", "sigma", "--epsilon", "1e-9", "--q", "0.01", "--steps", "100",
                           "--delta", "1e-5")
    assert code == 1
    body = json.loads(err.strip().splitlines()[-1])
    assert body["error"] == "PrivacyTargetError" and body["message"]


def test_cli_missing_dataset(tmp_path, capsys):
    code, _, err = run_cli(capsys, "train", "--set", "dataset=cifar10", "--set", f"data_root={tmp_path}",
                           "--out", str(tmp_path / "o"))
    assert code == 1
    assert json.loads(err.strip().splitlines()[-1])["error"] == "FileNotFoundError"


def test_cli_train_writes_outputs(tmp_path, capsys):
    out = tmp_path / "run"
    code, stdout, _ = run_cli(capsys, "train", "--set", "n=1000", "--set", "epochs=1", "--set", "batch_size=100",
                              "--set", "noise_multiplier=1.0", "--out", str(out))
    assert code == 0
    body = json.loads(stdout)
    assert body["epsilon"] > 0 and body["sampling_mismatch"] is False
    for name in ("run.json", "run_metrics.csv", "run_model.ckpt", "config.json"):
        assert (out / name).exists()
    snap = config.load(out / "config.json")
    rerun = training.train(snap)
    assert rerun.metrics_csv() == (out / "run_metrics.csv").read_text()


def test_cli_verbose_either_side(tmp_path, capsys):
    for argv in (["-v", "train"], ["train", "-v"]):
        code, _, _ = run_cli(capsys, *argv, "--set", "n=500", "--set", "epochs=1", "--set", "batch_size=100",
                             "--out", str(tmp_path / "v"))
        assert code == 0


# ---------------------------------------------------------------------------
# tune


def tune_cfg(**kw):
    base = dict(epochs=1, lr_grid=[0.05], clip_grid=[0.001, 0.003, 0.01, 0.03, 0.1, 0.3, 1.0, 100.0, 1000.0],
                target_epsilon=2.0, tune_heatmap=False)
    base.update(kw)
    return small(**base)


def test_tune_clip_sweep_monotone_and_plateau():
    res = experiments.tune(tune_cfg())
    rows = [r for r in res.table if r["phase"] == "clip_sweep"]
    accs = [r["test_acc"] for r in rows]
    assert all(a <= b for a, b in zip(accs, accs[1:]))
    # no clipping ever happens above the largest possible per-example gradient norm
    train_ds, _ = training.load_datasets(tune_cfg())
    bound = math.sqrt(2) * math.sqrt(np.max(np.sum(train_ds.x ** 2, axis=1)) + 1)
    plateau = [r["test_acc"] for r in rows if r["clip_norm"] > bound]
    assert len(plateau) >= 2 and len(set(plateau)) == 1
    assert plateau[0] == res.reference_acc
    assert res.clip_norm == min(r["clip_norm"] for r in rows if r["test_acc"] >= res.reference_acc - 0.01)


def test_tune_heatmap_band(tmp_path):
    cfg = small(separation=2.0, epochs=3, lr_grid=[0.05, 0.2, 0.8, 3.2], clip_grid=[0.01, 0.03, 0.1, 0.3, 1.0],
                target_epsilon=2.0)
    res = experiments.tune(cfg)
    (a, b) = experiments.best_cells(res.table, "heatmap", 2)
    assert abs(math.log(a["lr"] * a["clip_norm"]) - math.log(b["lr"] * b["clip_norm"])) <= math.log(4)
    heat = list(csv.DictReader(io.StringIO(res.heatmap_csv())))
    assert sum(r["phase"] == "heatmap" for r in heat) == 20
    assert all(float(r["epsilon"]) == pytest.approx(2.0, rel=1e-3) for r in heat)


def test_tune_infeasible_reports_diagnostics(tmp_path, capsys):
    cfg = tune_cfg(tune_tolerance=-1.0)
    with pytest.raises(experiments.TuneError) as e:
        experiments.tune(cfg)
    assert "reference_acc" in e.value.diagnostics
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.to_dict()))
    code, _, err = run_cli(capsys, "tune", "--config", str(p), "--out", str(tmp_path / "t"))
    assert code == 1 and json.loads(err.strip().splitlines()[-1])["error"] == "TuneError"
    assert (tmp_path / "t" / "tune_diagnostics.json").exists()


def test_tune_refine_adds_cells():
    res = experiments.tune(tune_cfg(clip_grid=[100.0, 1000.0], tune_refine=True))
    assert sum(r["phase"] == "refine" for r in res.table) == 8


# ---------------------------------------------------------------------------
# fixed-epsilon sweep


def test_fixed_eps_sweep():
    cfg = small(target_epsilon=2.0, epochs_grid=[1, 2, 4], lr_grid=[0.1, 0.5])
    rows, cells = experiments.fixed_eps_sweep(cfg)
    sig = [r["sigma"] for r in rows]
    assert all(a < b for a, b in zip(sig, sig[1:]))
    for r in rows:
        assert r["epsilon"] == pytest.approx(2.0, rel=1e-3)
    assert len(cells) == 6
    assert experiments.sweep_csv(rows).splitlines()[0] == ",".join(experiments.SWEEP_FIELDS)


def test_fixed_eps_sweep_needs_target():
    with pytest.raises((ValueError, config.ConfigError)):
        experiments.fixed_eps_sweep(small(noise_multiplier=1.0, epochs_grid=[1]))


# ---------------------------------------------------------------------------
# finetune


def test_finetune_scope_and_freezing(tmp_path, capsys):
    cfg = small(model="mlp:16,8", classes=4, d=10, separation=3.0, target_epsilon=2.0, freeze=2, epochs=2,
                pretrain_epochs=2, batch_size=50)
    res = experiments.finetune(cfg, with_scratch=True)
    assert res.frozen_unchanged
    train_ds, _ = training.load_datasets(cfg)
    _, private = data.public_private_split(train_ds, cfg.public_fraction, cfg.seed)
    q, spe = training.sampling_plan(cfg, len(private))
    assert res.finetune.privacy["steps"] == cfg.dp_config(0.0, spe).total_steps
    assert res.finetune.privacy["q"] == q
    assert res.finetune.privacy["epsilon"] == pytest.approx(2.0, rel=1e-3)
    assert res.pretrain.privacy is None
    assert res.scratch.privacy["epsilon"] == pytest.approx(2.0, rel=1e-3)
    p = tmp_path / "ft.json"
    p.write_text(json.dumps(cfg.to_dict()))
    code, out, _ = run_cli(capsys, "finetune", "--config", str(p), "--no-scratch", "--out", str(tmp_path / "f"))
    assert code == 0 and json.loads(out)["frozen_unchanged"] is True
    assert (tmp_path / "f" / "finetune_metrics.csv").exists()


# ---------------------------------------------------------------------------
# bench


def test_dp_paths_agree():
    model = models.mlp((16,), 4, (8,), seed=0)
    ds = data.synth_gaussian_mixture(64, 16, 4, 3.0)
    assert bench.dp_path_agreement(model, ds, 32) < 1e-10


def test_bench_report_shape():
    rep = bench.bench_training(batch_size=64, epochs=1, warmup=0, ref={"d": 16, "hidden": (8,), "n": 256})
    assert set(rep["epoch_time_s"]) == set(bench.MODES)
    assert rep["ratio_to_non_private"]["non_private"] == 1.0
    assert rep["dp_paths_max_abs_diff"] < 1e-10


# ---------------------------------------------------------------------------
# file-backed datasets through the training path


def test_train_on_cifar_format_files(tmp_path):
    base = tmp_path / "cifar-10-batches-bin"
    base.mkdir()
    rng = np.random.default_rng(0)
    for name in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
        rec = rng.integers(0, 256, (20, data.CIFAR_RECORD), dtype=np.uint8)
        rec[:, 0] = rng.integers(0, 10, 20)
        (base / name).write_bytes(rec.tobytes())
    cfg = config.ExperimentConfig(model="simplevgg:4(1)-8", dataset="cifar10", data_root=str(tmp_path),
                                  dtype="float32", sampler="shuffled", batch_size=25, epochs=1,
                                  clip_norm=None, noise_multiplier=0.0)
    rec = training.train(cfg)
    assert rec.dataset["train"] == 100 and rec.dataset["test"] == 20
    assert rec.params["head.w"].dtype == np.float32
    assert len(rec.dataset["normalization"]["mean"]) == 3


def test_train_on_mnist_files(tmp_path):
    rng = np.random.default_rng(1)
    for stem, n in (("train", 60), ("t10k", 20)):
        (tmp_path / f"{stem}-images-idx3-ubyte").write_bytes(
            data.idx_bytes(rng.integers(0, 256, (n, 28, 28)), data.IDX_IMAGES_MAGIC))
        (tmp_path / f"{stem}-labels-idx1-ubyte").write_bytes(
            data.idx_bytes(rng.integers(0, 10, n), data.IDX_LABELS_MAGIC))
    cfg = config.ExperimentConfig(model="mlp:8", dataset="mnist", data_root=str(tmp_path), batch_size=20, epochs=1,
                                  noise_multiplier=1.0)
    rec = training.train(cfg)
    assert rec.dataset["train"] == 60 and rec.privacy["steps"] == 3
