import shutil
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from conftest import make_sim, two_layer
from upfwi.errors import GeometryMismatchError, InvalidArgumentError
from upfwi.geogen import GeoParams, build_corpus, CorpusReader
from upfwi.inversion import (ClassicFwiConfig, UpfwiConfig, initial_model, classic_fwi, upfwi_train, evaluate,
                             mean_velocity_baseline, run_ablation, run_data_scaling, run_robustness, CHECKPOINT, TRAIN_LOG)
from upfwi.lossmetrics import LossWeights
from upfwi.nnet import NetConfig, build_inversion_net, load_checkpoint
from upfwi.tools import read_json_lines, read_json
from upfwi.wavesim import forward_model, desk_geometry

TINY_NET = {"latent_dim": 4, "channel_scale": 1 / 32, "time_decimation": 1}
CONFIGS = Path(__file__).resolve().parent.parent / "files" / "configs"


@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory):
    params = GeoParams(nz=16, nx=16, layer_thickness_range=(3, 5), fault_shift_range=(1, 3),
                       curve_amplitude_range=(1.0, 2.0), curve_period_range=(8.0, 32.0), seed=3)
    sim = make_sim(nz=16, nx=16, nt=64, absorb_layers=6, source_columns=(2, 13))
    sizes = {"labeled": 2, "unlabeled": 4, "val": 2, "test": 2}
    return build_corpus(params, sizes, tmp_path_factory.mktemp("corpus"), sim, shard_size=2).parent


def tiny_upfwi_config(corpus, **kwargs) -> UpfwiConfig:
    fields = dict(corpus=str(corpus), batch_size=2, epochs=2, loss=LossWeights.only_pixel_l1l2().to_dict(), net=dict(TINY_NET),
                  lr=1e-3)
    fields.update(kwargs)
    return UpfwiConfig(**fields)


@pytest.fixture(scope="module")
def trained(tiny_corpus, tmp_path_factory):
    checkpoint, log = upfwi_train(tiny_upfwi_config(tiny_corpus), tmp_path_factory.mktemp("train"))
    return checkpoint, log


# ---------------------------------------------------------------------------------------------------- classic FWI
def test_initial_models(tiny_sim):
    ramp = initial_model(tiny_sim, ClassicFwiConfig())
    assert ramp.shape == (16, 16)
    assert ramp[0, 0] == 3000.0 and ramp[-1, 5] == 6000.0
    assert np.all(initial_model(tiny_sim, ClassicFwiConfig(initial="constant")) == 4500.0)
    provided = two_layer(16, 16)
    smooth = initial_model(tiny_sim, ClassicFwiConfig(initial="provided", smoothing_sigma=2.0), provided)
    assert smooth.min() > 3000.0 - 1e-3 and smooth.max() < 3600.0 + 1e-3
    assert len(np.unique(smooth)) > 2
    with pytest.raises(InvalidArgumentError):
        initial_model(tiny_sim, ClassicFwiConfig(initial="provided"))


def test_true_model_is_a_fixed_point(tiny_sim):
    v_true = two_layer(16, 16)
    observed = forward_model(v_true, tiny_sim)
    v, trace = classic_fwi(observed, tiny_sim, ClassicFwiConfig(initial="provided"), v_true)
    np.testing.assert_array_equal(v, v_true)
    assert len(trace) == 1
    assert trace["misfit"].iloc[0] == 0.0


def test_backtracking_never_increases_the_objective(tiny_sim):
    observed = forward_model(two_layer(16, 16), tiny_sim)
    cfg = ClassicFwiConfig(initial="constant", constant_velocity=3300.0, max_iter=5, bounds=(3000.0, 6000.0))
    v, trace = classic_fwi(observed, tiny_sim, cfg)
    assert isinstance(trace, pd.DataFrame)
    assert list(trace.columns) == ["iteration", "objective", "misfit", "step", "backtracks"]
    objective = trace["objective"].to_numpy()
    assert np.all(np.diff(objective) <= 1e-9 * objective[0])
    assert objective[-1] < objective[0]
    assert v.min() >= 3000.0 and v.max() <= 6000.0


def test_l2_regularizer_enters_the_objective(tiny_sim):
    observed = forward_model(two_layer(16, 16), tiny_sim)
    cfg = ClassicFwiConfig(regularizer="l2", reg_weight=1e-9, max_iter=1)
    _, trace = classic_fwi(observed, tiny_sim, cfg)
    v0 = initial_model(tiny_sim, cfg).astype(np.float64)
    first = trace.iloc[0]
    assert first["objective"] - first["misfit"] == pytest.approx(1e-9 * np.sum(v0 * v0), rel=1e-6)


def test_oversized_steps_are_shortened_instead_of_failing(tiny_sim):
    observed = forward_model(two_layer(16, 16), tiny_sim)
    cfg = ClassicFwiConfig(initial="constant", constant_velocity=3300.0, max_iter=1, initial_step=1e5, max_backtracks=20)
    _, trace = classic_fwi(observed, tiny_sim, cfg)
    assert trace["backtracks"].iloc[0] > 0


def test_observed_gather_must_match_the_geometry(tiny_sim):
    with pytest.raises(GeometryMismatchError):
        classic_fwi(np.zeros((1, 79, 16)), tiny_sim)


def test_classic_config_validation(tmp_path):
    with pytest.raises(InvalidArgumentError):
        ClassicFwiConfig.from_dict({"regularizer": "tv"})
    with pytest.raises(InvalidArgumentError):
        ClassicFwiConfig.from_dict({"step_size": 1.0})
    cfg = ClassicFwiConfig.from_dict({"bounds": [3000.0, 6000.0], "max_iter": 3})
    assert cfg.bounds == (3000.0, 6000.0)


# ---------------------------------------------------------------------------------------------------- UPFWI
def test_training_writes_log_and_checkpoint(trained):
    checkpoint, log = trained
    assert checkpoint.name == CHECKPOINT
    records = read_json_lines(checkpoint.parent / TRAIN_LOG)
    assert [r["epoch"] for r in records] == [1, 2]
    assert all(np.isfinite(r["train_loss"]) and np.isfinite(r["val_loss"]) for r in records)
    assert {"mae", "mse", "ssim"} <= set(records[-1])
    net, state, meta = load_checkpoint(checkpoint)
    assert state.step == 4
    assert meta["extra"]["epoch"] == 2
    assert net.cfg.input_shape == (2, 64, 16)


def test_zero_learning_rate_keeps_the_initial_parameters(tiny_corpus, tmp_path):
    cfg = tiny_upfwi_config(tiny_corpus, lr=0.0, epochs=1)
    checkpoint, _ = upfwi_train(cfg, tmp_path)
    net, _, _ = load_checkpoint(checkpoint)
    fresh = build_inversion_net(NetConfig.for_simulation(CorpusReader(tiny_corpus).sim, **{**TINY_NET, "seed": 0}))
    for name, p in fresh.parameters().items():
        np.testing.assert_array_equal(net.parameters()[name].data, p.data)


def test_training_is_deterministic(tiny_corpus, tmp_path, trained):
    checkpoint, _ = upfwi_train(tiny_upfwi_config(tiny_corpus), tmp_path)
    a, _, _ = load_checkpoint(checkpoint)
    b, _, _ = load_checkpoint(trained[0])
    for name, p in a.parameters().items():
        np.testing.assert_array_equal(p.data, b.parameters()[name].data)


def test_training_never_reads_velocity_labels(tiny_corpus, tmp_path, trained):
    unlabeled = tmp_path / "corpus"
    shutil.copytree(tiny_corpus, unlabeled)
    for path in unlabeled.glob("*.velocity.fwib"):
        path.unlink()
    checkpoint, log = upfwi_train(tiny_upfwi_config(unlabeled), tmp_path / "run")
    assert "mae" not in log[-1]
    a, _, _ = load_checkpoint(checkpoint)
    b, _, _ = load_checkpoint(trained[0])
    for name, p in a.parameters().items():
        np.testing.assert_array_equal(p.data, b.parameters()[name].data)


def test_feature_loss_training_runs(tiny_corpus, tmp_path):
    cfg = tiny_upfwi_config(tiny_corpus, loss=LossWeights.full().to_dict(), epochs=1, val_split=None)
    _, log = upfwi_train(cfg, tmp_path)
    assert log[0]["val_loss"] == log[0]["train_loss"]


def test_upfwi_config_files(tmp_path):
    assert UpfwiConfig().loss_weights == LossWeights.full()
    (tmp_path / "cfg").mkdir()
    (tmp_path / "cfg" / "run.json").write_text('{"corpus": "../data", "loss": "pixel_l2", "epochs": 3}')
    cfg = UpfwiConfig.load(tmp_path / "cfg" / "run.json")
    assert cfg.loss_weights == LossWeights.only_pixel_l2()
    assert cfg.corpus == str(tmp_path / "cfg" / ".." / "data")
    with pytest.raises(InvalidArgumentError):
        UpfwiConfig.from_dict({"batch_size": 0})
    with pytest.raises(InvalidArgumentError):
        UpfwiConfig.from_dict({"optimizer": "sgd"})
    with pytest.raises(InvalidArgumentError):
        UpfwiConfig.from_dict({"max_train_samples": 0})


# ---------------------------------------------------------------------------------------------------- evaluation
def test_evaluation_rows(trained, tiny_corpus, tmp_path):
    table = evaluate(trained[0], tiny_corpus, noises=[1e-4], drops=[0, 4], with_seismic=True, out_dir=tmp_path)
    assert list(table["corruption"]) == ["clean", "noise", "drop", "drop"]
    clean, drop0 = table.iloc[0], table.iloc[2]
    for column in ("mae", "mse", "ssim"):
        assert clean[column] == drop0[column]
    assert clean["psnr"] == np.inf
    assert np.isfinite(table.iloc[1]["psnr"])
    assert {"seismic_mae", "seismic_mse", "seismic_ssim"} <= set(table.columns)
    written = read_json(tmp_path / "metrics.json")
    assert written["rows"][0]["psnr"] is None
    assert len(pd.read_csv(tmp_path / "metrics.csv")) == 4


def test_evaluation_needs_the_training_geometry(trained, tmp_path):
    params = GeoParams(nz=16, nx=16, layer_thickness_range=(3, 5), fault_shift_range=(1, 3), seed=1)
    other = build_corpus(params, {"test": 1}, tmp_path / "other", make_sim(nt=70, source_columns=(2, 13)))
    with pytest.raises(GeometryMismatchError):
        evaluate(trained[0], other.parent)


def test_evaluation_needs_labels(trained, tiny_corpus):
    with pytest.raises(InvalidArgumentError):
        evaluate(trained[0], tiny_corpus, split="unlabeled")


def test_mean_velocity_baseline(tiny_corpus):
    metrics = mean_velocity_baseline(CorpusReader(tiny_corpus))
    assert metrics["mae"] > 0 and -1.0 < metrics["ssim"] <= 1.0


def test_data_scaling_driver(tiny_corpus, tmp_path):
    result = run_data_scaling(tiny_upfwi_config(tiny_corpus, epochs=1), tmp_path, sample_counts=(2, 4))
    assert list(result["train_samples"]) == [2, 4]
    assert list(result["corruption"]) == ["clean", "clean"]
    assert (tmp_path / "data_scaling.csv").is_file()
    assert (tmp_path / "n2" / CHECKPOINT).is_file() and (tmp_path / "n4" / CHECKPOINT).is_file()


# ---------------------------------------------------------------------------------------------------- acceptance
@pytest.fixture(scope="module")
def desk_corpus(tmp_path_factory):
    sizes = {"labeled": 0, "unlabeled": 400, "val": 30, "test": 30}
    return build_corpus(GeoParams.desk(seed=0), sizes, tmp_path_factory.mktemp("desk"), desk_geometry()).parent


def desk_config(corpus, **kwargs) -> UpfwiConfig:
    cfg = UpfwiConfig.load(CONFIGS / "upfwi_desk.json")
    return UpfwiConfig.from_dict({**cfg.to_dict(), "corpus": str(corpus), "max_train_samples": 200, **kwargs})


@pytest.fixture(scope="module")
def desk_run(desk_corpus, tmp_path_factory):
    return upfwi_train(desk_config(desk_corpus), tmp_path_factory.mktemp("desk_run"))


@pytest.mark.slow
def test_classic_fwi_recovers_a_two_layer_model():
    sim = make_sim(nz=30, nx=30, nt=400, absorb_layers=30, source_columns=(0, 15, 29), source_depth=0, receiver_depth=0,
                   freq=25.0)
    v_true = two_layer(30, 30, top=3200.0, bottom=4200.0)
    observed = forward_model(v_true, sim)
    cfg = ClassicFwiConfig(initial="provided", smoothing_sigma=4.0, max_iter=200, bounds=(3000.0, 6000.0))
    v0 = initial_model(sim, cfg, v_true)
    v, trace = classic_fwi(observed, sim, cfg, v_true)
    assert trace["misfit"].iloc[-1] <= 0.1 * trace["misfit"].iloc[0]
    assert np.mean(np.abs(v - v_true)) < np.mean(np.abs(v0 - v_true))


@pytest.mark.slow
def test_unsupervised_desk_run(desk_run, desk_corpus, tmp_path):
    checkpoint, log = desk_run
    assert len(log) == 30
    train_loss = np.array([record["train_loss"] for record in log])
    smoothed = train_loss.reshape(6, 5).mean(axis=1)
    assert np.all(np.diff(smoothed) < 0)
    ssim = evaluate(checkpoint, desk_corpus).iloc[0]["ssim"]
    assert ssim >= mean_velocity_baseline(CorpusReader(desk_corpus))["ssim"] + 0.05
    _, rerun = upfwi_train(desk_config(desk_corpus, epochs=2), tmp_path)
    assert [r["train_loss"] for r in rerun] == list(train_loss[:2])


@pytest.mark.slow
def test_more_unlabeled_data_does_not_worsen_validation(desk_corpus, tmp_path):
    result = run_data_scaling(desk_config(desk_corpus), tmp_path, sample_counts=(200, 400)).set_index("train_samples")
    assert result.loc[400, "mse"] <= result.loc[200, "mse"]


@pytest.mark.slow
def test_loss_ablation_ordering(desk_corpus, tmp_path):
    result = run_ablation(desk_config(desk_corpus, epochs=10), tmp_path)
    mse = result.set_index("loss")["mse"]
    assert mse["pixel_l1l2"] <= 1.05 * mse["pixel_l2"]
    assert mse["full"] <= 1.05 * mse["pixel_l1l2"]
    baseline = mean_velocity_baseline(CorpusReader(desk_corpus))
    assert mse["full"] < baseline["mse"]


@pytest.mark.slow
def test_robustness_degrades_with_corruption(desk_run, desk_corpus, tmp_path):
    checkpoint, _ = desk_run
    table = run_robustness(checkpoint, desk_corpus, out_dir=tmp_path)
    drops = table[table["corruption"] == "drop"]["mse"].to_numpy()
    noises = table[table["corruption"] == "noise"]["mse"].to_numpy()
    clean = table.iloc[0]["mse"]
    assert np.all(np.diff(drops) >= -0.05 * clean) and drops[-1] >= clean
    assert np.all(np.diff(noises) >= -0.05 * clean)
