import math

import numpy as np
import pandas as pd
import pytest
import torch

from config import Config
from adroit.core import ALConfig, ConfigError, InvalidArgumentError, PoolState, Rng, SimulatedOracle, write_flat_config
from adroit.data import class_counts
from adroit.harness import (
    PLOT_COLUMNS, ROUND_COLUMNS, ExperimentSpec, LossCsvWriter, RoundRecord, RunArtifacts, aggregate,
    collect_records, emit_plot_data, evaluate_accuracy, prepare_data, read_rounds,
)
from adroit.nets import build_bundle, build_target, parameter_checksum, predict_logits


def _records(*accuracies, start=8, step=4):
    return [RoundRecord(round=r, labeled_count=start + r * step, accuracy=a) for r, a in enumerate(accuracies)]


# ========================
# ExperimentSpec
# ========================

def test_spec_from_file(tmp_path):
    path = tmp_path / "exp.env"
    path.write_text(
        "# small run\n"
        "dataset=synthetic\nnum_classes=3\nper_class=10\nside=8\n"
        "strategy=entropy\nseeds=1, 2,3\nimbalance_ratio=5\nimbalance_classes=0,2\n"
        "lambda3=0\nrounds=2\nbudget=4\ninitial_pool=8\n"
    )
    spec = ExperimentSpec.from_file(path)
    assert spec.strategy == "entropy"
    assert spec.seeds == (1, 2, 3)
    assert spec.imbalance_classes == (0, 2)
    assert spec.al.lambda3 == 0.0 and spec.al.rounds == 2
    assert spec.al.lambda1 == ALConfig().lambda1


def test_spec_items_reload_identically(tmp_path, tiny_cfg):
    spec = ExperimentSpec(num_classes=3, per_class=10, side=8, seeds=(4, 9), imbalance_classes=(1,),
                          imbalance_ratio=2.5, al=tiny_cfg)
    path = tmp_path / "exp.env"
    write_flat_config(path, spec.to_items())
    assert ExperimentSpec.from_file(path) == spec


@pytest.mark.parametrize("text", [
    "bogus=1\n", "dataset=mnist\n", "dataset=records\n", "seeds=1,1\n", "imbalance_ratio=0.5\n",
    "per_class=many\n", "strategy=bald\n", "initial_strategy=entropy\n", "holdout_fraction=1\n",
    "num_classes=3\nimbalance_classes=3\n",
])
def test_spec_rejects_bad_files(tmp_path, text):
    path = tmp_path / "exp.env"
    path.write_text(text)
    with pytest.raises(ConfigError):
        ExperimentSpec.from_file(path)


def test_spec_overrides_and_seed_projection():
    spec = ExperimentSpec().with_overrides(strategy="random", lambda2=0.0, seeds=(3, 5))
    assert spec.strategy == "random" and spec.al.lambda2 == 0.0 and spec.seeds == (3, 5)
    single = spec.for_seed(5)
    assert single.seeds == (5,) and single.al.seed == 5
    with pytest.raises(ConfigError):
        spec.with_overrides(not_a_key=1)


def test_run_dir_defaults_to_runs_setting(monkeypatch, tmp_path):
    monkeypatch.setattr(Config, "RUNS_DIR", str(tmp_path / "elsewhere"))
    assert ExperimentSpec().run_dir == str(tmp_path / "elsewhere")
    assert ExperimentSpec(run_dir="explicit").run_dir == "explicit"


def test_budget_must_fit_training_set(tiny_cfg):
    spec = ExperimentSpec(al=tiny_cfg.with_overrides(rounds=2))
    spec.validate_budget(16)
    with pytest.raises(ConfigError):
        spec.validate_budget(15)


# ========================
# Data preparation
# ========================

def test_prepare_synthetic_data_is_seeded():
    spec = ExperimentSpec(num_classes=3, per_class=10, side=8, data_seed=2)
    train, holdout = prepare_data(spec)
    assert (len(train), len(holdout)) == (24, 6)
    again, _ = prepare_data(spec)
    assert np.array_equal(train.images, again.images)
    other, _ = prepare_data(spec.with_overrides(data_seed=3))
    assert not np.array_equal(train.images, other.images)


def test_prepare_imbalanced_training_side_only():
    spec = ExperimentSpec(num_classes=3, per_class=40, side=8)
    train, holdout = prepare_data(spec)
    skewed_train, skewed_holdout = prepare_data(spec.with_overrides(imbalance_ratio=5.0, imbalance_classes=(0,)))
    assert class_counts(skewed_train)[0] < class_counts(train)[0] / 2
    assert class_counts(skewed_train)[1:].tolist() == class_counts(train)[1:].tolist()
    assert np.array_equal(skewed_holdout.labels, holdout.labels)


def test_prepare_records_needs_a_file(tmp_path):
    spec = ExperimentSpec(dataset="records", data_path=str(tmp_path / "absent.bin"), side=8, num_classes=3)
    with pytest.raises(FileNotFoundError):
        prepare_data(spec)


# ========================
# Accuracy + aggregation
# ========================

def test_accuracy_of_constant_predictors(tiny_cfg, tiny_dataset):
    target = build_target(tiny_cfg, tiny_dataset.image_shape, 3, Rng(0))
    with torch.no_grad():
        target.label_head.weight.zero_()
        target.label_head.bias.copy_(torch.tensor([0.0, 0.0, 5.0]))
    assert evaluate_accuracy(target, tiny_dataset) == pytest.approx(1 / 3)
    with torch.no_grad():
        target.label_head.bias.zero_()
    # ties go to class 0
    assert evaluate_accuracy(target, tiny_dataset, [0, 1, 2]) == pytest.approx(1.0)


def test_accuracy_matches_per_example_loop(tiny_cfg, tiny_dataset):
    target = build_target(tiny_cfg, tiny_dataset.image_shape, 3, Rng(1))
    indices = np.arange(0, 30, 2)
    hits = 0
    for i in indices:
        logits = predict_logits(target, tiny_dataset, [i])[0]
        hits += int(int(torch.argmax(logits)) == tiny_dataset.labels[i])
    assert evaluate_accuracy(target, tiny_dataset, indices, batch_size=4) == pytest.approx(hits / len(indices))


def test_accuracy_needs_a_holdout(tiny_cfg, tiny_dataset):
    target = build_target(tiny_cfg, tiny_dataset.image_shape, 3, Rng(0))
    with pytest.raises(InvalidArgumentError):
        evaluate_accuracy(target, tiny_dataset, [])


def test_aggregate_two_seeds():
    stats = aggregate({0: _records(0.4), 1: _records(0.6)}, "adroit")
    assert stats["mean_acc"].iloc[0] == pytest.approx(0.5)
    assert stats["std_acc"].iloc[0] == pytest.approx(math.sqrt(0.02))
    assert stats["strategy"].iloc[0] == "adroit"


def test_aggregate_single_seed_has_zero_spread():
    stats = aggregate({7: _records(0.3, 0.5)}, "random")
    assert stats["std_acc"].tolist() == [0.0, 0.0]
    assert stats["labeled_count"].tolist() == [8, 12]


def test_aggregate_matches_two_pass_computation():
    gen = np.random.default_rng(0)
    accuracies = gen.uniform(size=(5, 4))
    stats = aggregate({s: _records(*accuracies[s]) for s in range(5)}, "adroit")
    for r in range(4):
        column = accuracies[:, r]
        mean = column.sum() / 5
        std = math.sqrt(((column - mean) ** 2).sum() / 4)
        assert stats["mean_acc"].iloc[r] == pytest.approx(mean, abs=1e-12)
        assert stats["std_acc"].iloc[r] == pytest.approx(std, abs=1e-12)


def test_aggregate_rejects_uneven_rounds():
    with pytest.raises(InvalidArgumentError):
        aggregate({0: _records(0.4), 1: _records(0.4, 0.5)}, "adroit")
    with pytest.raises(InvalidArgumentError):
        aggregate({}, "adroit")


def test_aggregate_relative_to_reference():
    stats = aggregate({0: _records(0.5), 1: _records(0.7)}, "adroit",
                      reference={0: _records(0.4), 1: _records(0.4)})
    assert stats["mean_delta"].iloc[0] == pytest.approx(0.2)
    assert stats["std_delta"].iloc[0] == pytest.approx(math.sqrt(0.02))
    with pytest.raises(InvalidArgumentError):
        aggregate({0: _records(0.5)}, "adroit", reference={3: _records(0.4)})


def test_plot_data_layout(tmp_path):
    frames = [aggregate({0: _records(0.1, 0.2, 0.3), 1: _records(0.2, 0.3, 1 / 3)}, name)
              for name in ("adroit", "random")]
    path = emit_plot_data(frames, tmp_path / "plot_data.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(PLOT_COLUMNS) == "strategy,labeled_count,mean_acc,std_acc"
    assert len(lines) == 7
    back = pd.read_csv(path, float_precision="round_trip")
    expected = pd.concat(frames, ignore_index=True)
    assert back["mean_acc"].tolist() == expected["mean_acc"].tolist()
    assert back["std_acc"].tolist() == expected["std_acc"].tolist()


def test_plot_data_keeps_delta_columns(tmp_path):
    stats = aggregate({0: _records(0.5)}, "adroit", reference={0: _records(0.4)})
    header = emit_plot_data(stats, tmp_path / "p.csv").read_text().splitlines()[0]
    assert header == "strategy,labeled_count,mean_acc,std_acc,mean_delta,std_delta"


# ========================
# Artifacts
# ========================

def test_loss_writer_prefixes_round(tmp_path):
    writer = LossCsvWriter(tmp_path / "losses.csv", ["epoch", "total"], flush_every=2)
    writer({"epoch": 0, "total": 1.5})
    writer.round_index = 1
    writer({"epoch": 0, "total": 0.5})
    writer({"epoch": 1, "total": 0.25})
    writer.flush()
    frame = pd.read_csv(tmp_path / "losses.csv")
    assert list(frame.columns) == ["round", "epoch", "total"]
    assert frame["round"].tolist() == [0, 1, 1]
    assert frame["total"].tolist() == [1.5, 0.5, 0.25]


def test_rounds_file_round_trip(tmp_path):
    artifacts = RunArtifacts(tmp_path, "adroit", 3)
    artifacts.reset()
    records = [RoundRecord(0, 8, 0.25, target_loss=1.5), RoundRecord(1, 12, 0.5, vae_loss=2.0, disc_accuracy=0.75)]
    path = artifacts.write_rounds(records)
    assert path.read_text().splitlines()[0] == ",".join(ROUND_COLUMNS)
    back = read_rounds(path)
    assert [(r.round, r.labeled_count, r.accuracy) for r in back] == [(0, 8, 0.25), (1, 12, 0.5)]
    assert math.isnan(back[0].vae_loss) and back[1].disc_accuracy == 0.75
    assert list(collect_records(tmp_path, "adroit")) == [3]


def test_selections_append(tmp_path):
    artifacts = RunArtifacts(tmp_path, "random", 0)
    artifacts.reset()
    artifacts.append_selection(0, np.array([4, 2]), np.array([np.nan, np.nan]))
    artifacts.append_selection(1, np.array([7]), np.array([0.125]))
    frame = pd.read_csv(artifacts.path / "selections.csv")
    assert list(frame.columns) == ["index", "score", "strategy", "round"]
    assert frame["index"].tolist() == [4, 2, 7]
    assert frame["round"].tolist() == [0, 0, 1]
    artifacts.reset()
    assert not (artifacts.path / "selections.csv").exists()


def test_checkpointed_round_restores(tmp_path, tiny_cfg, tiny_dataset, tiny_pool):
    spec = ExperimentSpec(num_classes=3, per_class=10, side=8, al=tiny_cfg)
    artifacts = RunArtifacts(tmp_path, "adroit", 1)
    target = build_target(tiny_cfg, tiny_dataset.image_shape, 3, Rng(5))
    bundle = build_bundle(tiny_cfg, tiny_dataset.image_shape, 3, Rng(6))
    artifacts.save_round(2, tiny_pool, target, bundle)
    assert artifacts.last_round() == 2

    pool, restored, restored_bundle = artifacts.load_round(spec, tiny_dataset, 2)
    assert pool == tiny_pool
    assert parameter_checksum(restored) == parameter_checksum(target)
    for name, module in bundle.components():
        assert parameter_checksum(getattr(restored_bundle, name)) == parameter_checksum(module)
    assert restored_bundle.target is restored


def test_round_without_bundle_restores_target_only(tmp_path, tiny_cfg, tiny_dataset):
    spec = ExperimentSpec(num_classes=3, per_class=10, side=8, al=tiny_cfg)
    artifacts = RunArtifacts(tmp_path, "random", 0)
    pool = PoolState.from_labeled([0, 5], SimulatedOracle(tiny_dataset))
    artifacts.save_round(0, pool, build_target(tiny_cfg, tiny_dataset.image_shape, 3, Rng(0)))
    _, _, bundle = artifacts.load_round(spec, tiny_dataset, 0)
    assert bundle is None
    with pytest.raises(FileNotFoundError):
        artifacts.load_round(spec, tiny_dataset, 1)


def test_missing_runs_are_reported(tmp_path):
    with pytest.raises(FileNotFoundError):
        RunArtifacts(tmp_path, "adroit", 0).last_round()
    with pytest.raises(FileNotFoundError):
        collect_records(tmp_path, "adroit")


def test_last_round_with_bundle_skips_target_only_rounds(tmp_path, tiny_cfg, tiny_dataset, tiny_pool):
    artifacts = RunArtifacts(tmp_path, "adroit", 0)
    target = build_target(tiny_cfg, tiny_dataset.image_shape, 3, Rng(0))
    artifacts.save_round(0, tiny_pool, target, build_bundle(tiny_cfg, tiny_dataset.image_shape, 3, Rng(1)))
    artifacts.save_round(1, tiny_pool, target)
    assert artifacts.last_round() == 1
    assert artifacts.last_round(with_bundle=True) == 0

    baseline = RunArtifacts(tmp_path, "random", 0)
    baseline.save_round(0, tiny_pool, target)
    with pytest.raises(FileNotFoundError):
        baseline.last_round(with_bundle=True)
