"""
Experiment harness
==================

Everything around the AL loop except the loop itself (which lives in the
LangGraph workflow): the experiment spec and its config file, dataset
preparation, holdout accuracy, multi-seed aggregation, plot data, and the
per-run artifact directory::

    <run_dir>/<strategy>/seed_<s>/
        config.snapshot
        losses_target.csv  losses_adroit.csv
        selections.csv     rounds.csv
        checkpoints/{target,encoder,generator,classifier,discriminator}_rXX.ckpt, pool_rXX.npy
"""

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch

from config import Config
from adroit.acquire import INITIAL_STRATEGIES, STRATEGIES
from adroit.checkpoint import load_checkpoint, save_checkpoint
from adroit.core import (
    ALConfig, ConfigError, Dataset, InvalidArgumentError, PoolState, Rng, SimulatedOracle,
    format_config_value, read_flat_config, write_flat_config,
)
from adroit.data import (
    apply_imbalance, class_counts, load_cifar10, load_cifar10_test, make_synthetic, read_binary_records, split_holdout,
)
from adroit.logger import get_logger
from adroit.nets import ModelBundle, TargetLearner, build_bundle, build_target, predict_logits

logger = get_logger(__name__)

DATASETS = ("synthetic", "cifar10", "records")
ROUND_COLUMNS = ["round", "labeled_count", "accuracy", "target_loss", "vae_loss", "disc_accuracy"]
SELECTION_COLUMNS = ["index", "score", "strategy", "round"]
PLOT_COLUMNS = ["strategy", "labeled_count", "mean_acc", "std_acc"]
DELTA_COLUMNS = ["mean_delta", "std_delta"]
BUNDLE_PARTS = ("encoder", "generator", "classifier", "discriminator")


# ========================
# Experiment spec
# ========================

@dataclass(frozen=True)
class ExperimentSpec:
    """Dataset, strategy, seeds and hyperparameters of one experiment"""

    dataset: str = "synthetic"
    data_path: str = ""
    data_seed: int = 0
    num_classes: int = 4
    per_class: int = 625
    side: int = 16
    imbalance_ratio: float = 1.0
    imbalance_classes: Tuple[int, ...] = ()
    holdout_fraction: float = 0.2
    strategy: str = "adroit"
    initial_strategy: str = "random"
    seeds: Tuple[int, ...] = (0,)
    run_dir: str = field(default_factory=lambda: Config.RUNS_DIR)
    al: ALConfig = field(default_factory=ALConfig)

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.dataset == "records" and not self.data_path:
            raise ConfigError(f"dataset {self.dataset!r} needs data_path")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.initial_strategy not in INITIAL_STRATEGIES:
            raise ConfigError(f"initial_strategy must be one of {INITIAL_STRATEGIES}, got {self.initial_strategy!r}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if any(not 0 <= s < 2 ** 64 for s in self.seeds):
            raise ConfigError("seeds must be 64-bit unsigned integers")
        if self.imbalance_ratio < 1:
            raise ConfigError("imbalance_ratio must be >= 1")
        if any(not 0 <= k < self.num_classes for k in self.imbalance_classes):
            raise ConfigError(f"imbalance_classes must lie in [0, {self.num_classes})")
        if not 0 < self.holdout_fraction < 1:
            raise ConfigError("holdout_fraction must lie in (0, 1)")
        if min(self.num_classes, self.per_class, self.side) <= 0:
            raise ConfigError("num_classes, per_class and side must be positive")

    @classmethod
    def spec_keys(cls) -> List[str]:
        return [f.name for f in fields(cls) if f.name != "al"]

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "ExperimentSpec":
        """Split a flat mapping into experiment keys and ALConfig keys; unknown keys are an error"""
        spec_keys = set(cls.spec_keys())
        spec_values = {k: v for k, v in values.items() if k in spec_keys}
        al = ALConfig.from_mapping({k: v for k, v in values.items() if k not in spec_keys})
        kwargs: Dict[str, Any] = {}
        try:
            for name, raw in spec_values.items():
                kwargs[name] = _coerce_spec(name, raw)
        except ValueError as e:
            raise ConfigError(f"invalid experiment value: {e}") from e
        return cls(al=al, **kwargs)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "ExperimentSpec":
        spec = cls.from_mapping(read_flat_config(path))
        logger.info(f"⚙️ Loaded experiment config {path}: {spec.strategy} on {spec.dataset}, seeds {list(spec.seeds)}")
        return spec

    def with_overrides(self, **overrides: Any) -> "ExperimentSpec":
        spec_over = {k: v for k, v in overrides.items() if k in self.spec_keys()}
        al_over = {k: v for k, v in overrides.items() if k not in spec_over}
        return replace(self, al=self.al.with_overrides(**al_over) if al_over else self.al, **spec_over)

    def for_seed(self, seed: int) -> "ExperimentSpec":
        return replace(self, seeds=(int(seed),), al=self.al.with_overrides(seed=int(seed)))

    def to_items(self) -> List[Tuple[str, str]]:
        items = [(name, format_config_value(getattr(self, name))) for name in self.spec_keys()]
        return items + self.al.to_items()

    def validate_budget(self, n_train: int):
        """rounds * budget + initial_pool must fit in the training set"""
        needed = self.al.rounds * self.al.budget + self.al.initial_pool
        if needed > n_train:
            raise ConfigError(
                f"{self.al.rounds} rounds x budget {self.al.budget} + initial pool {self.al.initial_pool} "
                f"= {needed} exceeds the {n_train} training samples"
            )


def _coerce_spec(name: str, raw: Any) -> Any:
    if name in ("seeds", "imbalance_classes"):
        if isinstance(raw, str):
            return tuple(int(p) for p in raw.replace(" ", "").split(",") if p)
        return tuple(int(p) for p in raw)
    if name in ("data_seed", "num_classes", "per_class", "side"):
        return int(raw)
    if name in ("imbalance_ratio", "holdout_fraction"):
        return float(raw)
    return str(raw).strip()


def prepare_data(spec: ExperimentSpec) -> Tuple[Dataset, Dataset]:
    """(train, holdout) for the experiment; imbalance only touches the training side"""
    rng = Rng(spec.data_seed, "data")
    if spec.dataset == "synthetic":
        full = make_synthetic(spec.num_classes, spec.per_class, spec.side, rng.child("synthetic"))
        train, holdout = split_holdout(full, spec.holdout_fraction, rng.child("holdout"))
    elif spec.dataset == "records":
        full = read_binary_records(spec.data_path, spec.side, spec.num_classes)
        train, holdout = split_holdout(full, spec.holdout_fraction, rng.child("holdout"))
    else:
        path = spec.data_path or Config.DATA_DIR
        train = load_cifar10(path)
        try:
            holdout = load_cifar10_test(path)
        except FileNotFoundError:
            logger.warning("⚠️ CIFAR-10 test batch missing, holding out part of the training set instead")
            train, holdout = split_holdout(train, spec.holdout_fraction, rng.child("holdout"))

    if spec.imbalance_ratio > 1 and spec.imbalance_classes:
        train = apply_imbalance(train, spec.imbalance_ratio, spec.imbalance_classes, rng.child("imbalance"))
    logger.info(f"📂 Data ready: {len(train)} train / {len(holdout)} holdout, class counts {class_counts(train).tolist()}")
    return train, holdout


# ========================
# Records + metrics
# ========================

@dataclass
class RoundRecord:
    round: int
    labeled_count: int
    accuracy: float
    selected: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    target_loss: float = float("nan")
    vae_loss: float = float("nan")
    disc_accuracy: float = float("nan")

    def to_row(self) -> Dict[str, Any]:
        return {c: getattr(self, c) for c in ROUND_COLUMNS}


def evaluate_accuracy(target: TargetLearner, dataset: Dataset, indices: Optional[Sequence[int]] = None,
                      batch_size: int = 512) -> float:
    """Holdout accuracy of the label head; argmax ties go to the lowest class"""
    indices = np.arange(len(dataset)) if indices is None else np.asarray(indices, dtype=np.int64)
    if len(indices) == 0:
        raise InvalidArgumentError("accuracy needs a nonempty holdout")
    logits = predict_logits(target, dataset, indices, batch_size)
    predicted = torch.argmax(logits, dim=1).numpy()
    return float(np.mean(predicted == dataset.labels[indices]))


def _records_frame(records: Mapping[int, Sequence[RoundRecord]]) -> pd.DataFrame:
    if not records:
        raise InvalidArgumentError("aggregation needs at least one seed")
    lengths = {seed: len(recs) for seed, recs in records.items()}
    if len(set(lengths.values())) != 1:
        raise InvalidArgumentError(f"seeds disagree on round counts: {lengths}")
    rows = [{"seed": seed, "round": r.round, "labeled_count": r.labeled_count, "accuracy": r.accuracy}
            for seed, recs in records.items() for r in recs]
    return pd.DataFrame(rows, columns=["seed", "round", "labeled_count", "accuracy"])


def _mean_std(frame: pd.DataFrame, column: str) -> pd.DataFrame:
    grouped = frame.groupby(["round", "labeled_count"], sort=True)[column]
    out = grouped.agg(["mean", "std"]).reset_index()
    out["std"] = out["std"].fillna(0.0)
    return out


def aggregate(records: Mapping[int, Sequence[RoundRecord]], strategy: str,
              reference: Optional[Mapping[int, Sequence[RoundRecord]]] = None) -> pd.DataFrame:
    """
    Per-round mean and sample standard deviation of accuracy across seeds

    With ``reference`` (same seeds, same rounds) also reports the per-seed
    accuracy difference to the reference strategy as mean_delta/std_delta.
    """
    frame = _records_frame(records)
    stats = _mean_std(frame, "accuracy").rename(columns={"mean": "mean_acc", "std": "std_acc"})
    stats.insert(0, "strategy", strategy)

    if reference is not None:
        ref = _records_frame(reference)
        if set(ref["seed"]) != set(frame["seed"]) or len(ref) != len(frame):
            raise InvalidArgumentError("reference runs must cover the same seeds and rounds")
        joined = frame.merge(ref[["seed", "round", "accuracy"]], on=["seed", "round"], suffixes=("", "_ref"),
                             validate="one_to_one")
        joined["delta"] = joined["accuracy"] - joined["accuracy_ref"]
        delta = _mean_std(joined, "delta").rename(columns={"mean": "mean_delta", "std": "std_delta"})
        stats = stats.merge(delta[["round", "mean_delta", "std_delta"]], on="round")
    return stats


def emit_plot_data(aggregated: Union[pd.DataFrame, Sequence[pd.DataFrame]], path: Union[str, Path]) -> Path:
    """Write (strategy, labeled_count, mean_acc, std_acc[, mean_delta, std_delta]) rows"""
    frame = aggregated if isinstance(aggregated, pd.DataFrame) else pd.concat(list(aggregated), ignore_index=True)
    columns = PLOT_COLUMNS + [c for c in DELTA_COLUMNS if c in frame.columns]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame[columns].to_csv(path, index=False, float_format=Config.FLOAT_FORMAT)
    logger.info(f"📈 Plot data written: {path} ({len(frame)} rows)")
    return path


# ========================
# Run artifacts
# ========================

class LossCsvWriter:
    """Buffered sink for training loss rows; each row is prefixed with the current round"""

    def __init__(self, path: Union[str, Path], columns: Sequence[str], flush_every: int = 256):
        self.path = Path(path)
        self.columns = ["round"] + list(columns)
        self.flush_every = flush_every
        self.round_index = 0
        self._buffer: List[Dict[str, Any]] = []

    def __call__(self, row: Dict[str, Any]):
        self._buffer.append({"round": self.round_index, **row})
        if len(self._buffer) >= self.flush_every:
            self.flush()

    def flush(self):
        if not self._buffer:
            return
        frame = pd.DataFrame(self._buffer, columns=self.columns)
        frame.to_csv(self.path, mode="a", header=not self.path.exists(), index=False,
                     float_format=Config.FLOAT_FORMAT)
        self._buffer.clear()


class RunArtifacts:
    """The artifact directory of one (strategy, seed) run"""

    def __init__(self, root: Union[str, Path], strategy: str, seed: int):
        self.root = Path(root)
        self.strategy = strategy
        self.seed = int(seed)
        self.path = self.root / strategy / f"seed_{self.seed}"
        self.checkpoints = self.path / "checkpoints"

    @property
    def run_id(self) -> str:
        return f"{self.root.resolve()}::{self.strategy}::{self.seed}"

    def reset(self):
        """Create the directory and drop CSVs from an earlier run of the same id"""
        self.checkpoints.mkdir(parents=True, exist_ok=True)
        for name in ("losses_target.csv", "losses_adroit.csv", "selections.csv", "rounds.csv"):
            (self.path / name).unlink(missing_ok=True)

    def write_snapshot(self, spec: ExperimentSpec) -> Path:
        path = self.path / "config.snapshot"
        write_flat_config(path, spec.for_seed(self.seed).to_items())
        return path

    def loss_writer(self, phase: str, columns: Sequence[str]) -> LossCsvWriter:
        return LossCsvWriter(self.path / f"losses_{phase}.csv", columns)

    def append_selection(self, round_index: int, indices: np.ndarray, scores: np.ndarray):
        frame = pd.DataFrame({
            "index": np.asarray(indices, dtype=np.int64),
            "score": np.asarray(scores, dtype=np.float64),
            "strategy": self.strategy,
            "round": int(round_index),
        }, columns=SELECTION_COLUMNS)
        path = self.path / "selections.csv"
        frame.to_csv(path, mode="a", header=not path.exists(), index=False, float_format=Config.FLOAT_FORMAT)

    def write_rounds(self, records: Sequence[RoundRecord]) -> Path:
        path = self.path / "rounds.csv"
        frame = pd.DataFrame([r.to_row() for r in records], columns=ROUND_COLUMNS)
        frame.to_csv(path, index=False, float_format=Config.FLOAT_FORMAT)
        return path

    def save_round(self, round_index: int, pool: PoolState, target: Optional[TargetLearner] = None,
                   bundle: Optional[ModelBundle] = None):
        self.checkpoints.mkdir(parents=True, exist_ok=True)
        np.save(self.checkpoints / f"pool_r{round_index:02d}.npy", pool.labeled)
        if target is not None:
            save_checkpoint(target, self.checkpoints / f"target_r{round_index:02d}.ckpt")
        if bundle is not None:
            for name in BUNDLE_PARTS:
                save_checkpoint(getattr(bundle, name), self.checkpoints / f"{name}_r{round_index:02d}.ckpt")

    def load_round(self, spec: ExperimentSpec, train: Dataset,
                   round_index: int) -> Tuple[PoolState, TargetLearner, Optional[ModelBundle]]:
        """Pool, target learner and (when saved) VAE/discriminator of a finished round"""
        pool_path = self.checkpoints / f"pool_r{round_index:02d}.npy"
        if not pool_path.is_file():
            raise FileNotFoundError(f"no saved pool for round {round_index}: {pool_path}")
        pool = PoolState.from_labeled(np.load(pool_path), SimulatedOracle(train))

        rng = Rng(self.seed, "restore")
        target = build_target(spec.al, train.image_shape, train.num_classes, rng)
        load_checkpoint(target, self.checkpoints / f"target_r{round_index:02d}.ckpt")
        target.eval()

        bundle = None
        if (self.checkpoints / f"encoder_r{round_index:02d}.ckpt").is_file():
            bundle = build_bundle(spec.al, train.image_shape, train.num_classes, rng)
            for name in BUNDLE_PARTS:
                load_checkpoint(getattr(bundle, name), self.checkpoints / f"{name}_r{round_index:02d}.ckpt")
            bundle.target = target
            bundle.train(False)
        return pool, target, bundle

    def last_round(self, with_bundle: bool = False) -> int:
        """Latest saved round; ``with_bundle`` skips rounds without VAE/discriminator checkpoints"""
        pattern = "encoder_r*.ckpt" if with_bundle else "pool_r*.npy"
        prefix = "encoder_r" if with_bundle else "pool_r"
        rounds = sorted(int(p.stem[len(prefix):]) for p in self.checkpoints.glob(pattern))
        if not rounds:
            what = "rounds with an encoder checkpoint" if with_bundle else "rounds"
            raise FileNotFoundError(f"no saved {what} under {self.checkpoints}")
        return rounds[-1]


def read_rounds(path: Union[str, Path]) -> List[RoundRecord]:
    frame = pd.read_csv(path)
    missing = set(ROUND_COLUMNS) - set(frame.columns)
    if missing:
        raise InvalidArgumentError(f"{path}: missing columns {sorted(missing)}")
    return [
        RoundRecord(round=int(row["round"]), labeled_count=int(row["labeled_count"]), accuracy=float(row["accuracy"]),
                    target_loss=float(row["target_loss"]), vae_loss=float(row["vae_loss"]),
                    disc_accuracy=float(row["disc_accuracy"]))
        for _, row in frame.iterrows()
    ]


def collect_records(root: Union[str, Path], strategy: str) -> Dict[int, List[RoundRecord]]:
    """rounds.csv of every seed directory under ``<root>/<strategy>``"""
    base = Path(root) / strategy
    found = {}
    for seed_dir in sorted(base.glob("seed_*")):
        rounds = seed_dir / "rounds.csv"
        if rounds.is_file():
            found[int(seed_dir.name[len("seed_"):])] = read_rounds(rounds)
    if not found:
        raise FileNotFoundError(f"no rounds.csv under {base}")
    return dict(sorted(found.items()))
