"""
Core domain types shared by every ADROIT module
===============================================

Dataset, PoolState (labeled/unlabeled partition plus the simulated oracle),
ALConfig (all hyperparameters, loadable from a flat key=value file), the named
random streams, and the exception family the CLI maps to exit codes.
"""

import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from dotenv import dotenv_values

from adroit.logger import get_logger

logger = get_logger(__name__)


# ========================
# Errors
# ========================

class AdroitError(Exception):
    """Base class for every error raised by the toolkit"""


class InvalidArgumentError(AdroitError, ValueError):
    """An argument violates an operation's precondition"""


class InvalidStateError(AdroitError, RuntimeError):
    """The pool or model is not in a state the operation can work with"""


class DatasetFormatError(AdroitError, ValueError):
    """Binary dataset records are malformed"""


class ConfigError(InvalidArgumentError):
    """Experiment configuration is unknown, unparsable or inconsistent"""


class DivergenceError(AdroitError, RuntimeError):
    """A training loss became non-finite"""

    def __init__(self, phase: str, epoch: int, step: int, values: Mapping[str, float],
                 round_index: Optional[int] = None):
        self.phase = phase
        self.epoch = epoch
        self.step = step
        self.round_index = round_index
        self.values = dict(values)
        where = f"round {round_index}, " if round_index is not None else ""
        super().__init__(
            f"non-finite loss in {phase} training ({where}epoch {epoch}, step {step}): {self.values}"
        )


# ========================
# Randomness
# ========================

def _label_key(label: str) -> int:
    return int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:8], "little")


class Rng:
    """
    Named deterministic random stream

    The generator state depends only on (seed, label); ``child`` derives an
    independent stream, so adding a consumer never perturbs existing ones.
    ``numpy`` serves index bookkeeping, ``torch`` serves tensor noise.
    """

    def __init__(self, seed: int, label: str = "root"):
        if not 0 <= int(seed) < 2 ** 64:
            raise InvalidArgumentError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.label = label
        self._sequence = np.random.SeedSequence(self.seed, spawn_key=(_label_key(label),))
        self._numpy: Optional[np.random.Generator] = None
        self._torch: Optional[torch.Generator] = None

    def child(self, label: str) -> "Rng":
        return Rng(self.seed, f"{self.label}/{label}")

    @property
    def numpy(self) -> np.random.Generator:
        if self._numpy is None:
            self._numpy = np.random.Generator(np.random.PCG64(self._sequence))
        return self._numpy

    @property
    def torch(self) -> torch.Generator:
        if self._torch is None:
            state = int(self._sequence.generate_state(1, dtype=np.uint64)[0]) >> 1
            self._torch = torch.Generator(device="cpu")
            self._torch.manual_seed(state)
        return self._torch

    def integer_seed(self) -> int:
        """A 31-bit seed for libraries that take plain integer seeds (scikit-learn)"""
        return int(self._sequence.generate_state(1, dtype=np.uint32)[0]) >> 1

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, label={self.label!r})"


# ========================
# Dataset
# ========================

@dataclass(frozen=True, eq=False)
class Dataset:
    """Images (N, C, H, W) in [0, 1] with class labels"""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        images = np.asarray(self.images)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise InvalidArgumentError(f"images must be (N, C, H, W), got shape {images.shape}")
        if len(images) != len(labels):
            raise InvalidArgumentError(f"{len(images)} images but {len(labels)} labels")
        if self.num_classes <= 0:
            raise InvalidArgumentError("num_classes must be positive")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise InvalidArgumentError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)


class SimulatedOracle:
    """Answers label queries from ground truth"""

    def __init__(self, dataset: Dataset):
        self._labels = dataset.labels

    @property
    def size(self) -> int:
        return len(self._labels)

    def query(self, indices: np.ndarray) -> np.ndarray:
        return self._labels[np.asarray(indices, dtype=np.int64)]


# ========================
# Pool bookkeeping
# ========================

def as_index_array(indices: Iterable[int]) -> np.ndarray:
    if isinstance(indices, np.ndarray):
        return indices.astype(np.int64).reshape(-1)
    return np.array(list(indices), dtype=np.int64)


@dataclass(frozen=True)
class PoolState:
    """
    Labeled/unlabeled partition of {0..N-1}

    Both index arrays are sorted; ``labels`` is the label store aligned with
    ``labeled``. Operations return new states.
    """

    labeled: np.ndarray
    unlabeled: np.ndarray
    labels: np.ndarray
    oracle: SimulatedOracle = field(compare=False, repr=False)

    @classmethod
    def from_labeled(cls, labeled: Iterable[int], oracle: SimulatedOracle) -> "PoolState":
        idx = np.unique(as_index_array(labeled))
        if len(idx) and (idx[0] < 0 or idx[-1] >= oracle.size):
            raise InvalidArgumentError(f"labeled indices must lie in [0, {oracle.size})")
        unlabeled = np.setdiff1d(np.arange(oracle.size, dtype=np.int64), idx, assume_unique=True)
        return cls(idx, unlabeled, oracle.query(idx), oracle)

    @property
    def size(self) -> int:
        return len(self.labeled) + len(self.unlabeled)

    def is_valid(self) -> bool:
        joined = np.concatenate([self.labeled, self.unlabeled])
        return (
            bool(np.all(np.diff(self.labeled) > 0))
            and bool(np.all(np.diff(self.unlabeled) > 0))
            and len(np.intersect1d(self.labeled, self.unlabeled)) == 0
            and np.array_equal(np.sort(joined), np.arange(self.oracle.size))
            and len(self.labels) == len(self.labeled)
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PoolState):
            return NotImplemented
        return (
            np.array_equal(self.labeled, other.labeled)
            and np.array_equal(self.unlabeled, other.unlabeled)
            and np.array_equal(self.labels, other.labels)
        )


def init_pool(dataset: Dataset, m: int, rng: Rng) -> PoolState:
    """Label a uniform random m-subset of the dataset"""
    n = len(dataset)
    if not 0 < m <= n:
        raise InvalidArgumentError(f"initial pool size must satisfy 0 < m <= {n}, got {m}")
    chosen = rng.numpy.choice(n, size=m, replace=False)
    pool = PoolState.from_labeled(chosen, SimulatedOracle(dataset))
    logger.debug(f"Initial pool: {m} labeled / {n - m} unlabeled")
    return pool


def annotate(pool: PoolState, selected: Iterable[int]) -> PoolState:
    """Move ``selected`` from the unlabeled to the labeled pool, querying the oracle"""
    chosen = as_index_array(selected)
    if len(chosen) == 0:
        return pool
    unique = np.unique(chosen)
    if len(unique) != len(chosen):
        raise InvalidArgumentError("selection contains duplicate indices")
    if len(np.intersect1d(unique, pool.labeled)):
        raise InvalidArgumentError("selection overlaps the labeled pool")
    if len(np.setdiff1d(unique, pool.unlabeled)):
        raise InvalidArgumentError("selection contains indices outside the unlabeled pool")

    labeled = np.concatenate([pool.labeled, unique])
    labels = np.concatenate([pool.labels, pool.oracle.query(unique)])
    order = np.argsort(labeled, kind="stable")
    unlabeled = np.setdiff1d(pool.unlabeled, unique, assume_unique=True)
    return PoolState(labeled[order], unlabeled, labels[order], pool.oracle)


# ========================
# Hyperparameters
# ========================

def _parse_bool(raw: str) -> bool:
    value = raw.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


@dataclass(frozen=True)
class ALConfig:
    """
    All ADROIT hyperparameters

    Defaults are the CIFAR-10 row of the published hyperparameter table; the
    optimiser settings follow the implementation details (SGD momentum 0.9,
    weight decay 0.005 for the target learner; Adam for VAE and discriminator).
    """

    lambda1: float = 1.0
    lambda2: float = 0.5
    lambda3: float = 0.5
    lambda4: float = 1.0
    beta: float = 1.0
    xi: float = 1.0
    lr_vae: float = 5e-4
    lr_disc: float = 5e-4
    lr_target: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 0.005
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs_vae: int = 100
    epochs_target: int = 100
    batch_size: int = 128
    eval_batch_size: int = 512
    latent_dim: int = 32
    conv_width: int = 32
    mlp_width: int = 128
    disc_width: int = 512
    target_width: int = 32
    initial_pool: int = 1000
    budget: int = 1000
    rounds: int = 5
    seed: int = 0
    proxy_kl: bool = True
    grad_clip: float = 0.0
    warm_start: bool = False

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4", "beta", "xi",
                     "momentum", "weight_decay", "grad_clip"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        for name in ("lr_vae", "lr_disc", "lr_target"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        for name in ("epochs_vae", "epochs_target", "batch_size", "eval_batch_size", "latent_dim",
                     "conv_width", "mlp_width", "disc_width", "target_width",
                     "initial_pool", "budget"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.rounds < 0:
            raise ConfigError("rounds must be nonnegative")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    @classmethod
    def field_names(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any], strict: bool = True) -> "ALConfig":
        """Build from string or typed values; unknown keys are an error when strict"""
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown and strict:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
        kwargs: Dict[str, Any] = {}
        for name, raw in values.items():
            if name not in known:
                continue
            kwargs[name] = _coerce(name, known[name].type, raw)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "ALConfig":
        return cls.from_mapping(read_flat_config(path))

    def with_overrides(self, **overrides: Any) -> "ALConfig":
        unknown = sorted(set(overrides) - set(self.field_names()))
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
        return replace(self, **overrides)

    def to_items(self) -> List[Tuple[str, str]]:
        return [(f.name, format_config_value(getattr(self, f.name))) for f in fields(self)]


def _coerce(name: str, annotation: Any, raw: Any) -> Any:
    kind = annotation if isinstance(annotation, type) else {"int": int, "float": float, "bool": bool, "str": str}.get(str(annotation), str)
    if not isinstance(raw, str):
        return kind(raw)
    try:
        if kind is bool:
            return _parse_bool(raw)
        if kind is int:
            return int(raw.strip())
        if kind is float:
            return float(raw.strip())
        return raw.strip()
    except ValueError as e:
        raise ConfigError(f"invalid value for {name}: {raw!r} ({e})") from e


def format_config_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(format_config_value(v) for v in value)
    return str(value)


def read_flat_config(path: Union[str, Path]) -> Dict[str, str]:
    """Read a flat key=value document (``.env`` syntax, ``#`` comments allowed, keys case-sensitive)"""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"configuration file not found: {path}")
    values = dotenv_values(path)
    missing = [key for key, value in values.items() if value is None]
    if missing:
        raise ConfigError(f"configuration keys without a value: {', '.join(missing)}")
    return {key.strip(): value for key, value in values.items()}


def write_flat_config(path: Union[str, Path], items: Sequence[Tuple[str, str]]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{key}={value}" for key, value in items]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
