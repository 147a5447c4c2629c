"""
Acquisition strategies
======================

ADROIT scores each unlabeled sample by the discriminator's probability that
its encoder mean belongs to the labeled pool and selects the b lowest.
Baselines: uniform random and target-learner predictive entropy. Initial-pool
strategies (random, k-center greedy, k-means) run on flattened pixels.

Ties are always broken by ascending dataset index.
"""

import warnings
from dataclasses import dataclass
from typing import Iterable, List, Optional, Tuple

import numpy as np
import torch
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning
from sklearn.metrics import pairwise_distances

from adroit.core import (
    Dataset, InvalidArgumentError, InvalidStateError, PoolState, Rng, SimulatedOracle, as_index_array, init_pool,
)
from adroit.logger import get_logger
from adroit.nets import ModelBundle, TargetLearner, discriminate, encode_means, predict_logits

logger = get_logger(__name__)

STRATEGIES = ("adroit", "random", "entropy")
INITIAL_STRATEGIES = ("random", "kcenter", "kmeans")

KMEANS_MAX_ITER = 100
KMEANS_TOL = 1e-6


@dataclass(frozen=True)
class AcquisitionScore:
    index: int
    score: float


def _arrays(scores: Iterable[AcquisitionScore]) -> Tuple[np.ndarray, np.ndarray]:
    scores = list(scores)
    return (np.array([s.index for s in scores], dtype=np.int64),
            np.array([s.score for s in scores], dtype=np.float64))


def _as_scores(indices: np.ndarray, values: np.ndarray) -> List[AcquisitionScore]:
    return [AcquisitionScore(int(i), float(v)) for i, v in zip(indices, values)]


# ========================
# Scoring
# ========================

def score_adroit(dataset: Dataset, pool: PoolState, bundle: ModelBundle,
                 batch_size: int = 512) -> List[AcquisitionScore]:
    """Discriminator probability on each unlabeled encoder mean (lower = more informative)"""
    if len(pool.unlabeled) == 0:
        raise InvalidStateError("no unlabeled samples to score")
    with torch.no_grad():
        codes = encode_means(bundle.encoder, dataset, pool.unlabeled, batch_size)
        probs = discriminate(bundle.discriminator, codes)
    return _as_scores(pool.unlabeled, probs.double().numpy())


def score_entropy(dataset: Dataset, pool: PoolState, target: TargetLearner,
                  batch_size: int = 512) -> List[AcquisitionScore]:
    if len(pool.unlabeled) == 0:
        raise InvalidStateError("no unlabeled samples to score")
    logits = predict_logits(target, dataset, pool.unlabeled, batch_size)
    entropy = torch.distributions.Categorical(logits=logits.double()).entropy()
    return _as_scores(pool.unlabeled, entropy.numpy())


# ========================
# Selection
# ========================

def select_min_b(scores: Iterable[AcquisitionScore], b: int) -> np.ndarray:
    """The b lowest-scoring indices, in rank order"""
    indices, values = _arrays(scores)
    if not 0 <= b <= len(indices):
        raise InvalidArgumentError(f"cannot select {b} of {len(indices)} scored samples")
    return indices[np.lexsort((indices, values))[:b]]


def select_random(pool: PoolState, b: int, rng: Rng) -> np.ndarray:
    if not 0 <= b <= len(pool.unlabeled):
        raise InvalidArgumentError(f"cannot select {b} of {len(pool.unlabeled)} unlabeled samples")
    return np.sort(rng.numpy.choice(pool.unlabeled, size=b, replace=False))


def select_entropy(dataset: Dataset, pool: PoolState, target: TargetLearner, b: int,
                   batch_size: int = 512) -> np.ndarray:
    """Top-b predictive entropy of the target learner's label head"""
    return _select_max_b(score_entropy(dataset, pool, target, batch_size), b)


def _select_max_b(scores: Iterable[AcquisitionScore], b: int) -> np.ndarray:
    indices, values = _arrays(scores)
    if not 0 <= b <= len(indices):
        raise InvalidArgumentError(f"cannot select {b} of {len(indices)} unlabeled samples")
    return indices[np.lexsort((indices, -values))[:b]]


def kcenter_greedy(features: np.ndarray, initial: Iterable[int], k: int,
                   candidates: Optional[Iterable[int]] = None) -> np.ndarray:
    """
    Greedy k-center: repeatedly add the candidate farthest from its nearest center

    ``candidates`` defaults to every row not in ``initial``. With no initial
    centers the first pick is the lowest candidate index.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[:, None]
    initial = np.unique(as_index_array(initial))
    if candidates is None:
        pool = np.setdiff1d(np.arange(len(features)), initial)
    else:
        pool = np.setdiff1d(np.unique(as_index_array(candidates)), initial)
    if k < 0 or k > len(pool):
        raise InvalidArgumentError(f"cannot pick {k} centers from {len(pool)} candidates")
    if k == 0:
        return np.empty(0, dtype=np.int64)

    nearest = np.full(len(pool), np.inf)
    if len(initial):
        nearest = pairwise_distances(features[pool], features[initial]).min(axis=1)
    chosen = []
    taken = np.zeros(len(pool), dtype=bool)
    for _ in range(k):
        gap = np.where(taken, -np.inf, nearest)
        j = int(np.argmax(gap))
        chosen.append(int(pool[j]))
        taken[j] = True
        nearest = np.minimum(nearest, pairwise_distances(features[pool], features[pool[j]][None, :]).ravel())
    return np.array(chosen, dtype=np.int64)


def fit_kmeans(features: np.ndarray, m: int, rng: Rng, n_init: int = 1) -> KMeans:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        return KMeans(n_clusters=m, init="k-means++", n_init=n_init, max_iter=KMEANS_MAX_ITER,
                      tol=KMEANS_TOL, random_state=rng.integer_seed()).fit(features)


def kmeans_init(features: np.ndarray, m: int, rng: Rng) -> np.ndarray:
    """Index of the sample nearest each k-means centroid; collisions fall through to the next nearest"""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[:, None]
    n = len(features)
    if not 0 <= m <= n:
        raise InvalidArgumentError(f"cannot pick {m} cluster representatives from {n} samples")
    if m == 0:
        return np.empty(0, dtype=np.int64)

    centers = fit_kmeans(features, m, rng).cluster_centers_
    distances = pairwise_distances(centers, features)
    order = np.arange(n)
    taken = np.zeros(n, dtype=bool)
    chosen = []
    for row in distances:
        for idx in np.lexsort((order, row)):
            if not taken[idx]:
                taken[idx] = True
                chosen.append(int(idx))
                break
    return np.array(chosen, dtype=np.int64)


def select_initial(strategy: str, dataset: Dataset, m: int, rng: Rng) -> PoolState:
    """Initial labeled pool of size m from flattened pixels"""
    if strategy not in INITIAL_STRATEGIES:
        raise InvalidArgumentError(f"unknown initial strategy {strategy!r}; expected one of {INITIAL_STRATEGIES}")
    if strategy == "random":
        return init_pool(dataset, m, rng)

    n = len(dataset)
    if not 0 < m <= n:
        raise InvalidArgumentError(f"initial pool size must satisfy 0 < m <= {n}, got {m}")
    features = dataset.images.reshape(n, -1)
    if strategy == "kcenter":
        seed = int(rng.numpy.integers(0, n))
        chosen = np.concatenate([[seed], kcenter_greedy(features, [seed], m - 1)])
    else:
        chosen = kmeans_init(features, m, rng)
    logger.info(f"🧭 Initial pool by {strategy}: {m} of {n} samples")
    return PoolState.from_labeled(chosen, SimulatedOracle(dataset))


def acquire(strategy: str, dataset: Dataset, pool: PoolState, b: int, rng: Rng,
            target: Optional[TargetLearner] = None, bundle: Optional[ModelBundle] = None,
            batch_size: int = 512) -> Tuple[np.ndarray, np.ndarray]:
    """Selected indices (rank order) and their scores; random selection has no score (NaN)"""
    if strategy == "adroit":
        if bundle is None:
            raise InvalidStateError("adroit acquisition needs a trained encoder and discriminator")
        scores = score_adroit(dataset, pool, bundle, batch_size)
        chosen = select_min_b(scores, b)
    elif strategy == "entropy":
        if target is None:
            raise InvalidStateError("entropy acquisition needs a trained target learner")
        scores = score_entropy(dataset, pool, target, batch_size)
        chosen = _select_max_b(scores, b)
    elif strategy == "random":
        chosen = select_random(pool, b, rng)
        return chosen, np.full(len(chosen), np.nan)
    else:
        raise InvalidArgumentError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")

    lookup = {s.index: s.score for s in scores}
    selected_scores = np.array([lookup[int(i)] for i in chosen], dtype=np.float64)
    logger.info(f"🔎 {strategy} selected {len(chosen)} of {len(pool.unlabeled)} unlabeled samples")
    return chosen, selected_scores
