import numpy as np
import pytest
import torch

from config import Config
from adroit.core import ALConfig, Dataset, PoolState, Rng, SimulatedOracle
from adroit.data import make_batch, make_synthetic
from adroit.logger import AppLogger
from adroit.nets import build_bundle, build_target


@pytest.fixture(autouse=True)
def isolated_settings(tmp_path, monkeypatch):
    """Logs, run index and run directories go to the test's temporary directory"""
    monkeypatch.setattr(Config, "LOG_DIR", str(tmp_path / "logs"))
    monkeypatch.setattr(Config, "TRACKER_DB", str(tmp_path / "tracker.db"))
    monkeypatch.setattr(Config, "RUNS_DIR", str(tmp_path / "runs"))
    monkeypatch.setattr(Config, "ENABLE_RUN_TRACKING", False)
    monkeypatch.setattr(Config, "CONCURRENT_SEEDS", 1)
    import adroit.run_tracker as run_tracker
    monkeypatch.setattr(run_tracker, "_tracker_instance", None)
    yield
    AppLogger.reset_logging()


@pytest.fixture
def tiny_cfg():
    return ALConfig(
        latent_dim=4, conv_width=2, mlp_width=8, disc_width=8, target_width=4,
        epochs_vae=1, epochs_target=1, batch_size=8, eval_batch_size=16,
        initial_pool=8, budget=4, rounds=1,
    )


@pytest.fixture
def tiny_dataset():
    return make_synthetic(num_classes=3, per_class=10, side=8, rng=Rng(0, "fixture"))


@pytest.fixture
def tiny_pool(tiny_dataset):
    return PoolState.from_labeled(np.arange(0, 30, 3), SimulatedOracle(tiny_dataset))


@pytest.fixture
def bundle64(tiny_cfg, tiny_dataset):
    """float64 bundle with a target learner attached, for exact comparisons"""
    rng = Rng(7, "bundle")
    bundle = build_bundle(tiny_cfg, tiny_dataset.image_shape, tiny_dataset.num_classes, rng, torch.float64)
    bundle.target = build_target(tiny_cfg, tiny_dataset.image_shape, tiny_dataset.num_classes, rng, torch.float64)
    return bundle


@pytest.fixture
def batch_pair(tiny_dataset):
    """(labeled, unlabeled-with-pretext) float64 batches"""
    labeled = make_batch(tiny_dataset, np.array([0, 3, 11, 25]), with_labels=True, dtype=torch.float64)
    unlabeled = make_batch(tiny_dataset, np.array([1, 2, 14, 20, 29]), with_labels=False,
                           pretext_codes=np.array([0, 1, 2, 4, 5]), dtype=torch.float64)
    return labeled, unlabeled


def finite_difference_check(loss_fn, params, rng_seed=0, samples=6, step=1e-5, tol=1e-3):
    """
    Compare autograd against central differences on a sampled subset of
    coordinates of every parameter tensor; returns the worst relative error.
    """
    params = list(params)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    picker = np.random.default_rng(rng_seed)
    worst = 0.0
    for p, g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g
        flat = p.data.view(-1)
        coords = picker.choice(flat.numel(), size=min(samples, flat.numel()), replace=False)
        analytic, numeric = [], []
        for c in coords:
            original = flat[c].item()
            flat[c] = original + step
            with torch.no_grad():
                up = loss_fn().item()
            flat[c] = original - step
            with torch.no_grad():
                down = loss_fn().item()
            flat[c] = original
            numeric.append((up - down) / (2 * step))
            analytic.append(g.view(-1)[c].item())
        analytic, numeric = np.array(analytic), np.array(numeric)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
    assert worst < tol, f"finite-difference mismatch {worst:.3g}"
    return worst
