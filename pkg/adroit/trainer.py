"""
Training procedures
===================

``train_target`` fits the target learner for one AL round (supervised
cross-entropy plus the rotation pretext on the unlabeled pool, SGD with
momentum). ``train_adroit`` runs the joint VAE/discriminator schedule with the
target learner frozen: one Adam step on the VAE against the weighted total,
then one Adam step on the discriminator with codes from the updated encoder.

An epoch walks the larger pool once and cycles the smaller one.
"""

import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from sklearn.metrics import balanced_accuracy_score
from torch import nn

from adroit.core import ALConfig, Dataset, DivergenceError, InvalidArgumentError, InvalidStateError, PoolState, Rng
from adroit.data import Batch, batches
from adroit.logger import get_logger
from adroit.losses import LOSS_COLUMNS, LossBreakdown, disc_loss, target_loss_terms, total_vae_loss
from adroit.nets import (
    ModelBundle, TargetLearner, build_bundle, build_target, discriminate, encode_means, parameter_checksum,
)

logger = get_logger(__name__)

TARGET_COLUMNS = ["epoch", "step", "sup", "ssl", "total"]
ADROIT_COLUMNS = ["epoch", "step"] + LOSS_COLUMNS

RowSink = Callable[[Dict[str, float]], None]


# ========================
# Optimizers
# ========================

@dataclass
class OptimizerState:
    """A torch optimizer plus the step counter the reports rely on"""

    kind: str
    optimizer: torch.optim.Optimizer
    params: List[nn.Parameter]
    max_grad_norm: float = 0.0
    steps: int = 0


def sgd_state(params: Sequence[nn.Parameter], lr: float, momentum: float, weight_decay: float,
              max_grad_norm: float = 0.0) -> OptimizerState:
    """Heavy-ball SGD with coupled weight decay: v = m*v + (g + wd*p); p -= lr*v"""
    params = list(params)
    optimizer = torch.optim.SGD(params, lr=lr, momentum=momentum, dampening=0.0,
                                weight_decay=weight_decay, nesterov=False)
    return OptimizerState("sgd-momentum", optimizer, params, max_grad_norm)


def adam_state(params: Sequence[nn.Parameter], lr: float, betas: Tuple[float, float] = (0.9, 0.999),
               eps: float = 1e-8, max_grad_norm: float = 0.0) -> OptimizerState:
    params = list(params)
    optimizer = torch.optim.Adam(params, lr=lr, betas=betas, eps=eps, weight_decay=0.0)
    return OptimizerState("adam", optimizer, params, max_grad_norm)


def _apply(params: Sequence[nn.Parameter], grads: Sequence[Optional[torch.Tensor]], state: OptimizerState):
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads) or len(params) != len(state.params):
        raise InvalidArgumentError(f"{len(params)} parameters, {len(grads)} gradients, optimizer holds {len(state.params)}")
    for p, owned in zip(params, state.params):
        if p is not owned:
            raise InvalidArgumentError("parameters are not the ones this optimizer state was built for")
    for p, g in zip(params, grads):
        if g is not None and g.shape != p.shape:
            raise InvalidArgumentError(f"gradient shape {tuple(g.shape)} does not match parameter {tuple(p.shape)}")
        p.grad = None if g is None else g.detach().clone()
    if state.max_grad_norm > 0:
        nn.utils.clip_grad_norm_([p for p in params if p.grad is not None], state.max_grad_norm)
    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)
    state.steps += 1


def sgd_momentum_step(params, grads, state: OptimizerState) -> OptimizerState:
    if state.kind != "sgd-momentum":
        raise InvalidArgumentError(f"expected an sgd-momentum state, got {state.kind}")
    _apply(params, grads, state)
    return state


def adam_step(params, grads, state: OptimizerState) -> OptimizerState:
    if state.kind != "adam":
        raise InvalidArgumentError(f"expected an adam state, got {state.kind}")
    _apply(params, grads, state)
    return state


def _gradients(loss: torch.Tensor, params: Sequence[nn.Parameter]) -> List[Optional[torch.Tensor]]:
    return list(torch.autograd.grad(loss, list(params), allow_unused=True))


# ========================
# Reports + batching
# ========================

@dataclass
class TrainReport:
    phase: str
    columns: List[str]
    rows: List[Dict[str, float]] = field(default_factory=list)
    wall_time: float = 0.0
    checksum: str = ""

    def epoch_means(self) -> List[Dict[str, float]]:
        by_epoch: Dict[int, List[Dict[str, float]]] = {}
        for row in self.rows:
            by_epoch.setdefault(int(row["epoch"]), []).append(row)
        out = []
        for epoch in sorted(by_epoch):
            rows = by_epoch[epoch]
            means = {c: float(np.mean([r[c] for r in rows])) for c in self.columns if c not in ("epoch", "step")}
            out.append({"epoch": epoch, **means})
        return out

    def final_total(self) -> float:
        means = self.epoch_means()
        return means[-1]["total"] if means else float("nan")


def _labeled_batches(dataset: Dataset, pool: PoolState, batch_size: int, rng: Rng,
                     dtype: torch.dtype) -> List[Batch]:
    """Labeled batches whose labels come from the pool's label store, not the dataset"""
    out = batches(dataset, pool.labeled, batch_size, with_pretext=False, rng=rng, with_labels=False, dtype=dtype)
    for batch in out:
        position = np.searchsorted(pool.labeled, batch.indices)
        batch.labels = torch.as_tensor(pool.labels[position], dtype=torch.long)
    return out


def epoch_pairs(dataset: Dataset, pool: PoolState, batch_size: int, rng: Rng,
                dtype: torch.dtype = torch.float32) -> List[Tuple[Batch, Optional[Batch]]]:
    """(labeled, unlabeled) batch pairs for one epoch; the unlabeled side carries the pretext view"""
    labeled = _labeled_batches(dataset, pool, batch_size, rng.child("labeled"), dtype)
    unlabeled = batches(dataset, pool.unlabeled, batch_size, with_pretext=True,
                        rng=rng.child("unlabeled"), with_labels=False, dtype=dtype)
    if not labeled:
        return []
    if not unlabeled:
        return [(b, None) for b in labeled]
    steps = max(len(labeled), len(unlabeled))
    return [(labeled[i % len(labeled)], unlabeled[i % len(unlabeled)]) for i in range(steps)]


def _dtype_of(module: nn.Module) -> torch.dtype:
    return next(module.parameters()).dtype


def _emit(report: TrainReport, row: Dict[str, float], sink: Optional[RowSink]):
    report.rows.append(row)
    if sink is not None:
        sink(row)


# ========================
# Target learner
# ========================

def train_target(dataset: Dataset, pool: PoolState, cfg: ALConfig, rng: Rng,
                 target: Optional[TargetLearner] = None, sink: Optional[RowSink] = None,
                 round_index: Optional[int] = None,
                 dtype: torch.dtype = torch.float32) -> Tuple[TargetLearner, TrainReport]:
    """Fit the target learner on the labeled pool with the rotation pretext on the unlabeled pool"""
    if len(pool.labeled) == 0:
        raise InvalidStateError("target training needs a nonempty labeled pool")
    if target is None:
        target = build_target(cfg, dataset.image_shape, dataset.num_classes, rng.child("init"), dtype)
    dtype = _dtype_of(target)
    params = list(target.parameters())
    state = sgd_state(params, cfg.lr_target, cfg.momentum, cfg.weight_decay, cfg.grad_clip)
    report = TrainReport(phase="target", columns=TARGET_COLUMNS)

    started = time.perf_counter()
    target.train()
    for epoch in range(cfg.epochs_target):
        pairs = epoch_pairs(dataset, pool, cfg.batch_size, rng.child(f"epoch{epoch}"), dtype)
        for step, (lb, ub) in enumerate(pairs):
            terms = target_loss_terms(lb, ub, target)
            loss = terms["sup"] + cfg.xi * terms["ssl"]
            row = {"epoch": epoch, "step": step, "sup": float(terms["sup"].detach()),
                   "ssl": float(terms["ssl"].detach()), "total": float(loss.detach())}
            if not torch.isfinite(loss):
                raise DivergenceError("target", epoch, step, row, round_index)
            sgd_momentum_step(params, _gradients(loss, params), state)
            _emit(report, row, sink)
        logger.debug(f"target epoch {epoch}: {report.epoch_means()[-1] if report.rows else {}}")
    target.eval()

    report.wall_time = time.perf_counter() - started
    report.checksum = parameter_checksum(target)
    logger.info(f"🎯 Target learner trained: {cfg.epochs_target} epochs, {state.steps} steps, "
                f"final loss {report.final_total():.4f}")
    return target, report


# ========================
# VAE + discriminator
# ========================

def vae_step(labeled: Batch, unlabeled: Batch, bundle: ModelBundle, cfg: ALConfig, rng: Rng,
             vae_state: OptimizerState, disc_state: OptimizerState,
             epoch: int = 0, step: int = 0, round_index: Optional[int] = None) -> LossBreakdown:
    """One VAE update against the weighted total, then one discriminator update on fresh codes"""
    breakdown = total_vae_loss(labeled, unlabeled, bundle, cfg, rng)
    if not breakdown.is_finite():
        raise DivergenceError("adroit", epoch, step, breakdown.values(), round_index)
    vae_params = list(bundle.vae_parameters())
    adam_step(vae_params, _gradients(breakdown.total, vae_params), vae_state)

    d_loss = disc_loss(labeled, unlabeled, bundle)
    if not torch.isfinite(d_loss):
        raise DivergenceError("adroit", epoch, step, breakdown.with_disc(d_loss).values(), round_index)
    disc_params = list(bundle.discriminator.parameters())
    adam_step(disc_params, _gradients(d_loss, disc_params), disc_state)
    return breakdown.with_disc(d_loss)


def _adroit_checksum(bundle: ModelBundle) -> str:
    return parameter_checksum(nn.ModuleList([bundle.encoder, bundle.generator,
                                             bundle.classifier, bundle.discriminator]))


def train_adroit(dataset: Dataset, pool: PoolState, target: TargetLearner, cfg: ALConfig, rng: Rng,
                 bundle: Optional[ModelBundle] = None, sink: Optional[RowSink] = None,
                 round_index: Optional[int] = None) -> Tuple[ModelBundle, TrainReport]:
    """Joint VAE/discriminator training with the target learner held fixed"""
    if len(pool.labeled) == 0 or len(pool.unlabeled) == 0:
        raise InvalidStateError("ADROIT training needs both a labeled and an unlabeled pool")
    if target is None:
        raise InvalidStateError("ADROIT training needs a trained target learner")
    dtype = _dtype_of(target)
    if bundle is None:
        bundle = build_bundle(cfg, dataset.image_shape, dataset.num_classes, rng.child("init"), dtype)
    bundle.target = target
    target.eval()
    frozen = parameter_checksum(target)

    betas = (cfg.adam_beta1, cfg.adam_beta2)
    vae_state = adam_state(bundle.vae_parameters(), cfg.lr_vae, betas, cfg.adam_eps, cfg.grad_clip)
    disc_state = adam_state(bundle.discriminator.parameters(), cfg.lr_disc, betas, cfg.adam_eps, cfg.grad_clip)
    report = TrainReport(phase="adroit", columns=ADROIT_COLUMNS)

    started = time.perf_counter()
    for name, module in bundle.components():
        if name != "target":
            module.train()
    for epoch in range(cfg.epochs_vae):
        epoch_rng = rng.child(f"epoch{epoch}")
        pairs = epoch_pairs(dataset, pool, cfg.batch_size, epoch_rng, dtype)
        for step, (lb, ub) in enumerate(pairs):
            breakdown = vae_step(lb, ub, bundle, cfg, epoch_rng.child(f"step{step}"), vae_state, disc_state,
                                 epoch, step, round_index)
            _emit(report, {"epoch": epoch, "step": step, **breakdown.values()}, sink)
        logger.debug(f"adroit epoch {epoch}: {report.epoch_means()[-1]}")
    bundle.train(False)

    if parameter_checksum(target) != frozen:
        raise InvalidStateError("target learner changed during ADROIT training")
    report.wall_time = time.perf_counter() - started
    report.checksum = _adroit_checksum(bundle)
    logger.info(f"🧬 VAE/discriminator trained: {cfg.epochs_vae} epochs, {vae_state.steps} steps, "
                f"final total {report.final_total():.4f}")
    return bundle, report


def discriminator_accuracy(bundle: ModelBundle, dataset: Dataset, labeled: np.ndarray, unlabeled: np.ndarray,
                           batch_size: int = 512) -> float:
    """Balanced accuracy of D on encoder means: labeled is class 1, unlabeled class 0, threshold 0.5"""
    labeled = np.asarray(labeled, dtype=np.int64)
    unlabeled = np.asarray(unlabeled, dtype=np.int64)
    if len(labeled) == 0 or len(unlabeled) == 0:
        raise InvalidArgumentError("discriminator accuracy needs codes from both pools")
    with torch.no_grad():
        p_l = discriminate(bundle.discriminator, encode_means(bundle.encoder, dataset, labeled, batch_size))
        p_u = discriminate(bundle.discriminator, encode_means(bundle.encoder, dataset, unlabeled, batch_size))
    y_true = np.concatenate([np.ones(len(labeled), dtype=int), np.zeros(len(unlabeled), dtype=int)])
    y_pred = np.concatenate([(p_l >= 0.5).numpy(), (p_u >= 0.5).numpy()]).astype(int)
    return float(balanced_accuracy_score(y_true, y_pred))
