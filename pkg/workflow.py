"""
Active-Learning Experiment Workflow using LangGraph
===================================================

Two graphs:

1. Experiment graph: prepare data, fan seeds out with ``Send`` (run in
   parallel up to ``Config.CONCURRENT_SEEDS``), then summarize.
2. Round graph (one per seed): init_pool -> train_target -> evaluate, then
   either finish or (train_adroit ->) acquire -> annotate -> train_target.

Rounds within a seed are strictly sequential; every artifact is written to the
seed's own run directory as soon as it exists, so a divergence leaves the
completed rounds on disk.
"""

import operator
from typing import Any, Annotated, Dict, List, Optional, TypedDict

import numpy as np
import pandas as pd
from langgraph.graph import END, START, StateGraph
from langgraph.types import Send

from config import Config
from adroit.acquire import acquire, select_initial
from adroit.core import Dataset, DivergenceError, PoolState, Rng, annotate
from adroit.harness import (
    ExperimentSpec, RoundRecord, RunArtifacts, aggregate, emit_plot_data, evaluate_accuracy, prepare_data,
)
from adroit.logger import get_logger
from adroit.nets import ModelBundle, TargetLearner
from adroit.run_tracker import RunTracker
from adroit.trainer import ADROIT_COLUMNS, TARGET_COLUMNS, discriminator_accuracy, train_adroit, train_target

logger = get_logger(__name__)


# ========================
# State Definitions
# ========================

class SeedState(TypedDict, total=False):
    """State of one seed's AL loop"""
    spec: ExperimentSpec
    seed: int
    train: Dataset
    holdout: Dataset
    artifacts: RunArtifacts
    tracker: Optional[RunTracker]

    round: int
    pool: PoolState
    target: Optional[TargetLearner]
    bundle: Optional[ModelBundle]
    target_loss: float
    vae_loss: float
    disc_accuracy: float
    accuracy: float

    records: Annotated[List[RoundRecord], operator.add]


class ExperimentState(TypedDict, total=False):
    spec: ExperimentSpec
    train: Dataset
    holdout: Dataset
    tracker: Optional[RunTracker]
    results: Annotated[List[Dict[str, Any]], operator.add]
    summary: pd.DataFrame


# ========================
# Round nodes
# ========================

def _round_rng(state: SeedState, phase: str) -> Rng:
    """Training and acquisition streams are private to the strategy"""
    return Rng(state["seed"], state["spec"].strategy).child(f"round{state['round']}").child(phase)


def init_pool_node(state: SeedState) -> Dict[str, Any]:
    spec = state["spec"]
    # shared by every strategy so comparisons start from the same labeled set
    rng = Rng(state["seed"], "init").child("pool")
    pool = select_initial(spec.initial_strategy, state["train"], spec.al.initial_pool, rng)
    logger.info(f"🌱 [{spec.strategy} seed {state['seed']}] initial pool: {len(pool.labeled)} labeled")
    return {"pool": pool, "round": 0, "target": None, "bundle": None}


def train_target_node(state: SeedState) -> Dict[str, Any]:
    spec = state["spec"]
    writer = state["artifacts"].loss_writer("target", TARGET_COLUMNS)
    writer.round_index = state["round"]
    warm = state.get("target") if spec.al.warm_start else None
    try:
        target, report = train_target(state["train"], state["pool"], spec.al, _round_rng(state, "target"),
                                      target=warm, sink=writer, round_index=state["round"])
    finally:
        writer.flush()
    return {"target": target, "target_loss": report.final_total()}


def evaluate_node(state: SeedState) -> Dict[str, Any]:
    accuracy = evaluate_accuracy(state["target"], state["holdout"], batch_size=state["spec"].al.eval_batch_size)
    logger.info(f"📏 [{state['spec'].strategy} seed {state['seed']}] round {state['round']}: "
                f"{len(state['pool'].labeled)} labeled, accuracy {accuracy:.4f}")
    return {"accuracy": accuracy, "vae_loss": float("nan"), "disc_accuracy": float("nan")}


def train_adroit_node(state: SeedState) -> Dict[str, Any]:
    spec = state["spec"]
    writer = state["artifacts"].loss_writer("adroit", ADROIT_COLUMNS)
    writer.round_index = state["round"]
    warm = state.get("bundle") if spec.al.warm_start else None
    try:
        bundle, report = train_adroit(state["train"], state["pool"], state["target"], spec.al,
                                      _round_rng(state, "adroit"), bundle=warm, sink=writer,
                                      round_index=state["round"])
    finally:
        writer.flush()
    pool = state["pool"]
    disc_acc = discriminator_accuracy(bundle, state["train"], pool.labeled, pool.unlabeled, spec.al.eval_batch_size)
    logger.info(f"🛡️ Discriminator balanced accuracy: {disc_acc:.4f}")
    return {"bundle": bundle, "vae_loss": report.final_total(), "disc_accuracy": disc_acc}


def _record(state: SeedState, selected: np.ndarray) -> RoundRecord:
    return RoundRecord(
        round=state["round"],
        labeled_count=len(state["pool"].labeled),
        accuracy=state["accuracy"],
        selected=selected,
        target_loss=state["target_loss"],
        vae_loss=state["vae_loss"],
        disc_accuracy=state["disc_accuracy"],
    )


def _persist(state: SeedState, record: RoundRecord):
    artifacts = state["artifacts"]
    artifacts.write_rounds(list(state.get("records", [])) + [record])
    tracker = state.get("tracker")
    if tracker is not None:
        tracker.add_round(artifacts.run_id, record.to_row())


def acquire_annotate_node(state: SeedState) -> Dict[str, Any]:
    """Select b samples, label them, and close the round"""
    spec = state["spec"]
    pool = state["pool"]
    selected, scores = acquire(spec.strategy, state["train"], pool, spec.al.budget, _round_rng(state, "acquire"),
                               target=state["target"], bundle=state.get("bundle"),
                               batch_size=spec.al.eval_batch_size)
    artifacts = state["artifacts"]
    artifacts.append_selection(state["round"], selected, scores)
    artifacts.save_round(state["round"], pool, state["target"], state.get("bundle"))

    record = _record(state, selected)
    _persist(state, record)
    return {"pool": annotate(pool, selected), "round": state["round"] + 1, "records": [record]}


def finish_node(state: SeedState) -> Dict[str, Any]:
    state["artifacts"].save_round(state["round"], state["pool"], state["target"])
    record = _record(state, np.empty(0, dtype=np.int64))
    _persist(state, record)
    return {"records": [record]}


def route_after_evaluate(state: SeedState) -> str:
    if state["round"] >= state["spec"].al.rounds:
        return "finish"
    return "train_adroit" if state["spec"].strategy == "adroit" else "acquire"


def build_round_graph():
    builder = StateGraph(SeedState)
    builder.add_node("init_pool", init_pool_node)
    builder.add_node("train_target", train_target_node)
    builder.add_node("evaluate", evaluate_node)
    builder.add_node("train_adroit", train_adroit_node)
    builder.add_node("acquire", acquire_annotate_node)
    builder.add_node("finish", finish_node)

    builder.add_edge(START, "init_pool")
    builder.add_edge("init_pool", "train_target")
    builder.add_edge("train_target", "evaluate")
    builder.add_conditional_edges("evaluate", route_after_evaluate, ["train_adroit", "acquire", "finish"])
    builder.add_edge("train_adroit", "acquire")
    builder.add_edge("acquire", "train_target")
    builder.add_edge("finish", END)
    return builder.compile()


# ========================
# Experiment nodes
# ========================

def prepare_node(state: ExperimentState) -> Dict[str, Any]:
    spec = state["spec"]
    train, holdout = prepare_data(spec)
    spec.validate_budget(len(train))
    return {"train": train, "holdout": holdout}


def assign_seeds(state: ExperimentState) -> List[Send]:
    """One run_seed worker per seed"""
    spec = state["spec"]
    logger.info(f"📋 Dispatching {len(spec.seeds)} seed(s) for strategy {spec.strategy}")
    return [
        Send("run_seed", {"spec": spec, "seed": seed, "train": state["train"], "holdout": state["holdout"],
                          "tracker": state.get("tracker")})
        for seed in spec.seeds
    ]


def run_seed_node(worker_input: Dict[str, Any]) -> Dict[str, Any]:
    spec = worker_input["spec"]
    seed = int(worker_input["seed"])
    tracker = worker_input.get("tracker")
    artifacts = RunArtifacts(spec.run_dir, spec.strategy, seed)
    artifacts.reset()
    artifacts.write_snapshot(spec)
    if tracker is not None:
        tracker.create_run(artifacts.run_id, spec.strategy, seed, str(artifacts.path), spec.for_seed(seed).to_items())

    initial: SeedState = {
        "spec": spec.for_seed(seed),
        "seed": seed,
        "train": worker_input["train"],
        "holdout": worker_input["holdout"],
        "artifacts": artifacts,
        "tracker": tracker,
        "records": [],
    }
    graph = build_round_graph()
    try:
        final = graph.invoke(initial, config={"recursion_limit": 6 * spec.al.rounds + 10})
    except DivergenceError as e:
        logger.error(f"❌ [{spec.strategy} seed {seed}] {e}")
        if tracker is not None:
            tracker.finish_run(artifacts.run_id, "diverged")
        raise
    records = final["records"]
    if tracker is not None:
        tracker.finish_run(artifacts.run_id, "completed", records[-1].accuracy)
    logger.info(f"✅ [{spec.strategy} seed {seed}] finished {len(records)} round(s)")
    return {"results": [{"seed": seed, "records": records}]}


def summarize_node(state: ExperimentState) -> Dict[str, Any]:
    spec = state["spec"]
    by_seed = {r["seed"]: r["records"] for r in sorted(state["results"], key=lambda r: r["seed"])}
    summary = aggregate(by_seed, spec.strategy)
    emit_plot_data(summary, f"{spec.run_dir}/{spec.strategy}/plot_data.csv")
    return {"summary": summary}


# ========================
# Workflow Builder
# ========================

class ExperimentWorkflow:
    """Multi-seed AL experiment for one strategy"""

    def __init__(self, max_concurrency: Optional[int] = None):
        self.max_concurrency = max_concurrency or Config.CONCURRENT_SEEDS
        self.workflow = None
        self._build_workflow()

    def _build_workflow(self):
        builder = StateGraph(ExperimentState)
        builder.add_node("prepare", prepare_node)
        builder.add_node("run_seed", run_seed_node)
        builder.add_node("summarize", summarize_node)

        builder.add_edge(START, "prepare")
        builder.add_conditional_edges("prepare", assign_seeds, ["run_seed"])
        builder.add_edge("run_seed", "summarize")
        builder.add_edge("summarize", END)
        self.workflow = builder.compile()
        logger.debug("Experiment workflow built")

    def run(self, spec: ExperimentSpec, tracker: Optional[RunTracker] = None) -> Dict[str, Any]:
        """
        Run every seed of ``spec``

        Returns the final graph state: ``results`` (seed -> records) and the
        aggregated ``summary`` frame.
        """
        logger.info(f"🚀 Experiment: strategy {spec.strategy}, seeds {list(spec.seeds)}, "
                    f"{spec.al.rounds} round(s), run dir {spec.run_dir}")
        initial: ExperimentState = {"spec": spec, "tracker": tracker, "results": []}
        result = self.workflow.invoke(initial, config={"max_concurrency": self.max_concurrency})
        logger.info(f"🎉 Experiment finished: {spec.strategy}")
        return result


def run_experiment(spec: ExperimentSpec, tracker: Optional[RunTracker] = None) -> Dict[int, List[RoundRecord]]:
    """Round records per seed for ``spec``"""
    result = ExperimentWorkflow().run(spec, tracker)
    return {r["seed"]: r["records"] for r in sorted(result["results"], key=lambda r: r["seed"])}
