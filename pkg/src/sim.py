"""Experiment orchestration: data, nodes, synchronous rounds and final evaluation."""
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from src.bandit import CorrelatedTsallisINF
from src.data import LabeledPool, load_csv, make_base_task, partition
from src.errors import ConfigurationError
from src.groups import GroupCatalog
from src.learner import AdamState, ModelParams, evaluate
from src.rounds import NodeRoundEntry, NodeState, RoundContext, get_round_function
from src.sim_config import SimConfig

logger = logging.getLogger(__name__)

# Stream tags kept apart from the (seed, node, round) node streams
_DATA_STREAM = (1 << 32) - 1
_INIT_STREAM = (1 << 32) - 2


@dataclass(frozen=True)
class RoundRecord:
    round: int
    entries: tuple[NodeRoundEntry, ...]


@dataclass
class CommMatrix:
    """counts[i, j] = rounds in which node j was in node i's aggregated group."""

    counts: np.ndarray

    @classmethod
    def zeros(cls, num_nodes: int) -> "CommMatrix":
        return cls(np.zeros((num_nodes, num_nodes), dtype=np.int64))

    def record(self, node: int, group: tuple[int, ...]) -> None:
        if group:
            self.counts[node, list(group)] += 1


@dataclass(frozen=True)
class NodeAccuracy:
    node: int
    cluster: int
    test_acc: float
    best_round: int


@dataclass
class ExperimentResult:
    config: SimConfig
    records: list[RoundRecord]
    comm: CommMatrix
    accuracies: list[NodeAccuracy]
    best_models: list[ModelParams] = field(default_factory=list)
    started_at: str = ""
    finished_at: str = ""

    def cluster_means(self) -> dict[int, float]:
        clusters = sorted({a.cluster for a in self.accuracies})
        return {
            c: float(np.mean([a.test_acc for a in self.accuracies if a.cluster == c]))
            for c in clusters
        }

    @property
    def mean_over_clusters(self) -> float:
        """Unweighted mean of the per-cluster means."""
        return float(np.mean(list(self.cluster_means().values())))

    @property
    def node_weighted_mean(self) -> float:
        return float(np.mean([a.test_acc for a in self.accuracies]))


def _pool_per_class(config: SimConfig) -> int:
    """Samples per class the synthetic pool needs so no cluster runs dry."""
    layout, spn = config.layout, config.task.samples_per_node
    classes = config.task.classes
    if layout.shift == "rotation":
        return math.ceil(config.num_nodes * spn / classes)
    demand = np.zeros(classes, dtype=np.int64)
    for size, subset in zip(layout.cluster_sizes, layout.label_subsets):
        for label in set(subset):
            demand[label] += size * spn
    return int(demand.max())


def build_pool(config: SimConfig, rng: np.random.Generator) -> LabeledPool:
    task = config.task
    if task.csv_path is not None:
        return load_csv(task.csv_path, classes=task.classes)
    return make_base_task(task.classes, task.dim, _pool_per_class(config), rng, task.radius, task.sigma)


def build_nodes(config: SimConfig) -> list[NodeState]:
    """Partition data and create every node with the shared initial model."""
    data_rng = np.random.default_rng([config.seed, _DATA_STREAM])
    pool = build_pool(config, data_rng)
    datasets = partition(
        pool, config.layout, config.num_nodes, config.task.samples_per_node, data_rng, config.task.split_fracs,
    )
    for ds in datasets:
        if min(len(ds.train), len(ds.val), len(ds.test)) == 0:
            raise ConfigurationError(f"node {ds.node} has an empty split")

    init = ModelParams.initial(
        config.model, pool.features.shape[1], config.task.classes,
        np.random.default_rng([config.seed, _INIT_STREAM]), hidden=config.hidden,
    )
    neighborhoods = config.neighborhoods()
    nodes = []
    for ds in datasets:
        policy = None
        if config.method.uses_bandit:
            catalog = GroupCatalog(neighborhoods[ds.node], config.group_size, owner=ds.node)
            policy = CorrelatedTsallisINF(
                catalog,
                config.pseudo_reward,
                config.significance_divisor,
                competitive_masking=config.competitive_masking,
                importance_weighted=config.importance_weighted,
            )
        nodes.append(NodeState(
            node=ds.node,
            cluster=ds.cluster_id,
            data=ds,
            neighbors=neighborhoods[ds.node],
            model=init.copy(),
            opt=AdamState.fresh(init.theta.size, config.lr),
            policy=policy,
        ))
    return nodes


def processing_order(config: SimConfig, t: int) -> np.ndarray:
    if config.node_order_seed is None:
        return np.arange(config.num_nodes)
    return np.random.default_rng([config.node_order_seed, t]).permutation(config.num_nodes)


def run_experiment(config: SimConfig, audit_logger: logging.Logger | None = None) -> ExperimentResult:
    """
    Run T synchronous rounds and evaluate every node's best-validation checkpoint on its test split.

    Raises:
        ConfigurationError: data cannot be partitioned or a node has an empty split
    """
    started = datetime.now(timezone.utc).isoformat()
    logger.info(
        f"Starting {config.method.value} experiment: K={config.num_nodes}, M={config.group_size}, "
        f"T={config.rounds}, seed={config.seed}"
    )
    step = get_round_function(config.method.value)
    nodes = build_nodes(config)
    clusters = config.layout.cluster_of()
    comm = CommMatrix.zeros(config.num_nodes)
    records: list[RoundRecord] = []
    progress_every = max(1, config.rounds // 10)

    for t in range(1, config.rounds + 1):
        snapshot = np.stack([n.model.theta for n in nodes])
        snapshot.setflags(write=False)
        ctx = RoundContext(config, t, snapshot, clusters, audit_logger)
        entries: dict[int, NodeRoundEntry] = {}
        for i in processing_order(config, t):
            entries[int(i)] = step(nodes[int(i)], ctx)

        record = RoundRecord(t, tuple(entries[i] for i in range(config.num_nodes)))
        for entry in record.entries:
            comm.record(entry.node, entry.group)
        records.append(record)
        if t % progress_every == 0 or t == config.rounds:
            mean_acc = np.mean([e.val_acc for e in record.entries])
            logger.info(f"Round {t}/{config.rounds}: mean validation accuracy {mean_acc:.4f}")

    accuracies, best_models = [], []
    for n in nodes:
        model = n.best.model if n.best.model is not None else n.model
        test_acc, _ = evaluate(model, n.data.test)
        accuracies.append(NodeAccuracy(n.node, n.cluster, test_acc, n.best.round))
        best_models.append(model)

    result = ExperimentResult(
        config, records, comm, accuracies, best_models,
        started_at=started, finished_at=datetime.now(timezone.utc).isoformat(),
    )
    logger.info(
        f"Finished {config.method.value} seed {config.seed}: mean over clusters "
        f"{result.mean_over_clusters:.4f}, node-weighted {result.node_weighted_mean:.4f}"
    )
    return result
