"""
One node's step of a synchronous round, for every method.

Each step reads peers only through the round-start snapshot held by the
RoundContext and writes only to its own NodeState, so nodes can be stepped
in any order (or concurrently) with identical results.
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from src.bandit import CorrelatedTsallisINF
from src.data import NodeDataset
from src.errors import AggregationError, ConfigurationError
from src.learner import AdamState, BestCheckpoint, ModelParams, evaluate, local_train, merge
from src.secagg import secure_aggregate, write_audit_log
from src.sim_config import SimConfig

logger = logging.getLogger(__name__)

# Registry of round functions keyed by method name
METHOD_REGISTRY: dict[str, dict[str, Any]] = {}

# Floor on a peer's loss before inverting it into a DAC score
MIN_DAC_LOSS = 1e-12


def register_method(name: str, description: str) -> Callable:
    """Decorator to register a round function under a method name."""
    def decorator(func: Callable) -> Callable:
        METHOD_REGISTRY[name] = {
            "name": name,
            "description": description,
            "function": func,
        }
        return func
    return decorator


def get_round_function(name: str) -> Callable:
    if name not in METHOD_REGISTRY:
        raise ConfigurationError(f"Unknown method: {name}")
    return METHOD_REGISTRY[name]["function"]


@dataclass
class NodeState:
    """Everything a node carries from round to round."""

    node: int
    cluster: int
    data: NodeDataset
    neighbors: tuple[int, ...]
    model: ModelParams
    opt: AdamState
    best: BestCheckpoint = field(default_factory=BestCheckpoint)
    policy: CorrelatedTsallisINF | None = None
    dac_scores: np.ndarray | None = None
    dac_probs: np.ndarray | None = None


@dataclass(frozen=True)
class RoundContext:
    config: SimConfig
    round: int
    snapshot: np.ndarray
    clusters: np.ndarray
    audit_logger: logging.Logger | None = None

    def peer_model(self, template: ModelParams, peer: int) -> ModelParams:
        return template.with_theta(self.snapshot[peer])


@dataclass(frozen=True)
class NodeRoundEntry:
    """One node's line in a round record."""

    round: int
    node: int
    arm: int | None
    group: tuple[int, ...]
    reward: float
    val_acc: float
    val_loss: float
    train_loss: float
    comp_set_size: int | None = None
    entropy: float | None = None
    aggregated: bool = False


def node_streams(seed: int, node: int, t: int) -> tuple[np.random.Generator, ...]:
    """Independent (selection, aggregation, training) streams for one node and round."""
    children = np.random.SeedSequence([seed, node, t]).spawn(3)
    return tuple(np.random.default_rng(child) for child in children)


def _aggregate(
    node: NodeState,
    ctx: RoundContext,
    group: tuple[int, ...],
    rng: np.random.Generator,
) -> tuple[np.ndarray | None, int]:
    """Secure mean of the group's round-start models and its member count, or (None, 0) if too few survive."""
    cfg = ctx.config
    threshold = min(cfg.secagg_threshold, len(group))
    try:
        mean, transcript = secure_aggregate(
            node.node, group, ctx.snapshot.__getitem__, cfg.field, threshold, rng,
            round=ctx.round, dropout_prob=cfg.dropout_prob,
        )
    except AggregationError as e:
        logger.warning(f"Node {node.node} trains locally this round: {e}")
        return None, 0
    if ctx.audit_logger is not None:
        write_audit_log(transcript, ctx.audit_logger)
    return mean, len(transcript.survivors)


def _merge_and_train(
    node: NodeState,
    ctx: RoundContext,
    aggregate: np.ndarray | None,
    group_size: int,
    rng: np.random.Generator,
) -> tuple[float, float, float, float]:
    """Merge, train, evaluate and checkpoint; returns (reward, val_acc, val_loss, train_loss)."""
    cfg = ctx.config
    model = node.model
    if aggregate is not None:
        model = merge(model, aggregate, group_size, cfg.merge_weight)

    reward = None
    if not cfg.reward_after_training:
        reward, _ = evaluate(model, node.data.val)

    model, train_loss = local_train(model, node.data.train, cfg.local_epochs, cfg.batch_size, node.opt, rng)
    val_acc, val_loss = evaluate(model, node.data.val)
    node.model = model
    node.best.offer(model, val_loss, ctx.round)
    return (val_acc if reward is None else reward), val_acc, val_loss, train_loss


@register_method("ppdl", "Correlated Tsallis-INF group selection with secure aggregation")
@register_method("ppdl-var", "PPDL with an exponentially decaying pseudo-reward slack")
def run_round_ppdl(node: NodeState, ctx: RoundContext) -> NodeRoundEntry:
    """Select a group with the bandit, aggregate it securely, train, and reward the arm."""
    cfg = ctx.config
    select_rng, agg_rng, train_rng = node_streams(cfg.seed, node.node, ctx.round)
    policy = node.policy

    arm, comp_size = policy.choose(select_rng)
    entropy = policy.state.entropy()
    group = policy.catalog.unrank(arm).members
    aggregate, contributors = _aggregate(node, ctx, group, agg_rng)
    reward, val_acc, val_loss, train_loss = _merge_and_train(node, ctx, aggregate, contributors, train_rng)

    if aggregate is not None:
        policy.update(arm, reward, ctx.round)
    logger.debug(
        f"Node {node.node} round {ctx.round}: arm {arm} group {group} "
        f"reward {reward:.4f} competitive {comp_size}"
    )
    return NodeRoundEntry(
        ctx.round, node.node, arm, group if aggregate is not None else (), reward,
        val_acc, val_loss, train_loss, comp_set_size=comp_size, entropy=entropy,
        aggregated=aggregate is not None,
    )


def dac_probabilities(scores: np.ndarray, tau: float) -> np.ndarray:
    """
    Sampling distribution over neighbors from their stored DAC scores.

    Args:
        scores: one score per neighbor, NaN where the neighbor was never sampled
        tau: softmax temperature applied to scores normalized by their maximum

    Unscored neighbors get the mean of the known scores. With no known
    scores, or degenerate ones, the distribution is uniform.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.size
    known = ~np.isnan(scores)
    if not known.any():
        return np.full(n, 1.0 / n)
    filled = np.where(known, scores, scores[known].mean())
    top = filled.max()
    if not np.isfinite(top) or top <= 0:
        logger.warning(f"Degenerate DAC scores (max {top}); sampling uniformly")
        return np.full(n, 1.0 / n)
    logits = tau * filled / top
    weights = np.exp(logits - logits.max())
    return weights / weights.sum()


@register_method("dac", "Adaptive peer sampling by inverse loss, plaintext transfer")
def run_round_dac(node: NodeState, ctx: RoundContext) -> NodeRoundEntry:
    """Sample M peers by softmax of their scores, average their models in plaintext."""
    cfg = ctx.config
    select_rng, _, train_rng = node_streams(cfg.seed, node.node, ctx.round)
    neighbors = np.asarray(node.neighbors)
    if node.dac_scores is None:
        node.dac_scores = np.full(neighbors.size, np.nan)

    probs = dac_probabilities(node.dac_scores, cfg.dac_tau)
    node.dac_probs = probs
    picked = select_rng.choice(neighbors.size, size=cfg.group_size, replace=False, p=probs)
    group = tuple(int(j) for j in np.sort(neighbors[picked]))

    for pos, peer in zip(picked, neighbors[picked]):
        _, loss = evaluate(ctx.peer_model(node.model, int(peer)), node.data.train)
        node.dac_scores[pos] = 1.0 / max(loss, MIN_DAC_LOSS)

    aggregate = ctx.snapshot[list(group)].mean(axis=0)
    reward, val_acc, val_loss, train_loss = _merge_and_train(node, ctx, aggregate, len(group), train_rng)
    p = probs[probs > 0]
    return NodeRoundEntry(
        ctx.round, node.node, None, group, reward, val_acc, val_loss, train_loss,
        entropy=float(-np.sum(p * np.log(p))), aggregated=True,
    )


def _baseline_group(node: NodeState, ctx: RoundContext, method: str, rng: np.random.Generator) -> tuple[int, ...]:
    m = ctx.config.group_size
    if method == "random":
        candidates = list(node.neighbors)
    else:
        candidates = [j for j in node.neighbors if ctx.clusters[j] == node.cluster]
        if len(candidates) <= m:
            return tuple(candidates)
    return tuple(sorted(int(j) for j in rng.choice(candidates, size=m, replace=False)))


@register_method("random", "Uniform random group each round")
@register_method("oracle", "Uniform random group within the ground-truth cluster")
@register_method("local", "No communication")
def run_round_baseline(node: NodeState, ctx: RoundContext) -> NodeRoundEntry:
    """Random, oracle or local step; communicating baselines aggregate securely."""
    cfg = ctx.config
    method = cfg.method.value
    select_rng, agg_rng, train_rng = node_streams(cfg.seed, node.node, ctx.round)

    group: tuple[int, ...] = ()
    aggregate, contributors = None, 0
    if method != "local":
        group = _baseline_group(node, ctx, method, select_rng)
        if group:
            aggregate, contributors = _aggregate(node, ctx, group, agg_rng)
        if aggregate is None:
            group = ()

    reward, val_acc, val_loss, train_loss = _merge_and_train(node, ctx, aggregate, contributors, train_rng)
    return NodeRoundEntry(
        ctx.round, node.node, None, group, reward, val_acc, val_loss, train_loss,
        aggregated=aggregate is not None,
    )
