"""
Correlated adversarial bandit run by each node to pick its group.

Bookkeeping keeps, per played arm, the reward sum and one running pseudo-reward
sum per overlap level u in 1..M-1. Because the overlap pseudo-reward of arm l
given arm j depends on the pair only through their overlap, the empirical
pseudo-reward of any arm is rebuilt on demand from those M-1 sums.

Distribution updates follow Tsallis-INF (online mirror descent with the 1/2
Tsallis entropy); the normalizer is found with a safeguarded Newton iteration.
"""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from pydantic import BaseModel, ConfigDict, PositiveFloat, PositiveInt, model_validator

from src.errors import ArmIndexError, BanditStateError, DomainError, NumericalError
from src.groups import GroupCatalog

logger = logging.getLogger(__name__)

NEWTON_TOLERANCE = 1e-9
NEWTON_MAX_ITER = 100


class QMode(str, Enum):
    CONSTANT = "constant"
    EXPONENTIAL = "exponential"


class PseudoRewardConfig(BaseModel):
    """Schedule of the pseudo-reward slack q(t)."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    mode: QMode = QMode.CONSTANT
    q0: PositiveFloat = 0.2
    q_min: PositiveFloat = 0.07
    horizon: PositiveInt = 200

    @model_validator(mode="after")
    def _floor_below_start(self):
        if self.mode is QMode.EXPONENTIAL and self.q_min > self.q0:
            raise ValueError(f"q_min ({self.q_min}) must not exceed q0 ({self.q0})")
        return self


def q_of_t(cfg: PseudoRewardConfig, t: int) -> float:
    if t < 0:
        raise DomainError(f"round must be non-negative, got {t}")
    if cfg.mode is QMode.CONSTANT:
        return cfg.q0
    decay = math.log(cfg.q0 / cfg.q_min) / cfg.horizon
    return max(cfg.q_min, cfg.q0 * math.exp(-decay * t))


def pseudo_reward(alpha: float, q: float, u: int) -> float:
    """Upper bound on another group's reward given observed reward alpha and overlap u."""
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"reward {alpha} outside [0, 1]")
    if u == 0:
        return 1.0
    return min(alpha + q / u, 1.0)


@dataclass
class BanditState:
    """Per-node statistics of the correlated bandit."""

    num_arms: int
    group_size: int
    cum_loss: np.ndarray
    plays: np.ndarray
    reward_sum: np.ndarray
    dist: np.ndarray
    pseudo_sums: dict[int, np.ndarray] = field(default_factory=dict)
    normalizer: float = 0.0
    round: int = 0
    last_arm: int | None = None
    last_reward: float | None = None
    last_prob: float | None = None
    importance_weighted: bool = False

    @classmethod
    def fresh(cls, num_arms: int, group_size: int, importance_weighted: bool = False) -> "BanditState":
        return cls(
            num_arms=num_arms,
            group_size=group_size,
            cum_loss=np.zeros(num_arms),
            plays=np.zeros(num_arms, dtype=np.int64),
            reward_sum=np.zeros(num_arms),
            dist=np.full(num_arms, 1.0 / num_arms),
            importance_weighted=importance_weighted,
        )

    def _check_arm(self, arm: int) -> None:
        if not 0 <= arm < self.num_arms:
            raise ArmIndexError(f"arm {arm} outside [0, {self.num_arms})")

    def mean_reward(self, arm: int) -> float:
        self._check_arm(arm)
        if self.plays[arm] == 0:
            raise BanditStateError(f"arm {arm} has not been played")
        return self.reward_sum[arm] / self.plays[arm]

    def entropy(self) -> float:
        p = self.dist[self.dist > 0]
        return float(-np.sum(p * np.log(p)))


def record_outcome(state: BanditState, arm: int, reward: float, q: float) -> None:
    """Charge the played arm with its observed reward."""
    state._check_arm(arm)
    if not 0.0 <= reward <= 1.0:
        raise DomainError(f"reward {reward} outside [0, 1]")

    state.plays[arm] += 1
    state.reward_sum[arm] += reward
    sums = state.pseudo_sums.get(arm)
    if sums is None:
        sums = np.zeros(state.group_size - 1)
        state.pseudo_sums[arm] = sums
    for u in range(1, state.group_size):
        sums[u - 1] += min(reward + q / u, 1.0)

    loss = 1.0 - reward
    if state.importance_weighted and state.last_arm == arm and state.last_prob:
        loss /= state.last_prob
    state.cum_loss[arm] += loss

    state.round += 1
    state.last_arm = arm
    state.last_reward = reward


def empirical_pseudo_reward(state: BanditState, target: int, source: int, catalog: GroupCatalog) -> float:
    state._check_arm(target)
    state._check_arm(source)
    if state.plays[source] == 0:
        raise BanditStateError(f"source arm {source} has not been played")
    if target == source:
        return state.reward_sum[source] / state.plays[source]
    u = len(set(catalog.unrank(target).members) & set(catalog.unrank(source).members))
    if u == 0:
        return 1.0
    return state.pseudo_sums[source][u - 1] / state.plays[source]


def _excluded_by(state: BanditState, catalog: GroupCatalog, source: int, best_mean: float) -> np.ndarray | None:
    """Mask of arms whose empirical pseudo-reward given the source falls below best_mean, or None if none do."""
    levels = state.pseudo_sums[source] / state.plays[source]
    short = np.flatnonzero(levels < best_mean) + 1
    if short.size == 0:
        return None
    hit = np.isin(catalog.overlaps_with(source), short)
    hit[source] = False
    return hit


def significant_arms(state: BanditState, divisor: int) -> np.ndarray:
    played = np.flatnonzero(state.plays)
    return played[state.plays[played] > state.round / divisor]


def competitive_set(state: BanditState, catalog: GroupCatalog, divisor: int) -> np.ndarray:
    """
    Sorted indices of the empirically competitive arms.

    Arm j survives when its empirical pseudo-reward from every significant arm
    other than j reaches the best significant empirical reward. A significant
    arm is not tested against its own mean, so saturated pseudo-rewards leave
    every arm competitive. Overlap-zero pseudo-rewards are 1 and never exclude,
    and a source only scans the catalog when one of its M-1 levels is short.
    """
    if divisor < 1:
        raise DomainError(f"significance divisor must be positive, got {divisor}")
    significant = significant_arms(state, divisor)
    if significant.size == 0:
        return np.arange(state.num_arms)

    means = state.reward_sum[significant] / state.plays[significant]
    best_pos = int(np.argmax(means))
    best, best_mean = int(significant[best_pos]), means[best_pos]

    mask = np.ones(state.num_arms, dtype=bool)
    for source in significant:
        hit = _excluded_by(state, catalog, int(source), best_mean)
        if hit is not None:
            mask &= ~hit
    mask[best] = True
    return np.flatnonzero(mask)


def tsallis_update(state: BanditState, t: int | None = None) -> np.ndarray:
    """
    Recompute the sampling distribution for round t (defaults to the next round).

    Losses are shifted by their minimum before iterating; the normalizer is
    clamped to min(l) - 2/eta so every p_j stays on the branch where p_j <= 1.
    """
    t = state.round + 1 if t is None else t
    if t < 1:
        raise DomainError(f"round must be >= 1, got {t}")
    eta = 2.0 / math.sqrt(t)
    shift = float(state.cum_loss.min())
    losses = state.cum_loss - shift
    ceiling = -2.0 / eta
    x = min(state.normalizer - shift, ceiling)

    for iteration in range(NEWTON_MAX_ITER + 1):
        p = 4.0 * (eta * (losses - x)) ** -2
        total = p.sum()
        if abs(total - 1.0) <= NEWTON_TOLERANCE:
            break
        if iteration == NEWTON_MAX_ITER:
            raise NumericalError(
                "Tsallis-INF normalization did not converge",
                {"t": t, "loss_min": shift, "loss_max": float(state.cum_loss.max()), "residual": total - 1.0},
            )
        x = min(x - (total - 1.0) / (eta * np.sum(p ** 1.5)), ceiling)

    state.normalizer = x + shift
    state.dist = p / total
    return state.dist


def select_arm(state: BanditState, competitive: np.ndarray, rng: np.random.Generator) -> int:
    """Sample from the distribution restricted to the competitive arms, renormalized."""
    competitive = np.asarray(competitive, dtype=np.int64)
    if competitive.size == 0:
        raise DomainError("competitive set is empty")
    restricted = state.dist[competitive]
    mass = restricted.sum()
    assert mass > 0, "restricted probability mass vanished"
    restricted = restricted / mass
    pos = int(np.searchsorted(np.cumsum(restricted), rng.random(), side="right"))
    pos = min(pos, competitive.size - 1)
    state.last_arm = int(competitive[pos])
    state.last_prob = float(restricted[pos])
    return state.last_arm


class CorrelatedTsallisINF:
    """Node-side policy: Tsallis-INF over the competitive arms of a group catalog."""

    def __init__(
        self,
        catalog: GroupCatalog,
        pseudo_cfg: PseudoRewardConfig,
        divisor: int,
        competitive_masking: bool = True,
        importance_weighted: bool = False,
    ):
        self.catalog = catalog
        self.pseudo_cfg = pseudo_cfg
        self.divisor = divisor
        self.competitive_masking = competitive_masking
        self.state = BanditState.fresh(catalog.num_arms, catalog.group_size, importance_weighted)

    def choose(self, rng: np.random.Generator) -> tuple[int, int]:
        """Run one selection step; returns (arm, competitive-set size)."""
        tsallis_update(self.state)
        if self.competitive_masking:
            competitive = competitive_set(self.state, self.catalog, self.divisor)
        else:
            competitive = np.arange(self.state.num_arms)
        arm = select_arm(self.state, competitive, rng)
        return arm, int(competitive.size)

    def update(self, arm: int, reward: float, t: int) -> None:
        record_outcome(self.state, arm, reward, q_of_t(self.pseudo_cfg, t))
