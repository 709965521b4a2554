"""
Catalog of candidate groups (bandit arms) for one node.

Arms are the M-subsets of a node's neighborhood, indexed lexicographically over
the sorted neighborhood starting at zero. Ranking goes through the
colexicographic combinadic of the reflected subset.
"""
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from itertools import combinations
from typing import Iterable, Sequence

import numpy as np

from src.errors import ArmIndexError, CapacityError, DomainError

logger = logging.getLogger(__name__)

# Arm indices live in int64 arrays
MAX_REPRESENTABLE_ARMS = int(np.iinfo(np.int64).max)


def count_groups(n: int, m: int) -> int:
    """Number of m-subsets of an n-node neighborhood, exact."""
    if m < 0 or n < 0 or m > n:
        raise DomainError(f"group size {m} must lie in [0, {n}]")
    count = math.comb(n, m)
    if count > MAX_REPRESENTABLE_ARMS:
        raise CapacityError(f"C({n}, {m}) = {count} exceeds the arm index range")
    return count


def overlap_class_count(n: int, m: int, u: int) -> int:
    """
    Number of groups overlapping a fixed group in exactly u nodes.

    Args:
        n: network size including the querying node (fully connected)
        m: group size
        u: overlap, 0 <= u <= m - 1
    """
    if not 0 <= u <= m - 1:
        raise DomainError(f"overlap {u} must lie in [0, {m - 1}]")
    if n <= 2 * m:
        raise DomainError(f"network size {n} must exceed 2 * group size ({2 * m})")
    return math.comb(m, u) * math.comb(n - m - 1, m - u)


def _rank_colex(subset: Sequence[int]) -> int:
    return sum(math.comb(c, j + 1) for j, c in enumerate(subset))


def _unrank_colex(r: int, n: int, k: int) -> list[int]:
    subset = [0] * k
    while k > 0:
        n -= 1
        offset = math.comb(n, k)
        if r >= offset:
            r -= offset
            k -= 1
            subset[k] = n
    return subset


@dataclass(frozen=True)
class Group:
    """A sorted tuple of M distinct neighbor ids."""

    members: tuple[int, ...]

    def __post_init__(self):
        if any(a >= b for a, b in zip(self.members, self.members[1:])):
            raise DomainError(f"group members must be strictly increasing: {self.members}")

    @classmethod
    def of(cls, members: Iterable[int]) -> "Group":
        return cls(tuple(sorted(int(m) for m in members)))

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self):
        return iter(self.members)


def overlap(a: Group, b: Group) -> int:
    """Number of nodes shared by two groups."""
    return len(set(a.members) & set(b.members))


@dataclass(frozen=True)
class GroupCatalog:
    """Bijection between arm indices [0, num_arms) and M-subsets of a neighborhood."""

    neighborhood: tuple[int, ...]
    group_size: int
    owner: int | None = None
    num_arms: int = field(init=False)

    def __post_init__(self):
        neighborhood = tuple(sorted(int(j) for j in self.neighborhood))
        object.__setattr__(self, 'neighborhood', neighborhood)
        if len(set(neighborhood)) != len(neighborhood):
            raise DomainError(f"neighborhood contains duplicates: {neighborhood}")
        if self.owner is not None and self.owner in neighborhood:
            raise DomainError(f"neighborhood of node {self.owner} contains the node itself")
        if self.group_size < 1:
            raise DomainError(f"group size must be positive, got {self.group_size}")
        if len(neighborhood) < self.group_size:
            raise DomainError(
                f"neighborhood of size {len(neighborhood)} is smaller than group size {self.group_size}"
            )
        object.__setattr__(self, 'num_arms', count_groups(len(neighborhood), self.group_size))

    @cached_property
    def _position(self) -> dict[int, int]:
        return {node: pos for pos, node in enumerate(self.neighborhood)}

    @cached_property
    def members_matrix(self) -> np.ndarray:
        """(num_arms, M) array of member ids, row a = unrank(a)."""
        logger.debug(f"Materializing {self.num_arms} groups of size {self.group_size}")
        rows = np.fromiter(
            (node for combo in combinations(self.neighborhood, self.group_size) for node in combo),
            dtype=np.int64,
            count=self.num_arms * self.group_size,
        )
        return rows.reshape(self.num_arms, self.group_size)

    def unrank(self, arm: int) -> Group:
        if not 0 <= arm < self.num_arms:
            raise ArmIndexError(f"arm {arm} outside [0, {self.num_arms})")
        n, k = len(self.neighborhood), self.group_size
        reflected = _unrank_colex(self.num_arms - 1 - arm, n, k)
        positions = [n - 1 - c for c in reversed(reflected)]
        return Group(tuple(self.neighborhood[p] for p in positions))

    def rank(self, group: Group) -> int:
        if len(group) != self.group_size:
            raise DomainError(f"group {group.members} does not have size {self.group_size}")
        try:
            positions = [self._position[node] for node in group.members]
        except KeyError as e:
            raise DomainError(f"node {e.args[0]} is not in the neighborhood") from None
        n = len(self.neighborhood)
        reflected = [n - 1 - p for p in reversed(positions)]
        return self.num_arms - 1 - _rank_colex(reflected)

    def overlaps_with(self, arm: int) -> np.ndarray:
        """Overlap of every arm with the given arm, as an int array of length num_arms."""
        members = self.members_matrix
        in_arm = np.zeros(self.neighborhood[-1] + 1, dtype=bool)
        in_arm[members[arm]] = True
        return in_arm[members].sum(axis=1)
