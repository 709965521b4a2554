"""Post-hoc statistics over rounds.csv data: communication heatmaps and reward traces."""
import logging
from pathlib import Path

import numpy as np
import pandas as pd

from src.errors import DataParseError

logger = logging.getLogger(__name__)


def load_rounds(run_dir: Path) -> pd.DataFrame:
    path = Path(run_dir) / "rounds.csv"
    if not path.is_file():
        raise DataParseError(f"no rounds.csv in {run_dir}")
    # empty group cells stay empty strings
    return pd.read_csv(path, dtype={"group": str}, keep_default_na=False)


def _members(group: str) -> list[int]:
    return [int(j) for j in str(group).split()] if group else []


def intra_cluster_fraction(rounds: pd.DataFrame, clusters: np.ndarray, last: int | None = None) -> float:
    """
    Share of group members that sit in the querying node's own cluster.

    Args:
        rounds: rounds.csv rows
        clusters: cluster id per node
        last: restrict to the final ``last`` rounds
    """
    window = rounds
    if last is not None:
        window = rounds[rounds["t"] > rounds["t"].max() - last]
    same = total = 0
    for node, group in zip(window["node"], window["group"]):
        members = _members(group)
        same += sum(clusters[j] == clusters[node] for j in members)
        total += len(members)
    if total == 0:
        return float("nan")
    return same / total


def reward_traces(rounds: pd.DataFrame, nodes: list[int] | None = None) -> pd.DataFrame:
    """Reward per round (rows) and node (columns)."""
    table = rounds.pivot(index="t", columns="node", values="reward")
    if nodes is not None:
        table = table[nodes]
    return table


def reward_variance_shift(rounds: pd.DataFrame) -> pd.DataFrame:
    """
    Per-node reward variance over the first and final quarter of the run.

    A node has settled when its late variance does not exceed its early one.
    """
    horizon = int(rounds["t"].max())
    quarter = max(1, horizon // 4)
    early = rounds[rounds["t"] <= quarter].groupby("node")["reward"].var(ddof=0)
    late = rounds[rounds["t"] >= horizon - quarter].groupby("node")["reward"].var(ddof=0)
    table = pd.DataFrame({"early_var": early, "late_var": late})
    table["settled"] = table["late_var"] <= table["early_var"]
    return table


def settled_fraction(rounds: pd.DataFrame) -> float:
    return float(reward_variance_shift(rounds)["settled"].mean())


def comm_from_rounds(rounds: pd.DataFrame, num_nodes: int) -> np.ndarray:
    """Rebuild the communication matrix from group columns."""
    counts = np.zeros((num_nodes, num_nodes), dtype=np.int64)
    for node, group in zip(rounds["node"], rounds["group"]):
        for j in _members(group):
            counts[node, j] += 1
    return counts
