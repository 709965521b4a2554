"""
Synthetic non-iid tasks and per-node datasets.

Base task: Gaussian classes whose means sit on a circle of radius rho in every
consecutive coordinate pair (class angle 2*pi*c/L plus a per-pair offset).
Covariate shift rotates every coordinate pair by the cluster's angle; label
shift restricts a cluster's pool to its label subset. Nodes are assigned to
clusters contiguously in node-id order.
"""
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, model_validator

from src.errors import ConfigurationError, DataParseError, DomainError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LabeledPool:
    features: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx: np.ndarray) -> "LabeledPool":
        return LabeledPool(self.features[idx], self.labels[idx])


# A split is a pool with a role
Split = LabeledPool


@dataclass(frozen=True)
class NodeDataset:
    node: int
    cluster_id: int
    train: Split
    val: Split
    test: Split


class ClusterLayout(BaseModel):
    """Cluster sizes plus the shift each cluster applies."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    cluster_sizes: list[int]
    shift: Literal["rotation", "labels"]
    angles: list[float] | None = None
    label_subsets: list[list[int]] | None = None

    @model_validator(mode="after")
    def _check_shift(self):
        if not self.cluster_sizes or any(s < 1 for s in self.cluster_sizes):
            raise ValueError(f"cluster sizes must be positive: {self.cluster_sizes}")
        n = len(self.cluster_sizes)
        if self.shift == "rotation":
            if self.angles is None or len(self.angles) != n:
                raise ValueError(f"rotation layout needs {n} angles")
            if any(not 0 <= a < 360 for a in self.angles):
                raise ValueError(f"angles must lie in [0, 360): {self.angles}")
        else:
            if self.label_subsets is None or len(self.label_subsets) != n:
                raise ValueError(f"label layout needs {n} label subsets")
            if any(not subset for subset in self.label_subsets):
                raise ValueError("label subsets must be nonempty")
        return self

    @property
    def num_nodes(self) -> int:
        return sum(self.cluster_sizes)

    def cluster_of(self) -> np.ndarray:
        """Cluster id per node, contiguous in node-id order."""
        return np.repeat(np.arange(len(self.cluster_sizes)), self.cluster_sizes)

    def check_labels(self, classes: int) -> None:
        if self.label_subsets is None:
            return
        for subset in self.label_subsets:
            if any(not 0 <= label < classes for label in subset):
                raise ConfigurationError(f"label subset {subset} outside [0, {classes})")


def class_means(classes: int, dim: int, radius: float) -> np.ndarray:
    """(classes, dim) matrix of class means."""
    if dim < 2 or dim % 2:
        raise DomainError(f"feature dimension must be even and >= 2, got {dim}")
    pairs = dim // 2
    angles = 2 * np.pi * np.arange(classes)[:, None] / classes + np.pi * np.arange(pairs)[None, :] / (classes * pairs)
    means = np.empty((classes, dim))
    means[:, 0::2] = radius * np.cos(angles)
    means[:, 1::2] = radius * np.sin(angles)
    return means


def make_base_task(
    classes: int,
    dim: int,
    per_class: int,
    rng: np.random.Generator,
    radius: float = 3.0,
    sigma: float = 1.0,
) -> LabeledPool:
    """Isotropic Gaussian classes, shuffled."""
    if per_class < 1:
        raise DomainError(f"per_class must be positive, got {per_class}")
    means = class_means(classes, dim, radius)
    labels = np.repeat(np.arange(classes), per_class)
    features = means[labels] + sigma * rng.standard_normal((labels.size, dim))
    order = rng.permutation(labels.size)
    return LabeledPool(features[order], labels[order])


def apply_rotation(pool: LabeledPool, theta: float) -> LabeledPool:
    """Rotate every consecutive coordinate pair by theta degrees."""
    if pool.features.shape[1] % 2:
        raise DomainError("rotation needs an even feature dimension")
    rad = np.deg2rad(theta)
    c, s = np.cos(rad), np.sin(rad)
    x, y = pool.features[:, 0::2], pool.features[:, 1::2]
    rotated = np.empty_like(pool.features)
    rotated[:, 0::2] = c * x - s * y
    rotated[:, 1::2] = s * x + c * y
    return LabeledPool(rotated, pool.labels.copy())


def split_node(pool: LabeledPool, fracs: tuple[float, float, float], rng: np.random.Generator) -> tuple[Split, Split, Split]:
    n = len(pool)
    order = rng.permutation(n)
    n_train = int(round(fracs[0] * n))
    n_val = int(round(fracs[1] * n))
    train, val, test = np.split(order, [n_train, n_train + n_val])
    return pool.take(train), pool.take(val), pool.take(test)


def partition(
    pool: LabeledPool,
    layout: ClusterLayout,
    num_nodes: int,
    samples_per_node: int,
    rng: np.random.Generator,
    split_fracs: tuple[float, float, float] = (0.7, 0.15, 0.15),
) -> list[NodeDataset]:
    """
    Hand every node samples_per_node disjoint samples from its cluster's distribution.

    Raises:
        ConfigurationError: layout does not cover num_nodes, split fractions
            are invalid, a split would be empty, or the pool runs out
    """
    if layout.num_nodes != num_nodes:
        raise ConfigurationError(f"layout covers {layout.num_nodes} nodes, expected {num_nodes}")
    if abs(sum(split_fracs) - 1.0) > 1e-9 or any(f <= 0 for f in split_fracs):
        raise ConfigurationError(f"split fractions must be positive and sum to 1: {split_fracs}")
    if min(split_fracs) * samples_per_node < 1:
        raise ConfigurationError(f"{samples_per_node} samples per node leave a split empty")

    clusters = layout.cluster_of()
    used = np.zeros(len(pool), dtype=bool)
    datasets = []
    for node in range(num_nodes):
        cid = int(clusters[node])
        eligible = ~used
        if layout.shift == "labels":
            eligible &= np.isin(pool.labels, layout.label_subsets[cid])
        idx = np.flatnonzero(eligible)[:samples_per_node]
        if idx.size < samples_per_node:
            raise ConfigurationError(
                f"pool of {len(pool)} samples runs out at node {node} (cluster {cid}, "
                f"{samples_per_node} samples per node)"
            )
        used[idx] = True
        node_pool = pool.take(idx)
        if layout.shift == "rotation":
            node_pool = apply_rotation(node_pool, layout.angles[cid])
        train, val, test = split_node(node_pool, split_fracs, rng)
        datasets.append(NodeDataset(node, cid, train, val, test))

    logger.info(f"Partitioned {num_nodes} nodes into {len(layout.cluster_sizes)} clusters ({layout.shift} shift)")
    return datasets


def load_csv(path: Path, classes: int | None = None) -> LabeledPool:
    """
    Read a pool with header ``label,f0,...,f{d-1}``; row order is preserved.

    Raises:
        DataParseError: header mismatch, non-numeric field or label outside [0, classes)
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        raise DataParseError(f"malformed row in {path.name}: {e}", line=int(match.group(1)) if match else None) from e
    columns = list(frame.columns)
    expected = ["label"] + [f"f{i}" for i in range(len(columns) - 1)]
    if columns != expected or len(columns) < 2:
        raise DataParseError(f"header {columns} does not match label,f0..f{{d-1}}", line=1)

    try:
        # float() parsing reproduces %.17g text bit for bit
        numeric = frame.astype(np.float64)
    except ValueError:
        numeric = frame.apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna().any(axis=1).to_numpy()
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise DataParseError(f"non-numeric field in {path.name}", line=row + 2)

    labels = numeric["label"].to_numpy()
    if not np.all(labels == np.round(labels)):
        row = int(np.flatnonzero(labels != np.round(labels))[0])
        raise DataParseError(f"label {labels[row]} is not an integer", line=row + 2)
    labels = labels.astype(np.int64)
    if classes is not None:
        outside = (labels < 0) | (labels >= classes)
        if outside.any():
            row = int(np.flatnonzero(outside)[0])
            raise DataParseError(f"label {labels[row]} outside [0, {classes})", line=row + 2)

    features = numeric.drop(columns="label").to_numpy(dtype=np.float64)
    logger.debug(f"Loaded {len(labels)} rows with {features.shape[1]} features from {path}")
    return LabeledPool(features, labels)


def write_csv(pool: LabeledPool, path: Path, precision: int = 17) -> None:
    frame = pd.DataFrame(pool.features, columns=[f"f{i}" for i in range(pool.features.shape[1])])
    frame.insert(0, "label", pool.labels)
    frame.to_csv(path, index=False, float_format=f"%.{precision}g")
