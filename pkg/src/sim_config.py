"""Experiment configuration: schema, defaults, parsing and digest."""
import hashlib
import json
import logging
from enum import Enum
from pathlib import Path
from typing import Any

import yaml
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, ValidationError, model_validator

from config.settings import Config
from src.bandit import PseudoRewardConfig, QMode
from src.data import ClusterLayout
from src.errors import CapacityError, ConfigurationError
from src.groups import count_groups
from src.learner import ModelKind
from src.secagg import FieldParams

logger = logging.getLogger(__name__)


class Method(str, Enum):
    PPDL = "ppdl"
    PPDL_VAR = "ppdl-var"
    DAC = "dac"
    RANDOM = "random"
    ORACLE = "oracle"
    LOCAL = "local"

    @property
    def uses_bandit(self) -> bool:
        return self in (Method.PPDL, Method.PPDL_VAR)


class TaskConfig(BaseModel):
    """Where node data comes from."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    classes: int = Field(default=4, ge=2)
    dim: int = Field(default=16, ge=2)
    samples_per_node: PositiveInt = 200
    radius: PositiveFloat = 3.0
    sigma: PositiveFloat = 1.0
    split_fracs: tuple[float, float, float] = (0.7, 0.15, 0.15)
    csv_path: Path | None = None

    @model_validator(mode="after")
    def _check_dim(self):
        if self.csv_path is None and self.dim % 2:
            raise ValueError(f"synthetic tasks need an even dimension, got {self.dim}")
        return self


class SimConfig(BaseModel):
    """Full configuration of one experiment."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    method: Method
    num_nodes: int = Field(alias="K", ge=2)
    group_size: PositiveInt = Field(alias="M")
    rounds: PositiveInt = Field(alias="T")
    layout: ClusterLayout

    task: TaskConfig = TaskConfig()
    model: ModelKind = ModelKind.LOGISTIC
    hidden: PositiveInt = 32
    local_epochs: PositiveInt = 3
    batch_size: PositiveInt = 8
    lr: float = Field(default=0.01, ge=0.0)

    pseudo_reward: PseudoRewardConfig | None = None
    significance_divisor: PositiveInt | None = None
    competitive_masking: bool = True
    importance_weighted: bool = False
    reward_after_training: bool = True

    dac_tau: float = Field(default=30.0, ge=0.0)
    merge_weight: float | None = Field(default=None, ge=0.0, le=1.0)

    field: FieldParams = FieldParams()
    secagg_threshold: PositiveInt | None = None
    dropout_prob: float = Field(default=0.0, ge=0.0, lt=1.0)

    adjacency: dict[int, list[int]] | None = None
    seed: int = Field(default=0, ge=0)
    node_order_seed: int | None = Field(default=None, ge=0)

    @model_validator(mode="after")
    def _fill_and_check(self):
        k, m = self.num_nodes, self.group_size
        if self.layout.num_nodes != k:
            raise ValueError(f"layout: cluster sizes sum to {self.layout.num_nodes}, K is {k}")
        self.layout.check_labels(self.task.classes)

        for node, neighbors in self.neighborhoods().items():
            if len(neighbors) < m:
                raise ValueError(f"M: |N_i| >= M violated, node {node} has {len(neighbors)} neighbors, M={m}")
            if self.method.uses_bandit:
                try:
                    arms = count_groups(len(neighbors), m)
                except CapacityError as e:
                    raise ValueError(f"M: {e}") from None
                if arms > Config.MAX_ARMS:
                    raise ValueError(f"M: node {node} would have {arms} arms, limit is {Config.MAX_ARMS}")
        if k < m + 1:
            raise ValueError(f"K: need K >= M + 1, got K={k}, M={m}")
        if m > self.field.max_group_size:
            raise ValueError(f"M: {m} exceeds field headroom ({self.field.max_group_size})")

        if self.secagg_threshold is None:
            self.secagg_threshold = m
        elif self.secagg_threshold > m:
            raise ValueError(f"secagg_threshold: {self.secagg_threshold} exceeds M={m}")
        if self.significance_divisor is None:
            self.significance_divisor = k
        if self.pseudo_reward is None:
            if self.method is Method.PPDL_VAR:
                self.pseudo_reward = PseudoRewardConfig(mode=QMode.EXPONENTIAL, q0=0.5, q_min=0.07, horizon=self.rounds)
            else:
                self.pseudo_reward = PseudoRewardConfig()
        return self

    def neighborhoods(self) -> dict[int, tuple[int, ...]]:
        """Neighbor ids per node; fully connected unless an adjacency is configured."""
        nodes = range(self.num_nodes)
        if self.adjacency is None:
            return {i: tuple(j for j in nodes if j != i) for i in nodes}
        result = {}
        for i in nodes:
            neighbors = sorted(set(self.adjacency.get(i, [])))
            if i in neighbors or any(not 0 <= j < self.num_nodes for j in neighbors):
                raise ValueError(f"adjacency: node {i} has invalid neighbors {neighbors}")
            result[i] = tuple(neighbors)
        return result

    def to_dict(self) -> dict[str, Any]:
        return self.model_dump(mode="json", by_alias=True)

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form; independent of key order."""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _log_defaults(model: BaseModel, raw: dict[str, Any], prefix: str = "") -> None:
    """Log every field the input did not set, recursing into given sections."""
    for name, info in type(model).model_fields.items():
        value = getattr(model, name)
        key = info.alias or name
        if key not in raw and name not in raw:
            logger.info(f"Default applied: {prefix}{key} = {value!r}")
        elif isinstance(value, BaseModel) and isinstance(raw.get(key, raw.get(name)), dict):
            _log_defaults(value, raw.get(key, raw.get(name)), prefix=f"{prefix}{key}.")


def build_config(raw: dict[str, Any], overrides: dict[str, Any] | None = None) -> SimConfig:
    """Validate a raw mapping (plus CLI overrides) into a SimConfig."""
    merged = {**raw, **(overrides or {})}
    try:
        config = SimConfig.model_validate(merged)
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or 'config'}: {err['msg']}" for err in e.errors()
        )
        raise ConfigurationError(problems) from None
    _log_defaults(config, merged)
    return config


def parse_config(path: Path, overrides: dict[str, Any] | None = None) -> SimConfig:
    """Load a YAML (or JSON) experiment file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    with path.open(encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: expected a mapping at top level")
    logger.info(f"Loaded experiment config from {path}")
    return build_config(raw, overrides)


def dump_config(config: SimConfig, path: Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=True)
