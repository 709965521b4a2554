"""Result files, manifests and cross-run comparison."""
import json
import logging
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import BaseModel

from src.errors import ConfigurationError
from src.learner import save_checkpoint
from src.sim import ExperimentResult

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.6g"
ROUNDS_COLUMNS = ["t", "node", "arm", "group", "reward", "val_acc", "val_loss", "train_loss", "comp_set_size", "entropy"]


def code_version() -> str:
    try:
        return metadata.version("ppdl-sim")
    except metadata.PackageNotFoundError:
        return "0.1.0+local"


class ExperimentManifest(BaseModel):
    config_digest: str
    method: str
    seeds: list[int]
    started_at: str
    finished_at: str
    code_version: str
    files: list[str]


def _sig6(x: float) -> float:
    return float(FLOAT_FORMAT % x)


def rounds_frame(result: ExperimentResult) -> pd.DataFrame:
    rows = []
    for record in result.records:
        for e in record.entries:
            rows.append({
                "t": e.round,
                "node": e.node,
                "arm": e.arm,
                "group": " ".join(str(j) for j in e.group),
                "reward": e.reward,
                "val_acc": e.val_acc,
                "val_loss": e.val_loss,
                "train_loss": e.train_loss,
                "comp_set_size": e.comp_set_size,
                "entropy": e.entropy,
            })
    frame = pd.DataFrame(rows, columns=ROUNDS_COLUMNS)
    frame["arm"] = frame["arm"].astype("Int64")
    frame["comp_set_size"] = frame["comp_set_size"].astype("Int64")
    return frame


def summary_dict(result: ExperimentResult) -> dict:
    return {
        "method": result.config.method.value,
        "seed": result.config.seed,
        "config_digest": result.config.digest(),
        "cluster_means": {str(c): _sig6(v) for c, v in result.cluster_means().items()},
        "cluster_sizes": list(result.config.layout.cluster_sizes),
        "mean_over_clusters": _sig6(result.mean_over_clusters),
        "node_weighted_mean": _sig6(result.node_weighted_mean),
    }


def write_outputs(result: ExperimentResult, out_dir: Path, checkpoints: bool = False) -> ExperimentManifest:
    """
    Write the CSV/JSON files of one run plus its manifest.

    Raises:
        OSError: out_dir cannot be created or written (nothing is written then)
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    marker = out_dir / ".write-test"
    marker.write_text("")
    marker.unlink()

    written = []
    rounds_frame(result).to_csv(out_dir / "rounds.csv", index=False, float_format=FLOAT_FORMAT)
    written.append("rounds.csv")

    k = result.config.num_nodes
    pd.DataFrame(result.comm.counts, columns=[str(j) for j in range(k)]).to_csv(
        out_dir / "comm_matrix.csv", index=False
    )
    written.append("comm_matrix.csv")

    accuracy = pd.DataFrame(
        [(a.node, a.cluster, a.test_acc, a.best_round) for a in result.accuracies],
        columns=["node", "cluster", "test_acc", "best_round"],
    )
    accuracy.to_csv(out_dir / "accuracy.csv", index=False, float_format=FLOAT_FORMAT)
    written.append("accuracy.csv")

    (out_dir / "config.json").write_text(json.dumps(result.config.to_dict(), indent=2, sort_keys=True))
    written.append("config.json")

    if checkpoints:
        ckpt_dir = out_dir / "checkpoints"
        ckpt_dir.mkdir(exist_ok=True)
        for acc, model in zip(result.accuracies, result.best_models):
            name = f"node-{acc.node:03d}.bin"
            save_checkpoint(ckpt_dir / name, model, acc.best_round)
            written.append(f"checkpoints/{name}")

    (out_dir / "summary.json").write_text(json.dumps(summary_dict(result), indent=2, sort_keys=True))
    written.append("summary.json")

    manifest = ExperimentManifest(
        config_digest=result.config.digest(),
        method=result.config.method.value,
        seeds=[result.config.seed],
        started_at=result.started_at,
        finished_at=result.finished_at,
        code_version=code_version(),
        files=written,
    )
    (out_dir / "manifest.json").write_text(manifest.model_dump_json(indent=2))
    logger.info(f"Wrote {len(written)} files to {out_dir}")
    return manifest


def read_summary(run_dir: Path) -> dict:
    path = Path(run_dir) / "summary.json"
    if not path.is_file():
        raise ConfigurationError(f"no summary.json in {run_dir}")
    return json.loads(path.read_text())


def write_sweep(summaries: list[dict], out_path: Path) -> dict:
    """Average per-cluster accuracies over seeds of the same method and layout."""
    if not summaries:
        raise ConfigurationError("no runs to average")
    clusters = sorted(summaries[0]["cluster_means"], key=int)
    sizes = summaries[0].get("cluster_sizes")
    for s in summaries[1:]:
        if s.get("cluster_sizes") != sizes:
            raise ConfigurationError(f"seed {s['seed']} has cluster sizes {s.get('cluster_sizes')}, expected {sizes}")
    sweep = {
        "method": summaries[0]["method"],
        "seeds": [s["seed"] for s in summaries],
        "cluster_sizes": sizes,
        "cluster_means": {
            c: _sig6(np.mean([s["cluster_means"][c] for s in summaries])) for c in clusters
        },
        "mean_over_clusters": _sig6(np.mean([s["mean_over_clusters"] for s in summaries])),
        "node_weighted_mean": _sig6(np.mean([s["node_weighted_mean"] for s in summaries])),
        "written_at": datetime.now(timezone.utc).isoformat(),
    }
    Path(out_path).write_text(json.dumps(sweep, indent=2, sort_keys=True))
    return sweep


def _load_comparable(run_dir: Path) -> dict:
    """A run directory holds either summary.json (one seed) or sweep.json (several)."""
    run_dir = Path(run_dir)
    sweep = run_dir / "sweep.json"
    if sweep.is_file():
        return json.loads(sweep.read_text())
    return read_summary(run_dir)


def compare_runs(run_dirs: list[Path], baseline: str | None = None) -> pd.DataFrame:
    """
    Per-cluster accuracy table across runs, one row per method.

    Columns: one per cluster, then ``mean``; with a baseline, matching
    ``delta_*`` columns against the baseline row.

    Raises:
        ConfigurationError: missing summary, mismatched cluster layouts, unknown baseline
    """
    rows, layout, layout_sizes = {}, None, None
    for run_dir in run_dirs:
        summary = _load_comparable(run_dir)
        clusters = tuple(sorted(summary["cluster_means"], key=int))
        sizes = summary.get("cluster_sizes")
        if layout is None:
            layout, layout_sizes = clusters, sizes
        elif clusters != layout:
            raise ConfigurationError(f"{run_dir} has clusters {clusters}, expected {layout}")
        elif sizes is not None and layout_sizes is not None and list(sizes) != list(layout_sizes):
            raise ConfigurationError(f"{run_dir} has cluster sizes {sizes}, expected {layout_sizes}")
        if layout_sizes is None:
            layout_sizes = sizes
        label = summary["method"] if summary["method"] not in rows else f"{summary['method']} ({Path(run_dir).name})"
        rows[label] = {
            **{f"cluster_{c}": summary["cluster_means"][c] for c in clusters},
            "mean": summary["mean_over_clusters"],
        }

    table = pd.DataFrame.from_dict(rows, orient="index")
    if baseline is not None:
        if baseline not in table.index:
            raise ConfigurationError(f"baseline {baseline!r} not among {list(table.index)}")
        for column in list(table.columns):
            table[f"delta_{column}"] = table[column] - table.loc[baseline, column]
    return table
