"""Experiment runner: configs in, CSV traces out, and run comparison."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ConfigError, ExperimentConfig
from .federation import EvalRecord, RoundRecord, run_federated
from .transport import save_checkpoint

log = logging.getLogger(__name__)

ROUND_FIELDS = ["round", "client_id", "bytes_up", "bytes_down", "support_loss", "query_loss", "rate", "status", "wall_ms"]
EVAL_FIELDS = ["round", "mean_loss", "std_loss", "mean_accuracy", "cumulative_bytes"]
WALL_CLOCK_FIELDS = {"wall_ms"}

RESOLVED_CONFIG = "config.resolved.ini"
FINAL_CHECKPOINT = "final.tmfc"


def builtin_config(name: str) -> Path:
    """Path of a bundled config (``sine`` or ``synthetic_class``)."""
    return Path(str(resources.files("tinymetafed") / "configs" / f"{name}.ini"))


def resolve_config(ref: str | Path) -> ExperimentConfig:
    path = Path(ref)
    if not path.exists() and not path.suffix:
        path = builtin_config(str(ref))
    return ExperimentConfig.load(path)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return "" if math.isnan(value) else repr(value)
    return str(value)


class CsvSink:
    """Append-only CSV writer that flushes every row."""

    def __init__(self, path: Path, fieldnames: Sequence[str]):
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._fields = list(fieldnames)
        self._writer.writerow(self._fields)

    def __call__(self, record) -> None:
        row = record.as_row()
        self._writer.writerow([_fmt(row[f]) for f in self._fields])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def run_experiment(
    config: str | Path | ExperimentConfig,
    out_dir: str | Path,
    transport: str = "sim",
    seed: int | None = None,
) -> int:
    """Run one configured experiment and write its traces to ``out_dir``.

    Writes ``rounds.csv``, ``evals.csv``, the resolved config and the final
    checkpoint. Returns a process exit status.
    """
    try:
        cfg = config if isinstance(config, ExperimentConfig) else resolve_config(config)
        if seed is not None:
            cfg = cfg.replace(seed=seed)
        cfg = cfg.validated()
    except ConfigError as exc:
        for problem in exc.problems:
            log.error("%s", problem)
        return 2
    except OSError as exc:
        log.error("cannot read config: %s", exc)
        return 2

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / RESOLVED_CONFIG)
    rounds = CsvSink(out / "rounds.csv", ROUND_FIELDS)
    evals = CsvSink(out / "evals.csv", EVAL_FIELDS)
    try:
        if transport == "sim":
            result = run_federated(cfg, evaluate=True, on_record=rounds, on_eval=evals)
        elif transport == "tcp":
            from .transport import run_tcp

            result = run_tcp(cfg, evaluate=True, on_record=rounds, on_eval=evals)
        else:
            raise ValueError(f"unknown transport {transport!r}")
    except Exception:
        log.exception("run failed; partial traces kept in %s", out)
        return 1
    finally:
        rounds.close()
        evals.close()
    save_checkpoint(out / FINAL_CHECKPOINT, result.phi, cfg.rounds, cfg.seed, cfg.digest())
    return 0


# ---- reading runs back ---------------------------------------------------------


@dataclass
class RunData:
    name: str
    config: ExperimentConfig
    rounds: list[dict]
    evals: list[dict]

    @property
    def eval_rounds(self) -> np.ndarray:
        return np.array([int(r["round"]) for r in self.evals])

    @property
    def eval_loss(self) -> np.ndarray:
        return np.array([float(r["mean_loss"]) for r in self.evals])

    @property
    def eval_std(self) -> np.ndarray:
        return np.array([float(r["std_loss"]) for r in self.evals])

    @property
    def eval_bytes(self) -> np.ndarray:
        return np.array([int(r["cumulative_bytes"]) for r in self.evals])

    @property
    def total_bytes(self) -> int:
        return sum(int(r["bytes_up"]) + int(r["bytes_down"]) for r in self.rounds)


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def load_run(path: str | Path) -> RunData:
    path = Path(path)
    return RunData(
        path.name,
        ExperimentConfig.load(path / RESOLVED_CONFIG),
        _read_csv(path / "rounds.csv"),
        _read_csv(path / "evals.csv"),
    )


def bytes_to_reach(cumulative_bytes, losses, target: float) -> int | None:
    """Cumulative bytes at the first evaluation whose loss is <= ``target``."""
    for b, loss in zip(cumulative_bytes, losses):
        if loss <= target:
            return int(b)
    return None


@dataclass
class Comparison:
    summary: list[dict]
    curves: list[dict]
    grid: np.ndarray
    baseline: str


def compare(paths: Sequence[str | Path], out_dir: str | Path | None = None) -> Comparison:
    """Align eval curves of several runs and tabulate final loss and bytes.

    Relative cost is total bytes divided by the first TinyReptile run's total
    (or the first run's, if none is TinyReptile).
    """
    runs = [load_run(p) for p in paths]
    if not runs:
        raise ValueError("nothing to compare")
    families = {r.config.family for r in runs}
    if len(families) > 1:
        raise ValueError(f"runs mix task families: {sorted(families)}")

    grids = [tuple(r.eval_rounds) for r in runs]
    grid = np.array(min(grids, key=len))
    if len(set(grids)) > 1:
        warnings.warn(f"eval grids differ; resampling all runs onto the coarsest ({len(grid)} points)")

    baseline = next((r for r in runs if r.config.algorithm == "tinyreptile"), runs[0])
    base_bytes = baseline.total_bytes
    base_final = float(baseline.eval_loss[-1]) if baseline.evals else math.nan

    summary, curves = [], []
    for idx, r in enumerate(runs):
        label = f"{idx}:{r.name}"
        loss = np.interp(grid, r.eval_rounds, r.eval_loss)
        std = np.interp(grid, r.eval_rounds, r.eval_std)
        nbytes = np.interp(grid, r.eval_rounds, r.eval_bytes)
        for t, b, m, s in zip(grid, nbytes, loss, std):
            curves.append({"run": label, "round": int(t), "cumulative_bytes": int(round(b)),
                           "mean_loss": float(m), "std_loss": float(s)})
        summary.append({
            "run": label,
            "algorithm": r.config.algorithm,
            "final_loss": float(r.eval_loss[-1]),
            "final_std": float(r.eval_std[-1]),
            "total_bytes": r.total_bytes,
            "relative_cost": r.total_bytes / base_bytes if base_bytes else math.nan,
            "bytes_to_baseline_loss": bytes_to_reach(r.eval_bytes, r.eval_loss, base_final),
        })

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, rows in (("summary.csv", summary), ("curves.csv", curves)):
            with open(out / name, "w", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
                writer.writeheader()
                writer.writerows({k: _fmt(v) for k, v in row.items()} for row in rows)
    return Comparison(summary, curves, grid, baseline.name)


def format_summary(cmp: Comparison) -> str:
    lines = [f"{'run':<28} {'algorithm':<15} {'final loss':>20} {'total bytes':>14} {'rel. cost':>9}"]
    for row in cmp.summary:
        loss = f"{row['final_loss']:.4f} +/- {row['final_std']:.4f}"
        lines.append(
            f"{row['run']:<28} {row['algorithm']:<15} {loss:>20} {row['total_bytes']:>14} {row['relative_cost']:>9.4f}"
        )
    return "\n".join(lines)
