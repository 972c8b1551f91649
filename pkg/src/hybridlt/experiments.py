"""
Experiment matrix: variants x seeds, run as independent cells.

Cells are dispatched from an asyncio orchestrator onto an executor (a process
pool when more than one worker is requested). A failing cell is recorded in
the summary and never stops the others. Each cell writes only inside its own
run directory; the orchestrator writes the aggregate files afterwards.
"""

import asyncio
import json
import logging
import time
import uuid
from concurrent.futures import Executor, ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import pandas as pd
import yaml

from .config import ExperimentConfig, read_flat_yaml
from .errors import ConfigurationError
from .training import RunReport, run_training

logger = logging.getLogger("ExperimentOrchestrator")

DEFAULT_ACCEPTANCE_KIT = Path("config/acceptance.yml")
SUMMARY_METRICS = ["test_top1", "head_acc", "medium_acc", "tail_acc",
                   "intra_class_compactness", "inter_class_separability", "wall_clock_seconds"]


@dataclass
class VariantSpec:
    name: str
    overrides: Dict[str, Any] = field(default_factory=dict)


@dataclass
class MatrixConfig:
    """A matrix file: shared base config, named variants and the seeds to run each with"""
    name: str
    base: Dict[str, Any]
    variants: List[VariantSpec]
    seeds: List[int]
    workers: int = 1
    claims: List[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.variants:
            raise ConfigurationError(f"matrix {self.name!r} lists no variants")
        if not self.seeds:
            raise ConfigurationError(f"matrix {self.name!r} lists no seeds")
        names = [v.name for v in self.variants]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate variant names in matrix {self.name!r}: {names}")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")
        # fail fast on a bad variant before any cell runs
        for variant in self.variants:
            self.experiment(variant, self.seeds[0])

    def experiment(self, variant: VariantSpec, seed: int) -> ExperimentConfig:
        values = dict(self.base)
        values.update(variant.overrides)
        values["seed"] = seed
        return ExperimentConfig.from_flat_dict(values)

    def cells(self) -> List["CellSpec"]:
        return [CellSpec(self.name, v.name, seed, self.experiment(v, seed).to_flat_dict())
                for v in self.variants for seed in self.seeds]

    @classmethod
    def from_yaml(cls, path: Union[str, Path]) -> "MatrixConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"matrix file not found: {path}")
        try:
            with open(path, "r") as f:
                raw = yaml.safe_load(f) or {}
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"{path}: invalid YAML ({exc})") from exc
        if not isinstance(raw, dict) or "variants" not in raw:
            raise ConfigurationError(f"{path}: a matrix file needs a 'variants' list")
        base: Dict[str, Any] = {}
        if raw.get("base_config"):
            base_path = Path(raw["base_config"])
            if not base_path.is_absolute() and not base_path.exists():
                base_path = path.parent / base_path
            base.update(read_flat_yaml(base_path))
        base.update(raw.get("base") or {})
        variants = []
        for entry in raw["variants"]:
            if isinstance(entry, str):
                variants.append(VariantSpec(entry))
            elif isinstance(entry, dict) and "name" in entry:
                variants.append(VariantSpec(str(entry["name"]), dict(entry.get("overrides") or {})))
            else:
                raise ConfigurationError(f"{path}: bad variant entry {entry!r}")
        return cls(name=str(raw.get("name", path.stem)), base=base, variants=variants,
                   seeds=[int(s) for s in raw.get("seeds", [0])],
                   workers=int(raw.get("workers", 1)), claims=list(raw.get("claims") or []))


@dataclass
class CellSpec:
    matrix: str
    variant: str
    seed: int
    config: Dict[str, Any]

    @property
    def cell_id(self) -> str:
        return f"{self.variant}/seed_{self.seed}"


def run_cell(cell: CellSpec, out_dir: str) -> Dict[str, Any]:
    """Run one variant/seed; errors come back as a status=error row, never as an exception"""
    operation_id = str(uuid.uuid4())
    cell_logger = logging.getLogger(f"MatrixCell.{cell.variant}")
    run_dir = Path(out_dir) / "runs" / cell.variant / f"seed_{cell.seed}"
    start = time.time()
    cell_logger.info(f"BEGIN run_cell operation_id={operation_id} matrix={cell.matrix} "
                     f"cell={cell.cell_id}")
    row: Dict[str, Any] = {"variant": cell.variant, "seed": cell.seed, "run_dir": str(run_dir)}
    try:
        report = run_training(ExperimentConfig.from_flat_dict(cell.config), run_dir)
        final = report.final or {}
        row.update({metric: final.get(metric) for metric in SUMMARY_METRICS if metric in final})
        row["test_top1"] = final.get("top1")
        row["wall_clock_seconds"] = report.wall_clock_seconds
        row["status"] = "success"
        row["error"] = None
        cell_logger.info(f"END run_cell operation_id={operation_id} cell={cell.cell_id} "
                         f"elapsed={time.time() - start:.3f}s status=success")
    except Exception as exc:
        row["status"] = "error"
        row["error"] = f"{type(exc).__name__}: {exc}"
        cell_logger.error(f"END run_cell operation_id={operation_id} cell={cell.cell_id} "
                          f"elapsed={time.time() - start:.3f}s status=error error={exc}")
    return row


@dataclass
class ClaimResult:
    name: str
    status: str
    observed: Optional[float]
    threshold: float
    detail: str

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def load_acceptance_kit(path: Union[str, Path] = DEFAULT_ACCEPTANCE_KIT) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"acceptance kit not found at {path}")
    with open(path, "r") as f:
        kit = yaml.safe_load(f) or {}
    logger.info(f"loaded acceptance kit {path} claims={sorted(kit.get('claims', {}))}")
    return kit


def check_claims(summary: pd.DataFrame, kit: Dict[str, Any],
                 names: Optional[List[str]] = None) -> List[ClaimResult]:
    """Evaluate directional claims against per-variant means.

    A claim is `better - worse >= min_gap` or `|first - second| <= max_abs_gap`;
    claims whose variants are not in the summary are skipped.
    """
    claims = kit.get("claims", {})
    selected = names if names else list(claims)
    means = summary.set_index("variant") if len(summary) else summary
    results = []
    for name in selected:
        if name not in claims:
            raise ConfigurationError(f"unknown claim {name!r}")
        rule = claims[name]
        metric = f"{rule.get('metric', 'test_top1')}_mean"
        if "max_abs_gap" in rule:
            first, second = rule["pair"]
            threshold = float(rule["max_abs_gap"])
        else:
            first, second = rule["better"], rule["worse"]
            threshold = float(rule.get("min_gap", 0.0))
        missing = [v for v in (first, second) if v not in means.index or pd.isna(means.loc[v, metric])]
        if missing:
            results.append(ClaimResult(name, "skipped", None, threshold,
                                       f"no results for {', '.join(missing)}"))
            continue
        gap = float(means.loc[first, metric] - means.loc[second, metric])
        if "max_abs_gap" in rule:
            ok = abs(gap) <= threshold
            detail = f"|{first} - {second}| = {abs(gap):.4f} <= {threshold}"
            observed = abs(gap)
        else:
            ok = gap >= threshold
            detail = f"{first} - {second} = {gap:.4f} >= {threshold}"
            observed = gap
        results.append(ClaimResult(name, "pass" if ok else "fail", observed, threshold, detail))
        log = logger.info if ok else logger.warning
        log(f"claim {name} status={'pass' if ok else 'fail'} {detail}")
    return results


def summarize(cells: pd.DataFrame) -> pd.DataFrame:
    """mean and std over seeds per variant, plus run / failure counts"""
    rows = []
    for variant, group in cells.groupby("variant", sort=False):
        ok = group[group["status"] == "success"]
        row: Dict[str, Any] = {"variant": variant, "n_runs": int(len(group)),
                               "n_failed": int((group["status"] != "success").sum())}
        for metric in SUMMARY_METRICS:
            values = pd.to_numeric(ok[metric], errors="coerce") if metric in ok else pd.Series(dtype=float)
            row[f"{metric}_mean"] = float(values.mean()) if values.notna().any() else np.nan
            row[f"{metric}_std"] = float(values.std(ddof=0)) if values.notna().any() else np.nan
        errors = [e for e in group["error"] if isinstance(e, str)]
        row["errors"] = " | ".join(errors)
        rows.append(row)
    return pd.DataFrame(rows)


@dataclass
class MatrixResult:
    out_dir: Path
    cells: pd.DataFrame
    summary: pd.DataFrame
    claims: List[ClaimResult]


class ExperimentOrchestrator:
    """Runs every cell of a matrix and writes cells.csv, summary.csv, plot data and claims.json"""

    def __init__(self, matrix: MatrixConfig, out_dir: Union[str, Path],
                 workers: Optional[int] = None, acceptance_kit: Optional[Dict[str, Any]] = None):
        self.matrix = matrix
        self.out_dir = Path(out_dir)
        self.workers = workers or matrix.workers
        self.acceptance_kit = acceptance_kit
        self.logger = logging.getLogger("ExperimentOrchestrator")

    def _executor(self) -> Executor:
        if self.workers > 1:
            return ProcessPoolExecutor(max_workers=self.workers)
        return ThreadPoolExecutor(max_workers=1)

    async def run(self) -> MatrixResult:
        operation_id = str(uuid.uuid4())
        cells = self.matrix.cells()
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.logger.info(f"BEGIN run_matrix operation_id={operation_id} matrix={self.matrix.name} "
                         f"cells={len(cells)} workers={self.workers}")
        start = time.time()
        loop = asyncio.get_running_loop()
        with self._executor() as executor:
            futures = [loop.run_in_executor(executor, run_cell, cell, str(self.out_dir))
                       for cell in cells]
            rows = await asyncio.gather(*futures)

        cell_frame = pd.DataFrame(rows)
        for column in ("status", "error", *SUMMARY_METRICS):
            if column not in cell_frame:
                cell_frame[column] = None
        cell_frame.to_csv(self.out_dir / "cells.csv", index=False, float_format="%.17g")
        summary = summarize(cell_frame)
        summary.to_csv(self.out_dir / "summary.csv", index=False, float_format="%.17g")
        self.write_plot_data(cell_frame)

        claims: List[ClaimResult] = []
        if self.acceptance_kit is not None and self.matrix.claims:
            claims = check_claims(summary, self.acceptance_kit, self.matrix.claims)
            with open(self.out_dir / "claims.json", "w") as f:
                json.dump({"matrix": self.matrix.name, "checked_at": datetime.now().isoformat(),
                           "claims": [c.to_dict() for c in claims]}, f, indent=2)
        failed = int((cell_frame["status"] != "success").sum())
        self.logger.info(f"END run_matrix operation_id={operation_id} elapsed={time.time() - start:.3f}s "
                         f"failed_cells={failed} status={'success' if not failed else 'partial'}")
        return MatrixResult(self.out_dir, cell_frame, summary, claims)

    def write_plot_data(self, cells: pd.DataFrame) -> None:
        """Per variant, seed-averaged `epoch,value` series for test accuracy and alpha"""
        plot_dir = self.out_dir / "plots"
        plot_dir.mkdir(exist_ok=True)
        for variant, group in cells[cells["status"] == "success"].groupby("variant", sort=False):
            frames = [RunReport.from_json(Path(d) / "report.json").to_frame() for d in group["run_dir"]]
            epochs = pd.concat(frames).groupby("epoch", sort=True)
            for column in ("test_top1", "alpha"):
                series = epochs[column].mean().dropna().reset_index()
                series.columns = ["epoch", "value"]
                series.to_csv(plot_dir / f"{variant}.{column}.dat", index=False, float_format="%.17g")


def run_experiment_matrix(config_file: Union[str, Path], out_dir: Union[str, Path],
                          workers: Optional[int] = None,
                          acceptance_kit: Optional[Union[str, Path]] = None) -> MatrixResult:
    matrix = MatrixConfig.from_yaml(config_file)
    kit = None
    if matrix.claims:
        kit_path = Path(acceptance_kit) if acceptance_kit else DEFAULT_ACCEPTANCE_KIT
        kit = load_acceptance_kit(kit_path) if kit_path.exists() else None
        if kit is None:
            logger.warning(f"acceptance kit {kit_path} not found; claims are not checked")
    orchestrator = ExperimentOrchestrator(matrix, out_dir, workers, kit)
    return asyncio.run(orchestrator.run())
