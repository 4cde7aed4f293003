from __future__ import annotations

import csv
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence

import numpy as np

from .schemas import JointPathPoint, JointTrajectory, PathPoint, Trajectory

LOGGER = logging.getLogger(__name__)

TRAJECTORY_HEADER = ["step", "norm", "loss", "grad_norm", "corr", "max_prob", "sparsity"]
PATH_HEADER = ["R", "norm", "loss", "corr"]
JOINT_PATH_HEADER = ["r", "R", "v_norm", "p_norm", "loss", "v_corr", "p_corr", "rounds", "converged"]
JOINT_TRAJECTORY_HEADER = ["step", "v_norm", "p_norm", "loss", "max_prob", "selected_prob", "label_prob"]
CENSUS_HEADER = ["d", "trial", "saturated", "lmm_match", "gmm_match", "corr", "score_gap"]


def format_value(value: Any) -> str:
    """Render one CSV cell; floats use repr so reruns are byte-identical."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _json_ready(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _json_ready(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_ready(v) for v in value]
    if isinstance(value, np.ndarray):
        return _json_ready(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if np.isfinite(value) else None
    if hasattr(value, "value") and isinstance(getattr(value, "value"), str):
        return value.value
    return value


class ArtifactStore:
    """CSV and JSON artifacts of one scenario run, all under ``output_dir``."""

    def __init__(self, output_dir: Path):
        self.output_dir = Path(output_dir).expanduser()
        self.output_dir.mkdir(parents=True, exist_ok=True)

    def path_for(self, name: str) -> Path:
        return self.output_dir / name

    def write_rows(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        """Write a CSV file, replacing any earlier one with the same name."""
        target = self.path_for(name)
        with target.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([format_value(cell) for cell in row])
        LOGGER.debug("wrote %s", target)
        return target

    def append_rows(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        """Append to a CSV file, writing the header only when the file is new."""
        target = self.path_for(name)
        file_exists = target.exists()
        with target.open("a", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            if not file_exists:
                writer.writerow(header)
            for row in rows:
                writer.writerow([format_value(cell) for cell in row])
        return target

    def write_trajectory(self, name: str, trajectory: Trajectory) -> Path:
        rows = (
            [r.step, r.iterate_norm, r.loss, r.grad_norm, r.correlation, r.max_prob, r.sparsity]
            for r in trajectory.steps
        )
        return self.write_rows(name, TRAJECTORY_HEADER, rows)

    def write_path(self, name: str, points: Sequence[PathPoint]) -> Path:
        rows = ([p.radius, float(np.linalg.norm(p.minimizer)), p.loss, p.correlation] for p in points)
        return self.write_rows(name, PATH_HEADER, rows)

    def write_joint_path(self, name: str, points: Sequence[JointPathPoint]) -> Path:
        rows = (
            [
                p.v_radius,
                p.p_radius,
                float(np.linalg.norm(p.v)),
                float(np.linalg.norm(p.p)),
                p.loss,
                p.v_correlation,
                p.p_correlation,
                p.rounds,
                p.converged,
            ]
            for p in points
        )
        return self.write_rows(name, JOINT_PATH_HEADER, rows)

    def write_joint_trajectory(self, name: str, trajectory: JointTrajectory) -> Path:
        rows = (
            [r.step, r.v_norm, r.p_norm, r.loss, r.max_prob, r.selected_prob, r.label_prob]
            for r in trajectory.steps
        )
        return self.write_rows(name, JOINT_TRAJECTORY_HEADER, rows)

    def write_json(self, name: str, payload: Dict[str, Any]) -> Path:
        target = self.path_for(name)
        target.write_text(json.dumps(_json_ready(payload), indent=2, sort_keys=True), encoding="utf-8")
        LOGGER.debug("wrote %s", target)
        return target

    def written(self) -> List[Path]:
        return sorted(p for p in self.output_dir.iterdir() if p.is_file())
