"""Byte-stable CSV and JSON writers for run outputs.

Reals are written with 17 significant digits, so values round-trip exactly;
lines end in LF regardless of platform.
"""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from qsteer.rl import PolicyTable, QTable
from qsteer.trainer import ComparisonRow, EpisodeRecord, TrajectoryStep

EPISODE_COLUMNS = ("episode", "steps", "total_reward", "terminal_fidelity", "mean_entropy", "truncated")
AGGREGATE_COLUMNS = (
    "strategy",
    "seed_count",
    "median_convergence_episode",
    "success_rate",
    "median_cumulative_steps",
)
ARTIFACT_FORMAT = "qsteer-run-artifact"
ARTIFACT_VERSION = 1


def fmt_real(x: float | None) -> str:
    if x is None:
        return ""
    return format(float(x), ".17g")


def fmt_bool(b: bool) -> str:
    return "true" if b else "false"


def csv_text(header: Sequence[str], rows: Iterable[Sequence[str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def write_text(path: str | Path, text: str) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return path


def episodes_csv(records: Sequence[EpisodeRecord]) -> str:
    return csv_text(
        EPISODE_COLUMNS,
        (
            (
                str(r.episode),
                str(r.steps),
                fmt_real(r.total_reward),
                fmt_real(r.terminal_fidelity),
                fmt_real(r.mean_entropy),
                fmt_bool(r.truncated),
            )
            for r in records
        ),
    )


def aggregate_csv(rows: Sequence[ComparisonRow]) -> str:
    return csv_text(
        AGGREGATE_COLUMNS,
        (
            (
                r.strategy,
                str(r.seed_count),
                fmt_real(r.median_convergence_episode),
                fmt_real(r.success_rate),
                fmt_real(r.median_cumulative_steps),
            )
            for r in sorted(rows, key=lambda r: r.strategy)
        ),
    )


def trajectory_columns(dim: int, kind: str) -> list[str]:
    cols = ["step", "action", "reward", "fidelity"]
    for i in range(1, dim + 1):
        cols += [f"re_c{i}", f"im_c{i}"]
    if kind == "spin_half":
        cols += ["theta", "phi"]
    elif kind == "lambda":
        cols += [f"pop_{i}" for i in range(1, dim + 1)]
    return cols


def trajectory_csv(traj: Sequence[TrajectoryStep], kind: str, bloch=None) -> str:
    """``bloch`` maps an amplitude vector to (theta, phi); needed for spin trajectories."""
    dim = traj[0].amplitudes.shape[0] if traj else 0
    rows = []
    for i, t in enumerate(traj, start=1):
        row = [str(i), str(t.action), fmt_real(t.reward), fmt_real(t.fidelity)]
        for c in t.amplitudes:
            row += [fmt_real(c.real), fmt_real(c.imag)]
        if kind == "spin_half":
            row += [fmt_real(x) for x in bloch(t.amplitudes)]
        elif kind == "lambda":
            row += [fmt_real(x) for x in np.abs(t.amplitudes) ** 2]
        rows.append(row)
    return csv_text(trajectory_columns(dim, kind), rows)


def json_text(obj: Any) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=False, allow_nan=False) + "\n"


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def artifact_dict(
    q: QTable,
    p: PolicyTable | None,
    strategy: str,
    seed: int,
    env_kind: str,
    config_echo: dict,
) -> dict:
    return {
        "format": ARTIFACT_FORMAT,
        "version": ARTIFACT_VERSION,
        "environment": env_kind,
        "strategy": strategy,
        "seed": seed,
        "n_states": q.n_states,
        "n_actions": q.n_actions,
        "q": q.values.tolist(),
        "policy": None if p is None else p.probs.tolist(),
        "p_min": None if p is None else p.p_min,
        "config": config_echo,
    }


class ArtifactError(ValueError):
    pass


def load_artifact(path: str | Path) -> tuple[QTable, PolicyTable | None, dict]:
    path = Path(path)
    if not path.is_file():
        raise ArtifactError(f"artifact not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"artifact {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != ARTIFACT_FORMAT:
        raise ArtifactError(f"{path} is not a run artifact")
    try:
        q = QTable(np.array(doc["q"], dtype=float))
        if q.values.shape != (doc["n_states"], doc["n_actions"]):
            raise ArtifactError(f"artifact Q-table shape {q.values.shape} disagrees with its declared dims")
        p = None
        if doc.get("policy") is not None:
            p = PolicyTable(np.array(doc["policy"], dtype=float), doc.get("p_min") or 0.0)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ArtifactError):
            raise
        raise ArtifactError(f"artifact {path} is malformed: {exc}") from None
    return q, p, doc
