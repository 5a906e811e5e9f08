"""Per-trial CSV logs, the experiment summary JSON and the run manifest.

Every number is written with ``repr`` so that a log read back yields the
exact floats that were simulated.  Output bytes depend only on the records
and the configuration; the manifest's ``generated_at`` field is the single
place a wall-clock timestamp may appear.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import ScenarioConfig
from .runner import ExperimentSummary, TrialRecord

CSV_HEADER = ("t", "Px", "Py", "Pz", "Fx", "Fy", "Fz", "Fwx", "Fwy", "Fwz", "state")
STATE_LABELS = ("I", "II", "III", "IV", "V", "VI", "VII", "VIII", "FAILED")


def trial_filename(rec: TrialRecord) -> str:
    return f"trial_{rec.trial_index:03d}_{rec.material}_{rec.seed}.csv"


def write_trial_csv(rec: TrialRecord, path) -> Path:
    """One row per recorded sample plus a header line."""
    path = Path(path)
    cols = np.column_stack([rec.t.reshape(-1, 1), rec.P, rec.F, rec.Fw]) if len(rec.t) else \
        np.zeros((0, 10))
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for row, state in zip(cols, rec.state):
            w.writerow([repr(float(v)) for v in row] + [state])
    return path


@dataclass
class TrialLog:
    t: np.ndarray
    P: np.ndarray
    F: np.ndarray
    Fw: np.ndarray
    state: list

    @property
    def max_force(self) -> float:
        return float(np.max(np.linalg.norm(self.F, axis=1))) if len(self.F) else 0.0


def read_trial_csv(path) -> TrialLog:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise ValueError(f"{path}: unexpected header {rows[0] if rows else None}")
    body = rows[1:]
    data = np.array([[float(v) for v in r[:10]] for r in body]).reshape(-1, 10)
    return TrialLog(t=data[:, 0], P=data[:, 1:4], F=data[:, 4:7], Fw=data[:, 7:10],
                    state=[r[10] for r in body])


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def summary_document(summary: ExperimentSummary, records: Sequence[TrialRecord]) -> dict:
    doc = summary.to_dict()
    doc["trials"] = [r.summary_row() for r in records]
    return _json_safe(doc)


def export_logs(records: Sequence[TrialRecord], out_dir, cfg: ScenarioConfig,
                summary: Optional[ExperimentSummary] = None,
                timestamp: Optional[str] = None) -> dict:
    """Write ``trials/*.csv``, ``summary.json`` and ``manifest.json`` under ``out_dir``.

    Records are written in trial-index order by this single caller, so the
    output does not depend on how the trials were scheduled.  Returns the
    written paths keyed by kind.
    """
    if not records:
        raise ValueError("no records to export")
    from .runner import summarize

    records = sorted(records, key=lambda r: r.trial_index)
    if summary is None:
        summary = summarize(records, cfg.controller.kind)
    out = Path(out_dir)
    trial_dir = out / "trials"
    trial_dir.mkdir(parents=True, exist_ok=True)
    csvs = [write_trial_csv(r, trial_dir / trial_filename(r)) for r in records]

    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps(summary_document(summary, records), indent=1,
                                       sort_keys=True) + "\n")
    manifest = {
        "config_hash": cfg.config_hash(),
        "controller": cfg.controller.kind,
        "master_seed": cfg.plan.master_seed,
        "trials": [{"trial_index": r.trial_index, "material": r.material, "seed": r.seed,
                    "file": f"trials/{trial_filename(r)}"} for r in records],
        "generated_at": timestamp,
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return {"csv": csvs, "summary": summary_path, "manifest": manifest_path}
