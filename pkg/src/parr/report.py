"""Report emission: schema-validated JSON, CSV loss curves, and figures.

Reports deliberately contain no timestamps or host details so repeated runs
with the same seed produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import jsonschema
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .errors import ConfigError

PAR_REPORT_SCHEMA = {
    "type": "object",
    "required": ["mA", "F1", "per_attribute", "config"],
    "properties": {
        "mA": {"type": "number", "minimum": 0, "maximum": 1},
        "F1": {"type": "number", "minimum": 0, "maximum": 1},
        "per_attribute": {"type": "array", "items": {"type": "number"}},
        "split": {"type": "string"},
        "config": {"type": "object"},
    },
    "additionalProperties": True,
}

RET_REPORT_SCHEMA = {
    "type": "object",
    "required": ["mAP", "R1", "R5", "R10", "excluded_queries", "config"],
    "properties": {
        "mAP": {"type": "number", "minimum": 0, "maximum": 1},
        "R1": {"type": "number", "minimum": 0, "maximum": 1},
        "R5": {"type": "number", "minimum": 0, "maximum": 1},
        "R10": {"type": "number", "minimum": 0, "maximum": 1},
        "excluded_queries": {"type": "integer", "minimum": 0},
        "n_queries": {"type": "integer", "minimum": 0},
        "query_mode": {"type": "string"},
        "config": {"type": "object"},
    },
    "additionalProperties": True,
}

_SCHEMAS = {"par": PAR_REPORT_SCHEMA, "ret": RET_REPORT_SCHEMA}


def validate_report(payload: dict, kind: str) -> None:
    """Raise ConfigError if the payload is not a valid report of this kind."""
    if kind not in _SCHEMAS:
        raise ConfigError(f"unknown report kind {kind!r}; pick from {sorted(_SCHEMAS)}")
    try:
        jsonschema.validate(payload, _SCHEMAS[kind])
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"invalid {kind} report: {exc.message}") from exc


def write_json_report(path: str | Path, payload: dict, kind: str | None = None) -> None:
    if kind is not None:
        validate_report(payload, kind)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def write_loss_curve(out_dir: str | Path, curve: list[float], name: str = "loss_curve") -> tuple[Path, Path]:
    """Write <name>.csv and a rendered <name>.png; returns both paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{name}.csv"
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for step, loss in enumerate(curve):
            writer.writerow([step, f"{loss:.8f}"])

    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(range(len(curve)), curve, lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(name.replace("_", " "))
    ax.grid(alpha=0.3)
    fig.tight_layout()
    png_path = out_dir / f"{name}.png"
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return csv_path, png_path


def write_per_attribute_csv(
    path: str | Path, names: list[str], values: list[float]
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["attribute", "accuracy"])
        for name, value in zip(names, values):
            writer.writerow([name, f"{value:.6f}"])
    return path
