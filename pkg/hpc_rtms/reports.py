"""CSV report writers and the SVG charts rendered from them."""

from __future__ import annotations

from logging import Logger, getLogger
from pathlib import Path
from typing import Iterable, List

import matplotlib
import pandas as pd
from matplotlib.figure import Figure

from hpc_rtms.calibration import CalibrationResult

FLOAT_FORMAT = "%.9g"
CALIBRATION_CSV_COLUMNS = ["rate", "median_overhead", "target", "tolerance", "evaluations", "replicas", "seed"]
SVG_RC = {"svg.fonttype": "none", "svg.hashsalt": "hpc-rtms", "font.size": 9}

SWEEP_CSV = "sweep.csv"
SWEEP_SVG = "sweep.svg"
PWCET_CSV = "pwcet.csv"
PWCET_SVG = "pwcet.svg"
CALIBRATION_CSV = "calibration.csv"

_logger: Logger = getLogger(__name__)


def write_csv(frame: pd.DataFrame, path: Path) -> Path:
    """Write a report CSV with the shared number format."""
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    _logger.info(f"Wrote {path}")
    return path


def write_rows(rows: Iterable[dict], columns: List[str], path: Path) -> Path:
    return write_csv(pd.DataFrame(list(rows), columns=columns), path)


def write_calibration(
    result: CalibrationResult, target: float, tolerance: float, replicas: int, seed: int, path: Path
) -> Path:
    """Single-row calibration report."""
    row = {
        "rate": result.rate,
        "median_overhead": result.overhead,
        "target": target,
        "tolerance": tolerance,
        "evaluations": len(result.evaluations),
        "replicas": replicas,
        "seed": seed,
    }
    return write_rows([row], CALIBRATION_CSV_COLUMNS, path)


def read_calibrated_rate(path: Path) -> float:
    """Rate stored by a previous calibration."""
    frame = pd.read_csv(path)
    return float(frame["rate"].iloc[0])


def _read_text_frame(path: Path) -> pd.DataFrame:
    # Strings as written, so chart labels are the CSV values.
    return pd.read_csv(path, dtype=str, keep_default_na=False)


def _save(figure: Figure, path: Path) -> Path:
    figure.savefig(path, format="svg", metadata={"Date": None})
    _logger.info(f"Wrote {path}")
    return path


def render_sweep_svg(csv_path: Path, svg_path: Path) -> Path:
    """Median slowdown against prediction error, one series per policy, IQR as error bars."""
    frame = _read_text_frame(csv_path)
    with matplotlib.rc_context(SVG_RC):
        figure = Figure(figsize=(7.0, 4.5))
        axes = figure.add_subplot()
        for policy, group in frame.groupby("policy", sort=False):
            epsilon = group["epsilon"].astype(float) * 100.0
            median = group["median_overhead"].astype(float)
            low = median - group["q1_overhead"].astype(float)
            high = group["q3_overhead"].astype(float) - median
            axes.errorbar(epsilon, median, yerr=[low, high], marker="o", capsize=3, label=str(policy), gid=str(policy))
            for x_value, y_value, text in zip(epsilon, median, group["median_overhead"]):
                axes.annotate(
                    text, (x_value, y_value), textcoords="offset points", xytext=(0, 6), ha="center", fontsize=6
                )
        axes.set_xlabel("MTTF prediction error (%)")
        axes.set_ylabel("(T_exe - T_ideal) / T_ideal")
        axes.set_title("Reliability overhead")
        axes.legend()
        axes.grid(True, alpha=0.3)
        figure.tight_layout()
        return _save(figure, svg_path)


def render_pwcet_svg(csv_path: Path, svg_path: Path) -> Path:
    """MET and pWCET bars per sample label."""
    frame = _read_text_frame(csv_path)
    value_column = next(column for column in frame.columns if column.startswith("pwcet_"))
    with matplotlib.rc_context(SVG_RC):
        figure = Figure(figsize=(max(4.0, 1.2 * len(frame) + 2.0), 4.5))
        axes = figure.add_subplot()
        positions = list(range(len(frame)))
        width = 0.38
        for offset, column, name in ((-width / 2, "met", "MET"), (width / 2, value_column, "pWCET")):
            heights = pd.to_numeric(frame[column], errors="coerce").fillna(0.0)
            bars = axes.bar([p + offset for p in positions], heights, width=width, label=name, gid=name)
            for bar, text in zip(bars, frame[column]):
                axes.annotate(
                    text,
                    (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                    textcoords="offset points",
                    xytext=(0, 3),
                    ha="center",
                    fontsize=6,
                )
        axes.set_xticks(positions)
        axes.set_xticklabels(frame["label"])
        axes.set_ylabel("Execution time (s)")
        axes.set_title(f"MET vs pWCET at {value_column.removeprefix('pwcet_')}")
        axes.legend()
        figure.tight_layout()
        return _save(figure, svg_path)


def render_reports(out_dir: Path) -> List[Path]:
    """Re-render every chart whose CSV is present in a directory."""
    written = []
    if (out_dir / SWEEP_CSV).exists():
        written.append(render_sweep_svg(out_dir / SWEEP_CSV, out_dir / SWEEP_SVG))
    if (out_dir / PWCET_CSV).exists():
        written.append(render_pwcet_svg(out_dir / PWCET_CSV, out_dir / PWCET_SVG))
    if not written:
        _logger.warning(f"No report CSV found in {out_dir}")
    return written

