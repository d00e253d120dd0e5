"""
Convergence-study figures for the FracSmith harness.
"""
import math
from pathlib import Path
from typing import Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from loguru import logger  # noqa: E402

from schemas import StudyReport  # noqa: E402


def study_figure(width: float = 6.0, height: Optional[float] = None):
    """Figure and axes with log-log scales, golden-ratio height by default."""
    golden_ratio = (math.sqrt(5) - 1.0) / 2.0
    height = height or width * golden_ratio
    fig, ax = plt.subplots(figsize=(width, height), facecolor="w")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.grid(True, which="both", alpha=0.3)
    return fig, ax


def plot_studies(reports: Sequence[StudyReport], path: Union[str, Path],
                 labels: Optional[Sequence[str]] = None, title: str = "") -> Path:
    """
    Plot value against sweep axis for each study and save the figure.

    Args:
        reports: Study reports sharing an axis name
        path: Target PNG path
        labels: Legend entry per report; the fitted order is appended when known
        title: Figure title

    Returns:
        The written path
    """
    path = Path(path)
    fig, ax = study_figure()
    labels = labels or [f"study {i}" for i in range(len(reports))]
    for report, label in zip(reports, labels):
        positive = [(x, v) for x, v in zip(report.axis, report.values) if v > 0]
        if not positive:
            logger.debug(f"plot_studies: nothing positive to draw for {label}")
            continue
        if report.order is not None:
            label = f"{label} (order {report.order:.2f})"
        xs, vs = zip(*positive)
        ax.plot(xs, vs, marker="o", label=label)
    if reports:
        ax.set_xlabel(reports[0].axis_name)
    ax.set_ylabel("error")
    if title:
        ax.set_title(title)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    logger.debug(f"Saved study figure {path}")
    return path
