"""
Reliability diagrams rendered as SVG.
"""
import logging
from pathlib import Path
from typing import Optional, Sequence

import matplotlib


matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .types import ReliabilityBin  # noqa: E402


LOG = logging.getLogger(__name__)

BAR_ID_PREFIX = "bar-"
FIGURE_SIZE = (4.5, 4.5)


def reliability_diagram(
    bins: Sequence[ReliabilityBin],
    path: Path,
    title: Optional[str] = None,
    t_ece: Optional[float] = None,
) -> Path:
    """
    Draw one bar per bin with the tolerance accuracy as height against the
    identity diagonal. Every bar carries the SVG id `bar-<index>`, empty bins
    are drawn with zero height.
    """
    path = Path(path)
    lefts = [b.lower for b in bins]
    widths = [b.upper - b.lower for b in bins]
    heights = [b.tolerance_accuracy or 0.0 for b in bins]

    with plt.rc_context({"svg.hashsalt": "calibrific", "svg.fonttype": "none"}):
        figure, ax = plt.subplots(figsize=FIGURE_SIZE)
        try:
            bars = ax.bar(
                lefts,
                heights,
                width=widths,
                align="edge",
                edgecolor="black",
                color="#4c72b0",
                label="Tolerance accuracy",
            )
            for ix, bar in enumerate(bars):
                bar.set_gid(f"{BAR_ID_PREFIX}{ix}")

            ax.plot([0, 1], [0, 1], linestyle="--", color="gray", label="Perfect")
            ax.set_xlim(0, 1)
            ax.set_ylim(0, 1)
            ax.set_xlabel("Confidence")
            ax.set_ylabel("Tolerance accuracy")
            ax.legend(loc="upper left")
            if title or t_ece is not None:
                parts = [title] if title else []
                if t_ece is not None:
                    parts.append(f"T-ECE {t_ece:.3f}")
                ax.set_title(", ".join(parts))

            figure.savefig(path, format="svg", metadata={"Date": None})
        finally:
            plt.close(figure)

    LOG.info(f"Reliability diagram written to {path}.")
    return path
