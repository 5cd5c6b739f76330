"""Optional SVG renderings of the report tables."""
from typing import Dict
import logging

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from src.evaluate import ScoreReport  # noqa: E402

logger = logging.getLogger(__name__)

# fixed ids and no date stamp so reruns give identical files
plt.rcParams["svg.hashsalt"] = "countesn"
SVG_METADATA = {"Date": None}


def score_lines(report: ScoreReport, metric: str, path: str) -> None:
    """One line per model across target years."""
    wide = report.pivot(metric).drop(columns="average")
    fig, ax = plt.subplots(figsize=(7, 4))
    years = [int(y) for y in wide.columns]
    for model, row in wide.iterrows():
        ax.plot(years, row.to_numpy(dtype=float), marker="o", label=model)
    ax.set_xlabel("year")
    ax.set_ylabel(metric.upper())
    ax.set_xticks(years)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=SVG_METADATA)
    plt.close(fig)
    logger.debug(f"Wrote {path}")


def dispersion_boxplot(variances: Dict[str, np.ndarray], path: str) -> None:
    """Boxplots of per-school Pearson residual variances, with the unit line."""
    names = list(variances)
    data = [v[~np.isnan(v)] for v in (np.asarray(variances[n], dtype=float) for n in names)]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.boxplot(data)
    ax.set_xticks(range(1, len(names) + 1))
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.axhline(1.0, color="grey", linestyle="--", linewidth=1)
    ax.set_yscale("log")
    ax.set_ylabel("residual variance")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=SVG_METADATA)
    plt.close(fig)
    logger.debug(f"Wrote {path}")
