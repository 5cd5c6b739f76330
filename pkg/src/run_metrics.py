"""Self-metrics for pipeline runs, written in node-exporter textfile format."""
import logging
import os

from prometheus_client import CollectorRegistry, Counter, Gauge, Histogram, write_to_textfile

logger = logging.getLogger(__name__)


class RunMetrics:
    """Self-monitoring metrics for a pipeline run."""

    def __init__(self, registry=None, prefix: str = "countesn_"):
        if registry is None:
            registry = CollectorRegistry()
        self.registry = registry

        self.fits_total = Counter(
            f"{prefix}fits_total",
            "Total number of model fits completed",
            ["model", "stage"],
            registry=registry
        )

        self.fit_duration_seconds = Histogram(
            f"{prefix}fit_duration_seconds",
            "Duration of a single model fit in seconds",
            ["model"],
            buckets=[0.01, 0.1, 0.5, 1.0, 5.0, 15.0, 60.0, 300.0, 1200.0],
            registry=registry
        )

        self.forecast_sets_total = Counter(
            f"{prefix}forecast_sets_total",
            "Total number of model-year forecast sets emitted",
            ["model"],
            registry=registry
        )

        self.acceptance_rate = Gauge(
            f"{prefix}mh_acceptance_rate",
            "Metropolis-Hastings acceptance fraction of the last chain",
            ["model", "parameter"],
            registry=registry
        )

        self.stage_errors_total = Counter(
            f"{prefix}stage_errors_total",
            "Total number of stage failures",
            ["stage", "error"],
            registry=registry
        )

        self.stage_duration_seconds = Gauge(
            f"{prefix}stage_duration_seconds",
            "Wall time of the last run of each stage",
            ["stage"],
            registry=registry
        )

    def record_fit(self, model: str, stage: str, duration: float):
        """Record a completed fit."""
        self.fits_total.labels(model=model, stage=stage).inc()
        self.fit_duration_seconds.labels(model=model).observe(duration)

    def record_forecast_sets(self, model: str, count: int):
        self.forecast_sets_total.labels(model=model).inc(count)

    def set_acceptance(self, model: str, parameter: str, rate: float):
        self.acceptance_rate.labels(model=model, parameter=parameter).set(rate)

    def record_stage_error(self, stage: str, error: str):
        self.stage_errors_total.labels(stage=stage, error=error).inc()

    def set_stage_duration(self, stage: str, duration: float):
        self.stage_duration_seconds.labels(stage=stage).set(duration)

    def write(self, path: str):
        """Write the registry as a textfile (atomic rename inside prometheus_client)."""
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        write_to_textfile(path, self.registry)
        logger.debug(f"Run metrics written to {path}")
