"""Staged pipeline: simulate, fit, forecast, score, report."""
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, Optional, Tuple
import hashlib
import json
import logging
import os
import time

import numpy as np
import pandas as pd

from src.cardinality import apply_school_cap
from src.config import Config
from src.errors import ConfigError, DataError, StageArtifactError
from src.evaluate import (
    ScoreReport,
    dispersion_summary,
    pearson_residuals,
    residual_acf,
    rolling_forecast,
    score_forecasts,
)
from src.models import ModelContext, create_model
from src.panel_data import PanelSeries, SplitPlan, load_panel, overdispersion_summary, save_panel, simulate_panel
from src.run_metrics import RunMetrics
from src.series import ForecastSet

logger = logging.getLogger(__name__)

STAGES = ("simulate", "fit", "forecast", "score", "report")
TABLE_METRICS = ("mspe", "mslpe", "is", "icr")


def derive_seed(master: int, *keys) -> int:
    """Deterministic sub-seed for (master, key, key, ...)."""
    material = ":".join([str(master), *(str(k) for k in keys)])
    digest = int(hashlib.md5(material.encode()).hexdigest(), 16)
    return int(np.random.SeedSequence(digest).generate_state(1, dtype=np.uint32)[0])


def _to_jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def write_json(path: str, payload: Dict) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=_to_jsonable)
        f.write("\n")


def read_json(path: str, stage: str) -> Dict:
    if not os.path.exists(path):
        raise StageArtifactError(f"{path} not found; run the '{stage}' stage first")
    with open(path) as f:
        return json.load(f)


def forecast_sets_from_frame(frame: pd.DataFrame, level: float) -> List[ForecastSet]:
    """Rebuild forecast sets from the long forecasts table, in table order."""
    sets = []
    for (model, year), rows in frame.groupby(["model", "year"], sort=False):
        has_interval = not rows["lower"].isna().any()
        sets.append(ForecastSet(
            model, int(year), tuple(rows["school_id"].astype(str)), rows["point"].to_numpy(),
            rows["lower"].to_numpy() if has_interval else None,
            rows["upper"].to_numpy() if has_interval else None,
            actual=rows["actual"].to_numpy(), level=level,
        ))
    return sets


class PipelineEngine:
    """Runs pipeline stages for one config, reading and writing artifacts under one output directory."""

    def __init__(self, config: Config):
        self.config = config
        self.out = config.global_.output_dir
        self.seed = config.global_.seed
        self.workers = config.global_.workers
        self.model_names = [m.name for m in config.models]

        self.metrics: Optional[RunMetrics] = None
        if config.metrics.enabled:
            self.metrics = RunMetrics(prefix=config.metrics.prefix)

        self._panel: Optional[PanelSeries] = None

    def path(self, *parts: str) -> str:
        return os.path.join(self.out, *parts)

    def model_context(self, name: str, workers: Optional[int] = None) -> ModelContext:
        """Seeds and shared settings for one model; every ESN draws the same reservoir."""
        return ModelContext(
            reservoir_seed=derive_seed(self.seed, "reservoir"),
            chain_seed=derive_seed(self.seed, "chain", name),
            workers=workers or self.workers,
            level=self.config.scoring.interval_level,
            mlg=self.config.mlg,
            polya_gamma=self.config.polya_gamma,
        )

    def simulation_seed(self) -> int:
        sim = self.config.data.simulation
        if sim is not None and sim.seed is not None:
            return sim.seed
        return derive_seed(self.seed, "simulate")

    def _simulate(self) -> Tuple[PanelSeries, Dict]:
        sim = self.config.data.simulation
        seed = self.simulation_seed()
        params = sim.model_dump(exclude={"dgp", "n_states", "schools_per_state", "T", "seed", "reservoir"})
        panel, truth = simulate_panel(sim.dgp, sim.n_states, sim.schools_per_state, sim.T, seed,
                                      reservoir=sim.reservoir, mlg_alpha=self.config.mlg.alpha, **params)
        truth["seed"] = seed
        return panel, truth

    def resolve_panel(self) -> PanelSeries:
        """Load or regenerate the panel, then apply the school cap."""
        if self._panel is not None:
            return self._panel
        data = self.config.data
        if data.path is not None:
            try:
                panel = load_panel(data.path, data.format, data.covariates)
            except FileNotFoundError:
                raise DataError(f"Panel file not found: {data.path}")
        else:
            panel, _ = self._simulate()
        if data.school_cap is not None:
            panel = apply_school_cap(panel, data.school_cap, data.sampling_strategy)
        self._panel = panel
        return panel

    def split_plan(self, panel: PanelSeries) -> SplitPlan:
        split = self.config.split
        if split.first_target_year is not None:
            plan = SplitPlan.from_first_target_year(panel, split.first_target_year, split.horizon)
        else:
            plan = SplitPlan(split.train_end_index, split.horizon)
        plan.validate(panel)
        return plan

    def _check_models(self, available: List[str], stage: str):
        missing = [m for m in self.model_names if m not in available]
        if missing:
            raise ConfigError(f"Models {missing} have no '{stage}' artifacts; available: {available}")

    def run_stage(self, stage: str) -> List[str]:
        """Run one stage by name; returns the artifact paths written."""
        if stage not in STAGES:
            raise ValueError(f"Unknown stage '{stage}'; expected one of {list(STAGES)}")
        handler: Callable[[], List[str]] = getattr(self, stage)
        os.makedirs(self.out, exist_ok=True)
        logger.info(f"Stage '{stage}' starting (seed={self.seed}, out={self.out})")
        start = time.time()
        try:
            written = handler()
        except Exception as e:
            if self.metrics:
                self.metrics.record_stage_error(stage, type(e).__name__)
            raise
        finally:
            duration = time.time() - start
            if self.metrics:
                self.metrics.set_stage_duration(stage, duration)
                self.metrics.write(self.path(self.config.metrics.textfile))
        logger.info(f"Stage '{stage}' finished in {duration:.1f}s, wrote {len(written)} artifact(s)")
        return written

    def simulate(self) -> List[str]:
        if self.config.data.simulation is None:
            raise ConfigError("simulate needs a 'data.simulation' section")
        panel, truth = self._simulate()
        os.makedirs(self.path("data"), exist_ok=True)
        panel_path = self.path("data", "panel.csv")
        truth_path = self.path("data", "truth.json")
        save_panel(panel, panel_path)
        if panel.T >= 2:
            mean, variance = overdispersion_summary(panel)
            truth["summary"] = {"mean_of_means": mean, "mean_of_variances": variance}
        write_json(truth_path, truth)
        logger.info(f"Simulated panel written to {panel_path}")
        return [panel_path, truth_path]

    def _fit_one(self, name: str, train: PanelSeries) -> List[str]:
        model = create_model(self.config.model(name), self.model_context(name))
        start = time.time()
        model.fit(train)
        duration = time.time() - start
        directory = self.path("fits", name)
        files = model.save(directory)
        mean, variance = model.conditional_moments(train)
        np.savez(os.path.join(directory, "moments.npz"), mean=mean, variance=variance)
        logger.info(f"{name}: fit on {train.N} schools x {train.T} years in {duration:.1f}s")

        if self.metrics:
            self.metrics.record_fit(name, "fit", duration)
            summary = model.to_dict()
            for parameter, rate in summary.get("accept_rates", {}).items():
                self.metrics.set_acceptance(name, parameter, rate)
            if "r_accept" in summary:
                self.metrics.set_acceptance(name, "r", float(np.mean(list(summary["r_accept"].values()))))
        return [os.path.join(directory, f) for f in files + ["moments.npz"]]

    def fit(self) -> List[str]:
        panel = self.resolve_panel()
        plan = self.split_plan(panel)
        train = panel.truncate(plan.train_end_index)
        written: List[str] = []
        files: Dict[str, List[str]] = {}
        for name in self.model_names:
            paths = self._fit_one(name, train)
            files[name] = [os.path.basename(p) for p in paths]
            written.extend(paths)

        manifest_path = self.path("fits", "manifest.json")
        write_json(manifest_path, {
            "seed": self.seed,
            "models": self.model_names,
            "files": files,
            "train_end_index": plan.train_end_index,
            "panel": {"N": train.N, "T": train.T, "first_year": int(train.years[0]),
                      "last_year": int(train.years[-1]), "school_ids": list(train.school_ids)},
        })
        return written + [manifest_path]

    def _forecast_one(self, name: str, panel: PanelSeries, plan: SplitPlan) -> List[ForecastSet]:
        # model-level parallelism replaces per-school workers here
        inner = 1 if self.workers > 1 and len(self.model_names) > 1 else self.workers
        model = create_model(self.config.model(name), self.model_context(name, inner))
        start = time.time()
        sets = rolling_forecast(panel, model, plan, seed=derive_seed(self.seed, "predictive", name))
        if self.metrics:
            self.metrics.record_fit(name, "forecast", time.time() - start)
            self.metrics.record_forecast_sets(name, len(sets))
        return sets

    def forecast(self) -> List[str]:
        manifest = read_json(self.path("fits", "manifest.json"), "fit")
        self._check_models(manifest["models"], "fit")
        panel = self.resolve_panel()
        plan = self.split_plan(panel)
        if plan.train_end_index != manifest["train_end_index"]:
            raise ConfigError(f"split changed since the fit stage (train_end_index "
                              f"{manifest['train_end_index']} -> {plan.train_end_index})")

        if self.workers > 1 and len(self.model_names) > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                futures = {name: pool.submit(self._forecast_one, name, panel, plan)
                           for name in self.model_names}
                results = {name: f.result() for name, f in futures.items()}
        else:
            results = {name: self._forecast_one(name, panel, plan) for name in self.model_names}

        os.makedirs(self.path("forecasts"), exist_ok=True)
        frame = pd.concat([fs.to_frame() for name in self.model_names for fs in results[name]],
                          ignore_index=True)
        csv_path = self.path("forecasts", "forecasts.csv")
        frame.to_csv(csv_path, index=False, float_format="%.17g", na_rep="")
        manifest_path = self.path("forecasts", "manifest.json")
        write_json(manifest_path, {
            "seed": self.seed,
            "models": self.model_names,
            "years": [int(panel.years[k]) for k in plan.target_indices()],
            "level": self.config.scoring.interval_level,
        })
        return [csv_path, manifest_path]

    def score(self) -> List[str]:
        manifest = read_json(self.path("forecasts", "manifest.json"), "forecast")
        self._check_models(manifest["models"], "forecast")
        level = self.config.scoring.interval_level
        if not np.isclose(manifest["level"], level):
            raise ConfigError(f"forecasts were made at interval level {manifest['level']}, "
                              f"scoring asks for {level}; rerun the forecast stage")
        frame = pd.read_csv(self.path("forecasts", "forecasts.csv"), dtype={"school_id": str})
        frame = frame[frame["model"].isin(self.model_names)]
        report = score_forecasts(forecast_sets_from_frame(frame, manifest["level"]), level)

        os.makedirs(self.path("scores"), exist_ok=True)
        csv_path = self.path("scores", "scores.csv")
        json_path = self.path("scores", "scores.json")
        report.to_csv(csv_path)
        report.to_json(json_path)
        return [csv_path, json_path]

    def _residuals(self, train: PanelSeries, fitted: List[str]) -> Tuple[List[str], Dict[str, np.ndarray]]:
        max_lag = self.config.scoring.acf_max_lag
        residual_rows, acf_rows = [], []
        variances: Dict[str, np.ndarray] = {}
        for name in self.model_names:
            if name not in fitted:
                continue
            moments = np.load(self.path("fits", name, "moments.npz"))
            summary = pearson_residuals(train, moments["mean"], moments["variance"])
            variances[name] = summary.variances
            acf, band = residual_acf(summary.residuals, max_lag)
            for i, school in enumerate(train.school_ids):
                residual_rows.append(pd.DataFrame({
                    "model": name, "school_id": school, "year": train.years[1:],
                    "residual": summary.residuals[i],
                }))
                acf_rows.append(pd.DataFrame({
                    "model": name, "school_id": school, "lag": np.arange(max_lag + 1),
                    "acf": acf[i], "band": band[i],
                }))

        os.makedirs(self.path("diagnostics"), exist_ok=True)
        paths = [self.path("diagnostics", f) for f in ("residuals.csv", "acf.csv", "dispersion.csv")]
        if residual_rows:
            pd.concat(residual_rows, ignore_index=True).to_csv(paths[0], index=False,
                                                               float_format="%.10g", na_rep="")
            pd.concat(acf_rows, ignore_index=True).to_csv(paths[1], index=False,
                                                          float_format="%.10g", na_rep="")
        else:
            paths = paths[2:]
        dispersion_summary(variances).to_csv(paths[-1], index=False, float_format="%.10g")
        return paths, variances

    def report(self) -> List[str]:
        if not os.path.exists(self.path("scores", "scores.csv")):
            raise StageArtifactError(f"{self.path('scores', 'scores.csv')} not found; "
                                     f"run the 'score' stage first")
        fits = read_json(self.path("fits", "manifest.json"), "fit")
        scores = ScoreReport.from_csv(self.path("scores", "scores.csv"))
        self._check_models(list(dict.fromkeys(scores.table["model"])), "score")
        report = ScoreReport(scores.table[scores.table["model"].isin(self.model_names)]
                             .reset_index(drop=True))

        os.makedirs(self.path("tables"), exist_ok=True)
        written = []
        for metric in TABLE_METRICS:
            path = self.path("tables", f"{metric}.csv")
            report.pivot(metric).to_csv(path, float_format="%.10g", na_rep="")
            written.append(path)

        train = self.resolve_panel().truncate(fits["train_end_index"])
        diag_paths, variances = self._residuals(train, fits["models"])
        written.extend(diag_paths)

        if self.config.scoring.svg_plots:
            from src.plots import dispersion_boxplot, score_lines

            os.makedirs(self.path("plots"), exist_ok=True)
            for metric in ("mspe", "mslpe"):
                path = self.path("plots", f"{metric}.svg")
                score_lines(report, metric, path)
                written.append(path)
            if variances:
                path = self.path("plots", "dispersion.svg")
                dispersion_boxplot(variances, path)
                written.append(path)
        return written
