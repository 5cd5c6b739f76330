"""Configuration models using Pydantic for validation."""
from typing import Dict, List, Optional, Literal
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
import os

from src.errors import ConfigError


MODEL_NAMES = (
    "intercept",
    "ingarch11",
    "single-poisson-esn",
    "ensemble-poisson-esn",
    "bayes-poisson-esn",
    "hier-poisson-esn",
    "hier-nb-esn",
)

DGP_NAMES = ("hier-poisson-esn", "hier-nb-esn", "ingarch", "iid-poisson")

ModelName = Literal[
    "intercept",
    "ingarch11",
    "single-poisson-esn",
    "ensemble-poisson-esn",
    "bayes-poisson-esn",
    "hier-poisson-esn",
    "hier-nb-esn",
]


class ReservoirSpec(BaseModel):
    """Hyperparameters of a spike-and-slab echo state reservoir."""
    model_config = ConfigDict(frozen=True)

    n_h: int = Field(30, ge=1)
    p: Literal[1] = 1  # autoregressive order
    r: int = Field(2, ge=0)  # covariate dimension
    nu: float = Field(0.9, gt=0.0, le=1.0)
    a_w: float = Field(0.01, ge=0.0)
    a_uY: float = Field(0.01, ge=0.0)
    a_uX: float = Field(0.01, ge=0.0)
    pi_w: float = Field(0.1, ge=0.0, le=1.0)
    pi_uY: float = Field(0.1, ge=0.0, le=1.0)
    pi_uX: float = Field(0.1, ge=0.0, le=1.0)
    activation: Literal["tanh", "sigmoid"] = "tanh"
    seed: int = 0


class ReservoirGrid(BaseModel):
    """Reservoir candidates searched together with tau; an empty list keeps the configured value."""
    a: List[float] = Field(default_factory=list)  # a_w, a_uY and a_uX move together
    pi: List[float] = Field(default_factory=list)  # pi_w, pi_uY and pi_uX move together
    n_h: List[int] = Field(default_factory=list)
    nu: List[float] = Field(default_factory=list)

    @model_validator(mode='after')
    def validate_ranges(self):
        if any(a < 0 for a in self.a):
            raise ValueError("reservoir_grid.a values must be >= 0")
        if any(not 0.0 <= p <= 1.0 for p in self.pi):
            raise ValueError("reservoir_grid.pi values must lie in [0, 1]")
        if any(n < 1 for n in self.n_h):
            raise ValueError("reservoir_grid.n_h values must be >= 1")
        if any(not 0.0 < v <= 1.0 for v in self.nu):
            raise ValueError("reservoir_grid.nu values must lie in (0, 1]")
        return self

    def candidates(self, base: ReservoirSpec) -> List[ReservoirSpec]:
        """Every combination of the listed values, in row-major order, applied to base."""
        specs = []
        for a in self.a or [None]:
            for pi in self.pi or [None]:
                for n_h in self.n_h or [None]:
                    for nu in self.nu or [None]:
                        update = {}
                        if a is not None:
                            update.update(a_w=a, a_uY=a, a_uX=a)
                        if pi is not None:
                            update.update(pi_w=pi, pi_uY=pi, pi_uX=pi)
                        if n_h is not None:
                            update["n_h"] = n_h
                        if nu is not None:
                            update["nu"] = nu
                        specs.append(base.model_copy(update=update))
        return specs


class PanelFormat(BaseModel):
    """Column layout of a long-format panel CSV."""
    school_col: str = "school_id"
    state_col: str = "state"
    year_col: str = "year"
    count_col: str = "count"
    # None means "every column after the four required ones"
    covariate_cols: Optional[List[str]] = None


class SimulationConfig(BaseModel):
    """Data generating process for synthetic panels."""
    dgp: str = "hier-nb-esn"
    n_states: int = Field(20, ge=1)
    schools_per_state: int = Field(5, ge=1)
    T: int = Field(50, ge=1)
    start_year: int = 1972
    seed: Optional[int] = None  # falls back to global seed

    # iid-poisson
    mean: float = Field(5.0, gt=0.0)

    # ingarch
    beta0: float = Field(5.0, gt=0.0)
    alpha1: float = Field(0.3, ge=0.0)
    beta1: float = Field(0.4, ge=0.0)

    # hierarchical ESN processes
    dispersion: float = Field(2.0, gt=0.0)
    mean_level: float = Field(30.0, gt=0.0)
    sigma_eta: float = Field(2.0, ge=0.0)
    sigma_delta: float = Field(0.5, ge=0.0)
    reservoir: ReservoirSpec = Field(default_factory=ReservoirSpec)

    @field_validator('dgp')
    @classmethod
    def validate_dgp(cls, v):
        """Reject unknown generator names early."""
        if v not in DGP_NAMES:
            raise ValueError(f"Unknown dgp '{v}'; expected one of {list(DGP_NAMES)}")
        return v

    @model_validator(mode='after')
    def validate_stationarity(self):
        if self.dgp == "ingarch" and self.alpha1 + self.beta1 >= 1.0:
            raise ValueError("ingarch simulation requires alpha1 + beta1 < 1")
        return self


class DataConfig(BaseModel):
    """Where the panel comes from."""
    path: Optional[str] = None
    format: PanelFormat = Field(default_factory=PanelFormat)
    simulation: Optional[SimulationConfig] = None
    covariates: Literal["default", "intercept", "columns"] = "default"
    school_cap: Optional[int] = Field(None, ge=1)
    sampling_strategy: Literal["first_n", "hash"] = "first_n"

    @model_validator(mode='after')
    def validate_source(self):
        """Exactly one data source must be given."""
        if (self.path is None) == (self.simulation is None):
            raise ValueError("data must define exactly one of 'path' or 'simulation'")
        return self


class MLGConfig(BaseModel):
    """Multivariate log-gamma constants."""
    alpha: float = Field(1000.0, gt=0.0)
    zero_count_shape: float = Field(0.5, gt=0.0)


class PolyaGammaConfig(BaseModel):
    """Polya-Gamma sampler selection."""
    method: Literal["polyagamma", "series"] = "polyagamma"
    truncation: int = Field(200, ge=1)


# Per-model chain defaults: (n_iter, burn_in, thin)
_CHAIN_DEFAULTS: Dict[str, tuple] = {
    "bayes-poisson-esn": (1000, 0, 1),
    "hier-poisson-esn": (2500, 500, 2),
    "hier-nb-esn": (3000, 1000, 2),
}


class ModelConfig(BaseModel):
    """Configuration for a single fitted model."""
    name: ModelName
    reservoir: ReservoirSpec = Field(default_factory=ReservoirSpec)

    # Frequentist ESNs
    tau: float = Field(1.0, ge=0.0)
    tau_grid: List[float] = Field(default_factory=lambda: [0.5, 1.0, 1.5])
    cross_validate: bool = False
    cv_years: int = Field(3, ge=1)
    reservoir_grid: ReservoirGrid = Field(default_factory=ReservoirGrid)
    ensemble_size: int = Field(100, ge=2)
    ensemble_draws: int = Field(10, ge=1)
    tol: float = Field(1e-8, gt=0.0)
    max_iter: int = Field(10_000, ge=1)

    # Bayesian ESNs
    n_iter: Optional[int] = None
    burn_in: Optional[int] = None
    thin: Optional[int] = None
    sigma_eta: float = Field(0.1, gt=0.0)  # fixed for bayes-poisson-esn
    upsilon: float = Field(100.0, gt=0.0)
    sigma_init: float = Field(0.5, gt=0.0)
    sigma_step_cap: float = Field(0.5, gt=0.0)
    ig_shape: float = Field(0.001, gt=0.0)
    ig_rate: float = Field(0.001, gt=0.0)
    variance_init: float = Field(1.0, gt=0.0)
    r_init: float = Field(10.0, gt=0.0)
    r_step_cap: float = Field(10.0, gt=0.0)
    log_every: int = Field(500, ge=1)

    # Forecasting
    n_pred_samples: int = Field(1000, ge=1)

    @model_validator(mode='after')
    def fill_chain_defaults(self):
        """Fill chain length, burn-in and thinning from per-model defaults."""
        n_iter, burn_in, thin = _CHAIN_DEFAULTS.get(self.name, (1, 0, 1))
        if self.n_iter is None:
            self.n_iter = n_iter
        if self.burn_in is None:
            self.burn_in = burn_in
        if self.thin is None:
            self.thin = thin
        if self.thin < 1:
            raise ValueError(f"Model '{self.name}': thin must be >= 1")
        if self.name in ("hier-poisson-esn", "hier-nb-esn") and self.n_iter <= self.burn_in:
            raise ValueError(
                f"Model '{self.name}': n_iter ({self.n_iter}) must exceed burn_in ({self.burn_in})"
            )
        if not self.tau_grid:
            raise ValueError(f"Model '{self.name}': tau_grid must not be empty")
        return self


class SplitConfig(BaseModel):
    """Rolling-origin plan. Give either the first target year or the index."""
    first_target_year: Optional[int] = None
    train_end_index: Optional[int] = Field(None, ge=1)
    horizon: int = Field(5, ge=1)

    @model_validator(mode='after')
    def validate_origin(self):
        if (self.first_target_year is None) == (self.train_end_index is None):
            raise ValueError("split must define exactly one of 'first_target_year' or 'train_end_index'")
        return self


class ScoringConfig(BaseModel):
    """Scoring rule settings."""
    interval_level: float = Field(0.95, gt=0.0, lt=1.0)
    acf_max_lag: int = Field(10, ge=1)
    svg_plots: bool = False


class MetricsConfig(BaseModel):
    """Prometheus textfile self-metrics."""
    enabled: bool = True
    prefix: str = "countesn_"
    textfile: str = "run_metrics.prom"


class GlobalConfig(BaseModel):
    """Global configuration settings."""
    seed: int = 42
    log_level: str = "INFO"
    log_format: Literal["text", "logfmt"] = "text"
    workers: int = Field(1, ge=1)
    output_dir: str = "runs/default"


class Config(BaseModel):
    """Root configuration model."""
    model_config = ConfigDict(populate_by_name=True)

    global_: GlobalConfig = Field(default_factory=GlobalConfig, alias="global")
    data: DataConfig
    models: List[ModelConfig] = Field(default_factory=list)
    split: SplitConfig
    scoring: ScoringConfig = Field(default_factory=ScoringConfig)
    mlg: MLGConfig = Field(default_factory=MLGConfig)
    polya_gamma: PolyaGammaConfig = Field(default_factory=PolyaGammaConfig)
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)

    @field_validator('models')
    @classmethod
    def validate_models(cls, v):
        """Validate model configurations."""
        if not v:
            raise ValueError("At least one model must be defined")

        names = [m.name for m in v]
        if len(names) != len(set(names)):
            raise ValueError("Model names must be unique")

        return v

    def model(self, name: str) -> ModelConfig:
        for m in self.models:
            if m.name == name:
                return m
        raise ConfigError(f"Model '{name}' is not configured; configured: {[m.name for m in self.models]}")

    def select_models(self, names: List[str]) -> "Config":
        """Return a copy restricted to the given model names (the --models filter)."""
        unknown = [n for n in names if n not in MODEL_NAMES]
        if unknown:
            raise ConfigError(f"Unknown model names {unknown}; expected a subset of {list(MODEL_NAMES)}")
        missing = [n for n in names if n not in {m.name for m in self.models}]
        if missing:
            raise ConfigError(f"Models {missing} are not configured")
        kept = [m for m in self.models if m.name in names]
        return self.model_copy(update={"models": kept})


def load_config(config_path: str) -> Config:
    """Load and validate configuration from YAML file."""
    import yaml

    if not os.path.exists(config_path):
        raise FileNotFoundError(f"Configuration file not found: {config_path}")

    with open(config_path, 'r') as f:
        raw_config = yaml.safe_load(f) or {}

    # Apply environment variable overrides
    if env_log_level := os.getenv('LOG_LEVEL'):
        raw_config.setdefault('global', {})['log_level'] = env_log_level

    if env_seed := os.getenv('COUNTESN_SEED'):
        try:
            raw_config.setdefault('global', {})['seed'] = int(env_seed)
        except ValueError:
            raise ConfigError(f"COUNTESN_SEED must be an integer, got '{env_seed}'")

    try:
        return Config(**raw_config)
    except Exception as e:
        raise ConfigError(f"Configuration validation failed: {e}")
