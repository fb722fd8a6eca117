import json
import math
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from medimp.exceptions import ConfigError

PROMPT_VARIABLES = ("GFR", "Exam", "Creat", "D.A.")


class Settings(BaseSettings):
    SEED: int | None = None
    LOG_LEVEL: str = "INFO"

    model_config = SettingsConfigDict(env_prefix="MEDIMP_", env_file=".env", extra="ignore")


def get_settings() -> Settings:
    return Settings()


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class CohortConfig(_Section):
    n_subjects: int = Field(105, ge=1)
    # train / val / test
    split_fractions: tuple[float, float, float] = (72 / 105, 5 / 105, 28 / 105)
    volume_shape: tuple[int, int, int] = (16, 32, 32)  # (Nz, Ny, Nx)
    spacing: tuple[float, float, float] = (2.2, 0.86, 0.86)
    missing_rate: float = Field(0.1, ge=0.0, lt=1.0)
    signal_strength: float = Field(1.0, ge=0.0, le=1.0)
    noise_amplitude: float = Field(0.05, ge=0.0)

    gfr_floor: float = Field(20.0, gt=0.0)
    gfr_span: float = Field(70.0, ge=0.0)
    gfr_noise: float = Field(3.0, ge=0.0)
    gfr_noise_clip: float = Field(10.0, ge=0.0)

    creat_healthy: float = Field(80.0, gt=0.0)
    creat_impaired: float = Field(140.0, gt=0.0)
    creat_drift_per_year: float = 12.0
    creat_noise: float = Field(6.0, ge=0.0)
    creat_early_excess: float = 60.0
    creat_early_days: float = Field(30.0, gt=0.0)
    follow_up_days: int = Field(1825, gt=0)
    sample_interval_days: tuple[int, int] = (20, 45)

    donor_age_range: tuple[float, float] = (18.0, 75.0)

    ellipsoid_intensity: tuple[float, float] = (0.3, 0.6)  # base, gain per unit of health
    ellipsoid_radius: tuple[float, float] = (0.35, 0.25)  # fraction of half-extent
    texture_amplitude: float = Field(0.15, ge=0.0)

    @field_validator("split_fractions")
    @classmethod
    def _fractions_sum_to_one(cls, value):
        if any(f < 0 for f in value) or not math.isclose(sum(value), 1.0, abs_tol=1e-9):
            raise ValueError(f"split fractions must be non-negative and sum to 1, got {value}")
        return value

    @field_validator("donor_age_range")
    @classmethod
    def _age_range(cls, value):
        lo, hi = value
        if not 0.0 <= lo < hi <= 120.0:
            raise ValueError(f"donor age range must lie within [0, 120], got {value}")
        return value

    @field_validator("sample_interval_days")
    @classmethod
    def _interval(cls, value):
        lo, hi = value
        if not 1 <= lo <= hi:
            raise ValueError(f"blood-test interval must satisfy 1 <= lo <= hi, got {value}")
        return value

    @model_validator(mode="after")
    def _gfr_stays_positive(self):
        if self.gfr_noise_clip >= self.gfr_floor:
            raise ValueError(f"gfr_noise_clip ({self.gfr_noise_clip}) must be below gfr_floor ({self.gfr_floor})")
        return self


class PromptConfig(_Section):
    rules_path: Path | None = None
    bank_path: Path | None = None
    variables: tuple[str, ...] = PROMPT_VARIABLES
    n_augmentations: int = Field(10, ge=1)
    resample_per_epoch: bool = True
    max_len: int = Field(64, ge=3)

    @field_validator("rules_path", "bank_path")
    @classmethod
    def _must_exist(cls, value):
        if value is not None and not Path(value).is_file():
            raise ValueError(f"file not found: {value}")
        return value

    @field_validator("variables")
    @classmethod
    def _known_variables(cls, value):
        if not value:
            raise ValueError("at least one prompt variable is required")
        unknown = set(value) - set(PROMPT_VARIABLES)
        if unknown:
            raise ValueError(f"unknown prompt variables {sorted(unknown)}; expected a subset of {PROMPT_VARIABLES}")
        return tuple(v for v in PROMPT_VARIABLES if v in value)


class ImageEncoderConfig(_Section):
    input_shape: tuple[int, int, int] = (16, 32, 32)
    stem_stride: int = Field(2, ge=1)
    widths: tuple[int, ...] = (16, 32, 64)
    blocks: tuple[int, ...] = (1, 1, 1)
    embed_dim: int = Field(64, ge=1)
    pool_heads: int = Field(4, ge=1)
    activation: Literal["relu", "gelu"] = "relu"

    @model_validator(mode="after")
    def _check_stages(self):
        if not self.widths:
            raise ValueError("image encoder needs at least one stage")
        if len(self.widths) != len(self.blocks):
            raise ValueError(f"widths {self.widths} and blocks {self.blocks} must have the same length")
        if any(b < 1 for b in self.blocks):
            raise ValueError(f"every stage needs at least one block, got {self.blocks}")
        if self.embed_dim % self.pool_heads or self.widths[-1] % self.pool_heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} and last width {self.widths[-1]} "
                f"must be divisible by pool_heads {self.pool_heads}"
            )
        return self


class TextEncoderConfig(_Section):
    layers: int = Field(4, ge=1)
    width: int = Field(64, ge=1)
    heads: int = Field(4, ge=1)
    ff_width: int = Field(128, ge=1)
    max_len: int = Field(64, ge=3)
    embed_dim: int = Field(64, ge=1)

    @model_validator(mode="after")
    def _check_heads(self):
        if self.width % self.heads:
            raise ValueError(f"width {self.width} must be divisible by heads {self.heads}")
        return self


class FreezePolicy(_Section):
    mode: Literal["first_k", "ln_only", "none"] = "first_k"
    k: int = Field(0, ge=0)


class TrainConfig(_Section):
    batch_size: int = Field(16, ge=2)
    epochs: int = Field(30, ge=1)
    warmup_epochs: int = Field(6, ge=0)
    base_lr: float = Field(1e-3, gt=0.0)
    weight_decay: float = Field(0.02, ge=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0.0)
    seed: int | None = None
    # None: freeze the first L-1 text blocks
    freeze: FreezePolicy | None = None
    prompt_mode: Literal["augmented", "manual"] = "augmented"
    init_temperature: float = Field(0.07, gt=0.0)
    max_logit_scale: float = Field(100.0, gt=1.0)

    @model_validator(mode="after")
    def _check_warmup(self):
        if self.warmup_epochs >= self.epochs:
            raise ValueError(f"warmup_epochs ({self.warmup_epochs}) must be smaller than epochs ({self.epochs})")
        return self


class DownstreamConfig(_Section):
    horizons_years: tuple[int, ...] = (2, 3, 4)
    window_days: float = Field(90.0, gt=0.0)
    threshold: float = Field(110.0, gt=0.0)
    f1_threshold: float = Field(0.5, gt=0.0, lt=1.0)
    heads: int = Field(2, ge=1)
    ff_width: int = Field(128, ge=1)
    epochs: int = Field(50, ge=1)
    lr: float = Field(1e-3, gt=0.0)
    weight_decay: float = Field(0.02, ge=0.0)
    cv_folds: int = Field(10, ge=2)
    shuffles: int = Field(20, ge=1)


class PlotConfig(_Section):
    perplexity: float = Field(15.0, gt=0.0)
    iterations: int = Field(500, ge=4)
    learning_rate: float = Field(200.0, gt=0.0)
    augmented_per_exam: int = Field(1, ge=0)
    variables: tuple[Literal["exam", "gfr", "creat", "donor_age"], ...] = ("exam", "gfr", "creat", "donor_age")


class RunConfig(_Section):
    seed: int = 0
    output_dir: Path = Path("runs/default")
    cohort: CohortConfig = CohortConfig()
    prompts: PromptConfig = PromptConfig()
    image_encoder: ImageEncoderConfig = ImageEncoderConfig()
    text_encoder: TextEncoderConfig = TextEncoderConfig()
    train: TrainConfig = TrainConfig()
    downstream: DownstreamConfig = DownstreamConfig()
    plot: PlotConfig = PlotConfig()

    @model_validator(mode="after")
    def _check_consistency(self):
        if self.text_encoder.max_len != self.prompts.max_len:
            raise ValueError(
                f"text_encoder.max_len ({self.text_encoder.max_len}) must equal prompts.max_len ({self.prompts.max_len})"
            )
        if tuple(self.image_encoder.input_shape) != tuple(self.cohort.volume_shape):
            raise ValueError(
                f"image_encoder.input_shape {self.image_encoder.input_shape} "
                f"must match cohort.volume_shape {self.cohort.volume_shape}"
            )
        policy = self.train.freeze
        if policy is not None and policy.mode == "first_k" and policy.k > self.text_encoder.layers:
            raise ValueError(f"freeze k={policy.k} exceeds text encoder layers {self.text_encoder.layers}")
        return self

    @property
    def freeze_policy(self) -> FreezePolicy:
        if self.train.freeze is not None:
            return self.train.freeze
        return FreezePolicy(mode="first_k", k=self.text_encoder.layers - 1)

    @property
    def train_seed(self) -> int:
        return self.train.seed if self.train.seed is not None else self.seed


def load_run_config(path: str | Path | None = None) -> RunConfig:
    """Load and validate a JSON run configuration; no path means all defaults."""
    if path is None:
        return RunConfig()
    config_path = Path(path)
    if not config_path.is_file():
        raise ConfigError(f"Config file not found: {config_path}")
    try:
        document = json.loads(config_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {config_path} is not valid JSON: {e}")
    try:
        return RunConfig.model_validate(document)
    except ValidationError as e:
        raise ConfigError(f"Invalid config {config_path}: {e}")
