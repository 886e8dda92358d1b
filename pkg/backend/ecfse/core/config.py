# Configuration settings for ecfse
from functools import lru_cache
from typing import Literal

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Estimator settings, overridable through ECFSE_* environment variables"""

    model_config = SettingsConfigDict(
        env_prefix="ECFSE_", env_file=".env", case_sensitive=False, extra="ignore"
    )

    # Reproducibility
    seed: int = 0

    # Estimator
    g_pmu: float = Field(default=100.0, gt=0)  # p.u., same for all PMU conductances
    weight_cap: float = Field(default=1e12, gt=0)
    pf_sine_floor: float = Field(default=1e-6, gt=0)
    pmu_mode: Literal["flow", "injection"] = "flow"

    # Measurement standard deviations (relative)
    rtu_v_rel: float = Field(default=0.004, gt=0)
    rtu_i_rel: float = Field(default=0.004, gt=0)
    rtu_pf_rel: float = Field(default=0.005, gt=0)  # relative sigma of the power-factor angle
    pmu_v_rel: float = Field(default=0.0002, gt=0)
    pmu_i_rel: float = Field(default=0.0002, gt=0)
    current_floor: float = Field(default=0.01, gt=0)  # p.u., magnitude floor for sigma
    rtu_min_current: float = Field(default=1e-9, gt=0)
    noise: Literal["uniform", "gaussian", "none"] = "uniform"

    # Power flow oracle
    pf_tolerance: float = Field(default=1e-8, gt=0)
    pf_max_iter: int = Field(default=30, ge=1)

    # Monte Carlo
    trials: int = Field(default=100, ge=1)
    jobs: int = Field(default=1, ge=1)

    # Logging
    log_level: str = "INFO"


@lru_cache()
def get_settings() -> Settings:
    """Get cached settings instance"""
    return Settings()
