# config/refine_config.py
"""Modelos pydantic de configuración del refinador y del ruido de inicialización.

El archivo de configuración legible es un KEY=VALUE al estilo .env:

    ITERATIONS=8            RADIUS=4               LEVELS=4
    BACKEND=classical       WEIGHTS_PATH=pesos.scw VOTE=irls | ransac
    HUBER_DELTA_MM=10       IRLS_ITERS=5           RANSAC_ITERS=256
    RANSAC_INLIER_MM=10     PATCH=5                SEED=0
    SUBPIXEL=centroid | softargmax   SOFTARGMAX_TEMPERATURE=0.1
    CORRELATION_GATE=0.2    MATCH_MARGIN=0.05
    MIN_PAIRS=6             CROP_SIZE=256          CROP_PAD=1.4
    HIDDEN_DIM=64           LOSS_GAMMA=0.8         LOSS_ALPHA=0.1
    NOISE_MODE=gaussian | level   NOISE_LEVEL=15   NOISE_SEED=0
    NOISE_SIGMA_ROT_DEG=15,15,15  NOISE_SIGMA_T_MM=15,15,50
"""
import logging
from pathlib import Path
from typing import Literal, Optional, Tuple

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from core.errors import ConfigError, MissingFile

logger = logging.getLogger(__name__)

FEATURE_CELL = 8


class RansacConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    iters: int = Field(256, ge=1)
    inlier_mm: float = Field(10.0, gt=0)


class RefineConfig(BaseModel):
    """Parámetros del bucle recurrente, del backend clásico/neuronal y del voto global"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    iterations: int = Field(8, ge=1)
    radius: int = Field(4, ge=1)
    levels: int = Field(4, ge=1)
    backend: Literal["classical", "neural"] = "classical"
    weights_path: Optional[str] = None
    vote: Literal["irls", "ransac"] = "irls"
    huber_delta_mm: float = Field(10.0, gt=0)
    irls_iters: int = Field(5, ge=0)
    ransac: RansacConfig = RansacConfig()
    patch: int = 5
    seed: int = Field(0, ge=0)
    subpixel: Literal["centroid", "softargmax"] = "centroid"
    softargmax_temperature: float = Field(0.1, gt=0)
    correlation_gate: float = 0.2
    match_margin: float = Field(0.05, ge=0)
    min_pairs: int = Field(6, ge=3)
    crop_size: int = Field(256, ge=FEATURE_CELL * 4)
    crop_pad: float = Field(1.4, ge=1.0)
    hidden_dim: int = Field(64, ge=1)
    loss_gamma: float = Field(0.8, gt=0)
    loss_alpha: float = Field(0.1, ge=0)

    @field_validator("patch")
    @classmethod
    def _odd_patch(cls, v: int) -> int:
        if v < 3 or v % 2 == 0:
            raise ValueError("patch debe ser impar y >= 3")
        return v

    @field_validator("crop_size")
    @classmethod
    def _crop_multiple(cls, v: int) -> int:
        if v % FEATURE_CELL:
            raise ValueError(f"crop_size debe ser múltiplo de {FEATURE_CELL}")
        return v

    @model_validator(mode="after")
    def _neural_needs_dims(self):
        if self.backend == "neural" and self.hidden_dim < 1:
            raise ValueError("el backend neuronal necesita hidden_dim >= 1")
        return self


class NoiseSpec(BaseModel):
    """Ruido de inicialización: gaussiano por eje o nivel fijo L (grados y mm a la vez)"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    mode: Literal["gaussian", "level"] = "gaussian"
    sigma_rot_deg: Tuple[float, float, float] = (15.0, 15.0, 15.0)
    sigma_t_mm: Tuple[float, float, float] = (15.0, 15.0, 50.0)
    level: float = Field(15.0, gt=0)
    seed: int = Field(0, ge=0)

    @field_validator("sigma_rot_deg", "sigma_t_mm")
    @classmethod
    def _non_negative(cls, v):
        if any(s < 0 for s in v):
            raise ValueError("las desviaciones deben ser >= 0")
        return v


# ============================
# Archivo KEY=VALUE
# ============================
_REFINE_KEYS = {name.upper(): name for name in RefineConfig.model_fields if name != "ransac"}
_RANSAC_KEYS = {"RANSAC_ITERS": "iters", "RANSAC_INLIER_MM": "inlier_mm"}
_NOISE_KEYS = {
    "NOISE_MODE": "mode",
    "NOISE_SIGMA_ROT_DEG": "sigma_rot_deg",
    "NOISE_SIGMA_T_MM": "sigma_t_mm",
    "NOISE_LEVEL": "level",
    "NOISE_SEED": "seed",
}


def _triple(value: str):
    parts = [p for p in value.replace(" ", "").split(",") if p]
    return tuple(float(p) for p in parts)


def load_config_file(path) -> Tuple[RefineConfig, NoiseSpec]:
    """Lee un archivo KEY=VALUE y devuelve (RefineConfig, NoiseSpec)"""
    path = Path(path)
    if not path.exists():
        raise MissingFile(path)
    values = dotenv_values(path)
    refine, ransac, noise = {}, {}, {}
    for key, value in values.items():
        key_u = key.strip().upper()
        if value is None:
            raise ConfigError(f"{path}: la clave {key_u} no tiene valor")
        if key_u in _REFINE_KEYS:
            refine[_REFINE_KEYS[key_u]] = value
        elif key_u in _RANSAC_KEYS:
            ransac[_RANSAC_KEYS[key_u]] = value
        elif key_u in _NOISE_KEYS:
            field = _NOISE_KEYS[key_u]
            try:
                noise[field] = _triple(value) if field.startswith("sigma") else value
            except ValueError:
                raise ConfigError(f"{path}: valor inválido para {key_u}: {value}")
        else:
            raise ConfigError(f"{path}: clave desconocida {key_u}")
    try:
        if ransac:
            refine["ransac"] = RansacConfig(**ransac)
        cfg = RefineConfig(**refine)
        spec = NoiseSpec(**noise)
    except ValidationError as e:
        raise ConfigError(f"{path}: {e.errors()[0]['loc']} {e.errors()[0]['msg']}")
    logger.info(f"Configuración cargada de {path}: backend={cfg.backend}, N={cfg.iterations}, voto={cfg.vote}")
    return cfg, spec
