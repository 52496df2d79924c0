# models/neural.py
"""Backend neuronal de inferencia: GRU por píxel + cabeza de twist + cabeza de pesos de voto.

Solo inferencia; los pesos se cargan de un archivo SCW2 o se generan aleatorios para pruebas.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.special import expit

from core.correlation import LookupWindow
from core.errors import MissingFile, ParseError, ShapeMismatch
from core.flowfield import DenseSE3Field, field_to_twist
from core.geometry import exp_twists
from core.random_streams import stream

logger = logging.getLogger(__name__)

WEIGHTS_MAGIC = b"SCW2"
WEIGHTS_VERSION = 1
TWIST_DIM = 6
GATES = ("z", "r", "h")


# ============================
# Pesos
# ============================
@dataclass(frozen=True, eq=False)
class NeuralWeights:
    """Tensores con nombre: gru.W_{z,r,h} (H, D), gru.U_{z,r,h} (H, H), gru.b_{z,r,h} (H),
    twist_head.W (6, H), twist_head.b (6), pose_head.W (1, H), pose_head.b (1)."""

    tensors: Dict[str, np.ndarray]

    def __post_init__(self):
        tensors = {name: np.asarray(v, dtype=np.float64) for name, v in self.tensors.items()}
        for v in tensors.values():
            v.setflags(write=False)
        object.__setattr__(self, "tensors", tensors)
        self._validate()

    def _validate(self):
        expected = [f"gru.{m}_{g}" for g in GATES for m in ("W", "U", "b")]
        expected += ["twist_head.W", "twist_head.b", "pose_head.W", "pose_head.b"]
        missing = [name for name in expected if name not in self.tensors]
        if missing:
            raise ShapeMismatch(f"faltan tensores: {', '.join(missing)}")
        H, D = self.tensors["gru.W_z"].shape if self.tensors["gru.W_z"].ndim == 2 else (0, 0)
        if H == 0:
            raise ShapeMismatch("gru.W_z debe ser una matriz")
        shapes = {}
        for g in GATES:
            shapes[f"gru.W_{g}"] = (H, D)
            shapes[f"gru.U_{g}"] = (H, H)
            shapes[f"gru.b_{g}"] = (H,)
        shapes.update({
            "twist_head.W": (TWIST_DIM, H), "twist_head.b": (TWIST_DIM,),
            "pose_head.W": (1, H), "pose_head.b": (1,),
        })
        for name, shape in shapes.items():
            if self.tensors[name].shape != shape:
                raise ShapeMismatch(f"{name}: forma {self.tensors[name].shape}, se esperaba {shape}")
            if not np.all(np.isfinite(self.tensors[name])):
                raise ShapeMismatch(f"{name}: contiene valores no finitos")

    @property
    def hidden_dim(self) -> int:
        return self.tensors["gru.W_z"].shape[0]

    @property
    def input_dim(self) -> int:
        return self.tensors["gru.W_z"].shape[1]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @classmethod
    def random(cls, hidden_dim: int = 64, lookup_dim: int = 4 * 81, seed: int = 0, scale: float = 0.1) -> "NeuralWeights":
        """Pesos aleatorios pequeños y finitos; la entrada es lookup_dim + 6 (twist del campo previo)"""
        rng = stream(seed, "neural-weights")
        D, H = lookup_dim + TWIST_DIM, hidden_dim
        tensors = {}
        for g in GATES:
            tensors[f"gru.W_{g}"] = rng.normal(0.0, scale / np.sqrt(D), (H, D))
            tensors[f"gru.U_{g}"] = rng.normal(0.0, scale / np.sqrt(H), (H, H))
            tensors[f"gru.b_{g}"] = np.zeros(H)
        tensors["twist_head.W"] = rng.normal(0.0, scale / np.sqrt(H), (TWIST_DIM, H))
        tensors["twist_head.b"] = np.zeros(TWIST_DIM)
        tensors["pose_head.W"] = rng.normal(0.0, scale / np.sqrt(H), (1, H))
        tensors["pose_head.b"] = np.zeros(1)
        return cls(tensors)


# ============================
# Formato SCW2
# ============================
def save_weights(path, weights: NeuralWeights) -> None:
    """Cabecera: firma, versión u32, nº de tensores u32; por tensor: nombre (u16 + utf-8), rango u8, dims u32, datos f32"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<II", WEIGHTS_VERSION, len(weights.tensors)))
        for name in sorted(weights.tensors):
            data = weights.tensors[name]
            raw_name = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw_name)))
            f.write(raw_name)
            f.write(struct.pack("<B", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.astype("<f4").tobytes())


def load_weights(path) -> NeuralWeights:
    path = Path(path)
    if not path.exists():
        raise MissingFile(path)
    data = path.read_bytes()
    if data[:4] != WEIGHTS_MAGIC:
        raise ParseError("firma SCW2 ausente", path=str(path), offset=0)
    offset = 4
    try:
        version, count = struct.unpack_from("<II", data, offset)
        offset += 8
        if version != WEIGHTS_VERSION:
            raise ParseError(f"versión SCW2 no soportada: {version}", path=str(path), offset=4)
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, offset)
            offset += 2
            name = data[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", data, offset)
            offset += 1
            dims = struct.unpack_from(f"<{rank}I", data, offset)
            offset += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            values = np.frombuffer(data, dtype="<f4", count=size, offset=offset)
            offset += 4 * size
            tensors[name] = values.astype(np.float64).reshape(dims)
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise ParseError(f"archivo SCW2 truncado o corrupto ({e})", path=str(path), offset=offset)
    weights = NeuralWeights(tensors)
    logger.info(f"Pesos neuronales cargados de {path}: H={weights.hidden_dim}, D={weights.input_dim}")
    return weights


# ============================
# Celda GRU e inferencia
# ============================
def gru_cell(x: np.ndarray, h: np.ndarray, weights: NeuralWeights) -> np.ndarray:
    """z = σ(W_z x + U_z h + b_z); r = σ(W_r x + U_r h + b_r);
    h̃ = tanh(W_h x + U_h (r ⊙ h) + b_h); h' = (1 − z) ⊙ h + z ⊙ h̃"""
    z = expit(x @ weights["gru.W_z"].T + h @ weights["gru.U_z"].T + weights["gru.b_z"])
    r = expit(x @ weights["gru.W_r"].T + h @ weights["gru.U_r"].T + weights["gru.b_r"])
    h_tilde = np.tanh(x @ weights["gru.W_h"].T + (r * h) @ weights["gru.U_h"].T + weights["gru.b_h"])
    return (1.0 - z) * h + z * h_tilde


def initial_hidden(height: int, width: int, weights: NeuralWeights) -> np.ndarray:
    return np.zeros((height, width, weights.hidden_dim))


def retract(field: DenseSE3Field, delta: np.ndarray) -> DenseSE3Field:
    """T' = exp(δ) · T por celda; δ = (tau, theta) en (H, W, 6)"""
    H, W = field.shape
    R_d, t_d = exp_twists(delta[..., :3].reshape(-1, 3), delta[..., 3:].reshape(-1, 3))
    R_d = R_d.reshape(H, W, 3, 3)
    t_d = t_d.reshape(H, W, 3)
    R = np.einsum("hwij,hwjk->hwik", R_d, field.R)
    t = np.einsum("hwij,hwj->hwi", R_d, field.t) + t_d
    return DenseSE3Field(R, t, field.valid.copy())


def neural_step(window: LookupWindow, field_prev: DenseSE3Field, hidden: np.ndarray,
                weights: NeuralWeights) -> Tuple[DenseSE3Field, np.ndarray, np.ndarray]:
    """Un paso recurrente; devuelve (campo T'_k, estado oculto, pesos de voto por celda)"""
    features = window.as_features()
    twists = field_to_twist(field_prev).as_array()
    x = np.concatenate([features, twists], axis=-1)
    if x.shape[-1] != weights.input_dim:
        raise ShapeMismatch(f"entrada de {x.shape[-1]} dims, los pesos esperan {weights.input_dim}")
    if hidden.shape != field_prev.shape + (weights.hidden_dim,):
        raise ShapeMismatch(f"estado oculto {hidden.shape} incompatible con {field_prev.shape} × {weights.hidden_dim}")
    h_next = gru_cell(x, hidden, weights)
    delta = h_next @ weights["twist_head.W"].T + weights["twist_head.b"]
    confidence = expit(h_next @ weights["pose_head.W"].T + weights["pose_head.b"])[..., 0]
    return retract(field_prev, delta), h_next, confidence


class NeuralBackend:
    """Estado recurrente de una llamada a refine; no se comparte entre llamadas"""

    def __init__(self, weights: NeuralWeights, height: int, width: int):
        self.weights = weights
        self.hidden = initial_hidden(height, width, weights)
        self.vote_weights: Optional[np.ndarray] = None

    def estimate(self, window: LookupWindow, field_prev: DenseSE3Field) -> DenseSE3Field:
        field, self.hidden, self.vote_weights = neural_step(window, field_prev, self.hidden, self.weights)
        return field
