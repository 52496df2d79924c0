# core/correlation.py
"""Descriptores RGBD a 1/8 de resolución, volumen de correlación 4D y búsqueda guiada por flujo.

Los codificadores aprendidos se sustituyen por un descriptor clásico determinista; cualquier
extractor que devuelva un FeatureMap normalizado puede ocupar su lugar (ver FeatureExtractor).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Protocol

import numpy as np

from core.errors import DimensionMismatch
from core.flowfield import FlowField
from core.geometry import Intrinsics

logger = logging.getLogger(__name__)

CELL = 8
CONTRAST_FLOOR = 0.25
MIN_VALID_FRACTION = 0.25
FLAT_NORMAL_COS = np.cos(np.radians(20.0))
DEPTH_CONTEXT_GAIN = 10.0
GEOMETRY_WEIGHT = 0.4  # peso de normales + contexto frente a la intensidad antes de renormalizar
VOLUME_MAGIC = b"SCC2"


# ============================
# Tipos
# ============================
@dataclass(frozen=True, eq=False)
class FeatureMap:
    data: np.ndarray  # (h, w, C)

    @property
    def shape(self):
        return self.data.shape[:2]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True, eq=False)
class CorrelationPyramid:
    levels: List[np.ndarray]  # nivel l: (h, w, h_l, w_l)

    @property
    def source_shape(self):
        return self.levels[0].shape[:2]


@dataclass(frozen=True, eq=False)
class LookupWindow:
    values: np.ndarray  # (h, w, L, 2r+1, 2r+1)
    radius: int

    def level0(self) -> np.ndarray:
        return self.values[:, :, 0]

    def as_features(self) -> np.ndarray:
        """(h, w, L·(2r+1)²) para consumidores recurrentes"""
        h, w = self.values.shape[:2]
        return self.values.reshape(h, w, -1)


class FeatureExtractor(Protocol):
    def __call__(self, rgb: np.ndarray, depth: np.ndarray, k: Intrinsics) -> FeatureMap: ...


# ============================
# Descriptores
# ============================
def _check_grid(rgb: np.ndarray, depth: np.ndarray, k: Intrinsics):
    if rgb.shape != depth.shape:
        raise DimensionMismatch(f"imagen {rgb.shape} y profundidad {depth.shape} difieren")
    if depth.shape != (k.height, k.width):
        raise DimensionMismatch(f"profundidad {depth.shape} no coincide con intrínsecos {(k.height, k.width)}")
    if depth.shape[0] % CELL or depth.shape[1] % CELL:
        raise DimensionMismatch(f"el tamaño {depth.shape} no es múltiplo de {CELL}")


def _cells(grid: np.ndarray) -> np.ndarray:
    """(H, W, ...) -> (h, w, 8, 8, ...)"""
    H, W = grid.shape[:2]
    h, w = H // CELL, W // CELL
    out = grid.reshape((h, CELL, w, CELL) + grid.shape[2:])
    return np.moveaxis(out, 2, 1)


def intensity_descriptor(rgb: np.ndarray) -> np.ndarray:
    """16 dims: promedios de bloques 2×2 en rejilla 4×4, sin media y normalizados en contraste"""
    cells = _cells(np.asarray(rgb, dtype=np.float64))
    h, w = cells.shape[:2]
    blocks = cells.reshape(h, w, 4, 2, 4, 2).mean(axis=(3, 5)).reshape(h, w, 16)
    blocks = blocks - blocks.mean(axis=-1, keepdims=True)
    norm = np.linalg.norm(blocks, axis=-1, keepdims=True)
    return blocks / np.maximum(norm, CONTRAST_FLOOR)


def _normals(depth: np.ndarray, valid: np.ndarray, k: Intrinsics):
    """Normales locales desde gradientes de profundidad (aproximación local del pinhole)"""
    H, W = depth.shape
    zu = np.zeros_like(depth)
    zv = np.zeros_like(depth)
    ok = np.zeros_like(valid)
    zu[:, 1:-1] = 0.5 * (depth[:, 2:] - depth[:, :-2])
    zv[1:-1, :] = 0.5 * (depth[2:, :] - depth[:-2, :])
    ok[1:-1, 1:-1] = (valid[1:-1, 1:-1] & valid[1:-1, 2:] & valid[1:-1, :-2]
                      & valid[2:, 1:-1] & valid[:-2, 1:-1])
    a = depth / k.fx
    b = depth / k.fy
    n = np.stack([b * zu, a * zv, -a * b], axis=-1)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    n = np.where(norm > 0, n / np.where(norm > 0, norm, 1.0), 0.0)
    return n, ok & (norm[..., 0] > 0)


def normal_histogram(depth: np.ndarray, k: Intrinsics) -> np.ndarray:
    """8 dims: bin 0 'plano' (normal hacia la cámara), bins 1..7 por azimut de la normal"""
    depth = np.asarray(depth, dtype=np.float64)
    valid = np.isfinite(depth) & (depth > 0)
    n, ok = _normals(np.where(valid, depth, 0.0), valid, k)
    flat = -n[..., 2] >= FLAT_NORMAL_COS
    azimuth = np.arctan2(n[..., 1], n[..., 0])
    sector = 1 + np.minimum(((azimuth + np.pi) / (2 * np.pi) * 7).astype(int), 6)
    bins = np.where(flat, 0, sector)
    onehot = (bins[..., None] == np.arange(8)) & ok[..., None]
    cells_hist = _cells(onehot.astype(np.float64)).sum(axis=(2, 3))
    cells_valid = _cells(valid.astype(np.float64)).mean(axis=(2, 3))
    hist = cells_hist / float(CELL * CELL)
    hist[cells_valid < MIN_VALID_FRACTION] = 0.0
    return hist


def depth_context(depth: np.ndarray) -> np.ndarray:
    """8 dims de profundidad inversa relativa de la celda y su 4-vecindad"""
    depth = np.asarray(depth, dtype=np.float64)
    valid = np.isfinite(depth) & (depth > 0)
    h, w = depth.shape[0] // CELL, depth.shape[1] // CELL
    out = np.zeros((h, w, 8))
    if not valid.any():
        return out
    z_ref = float(np.median(depth[valid]))
    rho = np.where(valid, z_ref / np.where(valid, depth, 1.0), 0.0)
    cv = _cells(valid.astype(np.float64))
    cr = _cells(rho)
    count = cv.sum(axis=(2, 3))
    has = count > 0
    mean = np.where(has, cr.sum(axis=(2, 3)) / np.maximum(count, 1), 0.0)
    sq = np.where(has, (cr ** 2).sum(axis=(2, 3)) / np.maximum(count, 1), 0.0)
    std = np.sqrt(np.maximum(sq - mean ** 2, 0.0))
    frac = count / float(CELL * CELL)

    padded = np.pad(mean, 1)
    padded_frac = np.pad(frac, 1)
    neighbours = [padded[:-2, 1:-1], padded[2:, 1:-1], padded[1:-1, :-2], padded[1:-1, 2:]]
    nb_frac = (padded_frac[:-2, 1:-1] + padded_frac[2:, 1:-1] + padded_frac[1:-1, :-2] + padded_frac[1:-1, 2:]) / 4
    g = DEPTH_CONTEXT_GAIN
    for idx, nb in enumerate(neighbours):
        out[..., idx] = np.tanh(g * (nb - mean))
    out[..., 4] = np.tanh(g * std)
    out[..., 5] = frac
    out[..., 6] = np.tanh(g * (mean - 1.0))
    out[..., 7] = nb_frac
    out[~has] = 0.0
    return out


def fuse(f_rgb: FeatureMap, f_geo: FeatureMap) -> FeatureMap:
    """Concatenación por canales y renormalización L2 por píxel"""
    if f_rgb.shape != f_geo.shape:
        raise DimensionMismatch(f"mapas de tamaño distinto: {f_rgb.shape} vs {f_geo.shape}")
    data = np.concatenate([f_rgb.data, f_geo.data], axis=-1)
    norm = np.linalg.norm(data, axis=-1, keepdims=True)
    return FeatureMap(np.where(norm > 0, data / np.where(norm > 0, norm, 1.0), 0.0))


def extract_features(rgb: np.ndarray, depth: np.ndarray, k: Intrinsics) -> FeatureMap:
    """Descriptor clásico de 32 dims: intensidad (16) ⊕ normales (8) ⊕ contexto de profundidad (8).

    La parte geométrica se escala por GEOMETRY_WEIGHT antes de fusionar.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    _check_grid(rgb, depth, k)
    f_rgb = FeatureMap(intensity_descriptor(rgb))
    geo = np.concatenate([normal_histogram(depth, k), depth_context(depth)], axis=-1)
    f_geo = FeatureMap(GEOMETRY_WEIGHT * geo)
    return fuse(f_rgb, f_geo)


# ============================
# Volumen de correlación
# ============================
def build_volume(f1: FeatureMap, f2: FeatureMap, levels: int = 4) -> CorrelationPyramid:
    """V[i,j,k,l] = <f1[i,j], f2[k,l]>; cada nivel promedia (k, l) en bloques 2×2"""
    if f1.data.shape != f2.data.shape:
        raise DimensionMismatch(f"mapas de tamaño distinto: {f1.data.shape} vs {f2.data.shape}")
    h, w, C = f1.data.shape
    V = (f1.data.reshape(h * w, C) @ f2.data.reshape(h * w, C).T).reshape(h, w, h, w)
    pyramid = [V]
    for _ in range(1, levels):
        prev = pyramid[-1]
        hl, wl = prev.shape[2] // 2, prev.shape[3] // 2
        if hl == 0 or wl == 0:
            break
        trimmed = prev[:, :, :2 * hl, :2 * wl]
        pyramid.append(trimmed.reshape(h, w, hl, 2, wl, 2).mean(axis=(3, 5)))
    return CorrelationPyramid(pyramid)


def lookup(pyr: CorrelationPyramid, flow: FlowField, radius: int = 4, stride: int = CELL) -> LookupWindow:
    """Muestreo bilineal (bordes recortados) de la ventana (2r+1)² centrada en el destino del flujo.

    `stride` convierte el flujo a píxeles de la rejilla de características (8 para flujo a
    resolución completa, 1 si el flujo ya está en la rejilla).
    """
    h, w = pyr.source_shape
    if flow.shape != (h, w):
        raise DimensionMismatch(f"flujo {flow.shape} y volumen {(h, w)} difieren")
    ii, jj = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    cu = jj + flow.flow[..., 0] / stride
    cv = ii + flow.flow[..., 1] / stride
    d = np.arange(-radius, radius + 1, dtype=np.float64)
    K = len(d)
    src = np.arange(h * w).reshape(h, w)[..., None, None]
    out = np.zeros((h, w, len(pyr.levels), K, K))
    for level, V in enumerate(pyr.levels):
        hl, wl = V.shape[2:]
        scale = 2.0 ** level
        x = np.clip(cu[..., None, None] / scale + d[None, None, None, :], 0, wl - 1)
        y = np.clip(cv[..., None, None] / scale + d[None, None, :, None], 0, hl - 1)
        x, y = np.broadcast_arrays(x, y)
        x0 = np.floor(x).astype(np.int64)
        y0 = np.floor(y).astype(np.int64)
        x1 = np.minimum(x0 + 1, wl - 1)
        y1 = np.minimum(y0 + 1, hl - 1)
        ax = x - x0
        ay = y - y0
        flat = V.reshape(h * w, hl * wl)
        out[:, :, level] = (
            (1 - ay) * (1 - ax) * flat[src, y0 * wl + x0]
            + (1 - ay) * ax * flat[src, y0 * wl + x1]
            + ay * (1 - ax) * flat[src, y1 * wl + x0]
            + ay * ax * flat[src, y1 * wl + x1]
        )
    return LookupWindow(out, radius)


def dump_volume(path, pyr: CorrelationPyramid) -> None:
    """Volcado de depuración: firma SCC2, nº de niveles y por nivel 4 dims u32 + datos f32"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(VOLUME_MAGIC)
        f.write(np.array([len(pyr.levels)], dtype="<u4").tobytes())
        for V in pyr.levels:
            f.write(np.array(V.shape, dtype="<u4").tobytes())
            f.write(V.astype("<f4").tobytes())
