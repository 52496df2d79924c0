# core/refiner.py
"""Bucle recurrente de refinamiento de pose por render-and-compare.

Cada iteración busca en el volumen de correlación alrededor del flujo inducido por la pose
actual, estima un campo SE(3) denso (backend clásico o neuronal), vota una única pose global
y reinicia el campo y el flujo a partir de esa pose.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field as dc_field
from typing import List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from config.refine_config import FEATURE_CELL, RansacConfig, RefineConfig
from core.correlation import LookupWindow, build_volume, extract_features, lookup
from core.errors import (
    DegenerateConfiguration, NoConsensus, PoseRefineError, TooFewCells,
    TooFewCorrespondences, TooFewValidPixels,
)
from core.flowfield import (
    DenseSE3Field, FlowField, field_dispersion, field_from_residual, pose_induced_flow,
)
from core.geometry import (
    Intrinsics, Pose, PoseResidual9, apply_residual, decode_residual, encode_residual,
    kabsch, pose_residual,
)
from core.mesh_render import (
    PointCloud, RenderOutput, TriMesh, crop_camera, lift, render, resample_to_camera,
)
from core.random_streams import stream

logger = logging.getLogger(__name__)

MIN_VALID_PIXELS = 100


# ============================
# Tipos de la traza
# ============================
@dataclass
class IterationDiagnostics:
    inlier_fraction: float = 0.0
    mean_correlation: float = 0.0
    field_dispersion: float = 0.0
    valid_cells: int = 0
    skipped: bool = False
    error: str = ""


@dataclass(eq=False)
class IterationRecord:
    k: int
    pose: Pose                      # P_k
    residual: Pose                  # ΔP_k, con apply(ΔP_k, P_{k−1}) = P_k
    residual9: Optional[PoseResidual9]
    flow: FlowField                 # F_k en píxeles de la rejilla de características
    field: DenseSE3Field            # T'_k estimado por el backend (T_0 en k = 0)
    matches: Optional[FlowField] = None
    diagnostics: IterationDiagnostics = dc_field(default_factory=IterationDiagnostics)


@dataclass(eq=False)
class RefineTrace:
    records: List[IterationRecord]
    crop: Intrinsics
    grid: Intrinsics
    reference: RenderOutput        # render de P_0 en la rejilla de características
    elapsed_s: float = 0.0

    @property
    def initial_pose(self) -> Pose:
        return self.records[0].pose

    @property
    def final_pose(self) -> Pose:
        return self.records[-1].pose

    @property
    def poses(self) -> List[Pose]:
        return [r.pose for r in self.records]

    @property
    def initial_matches(self) -> Optional[FlowField]:
        """Correspondencias de la iteración 1, buscadas alrededor de F_0 = 0 (solo la pose inicial).

        Es lo que ve un estimador de un solo paso; se guardan en records[1] porque la iteración 0
        no busca nada.
        """
        return self.records[1].matches if len(self.records) > 1 else None

    def __len__(self):
        return len(self.records)


# ============================
# Kabsch por lotes y muestreo de profundidad
# ============================
def _kabsch_batch(X: np.ndarray, Y: np.ndarray, w: np.ndarray):
    """Kabsch ponderado sobre lotes (n, P, 3); devuelve R (n,3,3), t (n,3) y la máscara de lotes no degenerados"""
    wsum = w.sum(axis=-1)
    ok = wsum > 0
    wn = w / np.where(ok, wsum, 1.0)[:, None]
    cx = np.einsum("np,npi->ni", wn, X)
    cy = np.einsum("np,npi->ni", wn, Y)
    Hm = np.einsum("npi,npj->nij", (X - cx[:, None]) * wn[..., None], Y - cy[:, None])
    U, S, Vt = np.linalg.svd(Hm)
    ok &= (S[:, 0] > 1e-12) & (S[:, 1] > 1e-9 * S[:, 0])
    V = np.swapaxes(Vt, 1, 2)
    Ut = np.swapaxes(U, 1, 2)
    d = np.sign(np.linalg.det(V @ Ut))
    D = np.broadcast_to(np.eye(3), Hm.shape).copy()
    D[:, 2, 2] = np.where(d == 0, 1.0, d)
    R = V @ D @ Ut
    t = cy - np.einsum("nij,nj->ni", R, cx)
    return R, t, ok


def sample_lifted(depth: np.ndarray, k: Intrinsics, u: np.ndarray, v: np.ndarray):
    """Interpolación bilineal de profundidad en (u, v) continuos y elevación por ese rayo.

    Solo cuentan las esquinas con peso no nulo; todas deben tener profundidad válida.
    """
    depth = np.asarray(depth, dtype=np.float64)
    H, W = depth.shape
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    x = u - 0.5
    y = v - 0.5
    finite = np.isfinite(x) & np.isfinite(y)
    x = np.where(finite, x, -1.0)
    y = np.where(finite, y, -1.0)
    inside = finite & (x >= 0) & (x <= W - 1) & (y >= 0) & (y <= H - 1)
    x = np.clip(x, 0, W - 1)
    y = np.clip(y, 0, H - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    ax = x - x0
    ay = y - y0
    valid = np.isfinite(depth) & (depth > 0)
    z = np.where(valid, depth, 0.0)
    ok = inside.copy()
    acc = np.zeros_like(x)
    for yy, xx, wgt in ((y0, x0, (1 - ay) * (1 - ax)), (y0, x1, (1 - ay) * ax),
                        (y1, x0, ay * (1 - ax)), (y1, x1, ay * ax)):
        ok &= (wgt == 0) | valid[yy, xx]
        acc += wgt * z[yy, xx]
    zs = np.where(ok, acc, 0.0)
    points = np.stack([(u - k.cx) * zs / k.fx, (v - k.cy) * zs / k.fy, zs], axis=-1)
    points = np.where(ok[..., None], points, 0.0)
    return points, ok & (zs > 0)


# ============================
# Backend clásico
# ============================
def _three_point(lo: np.ndarray, mid: np.ndarray, hi: np.ndarray, ok: np.ndarray) -> np.ndarray:
    """Centroide de tres muestras sobre el menor de los dos vecinos; en [-0.5, 0.5] si mid es el pico"""
    floor = np.minimum(lo, hi)
    den = mid + lo + hi - 3.0 * floor
    good = ok & (den > 0)
    return np.where(good, (hi - lo) / np.where(good, den, 1.0), 0.0)


def _localize(W: np.ndarray, margin: float, subpixel: str, temperature: float):
    """Pico de cada ventana (h, w, K, K), prueba de unicidad y posición sub-celda.

    Devuelve (dy, dx) respecto al centro de la ventana, el valor del pico y si es único: el pico
    supera en `margin` a toda celda fuera de su 3×3. Sub-celda: "centroid" usa la fila y la columna
    del pico (sin corrección en un eje cuyo vecino cae fuera de la ventana); "softargmax" pondera
    el 3×3 por exp(c / temperature).
    """
    h, w, K, _ = W.shape
    r = K // 2
    flat = W.reshape(h, w, K * K)
    peak_idx = np.argmax(flat, axis=-1)
    peak = np.take_along_axis(flat, peak_idx[..., None], axis=-1)[..., 0]
    py, px = peak_idx // K, peak_idx % K

    cells = np.arange(K)
    near = ((np.abs(cells[:, None] - py[..., None, None]) <= 1)
            & (np.abs(cells[None, :] - px[..., None, None]) <= 1))
    rival = np.where(near, -np.inf, W).max(axis=(-2, -1))
    unique = peak - rival >= margin

    ii = np.arange(h)[:, None]
    jj = np.arange(w)[None, :]
    if subpixel == "softargmax":
        d = np.arange(-1, 2)
        ys, xs = np.broadcast_arrays(py[..., None, None] + d[:, None], px[..., None, None] + d[None, :])
        inside = (ys >= 0) & (ys < K) & (xs >= 0) & (xs < K)
        vals = W[ii[..., None, None], jj[..., None, None], np.clip(ys, 0, K - 1), np.clip(xs, 0, K - 1)]
        logits = np.where(inside, vals / temperature, -np.inf)
        p = np.exp(logits - logits.max(axis=(-2, -1), keepdims=True))
        total = p.sum(axis=(-2, -1))
        return ((p * (ys - r)).sum(axis=(-2, -1)) / total, (p * (xs - r)).sum(axis=(-2, -1)) / total,
                peak, unique)

    def at(y, x):
        return W[ii, jj, np.clip(y, 0, K - 1), np.clip(x, 0, K - 1)]

    sx = _three_point(at(py, px - 1), peak, at(py, px + 1), (px > 0) & (px < K - 1))
    sy = _three_point(at(py - 1, px), peak, at(py + 1, px), (py > 0) & (py < K - 1))
    return py - r + sy, px - r + sx, peak, unique


def match_flow(window: LookupWindow, flow_prev: FlowField, source_valid: np.ndarray,
               cfg: RefineConfig) -> Tuple[FlowField, np.ndarray]:
    """Flujo de correspondencia (Δu, Δv) en la rejilla y la correlación del pico por celda.

    El pico de la ventana de nivel 0 debe ser único (supera en `match_margin` a todo lo que queda
    fuera de su 3×3); el desplazamiento sub-celda sale de ese 3×3 según `cfg.subpixel`. Si el
    pico del nivel 1 cae más allá del radio del nivel 0 y el nivel 0 no encontró nada único, se
    usa esa correspondencia gruesa; si ambos niveles dan un pico único pero discrepan, la celda
    se invalida. Δz no se estima.
    """
    values = window.values
    r = window.radius
    mode, T = cfg.subpixel, cfg.softargmax_temperature
    gate = cfg.correlation_gate
    dy, dx, score, unique = _localize(values[:, :, 0], cfg.match_margin, mode, T)
    ok = unique & (score >= gate)

    if values.shape[2] > 1:
        cy, cx, coarse_score, coarse_unique = _localize(values[:, :, 1], cfg.match_margin, mode, T)
        # el bloque l del nivel 1 promedia las celdas 2l y 2l+1: su centro está en 2l + 0.5
        cy, cx = 2.0 * cy + 0.5, 2.0 * cx + 0.5
        far = coarse_unique & (coarse_score >= gate) & (np.maximum(np.abs(cy), np.abs(cx)) > r)
        use_coarse = far & ~ok
        ok = (ok & ~far) | use_coarse
        dy = np.where(use_coarse, cy, dy)
        dx = np.where(use_coarse, cx, dx)
        score = np.where(use_coarse, coarse_score, score)

    ok &= np.asarray(source_valid, dtype=bool)
    out = np.zeros(flow_prev.flow.shape)
    out[..., 0] = np.where(ok, flow_prev.flow[..., 0] + dx, 0.0)
    out[..., 1] = np.where(ok, flow_prev.flow[..., 1] + dy, 0.0)
    return FlowField(out, ok), score


def _to_camera(u: np.ndarray, v: np.ndarray, k_from: Intrinsics, k_to: Intrinsics):
    """Mismo rayo en otra cámara del mismo marco (solo cambian escala y desplazamiento)"""
    return (u - k_from.cx) * k_to.fx / k_from.fx + k_to.cx, (v - k_from.cy) * k_to.fy / k_from.fy + k_to.cy


def correspondence_pairs(matches: FlowField, cloud1: PointCloud, depth2: np.ndarray, k: Intrinsics,
                         depth_k: Optional[Intrinsics] = None):
    """Pares 3D (X1, X2) de cada píxel fuente con su destino; X2 por muestreo bilineal de depth2.

    Sin `depth_k`, depth2 está en la rejilla `k` de cloud1; con él, en esa otra cámara (por
    ejemplo la imagen completa) y el destino se traslada a sus píxeles antes de muestrear.
    """
    uv = cloud1.uv
    u = uv[..., 0] + matches.flow[..., 0]
    v = uv[..., 1] + matches.flow[..., 1]
    if depth_k is None:
        depth_k = k
    else:
        u, v = _to_camera(u, v, k, depth_k)
    X2, ok2 = sample_lifted(depth2, depth_k, u, v)
    valid = matches.valid & cloud1.valid & ok2
    return cloud1.points, X2, valid


def classical_field(window: LookupWindow, cloud1: PointCloud, depth2: np.ndarray, k: Intrinsics,
                    cfg: RefineConfig, flow_prev: Optional[FlowField] = None,
                    depth_k: Optional[Intrinsics] = None):
    """Campo SE(3) denso: Kabsch local sobre los pares 3D de la ventana `patch` de cada celda.

    Devuelve (campo, correspondencias, correlación del pico). `depth2` es la profundidad
    observada, en la rejilla de `cloud1` o en la cámara `depth_k`.
    """
    h, w = cloud1.shape
    if flow_prev is None:
        flow_prev = FlowField.zeros(h, w)
    matches, score = match_flow(window, flow_prev, cloud1.valid, cfg)
    X1, X2, pv = correspondence_pairs(matches, cloud1, depth2, k, depth_k)

    P = cfg.patch
    pad = P // 2
    X1p = np.pad(np.where(pv[..., None], X1, 0.0), ((pad, pad), (pad, pad), (0, 0)))
    X2p = np.pad(np.where(pv[..., None], X2, 0.0), ((pad, pad), (pad, pad), (0, 0)))
    pvp = np.pad(pv, pad).astype(np.float64)
    nb1 = sliding_window_view(X1p, (P, P), axis=(0, 1)).reshape(h, w, 3, P * P).swapaxes(-1, -2)
    nb2 = sliding_window_view(X2p, (P, P), axis=(0, 1)).reshape(h, w, 3, P * P).swapaxes(-1, -2)
    nbw = sliding_window_view(pvp, (P, P)).reshape(h, w, P * P)

    field = DenseSE3Field.identity(h, w, valid=np.zeros((h, w), dtype=bool))
    cand = pv & (nbw.sum(axis=-1) >= cfg.min_pairs)
    if cand.any():
        R, t, ok = _kabsch_batch(nb1[cand], nb2[cand], nbw[cand])
        idx = np.argwhere(cand)[ok]
        field.R[idx[:, 0], idx[:, 1]] = R[ok]
        field.t[idx[:, 0], idx[:, 1]] = t[ok]
        field.valid[idx[:, 0], idx[:, 1]] = True
    return field, matches, score


# ============================
# Voto global
# ============================
@dataclass
class VoteDiagnostics:
    inlier_fraction: float
    cells: int


def irls_kabsch(src: np.ndarray, dst: np.ndarray, base_weights: np.ndarray, delta: float, iters: int):
    """Kabsch con pesos de Huber re-estimados; termina con un reajuste sobre los inliers (r <= delta)"""
    A = kabsch(src, dst, base_weights)
    for _ in range(iters):
        r = np.linalg.norm(A.transform(src) - dst, axis=1)
        huber = np.where(r <= delta, 1.0, delta / np.maximum(r, 1e-12))
        A = kabsch(src, dst, base_weights * huber)
    r = np.linalg.norm(A.transform(src) - dst, axis=1)
    inliers = (r <= delta) & (base_weights > 0)
    if inliers.sum() >= 3:
        try:
            A = kabsch(src[inliers], dst[inliers], base_weights[inliers])
            r = np.linalg.norm(A.transform(src) - dst, axis=1)
            inliers = (r <= delta) & (base_weights > 0)
        except DegenerateConfiguration:
            pass
    return A, inliers


def ransac_kabsch(src: np.ndarray, dst: np.ndarray, cfg: RansacConfig, rng: np.random.Generator,
                  weights: Optional[np.ndarray] = None):
    """RANSAC de muestras mínimas de 3 puntos y Kabsch final sobre el consenso"""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    n = len(src)
    if n < 3:
        raise TooFewCorrespondences(f"se necesitan >= 3 correspondencias (hay {n})")
    samples = np.stack([rng.choice(n, 3, replace=False) for _ in range(cfg.iters)])
    R, t, ok = _kabsch_batch(src[samples], dst[samples], np.ones(samples.shape))
    residuals = np.linalg.norm(np.einsum("mij,nj->mni", R, src) + t[:, None] - dst[None], axis=-1)
    counts = np.where(ok, (residuals < cfg.inlier_mm).sum(axis=1), -1)
    best = int(np.argmax(counts))
    if counts[best] < 3:
        raise NoConsensus(f"el mejor consenso tiene {max(int(counts[best]), 0)} inliers")
    inliers = residuals[best] < cfg.inlier_mm
    w = None if weights is None else weights[inliers]
    A = kabsch(src[inliers], dst[inliers], w)
    refined = np.linalg.norm(A.transform(src) - dst, axis=1) < cfg.inlier_mm
    if refined.sum() >= 3 and not np.array_equal(refined, inliers):
        try:
            A = kabsch(src[refined], dst[refined], None if weights is None else weights[refined])
            inliers = refined
        except DegenerateConfiguration:
            pass
    return A, inliers


def vote_global_pose(field: DenseSE3Field, cloud1: PointCloud, cfg: RefineConfig,
                     weights: Optional[np.ndarray] = None,
                     rng: Optional[np.random.Generator] = None) -> Tuple[Pose, VoteDiagnostics]:
    """Una sola transformación rígida a partir de las correspondencias X_i → T_i·X_i del campo"""
    valid = field.valid & cloud1.valid
    if weights is not None:
        valid &= np.asarray(weights) > 0
    n = int(valid.sum())
    if n < 3:
        raise TooFewCells(f"solo {n} celdas válidas en el campo")
    X = cloud1.points[valid]
    Y = np.einsum("nij,nj->ni", field.R[valid], X) + field.t[valid]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)[valid]
    if cfg.vote == "ransac":
        rng = rng if rng is not None else stream(cfg.seed, "vote")
        A, inliers = ransac_kabsch(X, Y, cfg.ransac, rng, weights=None if weights is None else w)
    else:
        A, inliers = irls_kabsch(X, Y, w, cfg.huber_delta_mm, cfg.irls_iters)
    return A, VoteDiagnostics(float(inliers.mean()), n)


# ============================
# Línea base de dos etapas
# ============================
def ransac_kabsch_baseline(flow2d: FlowField, depth1: np.ndarray, depth2: np.ndarray, k: Intrinsics,
                           cfg: RefineConfig, rng: Optional[np.random.Generator] = None,
                           depth_k: Optional[Intrinsics] = None) -> Pose:
    """Eleva ambos extremos del flujo 2D con sus profundidades y ajusta RANSAC + Kabsch.

    `depth_k` como en correspondence_pairs: depth2 puede venir en otra cámara del mismo marco.
    """
    cloud1 = lift(depth1, k)
    X1, X2, valid = correspondence_pairs(flow2d, cloud1, depth2, k, depth_k)
    n = int(valid.sum())
    if n < 3:
        raise TooFewCorrespondences(f"solo {n} píxeles con profundidad válida en ambos extremos")
    rng = rng if rng is not None else stream(cfg.seed, "ransac-baseline")
    A, _ = ransac_kabsch(X1[valid], X2[valid], cfg.ransac, rng)
    return A


# ============================
# Bucle de refinamiento
# ============================
def _to_intensity(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim == 3:
        rgb = rgb.mean(axis=-1)
    if rgb.max(initial=0.0) > 1.0:
        rgb = rgb / 255.0
    return rgb


def _resample_depth(depth: np.ndarray, k_src: Intrinsics, k_dst: Intrinsics) -> np.ndarray:
    """Bilineal donde los cuatro vecinos son válidos, vecino más cercano en los bordes del objeto"""
    depth = np.asarray(depth, dtype=np.float64)
    valid = (np.isfinite(depth) & (depth > 0)).astype(np.float64)
    z = np.where(valid > 0, depth, 0.0)
    smooth = resample_to_camera(z, k_src, k_dst, order=1)
    coverage = resample_to_camera(valid, k_src, k_dst, order=1)
    nearest = resample_to_camera(z, k_src, k_dst, order=0)
    return np.where(coverage > 1.0 - 1e-9, smooth, nearest)


class _ClassicalBackend:
    vote_weights = None

    def __init__(self, cloud1: PointCloud, depth2: np.ndarray, grid: Intrinsics, cfg: RefineConfig,
                 depth_k: Optional[Intrinsics] = None):
        self.cloud1 = cloud1
        self.depth2 = depth2
        self.depth_k = depth_k
        self.grid = grid
        self.cfg = cfg
        self.matches: Optional[FlowField] = None
        self.score: Optional[np.ndarray] = None

    def estimate(self, window: LookupWindow, field_prev: DenseSE3Field, flow_prev: FlowField) -> DenseSE3Field:
        field, self.matches, self.score = classical_field(window, self.cloud1, self.depth2, self.grid,
                                                          self.cfg, flow_prev, self.depth_k)
        return field


class _NeuralAdapter:
    def __init__(self, backend):
        self.backend = backend
        self.matches = None
        self.score = None

    @property
    def vote_weights(self):
        return self.backend.vote_weights

    def estimate(self, window: LookupWindow, field_prev: DenseSE3Field, flow_prev: FlowField) -> DenseSE3Field:
        self.score = window.level0()[:, :, window.radius, window.radius]
        return self.backend.estimate(window, field_prev)


def _make_backend(cfg: RefineConfig, cloud1, depth2, grid, levels: int, weights=None, depth_k=None):
    if cfg.backend == "classical":
        return _ClassicalBackend(cloud1, depth2, grid, cfg, depth_k)
    from models.neural import NeuralBackend, NeuralWeights, load_weights

    if weights is None and cfg.weights_path:
        weights = load_weights(cfg.weights_path)
    if weights is None:
        logger.warning("⚠️ Backend neuronal sin pesos: se usan pesos aleatorios (solo para pruebas)")
        weights = NeuralWeights.random(cfg.hidden_dim, levels * (2 * cfg.radius + 1) ** 2, cfg.seed)
    h, w = cloud1.shape
    return _NeuralAdapter(NeuralBackend(weights, h, w))


def refine(rgb: np.ndarray, depth: np.ndarray, mesh: TriMesh, k: Intrinsics, p_init: Pose,
           cfg: Optional[RefineConfig] = None, weights=None) -> RefineTrace:
    """Refina p_init comparando renders de la malla con la observación RGBD; devuelve la traza completa"""
    cfg = cfg or RefineConfig()
    start = time.perf_counter()
    crop = crop_camera(mesh, p_init, k, cfg.crop_size, cfg.crop_pad)
    obs_depth = _resample_depth(depth, k, crop)
    obs_rgb = resample_to_camera(_to_intensity(rgb), k, crop, order=1)
    n_valid = int((obs_depth > 0).sum())
    if n_valid < MIN_VALID_PIXELS:
        raise TooFewValidPixels(f"solo {n_valid} píxeles con profundidad válida en el recorte")

    # la referencia se renderiza en la cámara de la observación y pasa por el mismo remuestreo
    ref = render(mesh, p_init, k)
    ref_depth = _resample_depth(ref.depth, k, crop)
    ref_rgb = resample_to_camera(ref.intensity, k, crop, order=1)
    f_ref = extract_features(ref_rgb, ref_depth, crop)
    f_obs = extract_features(obs_rgb, obs_depth, crop)
    pyramid = build_volume(f_ref, f_obs, cfg.levels)

    grid = crop.subsampled(FEATURE_CELL)
    ref_grid = render(mesh, p_init, grid)
    cloud1 = lift(np.where(ref_grid.mask, ref_grid.depth, 0.0), grid)
    # los destinos 3D se muestrean en la profundidad observada a resolución completa
    backend = _make_backend(cfg, cloud1, depth, grid, len(pyramid.levels), weights, depth_k=k)

    h, w = grid.height, grid.width
    p0 = p_init
    flow = FlowField.zeros(h, w)
    field_prev = field_from_residual(Pose.identity(), ref_grid.mask)
    records = [IterationRecord(0, p0, Pose.identity(), None, flow, field_prev)]
    p_prev = p0

    for it in range(1, cfg.iterations + 1):
        diag = IterationDiagnostics()
        matches = None
        try:
            window = lookup(pyramid, flow, cfg.radius, stride=1)
            est = backend.estimate(window, field_prev, flow)
            matches = backend.matches
            if backend.score is not None and cloud1.valid.any():
                diag.mean_correlation = float(backend.score[cloud1.valid].mean())
            diag.valid_cells = int(est.valid.sum())
            diag.field_dispersion = field_dispersion(est)
            total, vote = vote_global_pose(est, cloud1, cfg, weights=backend.vote_weights,
                                           rng=stream(cfg.seed, "vote", it))
            diag.inlier_fraction = vote.inlier_fraction
            p_raw = apply_residual(total, p0)
            res9 = encode_residual(p_prev, p_raw, crop)
            dP = decode_residual(res9, p_prev, crop)
            p_k = apply_residual(dP, p_prev)
        except PoseRefineError as e:
            logger.warning(f"⚠️ Iteración {it} omitida ({e.code}): {e.message}")
            est = field_prev
            diag.skipped = True
            diag.error = e.code
            p_k, dP, res9 = p_prev, Pose.identity(), None

        field_prev = field_from_residual(pose_residual(p0, p_k), ref_grid.mask)
        flow = pose_induced_flow(ref_grid, p0, p_k, grid)
        records.append(IterationRecord(it, p_k, dP, res9, flow, est, matches, diag))
        logger.debug(
            f"Iteración {it}: celdas={diag.valid_cells}, inliers={diag.inlier_fraction:.3f}, "
            f"corr={diag.mean_correlation:.3f}, dispersión={diag.field_dispersion:.4f}, omitida={diag.skipped}"
        )
        p_prev = p_k

    elapsed = time.perf_counter() - start
    last = records[-1].diagnostics
    logger.info(f"Refinamiento completado: {cfg.iterations} iteraciones, backend={cfg.backend}, "
                f"inliers finales={last.inlier_fraction:.3f}, {elapsed:.3f} s")
    return RefineTrace(records, crop, grid, ref_grid, elapsed)
