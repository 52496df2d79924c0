# evaluation/metrics.py
"""Errores de pose estilo BOP-2019 (VSD, MSSD, MSPD), Average Recall e histogramas de mejora."""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.transform import Rotation

from cache.points_cache import points_cache
from config.settings import POSE_REFINE_THREADS
from core.errors import EmptyDataset, EmptyUnion, LengthMismatch
from core.geometry import Intrinsics, Pose, rotation_error_deg, translation_error_mm
from core.mesh_render import TriMesh, project_points, render

logger = logging.getLogger(__name__)

# ============================
# Rejillas de umbrales (BOP-2019)
# ============================
VSD_DELTA_MM = 15.0
VSD_TAU_FRACS = tuple(np.round(np.arange(0.05, 0.51, 0.05), 2))
VSD_THETAS = tuple(np.round(np.arange(0.05, 0.51, 0.05), 2))
MSSD_FRACS = tuple(np.round(np.arange(0.05, 0.51, 0.05), 2))
MSPD_PX = tuple(range(5, 51, 5))
CONTINUOUS_SYMMETRY_STEPS = 36
HISTOGRAM_BINS = 21
HISTOGRAM_EPS = 1e-6


# ============================
# Simetrías
# ============================
@dataclass(frozen=True, eq=False)
class SymmetrySet:
    transforms: Tuple[Pose, ...] = ()

    def __post_init__(self):
        transforms = tuple(self.transforms)
        identity = Pose.identity()
        if not any(s.allclose(identity, atol=1e-9) for s in transforms):
            transforms = (identity,) + transforms
        object.__setattr__(self, "transforms", transforms)

    def __iter__(self):
        return iter(self.transforms)

    def __len__(self):
        return len(self.transforms)

    @classmethod
    def identity_only(cls) -> "SymmetrySet":
        return cls(())

    @classmethod
    def from_models_info(cls, info: dict, steps: int = CONTINUOUS_SYMMETRY_STEPS) -> "SymmetrySet":
        """Simetrías discretas (4×4 por filas, t en mm) y continuas (eje, offset) discretizadas en `steps` pasos"""
        transforms = []
        for flat in info.get("symmetries_discrete", []):
            T = np.asarray(flat, dtype=np.float64).reshape(4, 4)
            transforms.append(Pose.from_matrix(T))
        for sym in info.get("symmetries_continuous", []):
            axis = np.asarray(sym["axis"], dtype=np.float64)
            offset = np.asarray(sym.get("offset", [0.0, 0.0, 0.0]), dtype=np.float64)
            axis = axis / np.linalg.norm(axis)
            for i in range(1, steps):
                R = Rotation.from_rotvec(axis * (2.0 * np.pi * i / steps)).as_matrix()
                transforms.append(Pose(R, offset - R @ offset))
        return cls(tuple(transforms))


def _points(model: Union[TriMesh, np.ndarray]) -> np.ndarray:
    if isinstance(model, TriMesh):
        return points_cache.get_eval_points(model)
    return np.asarray(model, dtype=np.float64).reshape(-1, 3)


# ============================
# Errores por muestra
# ============================
def vsd_from_depths(depth_est: np.ndarray, depth_gt: np.ndarray, depth_test: np.ndarray,
                    taus: Sequence[float], delta: float = VSD_DELTA_MM) -> List[float]:
    """VSD sobre imágenes de profundidad ya renderizadas (0 = sin objeto / sin medida)"""
    depth_est = np.asarray(depth_est, dtype=np.float64)
    depth_gt = np.asarray(depth_gt, dtype=np.float64)
    depth_test = np.asarray(depth_test, dtype=np.float64)
    missing = depth_test <= 0
    visib_gt = (depth_gt > 0) & ((depth_gt - depth_test <= delta) | missing)
    visib_est = (depth_est > 0) & ((depth_est - depth_test <= delta) | missing)
    visib_est |= visib_gt & (depth_est > 0)
    inter = visib_gt & visib_est
    union = visib_gt | visib_est
    union_count = int(union.sum())
    if union_count == 0:
        raise EmptyUnion("ninguna de las dos poses es visible")
    comp_count = union_count - int(inter.sum())
    dists = np.abs(depth_gt[inter] - depth_est[inter])
    return [float(((dists > tau).sum() + comp_count) / union_count) for tau in taus]


def vsd(p_est: Pose, p_gt: Pose, mesh: TriMesh, scene_depth: np.ndarray, k: Intrinsics,
        tau: Union[float, Sequence[float]], delta: float = VSD_DELTA_MM):
    """Renderiza el modelo bajo ambas poses y compara sus superficies visibles"""
    d_est = render(mesh, p_est, k).depth
    d_gt = render(mesh, p_gt, k).depth
    if np.isscalar(tau):
        return vsd_from_depths(d_est, d_gt, scene_depth, [tau], delta)[0]
    return vsd_from_depths(d_est, d_gt, scene_depth, tau, delta)


def mssd(p_est: Pose, p_gt: Pose, model, syms: Optional[SymmetrySet] = None) -> float:
    """min_S max_x ‖P̂x − P̄Sx‖₂"""
    pts = _points(model)
    syms = syms or SymmetrySet.identity_only()
    est = p_est.transform(pts)
    return float(min(np.linalg.norm(est - p_gt.compose(s).transform(pts), axis=1).max() for s in syms))


def mspd(p_est: Pose, p_gt: Pose, model, syms: Optional[SymmetrySet], k: Intrinsics) -> float:
    """min_S max_x ‖π(P̂x) − π(P̄Sx)‖₂ en píxeles"""
    pts = _points(model)
    syms = syms or SymmetrySet.identity_only()
    proj_est = project_points(p_est.transform(pts), k)[:, :2]
    errors = []
    for s in syms:
        proj_gt = project_points(p_gt.compose(s).transform(pts), k)[:, :2]
        errors.append(np.linalg.norm(proj_est - proj_gt, axis=1).max())
    return float(min(errors))


def add_error(p_est: Pose, p_gt: Pose, model) -> float:
    """ADD: distancia media L2 de los puntos del modelo"""
    pts = _points(model)
    return float(np.linalg.norm(p_est.transform(pts) - p_gt.transform(pts), axis=1).mean())


def recall_at(errors: Sequence[float], limits: Sequence[float]) -> float:
    """Fracción de errores estrictamente por debajo de su límite"""
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise EmptyDataset("no hay muestras")
    return float((errors < np.asarray(limits, dtype=np.float64)).mean())


# ============================
# Agregación
# ============================
@dataclass
class SampleErrors:
    vsd: List[float]        # un valor por fracción de VSD_TAU_FRACS
    mssd: float
    mspd: float
    diameter: float
    image_width: int = 640
    scene_id: int = 0
    im_id: int = 0
    obj_id: int = 0
    rot_err_deg: float = float("nan")
    trans_err_mm: float = float("nan")


@dataclass
class MetricReport:
    samples: List[SampleErrors]
    recall_vsd: List[List[float]]   # [tau][theta]
    recall_mssd: List[float]
    recall_mspd: List[float]
    ar_vsd: float
    ar_mssd: float
    ar_mspd: float
    ar: float
    thresholds: Dict[str, list] = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "AR": self.ar,
            "AR_VSD": self.ar_vsd,
            "AR_MSSD": self.ar_mssd,
            "AR_MSPD": self.ar_mspd,
            "recall_vsd": self.recall_vsd,
            "recall_mssd": self.recall_mssd,
            "recall_mspd": self.recall_mspd,
            "thresholds": self.thresholds,
            "num_samples": len(self.samples),
        }

    def write_json(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.summary(), indent=2), encoding="utf-8")

    def write_csv(self, path) -> None:
        """Una fila por muestra con sus errores"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["scene_id", "im_id", "obj_id", "mssd_mm", "mspd_px", "rot_err_deg",
                             "trans_err_mm"] + [f"vsd_tau{frac:.2f}" for frac in VSD_TAU_FRACS])
            for s in self.samples:
                writer.writerow([s.scene_id, s.im_id, s.obj_id, s.mssd, s.mspd, s.rot_err_deg,
                                 s.trans_err_mm] + list(s.vsd))


def average_recall(samples: Sequence[SampleErrors]) -> MetricReport:
    """Recall medio sobre las rejillas BOP-2019; AR = media de los tres métodos"""
    samples = list(samples)
    if not samples:
        raise EmptyDataset("no hay muestras que evaluar")
    vsd_errs = np.array([s.vsd for s in samples], dtype=np.float64)        # (n, taus)
    recall_vsd = [[float((vsd_errs[:, i] < theta).mean()) for theta in VSD_THETAS]
                  for i in range(len(VSD_TAU_FRACS))]
    diam = np.array([s.diameter for s in samples])
    mssd_errs = np.array([s.mssd for s in samples])
    recall_mssd = [recall_at(mssd_errs, frac * diam) for frac in MSSD_FRACS]
    scale = np.array([s.image_width / 640.0 for s in samples])
    mspd_errs = np.array([s.mspd for s in samples])
    recall_mspd = [recall_at(mspd_errs, px * scale) for px in MSPD_PX]

    ar_vsd = float(np.mean(recall_vsd))
    ar_mssd = float(np.mean(recall_mssd))
    ar_mspd = float(np.mean(recall_mspd))
    ar = (ar_vsd + ar_mssd + ar_mspd) / 3.0
    thresholds = {
        "vsd_tau_fraction_of_diameter": list(VSD_TAU_FRACS),
        "vsd_theta": list(VSD_THETAS),
        "mssd_fraction_of_diameter": list(MSSD_FRACS),
        "mspd_px_at_width_640": list(MSPD_PX),
        "vsd_delta_mm": VSD_DELTA_MM,
    }
    return MetricReport(samples, recall_vsd, recall_mssd, recall_mspd, ar_vsd, ar_mssd, ar_mspd, ar, thresholds)


def evaluate_pose(p_est: Pose, p_gt: Pose, mesh: TriMesh, scene_depth: np.ndarray, k: Intrinsics,
                  syms: Optional[SymmetrySet] = None, diameter: Optional[float] = None,
                  ids: Tuple[int, int, int] = (0, 0, 0)) -> SampleErrors:
    diameter = diameter or mesh.diameter
    taus = [frac * diameter for frac in VSD_TAU_FRACS]
    try:
        e_vsd = vsd(p_est, p_gt, mesh, scene_depth, k, taus)
    except EmptyUnion:
        logger.warning(f"⚠️ VSD sin unión visible en escena {ids[0]}, imagen {ids[1]}: se cuenta como error 1")
        e_vsd = [1.0] * len(taus)
    return SampleErrors(
        vsd=e_vsd,
        mssd=mssd(p_est, p_gt, mesh, syms),
        mspd=mspd(p_est, p_gt, mesh, syms, k),
        diameter=diameter,
        image_width=k.width,
        scene_id=ids[0],
        im_id=ids[1],
        obj_id=ids[2],
        rot_err_deg=rotation_error_deg(p_est.R, p_gt.R),
        trans_err_mm=translation_error_mm(p_est.t, p_gt.t),
    )


def evaluate_many(tasks: Iterable[Callable[[], SampleErrors]], threads: Optional[int] = None) -> List[SampleErrors]:
    """Ejecuta evaluaciones independientes en paralelo conservando el orden de envío"""
    tasks = list(tasks)
    with ThreadPoolExecutor(max_workers=threads or POSE_REFINE_THREADS) as pool:
        futures = [pool.submit(task) for task in tasks]
        return [f.result() for f in futures]


# ============================
# Histograma de mejora relativa
# ============================
def improvement_histogram(init_err: Sequence[float], refined_err: Sequence[float],
                          bins: int = HISTOGRAM_BINS, eps: float = HISTOGRAM_EPS) -> Tuple[np.ndarray, np.ndarray]:
    """Cuenta (init − refinado)/max(init, ε), recortado a [−1, 1], en `bins` intervalos iguales"""
    init = np.asarray(init_err, dtype=np.float64)
    refined = np.asarray(refined_err, dtype=np.float64)
    if init.shape != refined.shape:
        raise LengthMismatch(f"longitudes distintas: {init.shape} vs {refined.shape}")
    rel = np.clip((init - refined) / np.maximum(init, eps), -1.0, 1.0)
    counts, edges = np.histogram(rel, bins=bins, range=(-1.0, 1.0))
    return counts, edges
