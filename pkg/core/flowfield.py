# core/flowfield.py
"""Flujo de escena inducido por pose, campos densos SE(3) y campos de twists."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np

from core.errors import MissingFile, ParseError
from core.geometry import Intrinsics, Pose, exp_twists, log_poses
from core.mesh_render import PointCloud, RenderOutput, lift, project_points

logger = logging.getLogger(__name__)

FLOW_MAGIC = b"SCF2"
_FLOW_RECORD = np.dtype([("f", "<f4", (3,)), ("v", "u1")])


# ============================
# Tipos
# ============================
@dataclass(frozen=True, eq=False)
class FlowField:
    """(Δu px, Δv px, Δz mm) por píxel; `valid` excluye píxeles que salen de la imagen"""

    flow: np.ndarray   # (H, W, 3)
    valid: np.ndarray  # (H, W) bool

    @property
    def shape(self) -> Tuple[int, int]:
        return self.valid.shape

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        return cls(np.zeros((height, width, 3)), np.zeros((height, width), dtype=bool))


@dataclass(frozen=True, eq=False)
class DenseSE3Field:
    R: np.ndarray      # (H, W, 3, 3)
    t: np.ndarray      # (H, W, 3)
    valid: np.ndarray  # (H, W) bool

    @property
    def shape(self) -> Tuple[int, int]:
        return self.valid.shape

    @classmethod
    def identity(cls, height: int, width: int, valid=None) -> "DenseSE3Field":
        R = np.broadcast_to(np.eye(3), (height, width, 3, 3)).copy()
        valid = np.ones((height, width), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
        return cls(R, np.zeros((height, width, 3)), valid)

    def cell(self, i: int, j: int) -> Pose:
        return Pose(self.R[i, j], self.t[i, j])


@dataclass(frozen=True, eq=False)
class TwistField:
    tau: np.ndarray     # (H, W, 3) mm
    theta: np.ndarray   # (H, W, 3) rad
    valid: np.ndarray   # (H, W) bool
    near_pi_count: int = 0

    def as_array(self) -> np.ndarray:
        """(H, W, 6) con (tau, theta)"""
        return np.concatenate([self.tau, self.theta], axis=-1)


# ============================
# Flujo inducido por pose
# ============================
def _flow_from_points(cloud: PointCloud, warped: np.ndarray, k: Intrinsics, support: np.ndarray) -> FlowField:
    H, W = cloud.shape
    uvz = project_points(warped, k, strict=False)
    defined = support & cloud.valid & (warped[..., 2] > 0)
    uv = cloud.uv
    flow = np.zeros((H, W, 3))
    flow[..., 0] = np.where(defined, uvz[..., 0] - uv[..., 0], 0.0)
    flow[..., 1] = np.where(defined, uvz[..., 1] - uv[..., 1], 0.0)
    flow[..., 2] = np.where(defined, warped[..., 2] - cloud.points[..., 2], 0.0)
    with np.errstate(invalid="ignore"):
        inside = (uvz[..., 0] >= 0) & (uvz[..., 0] < k.width) & (uvz[..., 1] >= 0) & (uvz[..., 1] < k.height)
    return FlowField(flow, defined & inside)


def pose_induced_flow(render: RenderOutput, p_render: Pose, p_target: Pose, k: Intrinsics) -> FlowField:
    """Flujo de cada píxel de la máscara al re-proyectar su punto de superficie bajo p_target.

    No recibe la malla: la profundidad renderizada ya codifica el punto de superficie de cada píxel y
    se eleva con `k`, así que no hace falta buscar vértices ni caras.
    """
    cloud = lift(render.depth, k)
    support = render.mask & cloud.valid
    if np.array_equal(p_render.R, p_target.R) and np.array_equal(p_render.t, p_target.t):
        return _flow_from_points(cloud, cloud.points, k, support)
    rel = p_target.compose(p_render.inverse())
    return _flow_from_points(cloud, rel.transform(cloud.points), k, support)


def gt_flow(render: RenderOutput, p_render: Pose, p_gt: Pose, k: Intrinsics) -> FlowField:
    """Flujo de referencia para la pérdida: el inducido por la pose ground-truth"""
    return pose_induced_flow(render, p_render, p_gt, k)


# ============================
# Campos SE(3)
# ============================
def field_from_residual(residual: Pose, mask: np.ndarray) -> DenseSE3Field:
    """Campo constante igual al residuo sobre la máscara"""
    mask = np.asarray(mask, dtype=bool)
    H, W = mask.shape
    R = np.broadcast_to(residual.R, (H, W, 3, 3)).copy()
    t = np.broadcast_to(residual.t, (H, W, 3)).copy()
    return DenseSE3Field(R, t, mask.copy())


def field_to_flow(field: DenseSE3Field, cloud: PointCloud, k: Intrinsics) -> FlowField:
    """x' = project(T_i · X_i); flujo = x' − x con Δz = z' − z"""
    if field.shape != cloud.shape:
        raise ValueError(f"campo {field.shape} y nube {cloud.shape} con distinto tamaño")
    warped = np.einsum("hwij,hwj->hwi", field.R, cloud.points) + field.t
    return _flow_from_points(cloud, warped, k, field.valid)


def field_to_twist(field: DenseSE3Field) -> TwistField:
    """Logaritmo por celda; las celdas con ángulo cercano a π se invalidan y se cuentan"""
    H, W = field.shape
    tau = np.zeros((H, W, 3))
    theta = np.zeros((H, W, 3))
    valid = field.valid.copy()
    near_pi_count = 0
    if valid.any():
        tau_v, theta_v, near_pi = log_poses(field.R[valid], field.t[valid])
        tau[valid] = tau_v
        theta[valid] = theta_v
        near_pi_count = int(near_pi.sum())
        if near_pi_count:
            idx = np.argwhere(valid)[near_pi]
            valid[idx[:, 0], idx[:, 1]] = False
            logger.warning(f"{near_pi_count} celdas con rotación cercana a π invalidadas en el campo de twists")
    return TwistField(tau, theta, valid, near_pi_count)


def twist_to_field(twists: TwistField) -> DenseSE3Field:
    H, W = twists.valid.shape
    R = np.broadcast_to(np.eye(3), (H, W, 3, 3)).copy()
    t = np.zeros((H, W, 3))
    valid = twists.valid
    if valid.any():
        R_v, t_v = exp_twists(twists.tau[valid], twists.theta[valid])
        R[valid] = R_v
        t[valid] = t_v
    return DenseSE3Field(R, t, valid.copy())


def field_dispersion(field: DenseSE3Field) -> float:
    """Desviación típica media de los twists por celda (mm y rad mezclados, como diagnóstico)"""
    tw = field_to_twist(field)
    if tw.valid.sum() < 2:
        return 0.0
    return float(tw.as_array()[tw.valid].std(axis=0).mean())


# ============================
# Volcado binario SCF2
# ============================
def save_flow(path, flow: FlowField) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    H, W = flow.shape
    records = np.zeros(H * W, dtype=_FLOW_RECORD)
    records["f"] = flow.flow.reshape(-1, 3).astype("<f4")
    records["v"] = flow.valid.reshape(-1).astype("u1")
    with open(path, "wb") as f:
        f.write(FLOW_MAGIC)
        f.write(np.array([H, W], dtype="<u4").tobytes())
        f.write(records.tobytes())


def load_flow(path) -> FlowField:
    path = Path(path)
    if not path.exists():
        raise MissingFile(path)
    data = path.read_bytes()
    if data[:4] != FLOW_MAGIC:
        raise ParseError("firma SCF2 ausente", path=str(path), offset=0)
    H, W = (int(x) for x in np.frombuffer(data, dtype="<u4", count=2, offset=4))
    try:
        records = np.frombuffer(data, dtype=_FLOW_RECORD, count=H * W, offset=12)
    except ValueError:
        raise ParseError("registros SCF2 truncados", path=str(path), offset=12)
    flow = records["f"].astype(np.float64).reshape(H, W, 3)
    valid = records["v"].astype(bool).reshape(H, W)
    return FlowField(flow, valid)
