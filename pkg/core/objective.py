# core/objective.py
"""Objetivo de entrenamiento evaluable: pérdida de flujo, de pose y suma ponderada por iteración."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from config.refine_config import FEATURE_CELL, RefineConfig
from core.errors import EmptyMask, LengthMismatch
from core.flowfield import FlowField, field_to_flow, gt_flow
from core.geometry import Pose
from core.mesh_render import lift

logger = logging.getLogger(__name__)

DEFAULT_GAMMA = 0.8
DEFAULT_ALPHA = 0.1


@dataclass
class LossBreakdown:
    flow_losses: List[float]
    pose_losses: List[float]
    weights: List[float]
    total: float


def flow_loss(pred: FlowField, gt: FlowField) -> float:
    """Media sobre píxeles válidos en ambos de |Δu_p − Δu_g| + |Δv_p − Δv_g|; Δz no interviene"""
    if pred.shape != gt.shape:
        raise LengthMismatch(f"flujos de tamaño distinto: {pred.shape} vs {gt.shape}")
    joint = pred.valid & gt.valid
    if not joint.any():
        raise EmptyMask("no hay píxeles válidos en ambos flujos")
    diff = np.abs(pred.flow[..., :2] - gt.flow[..., :2]).sum(axis=-1)
    return float(diff[joint].mean())


def pose_loss(p_pred: Pose, p_gt: Pose, model_pts: np.ndarray, norm: str = "l1") -> float:
    """Distancia media por punto entre el modelo bajo ambas poses ('l1' o 'l2', esta última = ADD)"""
    pts = np.asarray(model_pts, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("se necesita al menos un punto de modelo")
    diff = p_pred.transform(pts) - p_gt.transform(pts)
    if norm == "l2":
        return float(np.linalg.norm(diff, axis=1).mean())
    return float(np.abs(diff).sum(axis=1).mean())


def total_loss(flow_losses: Sequence[float], pose_losses: Sequence[float],
               gamma: float = DEFAULT_GAMMA, alpha: float = DEFAULT_ALPHA, n: int = 8) -> LossBreakdown:
    """Σ_{k=1..N} γ^{N−k} (L_pose^k + α·L_flow^k)"""
    if len(flow_losses) != n or len(pose_losses) != n:
        raise LengthMismatch(f"se esperaban {n} iteraciones (flujo {len(flow_losses)}, pose {len(pose_losses)})")
    weights = [gamma ** (n - k) for k in range(1, n + 1)]
    total = float(sum(w * (p + alpha * f) for w, p, f in zip(weights, pose_losses, flow_losses)))
    return LossBreakdown(list(map(float, flow_losses)), list(map(float, pose_losses)), weights, total)


def trace_loss(trace, p_gt: Pose, model_pts: np.ndarray, cfg: Optional[RefineConfig] = None) -> LossBreakdown:
    """Evalúa el objetivo sobre una traza de refinamiento.

    El flujo predicho es el inducido por el campo T'_k de cada iteración sobre el render de
    referencia; el de referencia lo induce la pose ground-truth. Ambos se expresan en píxeles
    del recorte.
    """
    cfg = cfg or RefineConfig()
    ref = trace.reference
    cloud = lift(np.where(ref.mask, ref.depth, 0.0), trace.grid)
    target = gt_flow(ref, trace.initial_pose, p_gt, trace.grid)
    flows, poses = [], []
    for record in trace.records[1:]:
        pred = field_to_flow(record.field, cloud, trace.grid)
        try:
            flows.append(FEATURE_CELL * flow_loss(pred, target))
        except EmptyMask:
            logger.warning(f"⚠️ Iteración {record.k} sin píxeles comunes para la pérdida de flujo")
            flows.append(0.0)
        poses.append(pose_loss(record.pose, p_gt, model_pts))
    return total_loss(flows, poses, cfg.loss_gamma, cfg.loss_alpha, len(trace.records) - 1)
