# core/geometry.py
"""Álgebra de cuerpo rígido: poses, rotación 6D, residuos de pose, twists y Kabsch.

Todas las traslaciones y profundidades están en milímetros; los ángulos en radianes.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.linalg import polar
from scipy.spatial.transform import Rotation

from core.errors import DegenerateConfiguration, DegenerateInput, InvalidDepth, NearPiRotation

logger = logging.getLogger(__name__)

# ============================
# Tolerancias
# ============================
ORTHO_DRIFT_TOL = 1e-12
ORTHO_REJECT_TOL = 1e-3
NEAR_PI_MARGIN = 1e-6
DEGENERATE_TOL = 1e-12
_SMALL_ANGLE = 1e-3


def orthonormality_drift(R: np.ndarray) -> float:
    """Norma de Frobenius de RᵀR − I"""
    return float(np.linalg.norm(R.T @ R - np.eye(3)))


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Rotación más cercana a R por descomposición polar"""
    U, _ = polar(np.asarray(R, dtype=np.float64))
    return U


@dataclass(frozen=True, eq=False)
class Pose:
    """Transformación rígida [R|t]; t en mm"""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=np.float64).reshape(3, 3)
        t = np.array(self.t, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise DegenerateInput("pose con valores no finitos")
        drift = orthonormality_drift(R)
        if drift > ORTHO_REJECT_TOL or np.linalg.det(R) <= 0:
            raise DegenerateInput(f"R no es una rotación (deriva {drift:.3g})")
        if drift > ORTHO_DRIFT_TOL:
            R = orthonormalize(R)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t)

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other: R = R_a·R_b, t = R_a·t_b + t_a"""
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Aplica la pose a puntos (..., 3)"""
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.R, other.R, atol=atol) and np.allclose(self.t, other.t, atol=atol))

    def __repr__(self):
        return f"Pose(R={self.R.round(6).tolist()}, t={self.t.round(4).tolist()})"


def compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def pose_residual(p0: Pose, pk: Pose) -> Pose:
    """Residuo ΔP con ΔR = R_k·R_0⁻¹ y Δt = t_k − ΔR·t_0, de modo que apply(ΔP, P_0) = P_k"""
    dR = pk.R @ p0.R.T
    return Pose(dR, pk.t - dR @ p0.t)


def apply_residual(residual: Pose, p: Pose) -> Pose:
    """El residuo se aplica por la izquierda (marco de la cámara)"""
    return residual.compose(p)


def rotation_error_deg(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Error geodésico entre dos rotaciones, en grados"""
    return float(np.degrees(Rotation.from_matrix(Ra @ Rb.T).magnitude()))


def translation_error_mm(ta: np.ndarray, tb: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(ta) - np.asarray(tb)))


# ============================
# Intrínsecos de cámara
# ============================
@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DegenerateInput(f"focales no positivas: fx={self.fx}, fy={self.fy}")
        if not (self.width > 0 and self.height > 0):
            raise DegenerateInput(f"tamaño de imagen inválido: {self.width}x{self.height}")

    @classmethod
    def from_matrix(cls, K: np.ndarray, width: int, height: int) -> "Intrinsics":
        K = np.asarray(K, dtype=np.float64).reshape(3, 3)
        return cls(float(K[0, 0]), float(K[1, 1]), float(K[0, 2]), float(K[1, 2]), int(width), int(height))

    def as_matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def subsampled(self, stride: int) -> "Intrinsics":
        """Intrínsecos de la rejilla que toma el píxel (s·i + s/2, s·j + s/2) de cada celda.

        El centro de la celda baja y el del píxel muestreado comparten rayo.
        """
        return Intrinsics(
            self.fx / stride,
            self.fy / stride,
            (self.cx - 0.5) / stride,
            (self.cy - 0.5) / stride,
            self.width // stride,
            self.height // stride,
        )


# ============================
# Rotación 6D y residuo de 9 dimensiones
# ============================
@dataclass(frozen=True, eq=False)
class Rot6D:
    a1: np.ndarray
    a2: np.ndarray

    @classmethod
    def from_matrix(cls, R: np.ndarray) -> "Rot6D":
        R = np.asarray(R, dtype=np.float64)
        return cls(R[:, 0].copy(), R[:, 1].copy())

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.a1, self.a2])


def rot6d_to_matrix(r: Rot6D) -> np.ndarray:
    """Gram–Schmidt sobre (a1, a2); columnas [b1 b2 b3]"""
    a1 = np.asarray(r.a1, dtype=np.float64)
    a2 = np.asarray(r.a2, dtype=np.float64)
    n1 = np.linalg.norm(a1)
    if n1 < DEGENERATE_TOL:
        raise DegenerateInput("a1 es (casi) nulo")
    b1 = a1 / n1
    u2 = a2 - (b1 @ a2) * b1
    n2 = np.linalg.norm(u2)
    if n2 < DEGENERATE_TOL:
        raise DegenerateInput("a2 es (casi) paralelo a a1")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=1)


def _check_depth(t: np.ndarray):
    if t[2] <= 0:
        raise InvalidDepth(f"t_z debe ser > 0 (recibido {t[2]})")


def encode_translation(p_cur: Pose, p_new: Pose, k: Intrinsics) -> np.ndarray:
    """Traslación normalizada: desplazamiento proyectivo en el plano × focal y log-ratio de profundidad"""
    t, tn = p_cur.t, p_new.t
    _check_depth(t)
    _check_depth(tn)
    return np.array([
        k.fx * (tn[0] / tn[2] - t[0] / t[2]),
        k.fy * (tn[1] / tn[2] - t[1] / t[2]),
        np.log(t[2] / tn[2]),
    ])


def decode_translation(p_cur: Pose, v: np.ndarray, k: Intrinsics) -> np.ndarray:
    t = p_cur.t
    _check_depth(t)
    z_new = t[2] * np.exp(-v[2])
    return np.array([
        (v[0] / k.fx + t[0] / t[2]) * z_new,
        (v[1] / k.fy + t[1] / t[2]) * z_new,
        z_new,
    ])


@dataclass(frozen=True, eq=False)
class PoseResidual9:
    rot: Rot6D
    vt: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rot.as_vector(), self.vt])


def encode_residual(p_cur: Pose, p_new: Pose, k: Intrinsics) -> PoseResidual9:
    dR = p_new.R @ p_cur.R.T
    return PoseResidual9(Rot6D.from_matrix(dR), encode_translation(p_cur, p_new, k))


def decode_residual(res: PoseResidual9, p_cur: Pose, k: Intrinsics) -> Pose:
    """Devuelve el residuo ΔP (en la convención de pose_residual) codificado por `res`"""
    dR = rot6d_to_matrix(res.rot)
    t_new = decode_translation(p_cur, res.vt, k)
    p_new = Pose(dR @ p_cur.R, t_new)
    return pose_residual(p_cur, p_new)


# ============================
# Kabsch ponderado
# ============================
def kabsch(src: np.ndarray, dst: np.ndarray, weights: Optional[np.ndarray] = None) -> Pose:
    """Transformación rígida de mínimos cuadrados ponderados que lleva src a dst"""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise DegenerateConfiguration(f"conjuntos de distinto tamaño: {src.shape} vs {dst.shape}")
    if len(src) < 3:
        raise DegenerateConfiguration(f"se necesitan >= 3 puntos (hay {len(src)})")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != len(src) or np.any(w < 0) or w.sum() <= 0:
        raise DegenerateConfiguration("pesos inválidos")
    w = w / w.sum()
    c_src = w @ src
    c_dst = w @ dst
    H = (src - c_src).T @ ((dst - c_dst) * w[:, None])
    U, S, Vt = np.linalg.svd(H)
    if S[0] <= DEGENERATE_TOL or S[1] <= 1e-9 * S[0]:
        raise DegenerateConfiguration("covarianza de rango < 2 (puntos colineales o coincidentes)")
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ D @ U.T
    return Pose(R, c_dst - R @ c_src)


# ============================
# Twists: exp / log en SE(3)
# ============================
@dataclass(frozen=True, eq=False)
class Twist:
    tau: np.ndarray
    theta: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.tau, float), np.asarray(self.theta, float)])


def _hat(v: np.ndarray) -> np.ndarray:
    """Matrices antisimétricas de vectores (..., 3) -> (..., 3, 3)"""
    K = np.zeros(v.shape[:-1] + (3, 3))
    K[..., 0, 1] = -v[..., 2]
    K[..., 0, 2] = v[..., 1]
    K[..., 1, 0] = v[..., 2]
    K[..., 1, 2] = -v[..., 0]
    K[..., 2, 0] = -v[..., 1]
    K[..., 2, 1] = v[..., 0]
    return K


def _left_jacobian_coeffs(a: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    small = a < _SMALL_ANGLE
    a_safe = np.where(small, 1.0, a)
    a2 = a * a
    B = np.where(small, 0.5 - a2 / 24.0 + a2 * a2 / 720.0, (1.0 - np.cos(a_safe)) / a_safe**2)
    C = np.where(small, 1.0 / 6.0 - a2 / 120.0 + a2 * a2 / 5040.0, (a_safe - np.sin(a_safe)) / a_safe**3)
    return B, C


def exp_twists(tau: np.ndarray, theta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Exponencial vectorizada: (N,3),(N,3) -> R (N,3,3), t (N,3)"""
    tau = np.asarray(tau, dtype=np.float64).reshape(-1, 3)
    theta = np.asarray(theta, dtype=np.float64).reshape(-1, 3)
    R = Rotation.from_rotvec(theta).as_matrix().reshape(-1, 3, 3)
    a = np.linalg.norm(theta, axis=1)
    B, C = _left_jacobian_coeffs(a)
    K = _hat(theta)
    V = np.eye(3) + B[:, None, None] * K + C[:, None, None] * (K @ K)
    t = np.einsum("nij,nj->ni", V, tau)
    return R, t


def log_poses(R: np.ndarray, t: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Logaritmo vectorizado; devuelve (tau, theta, near_pi) y deja en cero las celdas near_pi"""
    R = np.asarray(R, dtype=np.float64).reshape(-1, 3, 3)
    t = np.asarray(t, dtype=np.float64).reshape(-1, 3)
    theta = Rotation.from_matrix(R).as_rotvec().reshape(-1, 3)
    a = np.linalg.norm(theta, axis=1)
    near_pi = a >= np.pi - NEAR_PI_MARGIN
    small = a < _SMALL_ANGLE
    a_safe = np.where(small | near_pi, 1.0, a)
    a2 = a * a
    D = np.where(
        small,
        1.0 / 12.0 + a2 / 720.0 + a2 * a2 / 30240.0,
        (1.0 - a_safe * np.sin(a_safe) / (2.0 * (1.0 - np.cos(a_safe)))) / a_safe**2,
    )
    K = _hat(theta)
    V_inv = np.eye(3) - 0.5 * K + D[:, None, None] * (K @ K)
    tau = np.einsum("nij,nj->ni", V_inv, t)
    tau[near_pi] = 0.0
    theta[near_pi] = 0.0
    return tau, theta, near_pi


def exp_twist(x: Twist) -> Pose:
    R, t = exp_twists(x.tau, x.theta)
    return Pose(R[0], t[0])


def log_pose(p: Pose) -> Twist:
    tau, theta, near_pi = log_poses(p.R, p.t)
    if near_pi[0]:
        raise NearPiRotation("ángulo de rotación >= π − 1e-6")
    return Twist(tau[0], theta[0])
