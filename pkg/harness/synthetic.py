# harness/synthetic.py
"""Escenas sintéticas: mallas procedurales, poses GT, RGBD observado con ruido de sensor
y perturbación de poses para los protocolos de inicialización."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import trimesh
from pydantic import BaseModel, ConfigDict, Field
from scipy.spatial.transform import Rotation

from config.refine_config import NoiseSpec
from core.geometry import Intrinsics, Pose
from core.mesh_render import SolidTexture, TriMesh, render
from core.random_streams import stream

logger = logging.getLogger(__name__)

SHAPES = ("cube", "icosphere", "cylinder", "convex")
DIAMETER_RANGE_MM = (80.0, 200.0)
DEPTH_RANGE_MM = (600.0, 1400.0)
OCCLUDER_GAP_MM = 50.0
OCCLUDER_INTENSITY = 0.3
TEXTURE_SPACING = 0.06  # fracción del diámetro entre nodos de la textura sólida


def default_intrinsics() -> Intrinsics:
    """Cámara tipo Kinect de LINEMOD, 640×480"""
    return Intrinsics(572.4, 573.6, 325.3, 242.0, 640, 480)


class SensorNoise(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    depth_sigma_mm: float = Field(2.0, ge=0)
    dropout: float = Field(0.02, ge=0, le=1)
    intensity_sigma: float = Field(0.02, ge=0)
    occluder_fraction: float = Field(0.0, ge=0, lt=1)

    @classmethod
    def clean(cls) -> "SensorNoise":
        return cls(depth_sigma_mm=0.0, dropout=0.0, intensity_sigma=0.0)


@dataclass(eq=False)
class SyntheticScene:
    shape: str
    mesh: TriMesh
    pose_gt: Pose
    k: Intrinsics
    rgb: np.ndarray              # intensidad observada (H, W) en [0, 1]
    depth: np.ndarray            # profundidad observada en mm, 0 = sin medida
    render_depth: np.ndarray     # profundidad renderizada sin ruido
    mask: np.ndarray             # máscara del objeto sin oclusión
    visible_mask: np.ndarray     # máscara tras el oclusor
    occluder_fraction: float
    seed: int

    @property
    def visible_fraction(self) -> float:
        total = int(self.mask.sum())
        return float(self.visible_mask.sum() / total) if total else 0.0


# ============================
# Mallas procedurales
# ============================
def _from_trimesh(mesh: trimesh.Trimesh, name: str, texture: Optional[SolidTexture] = None) -> TriMesh:
    return TriMesh(np.asarray(mesh.vertices, dtype=np.float64), np.asarray(mesh.faces, dtype=np.int64), name,
                   texture)


def make_mesh(shape: str, diameter: float, rng: np.random.Generator, textured: bool = True) -> TriMesh:
    """Malla centrada en el origen con el diámetro pedido (máxima distancia entre vértices).

    Con `textured` lleva una textura sólida aleatoria con nodos cada TEXTURE_SPACING·diámetro.
    """
    if shape == "cube":
        mesh = trimesh.creation.box(extents=[diameter / np.sqrt(3.0)] * 3)
    elif shape == "icosphere":
        mesh = trimesh.creation.icosphere(subdivisions=2, radius=diameter / 2.0)
    elif shape == "cylinder":
        radius = diameter / (2.0 * np.sqrt(1.0 + 1.2 ** 2))
        mesh = trimesh.creation.cylinder(radius=radius, height=2.4 * radius, sections=32)
    elif shape == "convex":
        pts = rng.normal(size=(40, 3)) * rng.uniform(0.5, 1.0, size=3)
        mesh = trimesh.convex.convex_hull(pts)
        mesh.apply_translation(-mesh.vertices.mean(axis=0))
        tmp = _from_trimesh(mesh, shape)
        mesh.apply_scale(diameter / tmp.diameter)
    else:
        raise ValueError(f"forma desconocida: {shape} (opciones: {', '.join(SHAPES)})")
    # la semilla se consume siempre: la pose de la escena no depende de `textured`
    texture_seed = int(rng.integers(2 ** 31))
    texture = None
    if textured:
        lo, hi = mesh.bounds
        texture = SolidTexture.covering(lo, hi, TEXTURE_SPACING * diameter, texture_seed)
    return _from_trimesh(mesh, shape, texture)


def random_pose(k: Intrinsics, rng: np.random.Generator) -> Pose:
    """Rotación uniforme y traslación con t_z en [600, 1400] mm y el centro cerca del eje óptico"""
    R = Rotation.random(random_state=rng).as_matrix()
    tz = rng.uniform(*DEPTH_RANGE_MM)
    half_u = 0.2 * (k.width / 2.0) / k.fx
    half_v = 0.2 * (k.height / 2.0) / k.fy
    tx = (rng.uniform(-half_u, half_u) + (k.width / 2.0 - k.cx) / k.fx) * tz
    ty = (rng.uniform(-half_v, half_v) + (k.height / 2.0 - k.cy) / k.fy) * tz
    return Pose(R, np.array([tx, ty, tz]))


# ============================
# Ruido de sensor
# ============================
def _occluder(mask: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Semiplano que tapa `fraction` de los píxeles de la máscara"""
    H, W = mask.shape
    angle = rng.uniform(0.0, 2.0 * np.pi)
    direction = np.array([np.cos(angle), np.sin(angle)])
    vv, uu = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")
    s = uu * direction[0] + vv * direction[1]
    threshold = np.quantile(s[mask], 1.0 - fraction)
    return s > threshold


def apply_sensor_noise(depth: np.ndarray, intensity: np.ndarray, mask: np.ndarray,
                       noise: SensorNoise, rng: np.random.Generator):
    """Devuelve (profundidad, intensidad, máscara visible) observadas"""
    depth = depth.copy()
    intensity = intensity.copy()
    visible = mask.copy()
    if noise.occluder_fraction > 0 and mask.any():
        occ = _occluder(mask, noise.occluder_fraction, rng)
        depth[occ] = max(depth[mask].min() - OCCLUDER_GAP_MM, 1.0)
        intensity[occ] = OCCLUDER_INTENSITY
        visible &= ~occ
    if noise.depth_sigma_mm > 0:
        jitter = rng.normal(0.0, noise.depth_sigma_mm, size=depth.shape)
        depth = np.where(depth > 0, np.maximum(depth + jitter, 1.0), 0.0)
    if noise.dropout > 0:
        drop = rng.random(depth.shape) < noise.dropout
        depth[drop & (depth > 0)] = 0.0
    if noise.intensity_sigma > 0:
        intensity = np.clip(intensity + rng.normal(0.0, noise.intensity_sigma, size=intensity.shape), 0.0, 1.0)
    return depth, intensity, visible


def gen_scene(shape: str = "cube", seed: int = 0, noise: Optional[SensorNoise] = None,
              k: Optional[Intrinsics] = None, diameter: Optional[float] = None,
              textured: bool = True) -> SyntheticScene:
    """Genera una escena reproducible: la misma semilla produce la misma escena bit a bit"""
    noise = noise or SensorNoise()
    k = k or default_intrinsics()
    rng = stream(seed, "scene", shape)
    diameter = diameter or rng.uniform(*DIAMETER_RANGE_MM)
    mesh = make_mesh(shape, diameter, rng, textured)
    pose = random_pose(k, rng)
    out = render(mesh, pose, k)
    depth, intensity, visible = apply_sensor_noise(out.depth, out.intensity, out.mask, noise,
                                                   stream(seed, "sensor", shape))
    logger.debug(f"Escena sintética {shape} (semilla {seed}): diámetro {mesh.diameter:.1f} mm, "
                 f"t_z {pose.t[2]:.0f} mm, {int(out.mask.sum())} píxeles de objeto")
    return SyntheticScene(shape, mesh, pose, k, intensity, depth, out.depth, out.mask, visible,
                          noise.occluder_fraction, seed)


# ============================
# Perturbación de poses
# ============================
def _unit_vector(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    while np.linalg.norm(v) < 1e-9:
        v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def perturb_pose(p_gt: Pose, spec: Optional[NoiseSpec] = None, *key) -> Pose:
    """Ruido sobre la pose GT: rotación aplicada por la izquierda alrededor del centro del objeto.

    `key` distingue escenas con la misma semilla de ruido.
    """
    spec = spec or NoiseSpec()
    rng = stream(spec.seed, "perturb", *key)
    if spec.mode == "level":
        rotvec = _unit_vector(rng) * np.radians(spec.level)
        dt = _unit_vector(rng) * spec.level
    else:
        rotvec = np.radians(rng.normal(0.0, 1.0, size=3) * np.asarray(spec.sigma_rot_deg))
        dt = rng.normal(0.0, 1.0, size=3) * np.asarray(spec.sigma_t_mm)
    dR = Rotation.from_rotvec(rotvec).as_matrix()
    return Pose(dR @ p_gt.R, p_gt.t + dt)


def level_spec(level: float, seed: int = 0) -> NoiseSpec:
    return NoiseSpec(mode="level", level=level, seed=seed)
