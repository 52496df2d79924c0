# harness/bop_io.py
"""Lectura y escritura en el formato de directorios BOP: escenas, modelos y CSV de resultados."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from functools import partial
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config.refine_config import RefineConfig
from config.settings import POSE_REFINE_DEPTH_SCALE
from core.errors import MalformedJson, MissingFile, PoseRefineError
from core.geometry import Intrinsics, Pose, orthonormality_drift, orthonormalize
from core.mesh_render import (
    SolidTexture, TriMesh, load_mesh, read_depth_png, read_intensity_png, save_ply, write_depth_png,
    write_intensity_png,
)
from evaluation.metrics import MetricReport, SymmetrySet, average_recall, evaluate_many, evaluate_pose

logger = logging.getLogger(__name__)

GT_ORTHO_TOL = 1e-4
RESULT_HEADER = ["scene_id", "im_id", "obj_id", "score", "R", "t", "time"]
SYNTH_DEPTH_SCALE = 0.1


# ============================
# Tipos
# ============================
@dataclass(eq=False)
class BopFrame:
    scene_id: int
    im_id: int
    rgb: np.ndarray
    depth: np.ndarray        # mm
    k: Intrinsics
    gts: List[Tuple[int, Pose]]
    depth_scale: float

    def gt_for(self, obj_id: int, near: Optional[Pose] = None) -> Pose:
        """Pose GT del objeto; con varias instancias, la más cercana a `near`"""
        candidates = [p for oid, p in self.gts if oid == obj_id]
        if not candidates:
            raise MalformedJson(f"scene_gt.json (escena {self.scene_id})", f"im_id {self.im_id} sin GT para obj_id {obj_id}")
        if near is None or len(candidates) == 1:
            return candidates[0]
        return min(candidates, key=lambda p: np.linalg.norm(p.t - near.t))


@dataclass(eq=False)
class BopResultRow:
    scene_id: int
    im_id: int
    obj_id: int
    score: float
    pose: Pose
    time: float = -1.0


# ============================
# JSON
# ============================
def _read_json(path: Path):
    if not path.exists():
        raise MissingFile(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise MalformedJson(path, f"línea {e.lineno}, columna {e.colno}: {e.msg}")


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)


def _gt_pose(entry: dict, path: Path) -> Pose:
    try:
        R = np.asarray(entry["cam_R_m2c"], dtype=np.float64).reshape(3, 3)
        t = np.asarray(entry["cam_t_m2c"], dtype=np.float64).reshape(3)
    except (KeyError, ValueError) as e:
        raise MalformedJson(path, f"entrada GT inválida: {e}")
    drift = orthonormality_drift(R)
    if drift > GT_ORTHO_TOL:
        logger.warning(f"⚠️ Rotación GT no ortonormal en {path} (deriva {drift:.2e}); se repara por descomposición polar")
        R = orthonormalize(R)
    return Pose(R, t)


def _scene_dir(root, split: str, scene_id: int) -> Path:
    return Path(root) / split / f"{scene_id:06d}"


# ============================
# Escenas
# ============================
def load_bop_scene(root, scene_id: int, im_id: int, split: str = "test",
                   depth_scale: Optional[float] = None) -> BopFrame:
    """Lee intrínsecos, GT, intensidad y profundidad (en mm) de una imagen BOP"""
    scene_dir = _scene_dir(root, split, scene_id)
    cam_path = scene_dir / "scene_camera.json"
    gt_path = scene_dir / "scene_gt.json"
    cameras = _read_json(cam_path)
    gts_all = _read_json(gt_path)
    key = str(im_id)
    if key not in cameras:
        raise MalformedJson(cam_path, f"sin entrada para im_id {im_id}")
    cam = cameras[key]
    try:
        K = np.asarray(cam["cam_K"], dtype=np.float64).reshape(3, 3)
    except (KeyError, ValueError) as e:
        raise MalformedJson(cam_path, f"cam_K inválido: {e}")
    scale = float(cam.get("depth_scale", depth_scale or POSE_REFINE_DEPTH_SCALE))

    rgb_path = scene_dir / "rgb" / f"{im_id:06d}.png"
    if not rgb_path.exists() and (scene_dir / "rgb" / f"{im_id:06d}.jpg").exists():
        rgb_path = scene_dir / "rgb" / f"{im_id:06d}.jpg"
    rgb = read_intensity_png(rgb_path)
    depth = read_depth_png(scene_dir / "depth" / f"{im_id:06d}.png", scale)
    H, W = depth.shape
    k = Intrinsics.from_matrix(K, W, H)
    gts = [(int(e["obj_id"]), _gt_pose(e, gt_path)) for e in gts_all.get(key, [])]
    logger.debug(f"Escena BOP {scene_id}/{im_id} cargada: {len(gts)} objetos, depth_scale={scale}")
    return BopFrame(scene_id, im_id, rgb, depth, k, gts, scale)


def write_bop_frame(root, scene_id: int, im_id: int, rgb: np.ndarray, depth: np.ndarray, k: Intrinsics,
                    gts: Sequence[Tuple[int, Pose]], split: str = "test",
                    depth_scale: float = SYNTH_DEPTH_SCALE) -> None:
    """Añade una imagen a la escena (JSON de cámara y GT, PNG de intensidad y profundidad)"""
    scene_dir = _scene_dir(root, split, scene_id)
    cam_path = scene_dir / "scene_camera.json"
    gt_path = scene_dir / "scene_gt.json"
    cameras = _read_json(cam_path) if cam_path.exists() else {}
    gts_all = _read_json(gt_path) if gt_path.exists() else {}
    cameras[str(im_id)] = {"cam_K": k.as_matrix().reshape(-1).tolist(), "depth_scale": depth_scale}
    gts_all[str(im_id)] = [
        {"obj_id": int(oid), "cam_R_m2c": p.R.reshape(-1).tolist(), "cam_t_m2c": p.t.tolist()} for oid, p in gts
    ]
    _write_json(cam_path, cameras)
    _write_json(gt_path, gts_all)
    write_intensity_png(scene_dir / "rgb" / f"{im_id:06d}.png", rgb)
    write_depth_png(scene_dir / "depth" / f"{im_id:06d}.png", depth, depth_scale)


# ============================
# Modelos
# ============================
def load_models_info(root) -> Dict[int, dict]:
    info = _read_json(Path(root) / "models" / "models_info.json")
    return {int(k): v for k, v in info.items()}


def load_object_model(root, obj_id: int) -> TriMesh:
    """PLY del objeto; la textura sólida, si models_info.json la declara, se regenera desde su semilla"""
    mesh = load_mesh(Path(root) / "models" / f"obj_{obj_id:06d}.ply")
    info_path = Path(root) / "models" / "models_info.json"
    texture = load_models_info(root).get(obj_id, {}).get("texture") if info_path.exists() else None
    if texture is None:
        return mesh
    try:
        return TriMesh(mesh.vertices, mesh.faces, mesh.name, SolidTexture.from_json(texture))
    except (KeyError, TypeError, ValueError) as e:
        raise MalformedJson(info_path, f"textura del objeto {obj_id} inválida: {e}")


def load_symmetries(root, obj_id: int) -> SymmetrySet:
    info = load_models_info(root).get(obj_id, {})
    return SymmetrySet.from_models_info(info)


def write_object_model(root, obj_id: int, mesh: TriMesh) -> None:
    """Guarda el PLY y actualiza models_info.json con el diámetro y la textura (sin simetrías)"""
    models = Path(root) / "models"
    save_ply(mesh, models / f"obj_{obj_id:06d}.ply")
    info_path = models / "models_info.json"
    info = _read_json(info_path) if info_path.exists() else {}
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    size = hi - lo
    info[str(obj_id)] = {
        "diameter": float(mesh.diameter),
        "min_x": float(lo[0]), "min_y": float(lo[1]), "min_z": float(lo[2]),
        "size_x": float(size[0]), "size_y": float(size[1]), "size_z": float(size[2]),
    }
    if mesh.texture is not None:
        info[str(obj_id)]["texture"] = mesh.texture.to_json()
    _write_json(info_path, info)


# ============================
# CSV de resultados
# ============================
def _fmt(values) -> str:
    return " ".join(f"{float(v):.9g}" for v in values)


def write_bop_results(rows: Sequence[BopResultRow], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(RESULT_HEADER)
        for r in rows:
            writer.writerow([r.scene_id, r.im_id, r.obj_id, f"{r.score:.9g}", _fmt(r.pose.R.reshape(-1)),
                             _fmt(r.pose.t), f"{r.time:.9g}"])
    logger.info(f"💾 {len(rows)} resultados escritos en {path}")


def read_bop_results(path) -> List[BopResultRow]:
    path = Path(path)
    if not path.exists():
        raise MissingFile(path)
    rows = []
    with open(path, "r", newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or [n.strip() for n in reader.fieldnames] != RESULT_HEADER:
            raise MalformedJson(path, f"cabecera CSV inesperada: {reader.fieldnames}")
        for line_no, rec in enumerate(reader, start=2):
            try:
                R = np.array(rec["R"].split(), dtype=np.float64).reshape(3, 3)
                t = np.array(rec["t"].split(), dtype=np.float64).reshape(3)
                rows.append(BopResultRow(int(rec["scene_id"]), int(rec["im_id"]), int(rec["obj_id"]),
                                         float(rec["score"]), Pose(orthonormalize(R), t), float(rec["time"])))
            except (ValueError, TypeError, AttributeError, PoseRefineError) as e:
                raise MalformedJson(path, f"fila {line_no}: {e}")
    return rows


# ============================
# Refinamiento por lotes y evaluación de un conjunto
# ============================
class _DatasetCache:
    def __init__(self, root, split: str):
        self.root = root
        self.split = split
        self.frames: Dict[Tuple[int, int], BopFrame] = {}
        self.meshes: Dict[int, TriMesh] = {}

    def frame(self, scene_id: int, im_id: int) -> BopFrame:
        key = (scene_id, im_id)
        if key not in self.frames:
            self.frames[key] = load_bop_scene(self.root, scene_id, im_id, self.split)
        return self.frames[key]

    def mesh(self, obj_id: int) -> TriMesh:
        if obj_id not in self.meshes:
            self.meshes[obj_id] = load_object_model(self.root, obj_id)
        return self.meshes[obj_id]


def refine_bop_results(root, rows: Sequence[BopResultRow], cfg: Optional[RefineConfig] = None,
                       split: str = "test") -> List[BopResultRow]:
    """Refina cada pose de un CSV de resultados como única hipótesis; los fallos conservan la pose de entrada"""
    from core.refiner import refine

    cfg = cfg or RefineConfig()
    data = _DatasetCache(root, split)
    out = []
    failures = 0
    for r in rows:
        frame = data.frame(r.scene_id, r.im_id)
        try:
            trace = refine(frame.rgb, frame.depth, data.mesh(r.obj_id), frame.k, r.pose, cfg)
            out.append(BopResultRow(r.scene_id, r.im_id, r.obj_id, r.score, trace.final_pose,
                                    max(r.time, 0.0) + trace.elapsed_s))
        except PoseRefineError as e:
            failures += 1
            logger.warning(f"⚠️ No se pudo refinar {r.scene_id}/{r.im_id}/{r.obj_id} ({e.code}): {e.message}")
            out.append(r)
    logger.info(f"Refinamiento por lotes: {len(rows)} filas, {failures} sin refinar")
    return out


def evaluate_results(root, rows: Sequence[BopResultRow], split: str = "test") -> MetricReport:
    data = _DatasetCache(root, split)
    info = load_models_info(root)
    tasks = []
    for r in rows:
        frame = data.frame(r.scene_id, r.im_id)
        mesh = data.mesh(r.obj_id)
        obj_info = info.get(r.obj_id, {})
        syms = SymmetrySet.from_models_info(obj_info)
        tasks.append(partial(evaluate_pose, r.pose, frame.gt_for(r.obj_id, r.pose), mesh, frame.depth, frame.k,
                             syms, obj_info.get("diameter"), (r.scene_id, r.im_id, r.obj_id)))
    report = average_recall(evaluate_many(tasks))
    logger.info(f"📊 Evaluación de {len(rows)} resultados: AR={report.ar:.4f} "
                f"(VSD {report.ar_vsd:.4f}, MSSD {report.ar_mssd:.4f}, MSPD {report.ar_mspd:.4f})")
    return report
