# harness/bench.py
"""Suites de benchmark sobre escenas sintéticas: barrido de ruido, de iteraciones y comparación
con la línea base RANSAC-Kabsch. Cada suite devuelve filas listas para CSV."""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from cache.points_cache import points_cache
from config.refine_config import RefineConfig
from config.settings import POSE_REFINE_THREADS
from core.errors import PoseRefineError
from core.geometry import Pose, apply_residual, rotation_error_deg, translation_error_mm
from core.refiner import ransac_kabsch_baseline, refine
from evaluation.metrics import add_error
from harness.synthetic import SensorNoise, gen_scene, level_spec, perturb_pose

logger = logging.getLogger(__name__)

NOISE_LEVELS = (3, 5, 10, 20, 30, 40, 50)
BENCH_SHAPES = ("cube", "icosphere", "cylinder")
ITERATION_SWEEP_LEVEL = 30
ITERATION_SWEEP_MAX = 10
BASELINE_LEVEL = 15
BASELINE_OCCLUSIONS = (0.0, 0.3)
ADD_RECALL_FRACTION = 0.1
SUITES = ("noise-sweep", "iteration-sweep", "baseline-compare")


@dataclass
class PoseErrors:
    rot_deg: float
    trans_mm: float
    add_mm: float
    diameter: float

    @property
    def add_ok(self) -> bool:
        return self.add_mm < ADD_RECALL_FRACTION * self.diameter


@dataclass
class SceneRun:
    seed: int
    shape: str
    init: PoseErrors
    per_iteration: List[PoseErrors] = field(default_factory=list)
    baseline: Optional[PoseErrors] = None
    failed: bool = False


def _errors(p: Pose, p_gt: Pose, mesh) -> PoseErrors:
    pts = points_cache.get_model_points(mesh)
    return PoseErrors(rotation_error_deg(p.R, p_gt.R), translation_error_mm(p.t, p_gt.t),
                      add_error(p, p_gt, pts), mesh.diameter)


def run_scene(index: int, seed: int, level: float, cfg: RefineConfig, occlusion: float = 0.0,
              with_baseline: bool = False) -> SceneRun:
    """Una escena: genera, perturba al nivel L, refina y (opcional) ajusta la línea base"""
    shape = BENCH_SHAPES[index % len(BENCH_SHAPES)]
    scene_seed = seed * 100003 + index
    scene = gen_scene(shape, scene_seed, SensorNoise(occluder_fraction=occlusion))
    p_init = perturb_pose(scene.pose_gt, level_spec(level, seed), index, level)
    run = SceneRun(scene_seed, shape, _errors(p_init, scene.pose_gt, scene.mesh))
    try:
        trace = refine(scene.rgb, scene.depth, scene.mesh, scene.k, p_init, cfg)
    except PoseRefineError as e:
        logger.warning(f"⚠️ Escena {index} ({shape}) sin refinar ({e.code}): se conserva la inicialización")
        run.failed = True
        run.per_iteration = [run.init] * (cfg.iterations + 1)
        if with_baseline:
            run.baseline = run.init
        return run
    run.per_iteration = [_errors(r.pose, scene.pose_gt, scene.mesh) for r in trace.records]
    if with_baseline:
        # la línea base ve las mismas correspondencias que la primera iteración del refinador
        matches = trace.initial_matches
        try:
            if matches is None:
                raise PoseRefineError("sin correspondencias de la primera iteración")
            A = ransac_kabsch_baseline(matches, trace.reference.depth * trace.reference.mask,
                                       scene.depth, trace.grid, cfg, depth_k=scene.k)
            run.baseline = _errors(apply_residual(A, p_init), scene.pose_gt, scene.mesh)
        except PoseRefineError as e:
            logger.warning(f"⚠️ Línea base sin solución en la escena {index} ({e.code})")
            run.baseline = run.init
    return run


def _parallel(jobs: Sequence[Callable[[], SceneRun]], threads: Optional[int]) -> List[SceneRun]:
    with ThreadPoolExecutor(max_workers=threads or POSE_REFINE_THREADS) as pool:
        futures = [pool.submit(job) for job in jobs]
        return [f.result() for f in futures]


def _median(values) -> float:
    return float(np.median(values)) if len(values) else float("nan")


def _recall(errors: Sequence[PoseErrors]) -> float:
    return float(np.mean([e.add_ok for e in errors])) if errors else float("nan")


# ============================
# Suites
# ============================
def noise_sweep(n_seeds: int, seed: int = 0, cfg: Optional[RefineConfig] = None,
                levels: Sequence[int] = NOISE_LEVELS, threads: Optional[int] = None) -> List[Dict]:
    """Una fila por nivel L: recall ADD < 10% del diámetro y medianas antes y después de refinar"""
    cfg = cfg or RefineConfig()
    rows = []
    for level in levels:
        runs = _parallel([lambda i=i, lv=level: run_scene(i, seed, lv, cfg) for i in range(n_seeds)], threads)
        init = [r.init for r in runs]
        final = [r.per_iteration[-1] for r in runs]
        rows.append({
            "level": level,
            "scenes": len(runs),
            "seed": seed,
            "init_recall": _recall(init),
            "refined_recall": _recall(final),
            "init_median_rot_deg": _median([e.rot_deg for e in init]),
            "refined_median_rot_deg": _median([e.rot_deg for e in final]),
            "init_median_trans_mm": _median([e.trans_mm for e in init]),
            "refined_median_trans_mm": _median([e.trans_mm for e in final]),
            "refined_median_add_mm": _median([e.add_mm for e in final]),
            "failures": sum(r.failed for r in runs),
        })
        logger.info(f"Nivel L{level}: recall {rows[-1]['init_recall']:.3f} -> {rows[-1]['refined_recall']:.3f}")
    return rows


def iteration_sweep(n_seeds: int, seed: int = 0, cfg: Optional[RefineConfig] = None,
                    level: int = ITERATION_SWEEP_LEVEL, max_iterations: int = ITERATION_SWEEP_MAX,
                    threads: Optional[int] = None) -> List[Dict]:
    """Una fila por iteración k = 0..max a partir de una única traza de max iteraciones"""
    cfg = RefineConfig.model_validate({**(cfg or RefineConfig()).model_dump(), "iterations": max_iterations})
    runs = _parallel([lambda i=i: run_scene(i, seed, level, cfg) for i in range(n_seeds)], threads)
    rows = []
    for k in range(max_iterations + 1):
        errs = [r.per_iteration[k] for r in runs]
        rows.append({
            "iteration": k,
            "level": level,
            "scenes": len(runs),
            "seed": seed,
            "median_add_mm": _median([e.add_mm for e in errs]),
            "median_rot_deg": _median([e.rot_deg for e in errs]),
            "median_trans_mm": _median([e.trans_mm for e in errs]),
            "add_recall": _recall(errs),
        })
    logger.info(f"Barrido de iteraciones L{level}: mediana ADD {rows[0]['median_add_mm']:.2f} -> "
                f"{rows[-1]['median_add_mm']:.2f} mm")
    return rows


def baseline_compare(n_seeds: int, seed: int = 0, cfg: Optional[RefineConfig] = None,
                     occlusions: Sequence[float] = BASELINE_OCCLUSIONS, level: int = BASELINE_LEVEL,
                     threads: Optional[int] = None) -> List[Dict]:
    """Refinador recurrente frente a RANSAC-Kabsch de un solo paso con las correspondencias de la iteración 0"""
    cfg = cfg or RefineConfig()
    rows = []
    for occ in occlusions:
        runs = _parallel([lambda i=i, o=occ: run_scene(i, seed, level, cfg, o, True) for i in range(n_seeds)],
                         threads)
        final = [r.per_iteration[-1] for r in runs]
        base = [r.baseline for r in runs]
        rows.append({
            "occlusion": occ,
            "level": level,
            "scenes": len(runs),
            "seed": seed,
            "refiner_median_rot_deg": _median([e.rot_deg for e in final]),
            "refiner_median_trans_mm": _median([e.trans_mm for e in final]),
            "baseline_median_rot_deg": _median([e.rot_deg for e in base]),
            "baseline_median_trans_mm": _median([e.trans_mm for e in base]),
            "refiner_recall": _recall(final),
            "baseline_recall": _recall(base),
        })
    return rows


def run_suite(suite: str, n_seeds: int, seed: int = 0, cfg: Optional[RefineConfig] = None,
              threads: Optional[int] = None) -> List[Dict]:
    if suite == "noise-sweep":
        return noise_sweep(n_seeds, seed, cfg, threads=threads)
    if suite == "iteration-sweep":
        return iteration_sweep(n_seeds, seed, cfg, threads=threads)
    if suite == "baseline-compare":
        return baseline_compare(n_seeds, seed, cfg, threads=threads)
    raise ValueError(f"suite desconocida: {suite} (opciones: {', '.join(SUITES)})")


def write_table(rows: Sequence[Dict], path) -> None:
    """CSV con formato fijo de decimales para que dos ejecuciones iguales den bytes iguales"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("", encoding="utf-8")
        return
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(list(rows[0].keys()))
        for row in rows:
            writer.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in row.values()])
    logger.info(f"💾 Tabla de {len(rows)} filas escrita en {path}")
