# cache/points_cache.py
import logging
import threading
from typing import Dict, Tuple

import numpy as np

from core.mesh_render import TriMesh
from core.random_streams import stream

logger = logging.getLogger(__name__)

MODEL_POINTS = 1024
EVAL_POINTS = 10000


def farthest_point_sample(points: np.ndarray, n: int, seed: int = 0) -> np.ndarray:
    """Muestreo por punto más lejano; arranca en un índice sembrado. Si n >= N devuelve todos los puntos."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    N = len(points)
    if n >= N:
        return points.copy()
    rng = stream(seed, "farthest-point")
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = int(rng.integers(N))
    dist = np.linalg.norm(points - points[chosen[0]], axis=1)
    for i in range(1, n):
        chosen[i] = int(np.argmax(dist))
        dist = np.minimum(dist, np.linalg.norm(points - points[chosen[i]], axis=1))
    return points[chosen]


class ModelPointsCache:
    """Caché en memoria de puntos de modelo muestreados por malla"""

    def __init__(self):
        self._lock = threading.Lock()
        self._store: Dict[Tuple[str, int, int], np.ndarray] = {}

    def get_model_points(self, mesh: TriMesh, n: int = MODEL_POINTS, seed: int = 0) -> np.ndarray:
        key = (mesh.fingerprint, n, seed)
        with self._lock:
            cached = self._store.get(key)
        if cached is not None:
            logger.debug(f"✅ Puntos de modelo en caché para {mesh.name or key[0][:8]}")
            return cached
        points = farthest_point_sample(mesh.vertices, n, seed)
        points.setflags(write=False)
        with self._lock:
            self._store.setdefault(key, points)
            points = self._store[key]
        logger.debug(f"Puntos de modelo calculados para {mesh.name or key[0][:8]}: {len(points)}")
        return points

    def get_eval_points(self, mesh: TriMesh, seed: int = 0) -> np.ndarray:
        """Todos los vértices si son <= 10k, si no 10k por punto más lejano"""
        return self.get_model_points(mesh, EVAL_POINTS, seed)

    def clear(self):
        with self._lock:
            self._store.clear()
        logger.info("🧹 Caché de puntos de modelo vaciada")


# Instancia singleton para importar
points_cache = ModelPointsCache()
