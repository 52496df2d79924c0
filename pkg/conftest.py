# conftest.py
import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from core.geometry import Intrinsics, Pose
from core.mesh_render import TriMesh
from scipy.spatial.transform import Rotation


@pytest.fixture
def small_k():
    return Intrinsics(500.0, 500.0, 32.0, 24.0, 64, 48)


@pytest.fixture
def vga_k():
    return Intrinsics(572.4, 573.6, 325.3, 242.0, 640, 480)


@pytest.fixture
def cube_mesh():
    """Cubo de 100 mm de lado centrado en el origen"""
    h = 50.0
    v = np.array([[x, y, z] for x in (-h, h) for y in (-h, h) for z in (-h, h)])
    faces = np.array([
        [0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5],
        [0, 4, 5], [0, 5, 1], [2, 3, 7], [2, 7, 6],
        [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3],
    ])
    return TriMesh(v, faces, "cube")


@pytest.fixture
def plane_mesh():
    """Cuadrado de 200 mm en z = 0 (dos triángulos)"""
    v = np.array([[-100.0, -100.0, 0.0], [100.0, -100.0, 0.0], [100.0, 100.0, 0.0], [-100.0, 100.0, 0.0]])
    return TriMesh(v, np.array([[0, 1, 2], [0, 2, 3]]), "plane")


@pytest.fixture
def make_pose():
    """Fábrica de poses aleatorias a partir de un generador"""
    def _make(rng: np.random.Generator, t_scale: float = 100.0) -> Pose:
        R = Rotation.random(random_state=rng).as_matrix()
        return Pose(R, rng.normal(0.0, t_scale, 3))
    return _make


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
