# prueba_geometry.py
import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.spatial.transform import Rotation

from core.errors import DegenerateConfiguration, DegenerateInput, InvalidDepth, NearPiRotation
from core.geometry import (
    Intrinsics,
    Pose,
    Rot6D,
    Twist,
    apply_residual,
    decode_residual,
    encode_residual,
    exp_twist,
    kabsch,
    log_pose,
    orthonormality_drift,
    pose_residual,
    rot6d_to_matrix,
    rotation_error_deg,
)


# ============================
# Pose y residuo
# ============================
def test_residuo_reconstruye_la_pose(rng, make_pose):
    for _ in range(20):
        p0, pk = make_pose(rng), make_pose(rng)
        dp = pose_residual(p0, pk)
        assert apply_residual(dp, p0).allclose(pk, atol=1e-9)


def test_residuo_de_una_pose_consigo_misma_es_identidad(rng, make_pose):
    p = make_pose(rng)
    assert pose_residual(p, p).allclose(Pose.identity(), atol=1e-12)


def test_inversa_y_composicion(rng, make_pose):
    p = make_pose(rng)
    assert (p @ p.inverse()).allclose(Pose.identity(), atol=1e-9)
    assert_allclose(Pose.from_matrix(p.as_matrix()).as_matrix(), p.as_matrix())


def test_pose_repara_deriva_pequena():
    R = np.eye(3)
    R[0, 1] = 1e-8
    p = Pose(R, np.zeros(3))
    assert orthonormality_drift(p.R) < 1e-12


def test_pose_rechaza_matriz_que_no_es_rotacion():
    with pytest.raises(DegenerateInput):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(DegenerateInput):
        Pose(2.0 * np.eye(3), np.zeros(3))
    with pytest.raises(DegenerateInput):
        Pose(np.eye(3), np.array([0.0, np.nan, 1.0]))


def test_intrinsecos_invalidos():
    with pytest.raises(DegenerateInput):
        Intrinsics(0.0, 500.0, 32.0, 24.0, 64, 48)
    with pytest.raises(DegenerateInput):
        Intrinsics(500.0, 500.0, 32.0, 24.0, 0, 48)


def test_intrinsecos_submuestreados_comparten_rayo(small_k):
    g = small_k.subsampled(8)
    assert (g.width, g.height) == (8, 6)
    # centro de la celda (i, j) = píxel (8i + 4, 8j + 4) de la imagen completa
    i, j = 2, 5
    ray_full = ((8 * j + 4 + 0.5 - small_k.cx) / small_k.fx, (8 * i + 4 + 0.5 - small_k.cy) / small_k.fy)
    ray_grid = ((j + 0.5 - g.cx) / g.fx, (i + 0.5 - g.cy) / g.fy)
    assert_allclose(ray_full, ray_grid)


# ============================
# Rotación 6D y residuo de 9 dimensiones
# ============================
def test_rot6d_ida_y_vuelta(rng):
    for R in Rotation.random(10, random_state=rng).as_matrix():
        assert_allclose(rot6d_to_matrix(Rot6D.from_matrix(R)), R, atol=1e-12)


def test_rot6d_gram_schmidt_de_columnas_no_ortogonales():
    R = rot6d_to_matrix(Rot6D(np.array([2.0, 0.0, 0.0]), np.array([1.0, 3.0, 0.0])))
    assert_allclose(R, np.eye(3), atol=1e-12)


def test_rot6d_degenerado():
    with pytest.raises(DegenerateInput):
        rot6d_to_matrix(Rot6D(np.zeros(3), np.array([0.0, 1.0, 0.0])))
    with pytest.raises(DegenerateInput):
        rot6d_to_matrix(Rot6D(np.array([1.0, 0.0, 0.0]), np.array([2.0, 0.0, 0.0])))


def test_codificar_decodificar_residuo(rng, vga_k):
    for _ in range(10):
        R0 = Rotation.random(random_state=rng).as_matrix()
        p_cur = Pose(R0, np.array([rng.normal(0, 50), rng.normal(0, 50), rng.uniform(500, 1500)]))
        dR = Rotation.from_rotvec(rng.normal(0, 0.2, 3)).as_matrix()
        p_new = Pose(dR @ R0, p_cur.t + rng.normal(0, 20, 3))
        res = encode_residual(p_cur, p_new, vga_k)
        assert res.as_vector().shape == (9,)
        dp = decode_residual(res, p_cur, vga_k)
        assert apply_residual(dp, p_cur).allclose(p_new, atol=1e-8)


def test_residuo_nulo_codifica_ceros_de_traslacion(vga_k):
    p = Pose(np.eye(3), np.array([10.0, -20.0, 800.0]))
    res = encode_residual(p, p, vga_k)
    assert_allclose(res.vt, np.zeros(3), atol=1e-12)
    assert_allclose(res.rot.as_vector(), [1, 0, 0, 0, 1, 0])


def test_codificar_con_profundidad_no_positiva(vga_k):
    good = Pose(np.eye(3), np.array([0.0, 0.0, 500.0]))
    bad = Pose(np.eye(3), np.array([0.0, 0.0, -10.0]))
    with pytest.raises(InvalidDepth):
        encode_residual(good, bad, vga_k)
    with pytest.raises(InvalidDepth):
        encode_residual(bad, good, vga_k)


# ============================
# Kabsch
# ============================
@pytest.mark.parametrize("seed", range(5))
def test_kabsch_recupera_la_transformacion(seed, make_pose):
    rng = np.random.default_rng(seed)
    p = make_pose(rng)
    src = rng.normal(0.0, 50.0, size=(30, 3))
    est = kabsch(src, p.transform(src))
    assert est.allclose(p, atol=1e-8)


def test_kabsch_invariante_a_la_escala_de_pesos(rng, make_pose):
    p = make_pose(rng)
    src = rng.normal(0.0, 50.0, size=(25, 3))
    dst = p.transform(src) + rng.normal(0.0, 1.0, size=src.shape)
    w = rng.uniform(0.1, 1.0, size=25)
    a = kabsch(src, dst, w)
    b = kabsch(src, dst, 37.0 * w)
    assert a.allclose(b, atol=1e-9)


def test_kabsch_nunca_devuelve_reflexion(rng):
    src = rng.normal(size=(10, 3))
    dst = src * np.array([1.0, 1.0, -1.0])
    est = kabsch(src, dst)
    assert np.linalg.det(est.R) > 0


def test_kabsch_degenerado():
    with pytest.raises(DegenerateConfiguration):
        kabsch(np.zeros((2, 3)), np.zeros((2, 3)))
    line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateConfiguration):
        kabsch(line, line)
    pts = np.eye(3)
    with pytest.raises(DegenerateConfiguration):
        kabsch(pts, pts, np.zeros(3))


# ============================
# Twists
# ============================
def test_exp_log_ida_y_vuelta(rng, make_pose):
    for _ in range(10):
        p = make_pose(rng)
        if Rotation.from_matrix(p.R).magnitude() > np.pi - 1e-3:
            continue
        assert exp_twist(log_pose(p)).allclose(p, atol=1e-8)


def test_exp_de_rotacion_pura_y_angulo_pequeno():
    theta = np.array([0.0, 0.0, 1e-5])
    p = exp_twist(Twist(np.zeros(3), theta))
    assert rotation_error_deg(p.R, np.eye(3)) == pytest.approx(np.degrees(1e-5), rel=1e-6)
    q = exp_twist(Twist(np.array([1.0, 2.0, 3.0]), np.zeros(3)))
    assert_allclose(q.t, [1.0, 2.0, 3.0])


def test_log_cerca_de_pi():
    R = Rotation.from_rotvec([np.pi, 0.0, 0.0]).as_matrix()
    with pytest.raises(NearPiRotation):
        log_pose(Pose(R, np.zeros(3)))


# ============================
# Barridos aleatorios
# ============================
def test_kabsch_sobre_mil_semillas(make_pose):
    worst_rot, worst_t = 0.0, 0.0
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        p = make_pose(rng)
        src = rng.normal(0.0, 50.0, size=(int(rng.integers(3, 40)), 3))
        est = kabsch(src, p.transform(src))
        worst_rot = max(worst_rot, rotation_error_deg(est.R, p.R))
        worst_t = max(worst_t, float(np.linalg.norm(est.t - p.t)))
    assert worst_rot < 1e-6
    assert worst_t < 1e-6


def test_codificar_decodificar_mil_pares(vga_k):
    rng = np.random.default_rng(99)
    worst_rot, worst_t = 0.0, 0.0
    for _ in range(1000):
        R0 = Rotation.random(random_state=rng).as_matrix()
        p_cur = Pose(R0, np.array([rng.normal(0, 80), rng.normal(0, 80), rng.uniform(400, 2000)]))
        dR = Rotation.random(random_state=rng).as_matrix()
        p_new = Pose(dR @ R0, p_cur.t + rng.normal(0, 50, 3))
        out = apply_residual(decode_residual(encode_residual(p_cur, p_new, vga_k), p_cur, vga_k), p_cur)
        worst_rot = max(worst_rot, rotation_error_deg(out.R, p_new.R))
        worst_t = max(worst_t, float(np.linalg.norm(out.t - p_new.t)))
    assert worst_rot < 1e-6
    assert worst_t < 1e-6
