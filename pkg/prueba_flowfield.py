# prueba_flowfield.py
import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.spatial.transform import Rotation

from core.errors import MissingFile, ParseError
from core.flowfield import (
    DenseSE3Field,
    FlowField,
    field_dispersion,
    field_from_residual,
    field_to_flow,
    field_to_twist,
    gt_flow,
    load_flow,
    pose_induced_flow,
    save_flow,
    twist_to_field,
)
from core.geometry import Pose, apply_residual, pose_residual
from core.mesh_render import lift, render


def _cube_pose():
    R = Rotation.from_euler("xyz", [20.0, -30.0, 10.0], degrees=True).as_matrix()
    return Pose(R, np.array([0.0, 0.0, 700.0]))


def test_flujo_de_una_pose_a_si_misma_es_cero(cube_mesh, small_k):
    p = _cube_pose()
    out = render(cube_mesh, p, small_k)
    flow = pose_induced_flow(out, p, p, small_k)
    assert np.array_equal(flow.valid, out.mask)
    assert_allclose(flow.flow, 0.0, atol=1e-9)


def test_campo_constante_equivale_al_flujo_de_la_pose(cube_mesh, small_k):
    p0 = _cube_pose()
    dR = Rotation.from_rotvec([0.02, -0.01, 0.03]).as_matrix()
    p1 = Pose(dR @ p0.R, p0.t + np.array([5.0, -3.0, 10.0]))
    out = render(cube_mesh, p0, small_k)
    expected = pose_induced_flow(out, p0, p1, small_k)
    field = field_from_residual(pose_residual(p0, p1), out.mask)
    got = field_to_flow(field, lift(out.depth, small_k), small_k)
    assert np.array_equal(got.valid, expected.valid)
    assert_allclose(got.flow, expected.flow, atol=1e-9)


def test_traslacion_lateral_desplaza_pixeles(plane_mesh, small_k):
    p0 = Pose(np.eye(3), np.array([0.0, 0.0, 1000.0]))
    # 2 mm a 1000 mm con f = 500: un píxel
    p1 = Pose(np.eye(3), np.array([2.0, 0.0, 1000.0]))
    out = render(plane_mesh, p0, small_k)
    flow = pose_induced_flow(out, p0, p1, small_k)
    inside = flow.valid
    assert_allclose(flow.flow[inside, 0], 1.0, atol=1e-9)
    assert_allclose(flow.flow[inside, 1:], 0.0, atol=1e-9)
    # la última columna sale de la imagen
    assert not flow.valid[:, -1].any()


def test_campo_de_residuo_es_constante_en_la_mascara(rng, make_pose):
    residual = make_pose(rng)
    mask = rng.random((6, 8)) > 0.5
    field = field_from_residual(residual, mask)
    assert np.array_equal(field.valid, mask)
    i, j = np.argwhere(mask)[0]
    assert field.cell(i, j).allclose(residual)


def test_twists_ida_y_vuelta(rng):
    H, W = 4, 5
    R = Rotation.from_rotvec(rng.normal(0.0, 0.3, size=(H * W, 3))).as_matrix().reshape(H, W, 3, 3)
    t = rng.normal(0.0, 20.0, size=(H, W, 3))
    field = DenseSE3Field(R, t, np.ones((H, W), dtype=bool))
    back = twist_to_field(field_to_twist(field))
    assert_allclose(back.R, R, atol=1e-9)
    assert_allclose(back.t, t, atol=1e-8)


def test_twists_cerca_de_pi_se_invalidan():
    field = DenseSE3Field.identity(2, 2)
    field.R[0, 0] = Rotation.from_rotvec([0.0, np.pi, 0.0]).as_matrix()
    tw = field_to_twist(field)
    assert tw.near_pi_count == 1
    assert not tw.valid[0, 0]
    assert tw.valid.sum() == 3


def test_dispersion_de_campo_constante_es_nula(rng, make_pose):
    field = field_from_residual(make_pose(rng, 10.0), np.ones((5, 5), dtype=bool))
    if np.linalg.norm(Rotation.from_matrix(field.R[0, 0]).as_rotvec()) > np.pi - 1e-3:
        pytest.skip("rotación demasiado cercana a π")
    assert field_dispersion(field) == pytest.approx(0.0, abs=1e-9)


def test_residuo_compone_con_campo(rng, make_pose):
    p0, p1 = make_pose(rng), make_pose(rng)
    field = field_from_residual(pose_residual(p0, p1), np.ones((2, 2), dtype=bool))
    assert apply_residual(field.cell(1, 1), p0).allclose(p1, atol=1e-9)


# ============================
# Volcado SCF2
# ============================
def test_volcado_de_flujo(tmp_path, rng):
    flow = FlowField(rng.normal(size=(6, 8, 3)).astype(np.float32).astype(np.float64), rng.random((6, 8)) > 0.3)
    path = tmp_path / "flow_00.scf"
    save_flow(path, flow)
    back = load_flow(path)
    assert back.shape == (6, 8)
    assert np.array_equal(back.valid, flow.valid)
    assert np.array_equal(back.flow, flow.flow)


def test_volcado_con_firma_incorrecta(tmp_path):
    path = tmp_path / "bad.scf"
    path.write_bytes(b"XXXX" + b"\x00" * 16)
    with pytest.raises(ParseError):
        load_flow(path)
    with pytest.raises(MissingFile):
        load_flow(tmp_path / "nada.scf")


def test_flujo_de_referencia_usa_la_pose_gt(plane_mesh, small_k):
    p0 = Pose(np.eye(3), np.array([0.0, 0.0, 1000.0]))
    p_gt = Pose(np.eye(3), np.array([0.0, -2.0, 1000.0]))
    out = render(plane_mesh, p0, small_k)
    flow = gt_flow(out, p0, p_gt, small_k)
    assert_allclose(flow.flow[flow.valid, 1], -1.0, atol=1e-9)
    assert not flow.valid[0, :].any()
