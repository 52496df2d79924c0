# prueba_objective.py
import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from core.errors import EmptyMask, LengthMismatch
from core.flowfield import FlowField
from core.geometry import Pose
from core.objective import flow_loss, pose_loss, total_loss


def _flow(values, valid):
    return FlowField(np.asarray(values, dtype=np.float64), np.asarray(valid, dtype=bool))


def test_perdida_de_flujo_a_mano():
    pred = np.zeros((1, 2, 3))
    gt = np.zeros((1, 2, 3))
    pred[0, 0] = [1.0, -1.0, 50.0]   # Δz no cuenta
    pred[0, 1] = [9.0, 9.0, 0.0]     # píxel inválido en la referencia
    loss = flow_loss(_flow(pred, [[True, True]]), _flow(gt, [[True, False]]))
    assert loss == pytest.approx(2.0)


def test_perdida_de_flujo_promedia_pixeles_comunes():
    pred = np.zeros((2, 2, 3))
    pred[..., 0] = [[1.0, 3.0], [5.0, 100.0]]
    gt = np.zeros((2, 2, 3))
    valid = [[True, True], [True, False]]
    assert flow_loss(_flow(pred, valid), _flow(gt, valid)) == pytest.approx(3.0)


def test_perdida_de_flujo_sin_pixeles_comunes():
    a = _flow(np.zeros((2, 2, 3)), [[True, False], [False, False]])
    b = _flow(np.zeros((2, 2, 3)), [[False, True], [False, False]])
    with pytest.raises(EmptyMask):
        flow_loss(a, b)


def test_perdida_de_flujo_con_tamanos_distintos():
    with pytest.raises(LengthMismatch):
        flow_loss(FlowField.zeros(2, 2), FlowField.zeros(3, 2))


def test_perdida_de_pose_por_traslacion():
    pts = np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [0.0, 5.0, 5.0]])
    p_gt = Pose(np.eye(3), np.zeros(3))
    p = Pose(np.eye(3), np.array([1.0, 2.0, -4.0]))
    assert pose_loss(p, p_gt, pts) == pytest.approx(7.0)
    assert pose_loss(p, p_gt, pts, norm="l2") == pytest.approx(np.sqrt(21.0))


def test_perdida_de_pose_por_rotacion():
    # giro de 180° en z: (3, 0, 0) pasa a (−3, 0, 0), distancia L1 = 6
    pts = np.array([[3.0, 0.0, 0.0], [0.0, 3.0, 0.0]])
    R = Rotation.from_euler("z", 180.0, degrees=True).as_matrix()
    assert pose_loss(Pose(R, np.zeros(3)), Pose.identity(), pts) == pytest.approx(6.0)


def test_perdida_total_a_mano():
    # pesos γ^(N−k) con N = 2 y γ = 0.5: (0.5, 1.0)
    out = total_loss([10.0, 20.0], [5.0, 16.0], gamma=0.5, alpha=0.1, n=2)
    assert out.weights == [0.5, 1.0]
    assert out.total == pytest.approx(0.5 * (5.0 + 1.0) + 1.0 * (16.0 + 2.0))
    assert out.total == pytest.approx(21.0)


def test_perdida_total_con_valores_por_defecto():
    out = total_loss([0.0] * 8, [1.0] * 8)
    assert out.total == pytest.approx(sum(0.8 ** (8 - k) for k in range(1, 9)))
    assert out.weights[-1] == 1.0


def test_perdida_total_ultima_iteracion_pesa_mas():
    out = total_loss([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], n=3)
    late = total_loss([0.0, 0.0, 0.0], [0.0, 0.0, 1.0], n=3)
    assert late.total > out.total
    assert late.total == pytest.approx(1.0)


def test_perdida_total_con_longitudes_incorrectas():
    with pytest.raises(LengthMismatch):
        total_loss([1.0] * 7, [1.0] * 8)
    with pytest.raises(LengthMismatch):
        total_loss([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], n=2)


def test_perdida_total_caso_de_aceptacion():
    out = total_loss([10.0, 10.0], [1.0, 1.0], gamma=0.5, alpha=0.1, n=2)
    assert out.total == pytest.approx(3.0)
