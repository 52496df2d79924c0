# prueba_evaluation.py
import json

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.spatial.transform import Rotation

from core.errors import EmptyDataset, EmptyUnion, InvalidDepth, LengthMismatch
from core.geometry import Pose
from core.mesh_render import render
from evaluation.metrics import (
    HISTOGRAM_BINS,
    MSPD_PX,
    VSD_TAU_FRACS,
    SampleErrors,
    SymmetrySet,
    add_error,
    average_recall,
    evaluate_many,
    evaluate_pose,
    improvement_histogram,
    mspd,
    mssd,
    recall_at,
    vsd,
    vsd_from_depths,
)

PTS = np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [0.0, 10.0, 0.0]])
P_GT = Pose(np.eye(3), np.array([0.0, 0.0, 1000.0]))


def _sample(err: float, diameter: float = 100.0) -> SampleErrors:
    return SampleErrors(vsd=[err] * len(VSD_TAU_FRACS), mssd=err * diameter, mspd=err * 100.0, diameter=diameter)


# ============================
# VSD
# ============================
def test_vsd_a_mano_en_3x3():
    gt = np.zeros((3, 3))
    gt[:2, :2] = 1000.0
    est = gt.copy()
    est[0, 0] = 1050.0
    scene = np.zeros((3, 3))   # sin medida: todo visible
    assert vsd_from_depths(est, gt, scene, [20.0, 60.0]) == pytest.approx([0.25, 0.0])


def test_vsd_con_umbral_estricto():
    gt = np.full((1, 2), 1000.0)
    est = np.array([[1020.0, 1000.0]])
    # una distancia igual a τ no cuenta como error
    assert vsd_from_depths(est, gt, np.zeros((1, 2)), [20.0])[0] == pytest.approx(0.0)


def test_vsd_de_mascaras_disjuntas_es_uno():
    gt = np.zeros((3, 3))
    est = np.zeros((3, 3))
    gt[0, :] = 1000.0
    est[2, :] = 1000.0
    assert vsd_from_depths(est, gt, np.zeros((3, 3)), [10.0]) == [1.0]


def test_vsd_con_ocluso_total():
    gt = np.full((2, 2), 1000.0)
    scene = np.full((2, 2), 500.0)
    with pytest.raises(EmptyUnion):
        vsd_from_depths(gt, gt, scene, [10.0])


def test_vsd_visibilidad_estimada_hereda_la_de_la_gt():
    # la estimada queda detrás de la escena, pero donde la GT es visible cuenta igualmente
    gt = np.full((1, 1), 1000.0)
    est = np.full((1, 1), 1100.0)
    scene = np.full((1, 1), 1000.0)
    assert vsd_from_depths(est, gt, scene, [200.0]) == [0.0]


# ============================
# MSSD, MSPD y ADD
# ============================
def test_mssd_traslacion():
    p = Pose(np.eye(3), np.array([3.0, 4.0, 1000.0]))
    assert mssd(p, P_GT, PTS) == pytest.approx(5.0)


def test_mspd_desplazamiento_lateral(small_k):
    p = Pose(np.eye(3), np.array([10.0, 0.0, 1000.0]))
    assert mspd(p, P_GT, PTS, None, small_k) == pytest.approx(5.0)


def test_mspd_detras_de_la_camara(small_k):
    p = Pose(np.eye(3), np.array([0.0, 0.0, -1000.0]))
    with pytest.raises(InvalidDepth):
        mspd(p, P_GT, PTS, None, small_k)


def test_simetria_absorbe_el_giro():
    S = np.eye(4)
    S[:3, :3] = Rotation.from_euler("z", 180.0, degrees=True).as_matrix()
    syms = SymmetrySet.from_models_info({"symmetries_discrete": [S.reshape(-1).tolist()]})
    assert len(syms) == 2
    p_est = P_GT.compose(Pose.from_matrix(S))
    assert mssd(p_est, P_GT, PTS) == pytest.approx(20.0)
    assert mssd(p_est, P_GT, PTS, syms) == pytest.approx(0.0, abs=1e-9)


def test_simetria_continua_discretizada():
    syms = SymmetrySet.from_models_info({"symmetries_continuous": [{"axis": [0, 0, 1], "offset": [0, 0, 0]}]})
    assert len(syms) == 36
    R = Rotation.from_euler("z", 50.0, degrees=True).as_matrix()
    p_est = P_GT.compose(Pose(R, np.zeros(3)))
    # 50° es múltiplo exacto del paso de 10°
    assert mssd(p_est, P_GT, PTS, syms) == pytest.approx(0.0, abs=1e-9)


def test_simetria_identidad_no_se_duplica():
    syms = SymmetrySet((Pose.identity(),))
    assert len(syms) == 1
    assert len(SymmetrySet.identity_only()) == 1


def test_add_error():
    p = Pose(np.eye(3), np.array([0.0, 2.0, 1000.0]))
    assert add_error(p, P_GT, PTS) == pytest.approx(2.0)


# ============================
# Average Recall
# ============================
def test_recall_estricto():
    assert recall_at([1.0, 2.0, 3.0], [2.0, 2.0, 2.0]) == pytest.approx(1.0 / 3.0)
    with pytest.raises(EmptyDataset):
        recall_at([], [])


def test_ar_perfecto_nulo_y_mitad():
    assert average_recall([_sample(0.0)] * 4).ar == pytest.approx(1.0)
    assert average_recall([_sample(10.0)] * 4).ar == pytest.approx(0.0)
    report = average_recall([_sample(0.0), _sample(10.0)])
    assert report.ar == pytest.approx(0.5)
    assert report.ar_vsd == pytest.approx(0.5)
    assert report.recall_mspd == [0.5] * len(MSPD_PX)


def test_ar_escala_mspd_con_el_ancho():
    s = SampleErrors(vsd=[0.0] * len(VSD_TAU_FRACS), mssd=0.0, mspd=7.0, diameter=100.0, image_width=1280)
    report = average_recall([s])
    # 7 px < 5·2 = 10 px en el primer umbral
    assert report.recall_mspd[0] == 1.0


def test_ar_sin_muestras():
    with pytest.raises(EmptyDataset):
        average_recall([])


def test_informe_a_json_y_csv(tmp_path):
    report = average_recall([_sample(0.0), _sample(10.0)])
    report.write_json(tmp_path / "ar.json")
    report.write_csv(tmp_path / "errors.csv")
    data = json.loads((tmp_path / "ar.json").read_text())
    assert data["AR"] == pytest.approx(0.5)
    assert data["num_samples"] == 2
    assert len((tmp_path / "errors.csv").read_text().strip().splitlines()) == 3


def test_evaluar_pose_exacta(cube_mesh, small_k):
    p = Pose(np.eye(3), np.array([0.0, 0.0, 1000.0]))
    scene_depth = render(cube_mesh, p, small_k).depth
    sample = evaluate_pose(p, p, cube_mesh, scene_depth, small_k, ids=(1, 2, 3))
    assert sample.vsd == [0.0] * len(VSD_TAU_FRACS)
    assert sample.mssd == pytest.approx(0.0, abs=1e-9)
    assert (sample.scene_id, sample.im_id, sample.obj_id) == (1, 2, 3)
    assert average_recall([sample]).ar == pytest.approx(1.0)


def test_evaluar_pose_sin_union_visible(cube_mesh, small_k):
    p = Pose(np.eye(3), np.array([0.0, 0.0, 1000.0]))
    scene_depth = np.full((48, 64), 100.0)
    sample = evaluate_pose(p, p, cube_mesh, scene_depth, small_k)
    assert sample.vsd == [1.0] * len(VSD_TAU_FRACS)


def test_evaluar_en_paralelo_conserva_el_orden():
    tasks = [lambda i=i: SampleErrors([0.0], 0.0, 0.0, 1.0, obj_id=i) for i in range(12)]
    out = evaluate_many(tasks, threads=4)
    assert [s.obj_id for s in out] == list(range(12))


# ============================
# Histograma de mejora
# ============================
def test_histograma_de_mejora():
    counts, edges = improvement_histogram([10.0, 10.0, 10.0, 0.0, 4.0], [0.0, 10.0, 30.0, 0.0, 2.0])
    assert len(counts) == HISTOGRAM_BINS
    assert_allclose(edges[[0, -1]], [-1.0, 1.0])
    assert counts.sum() == 5
    assert counts[0] == 1     # empeora (recortado a −1)
    assert counts[-1] == 1    # mejora total
    assert counts[10] == 2    # sin cambio, incluido el caso 0/ε
    assert counts[15] == 1    # mejora de 0.5


def test_histograma_con_longitudes_distintas():
    with pytest.raises(LengthMismatch):
        improvement_histogram([1.0, 2.0], [1.0])


def test_ar_monotono_al_reducir_errores():
    rng = np.random.default_rng(5)
    for _ in range(100):
        n = int(rng.integers(1, 6))
        worse = [SampleErrors(vsd=list(rng.uniform(0, 1, len(VSD_TAU_FRACS))), mssd=float(rng.uniform(0, 60)),
                              mspd=float(rng.uniform(0, 60)), diameter=100.0) for _ in range(n)]
        better = [SampleErrors(vsd=[v * 0.5 for v in s.vsd], mssd=s.mssd * 0.5, mspd=s.mspd * 0.5, diameter=100.0)
                  for s in worse]
        assert average_recall(better).ar >= average_recall(worse).ar


def test_vsd_renderizando_la_malla(cube_mesh, small_k):
    p = Pose(np.eye(3), np.array([0.0, 0.0, 1000.0]))
    scene_depth = render(cube_mesh, p, small_k).depth
    assert vsd(p, p, cube_mesh, scene_depth, small_k, 20.0) == 0.0
    shifted = Pose(np.eye(3), np.array([0.0, 0.0, 1100.0]))
    errors = vsd(shifted, p, cube_mesh, scene_depth, small_k, [20.0, 200.0])
    assert len(errors) == 2
    assert errors[0] > errors[1]
