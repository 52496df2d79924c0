# prueba_refiner.py
import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import ndimage
from scipy.spatial.transform import Rotation

from config.refine_config import RansacConfig, RefineConfig
from core.correlation import LookupWindow, build_volume, extract_features, lookup
from core.errors import NoConsensus, TooFewCells, TooFewCorrespondences, TooFewValidPixels
from core.flowfield import FlowField, field_from_residual
from core.geometry import Intrinsics, Pose, rotation_error_deg, translation_error_mm
from core.mesh_render import PointCloud, lift
from core.objective import trace_loss
from core.random_streams import stream
from core.refiner import (
    classical_field,
    irls_kabsch,
    match_flow,
    ransac_kabsch,
    ransac_kabsch_baseline,
    refine,
    sample_lifted,
    vote_global_pose,
)
from harness.synthetic import SensorNoise, gen_scene, level_spec, perturb_pose


def _cloud(rng, h=6, w=8):
    points = rng.uniform(-50.0, 50.0, size=(h, w, 3)) + np.array([0.0, 0.0, 1000.0])
    return PointCloud(points, np.ones((h, w), dtype=bool))


def _motion():
    R = Rotation.from_euler("xyz", [4.0, -3.0, 6.0], degrees=True).as_matrix()
    return Pose(R, np.array([12.0, -7.0, 25.0]))


# ============================
# Voto global
# ============================
@pytest.mark.parametrize("vote", ["irls", "ransac"])
def test_voto_de_campo_constante_es_exacto(rng, vote):
    A = _motion()
    cloud = _cloud(rng)
    field = field_from_residual(A, np.ones(cloud.shape, dtype=bool))
    est, diag = vote_global_pose(field, cloud, RefineConfig(vote=vote), rng=stream(0, "vote"))
    assert est.allclose(A, atol=1e-8)
    assert diag.inlier_fraction == 1.0
    assert diag.cells == 48


def test_voto_con_pocas_celdas(rng):
    cloud = _cloud(rng)
    mask = np.zeros(cloud.shape, dtype=bool)
    mask[0, :2] = True
    with pytest.raises(TooFewCells):
        vote_global_pose(field_from_residual(_motion(), mask), cloud, RefineConfig())


def test_voto_ignora_celdas_de_peso_nulo(rng):
    cloud = _cloud(rng)
    field = field_from_residual(_motion(), np.ones(cloud.shape, dtype=bool))
    weights = np.zeros(cloud.shape)
    weights[0, :2] = 1.0
    with pytest.raises(TooFewCells):
        vote_global_pose(field, cloud, RefineConfig(), weights=weights)


def test_voto_invariante_a_la_escala_de_pesos(rng):
    cloud = _cloud(rng)
    field = field_from_residual(_motion(), np.ones(cloud.shape, dtype=bool))
    # ruido en los destinos para que los pesos importen
    field.t[...] += rng.normal(0.0, 2.0, size=field.t.shape)
    w = rng.uniform(0.1, 1.0, size=cloud.shape)
    a, _ = vote_global_pose(field, cloud, RefineConfig(), weights=w)
    b, _ = vote_global_pose(field, cloud, RefineConfig(), weights=7.5 * w)
    assert a.allclose(b, atol=1e-8)


@pytest.mark.parametrize("vote", ["irls", "ransac"])
def test_voto_robusto_a_celdas_contaminadas(vote):
    rng = np.random.default_rng(7)
    A = _motion()
    cloud = _cloud(rng, 10, 10)
    field = field_from_residual(A, np.ones(cloud.shape, dtype=bool))
    bad = rng.random(cloud.shape) < 0.2
    for i, j in np.argwhere(bad):
        field.t[i, j] = A.t + rng.uniform(200.0, 400.0) * rng.choice([-1.0, 1.0], size=3)
    est, diag = vote_global_pose(field, cloud, RefineConfig(vote=vote), rng=stream(3, "vote"))
    assert rotation_error_deg(est.R, A.R) < 1e-6
    assert translation_error_mm(est.t, A.t) < 1e-6
    assert diag.inlier_fraction == pytest.approx(1.0 - bad.mean())


def test_irls_sin_iteraciones_es_kabsch_mas_reajuste(rng):
    A = _motion()
    src = rng.normal(0.0, 40.0, size=(30, 3))
    est, inliers = irls_kabsch(src, A.transform(src), np.ones(30), delta=10.0, iters=0)
    assert est.allclose(A, atol=1e-8)
    assert inliers.all()


def test_ransac_con_pocas_correspondencias():
    with pytest.raises(TooFewCorrespondences):
        ransac_kabsch(np.zeros((2, 3)), np.zeros((2, 3)), RansacConfig(), stream(0, "t"))


def test_ransac_sin_consenso(rng):
    src = rng.normal(0.0, 100.0, size=(12, 3))
    dst = rng.normal(0.0, 100.0, size=(12, 3))
    with pytest.raises(NoConsensus):
        ransac_kabsch(src, dst, RansacConfig(iters=16, inlier_mm=1e-6), stream(0, "t"))


def test_ransac_reproducible(rng):
    src = rng.normal(0.0, 50.0, size=(40, 3))
    dst = _motion().transform(src) + rng.normal(0.0, 3.0, size=src.shape)
    a, ia = ransac_kabsch(src, dst, RansacConfig(iters=32), stream(5, "r"))
    b, ib = ransac_kabsch(src, dst, RansacConfig(iters=32), stream(5, "r"))
    assert np.array_equal(a.R, b.R) and np.array_equal(a.t, b.t)
    assert np.array_equal(ia, ib)


# ============================
# Muestreo de profundidad
# ============================
def test_muestreo_en_centro_de_pixel_es_exacto(small_k, rng):
    depth = rng.uniform(800.0, 1200.0, size=(48, 64))
    pts, ok = sample_lifted(depth, small_k, np.array([10.5, 3.5]), np.array([7.5, 40.5]))
    assert ok.all()
    assert_allclose(pts[:, 2], [depth[7, 10], depth[40, 3]])
    assert_allclose(pts[0, 0], (10.5 - small_k.cx) * depth[7, 10] / small_k.fx)


def test_muestreo_bilineal_y_esquinas_invalidas(small_k):
    depth = np.full((48, 64), 1000.0)
    depth[:, 11] = 2000.0
    pts, ok = sample_lifted(depth, small_k, np.array([11.0]), np.array([5.5]))
    assert ok[0]
    assert pts[0, 2] == pytest.approx(1500.0)
    depth[5, 11] = 0.0
    _, ok = sample_lifted(depth, small_k, np.array([11.0, 20.5]), np.array([5.5, 5.5]))
    assert ok.tolist() == [False, True]
    _, ok = sample_lifted(depth, small_k, np.array([-3.0, np.nan]), np.array([5.5, 5.5]))
    assert not ok.any()


# ============================
# Correspondencias
# ============================
def _window_from(grid):
    g = np.asarray(grid, dtype=np.float64)
    return LookupWindow(g[None, None, None], radius=g.shape[0] // 2)


def test_correspondencia_avanza_hacia_un_pico_vecino():
    grid = np.zeros((5, 5))
    grid[2, 2] = 0.9
    grid[2, 3] = 0.92
    prev = FlowField(np.full((1, 1, 3), 1.5), np.ones((1, 1), dtype=bool))
    matches, score = match_flow(_window_from(grid), prev, np.ones((1, 1), dtype=bool), RefineConfig())
    assert matches.valid[0, 0]
    # pico en +1 con el centro casi igual a su izquierda: la correspondencia cae entre ambos
    assert_allclose(matches.flow[0, 0, :2], [1.5 + 1.0 - 0.9 / 1.82, 1.5], atol=1e-12)
    assert matches.flow[0, 0, 2] == 0.0
    assert score[0, 0] == pytest.approx(0.92)


def test_correspondencia_con_softargmax_tambien_avanza():
    grid = np.zeros((5, 5))
    grid[2, 2] = 0.9
    grid[2, 3] = 0.92
    matches, _ = match_flow(_window_from(grid), FlowField.zeros(1, 1), np.ones((1, 1), dtype=bool),
                            RefineConfig(subpixel="softargmax"))
    du, dv = matches.flow[0, 0, :2]
    assert 0.5 < du < 0.6
    assert dv == pytest.approx(0.0, abs=1e-3)


def test_pico_ambiguo_invalida_la_celda():
    grid = np.zeros((9, 9))
    grid[4, 4] = 0.8
    grid[4, 8] = 0.78   # rival fuera del 3×3 del pico
    ones = np.ones((1, 1), dtype=bool)
    matches, _ = match_flow(_window_from(grid), FlowField.zeros(1, 1), ones, RefineConfig())
    assert not matches.valid.any()
    matches, _ = match_flow(_window_from(grid), FlowField.zeros(1, 1), ones, RefineConfig(match_margin=0.0))
    assert matches.valid[0, 0]


def _two_levels(fine, coarse):
    values = np.stack([np.asarray(fine, dtype=np.float64), np.asarray(coarse, dtype=np.float64)])
    return LookupWindow(values[None, None], radius=values.shape[1] // 2)


def test_recurre_al_nivel_grueso_si_el_fino_no_encuentra_nada():
    coarse = np.zeros((9, 9))
    coarse[4, 7] = 1.0
    matches, score = match_flow(_two_levels(np.full((9, 9), 0.1), coarse), FlowField.zeros(1, 1),
                                np.ones((1, 1), dtype=bool), RefineConfig())
    assert matches.valid[0, 0]
    # bloque +3 del nivel 1 = celdas 6 y 7 del nivel 0: centro en 6.5
    assert_allclose(matches.flow[0, 0, :2], [6.5, 0.5], atol=1e-12)
    assert score[0, 0] == pytest.approx(1.0)


def test_niveles_en_desacuerdo_invalidan_la_celda():
    fine = np.zeros((9, 9))
    fine[4, 4] = 1.0
    coarse = np.zeros((9, 9))
    coarse[4, 7] = 1.0
    ones = np.ones((1, 1), dtype=bool)
    matches, _ = match_flow(_two_levels(fine, coarse), FlowField.zeros(1, 1), ones, RefineConfig())
    assert not matches.valid.any()
    # un pico grueso dentro del radio no contradice al fino
    coarse = np.zeros((9, 9))
    coarse[4, 5] = 1.0
    matches, _ = match_flow(_two_levels(fine, coarse), FlowField.zeros(1, 1), ones, RefineConfig())
    assert matches.valid[0, 0]
    assert_allclose(matches.flow[0, 0, :2], [0.0, 0.0], atol=1e-12)


@pytest.mark.parametrize("shift_px", [8, 3])
def test_correspondencias_subcelda_sobre_imagen_desplazada(rng, shift_px):
    k = Intrinsics(500.0, 500.0, 64.0, 64.0, 128, 128)
    rgb = ndimage.gaussian_filter(rng.random((128, 128)), 2.5)
    shifted = np.zeros_like(rgb)
    shifted[:, shift_px:] = rgb[:, :-shift_px]
    depth = np.full((128, 128), 1000.0)
    pyr = build_volume(extract_features(rgb, depth, k), extract_features(shifted, depth, k), levels=1)
    cfg = RefineConfig()
    window = lookup(pyr, FlowField.zeros(16, 16), cfg.radius, stride=1)
    matches, _ = match_flow(window, FlowField.zeros(16, 16), np.ones((16, 16), dtype=bool), cfg)
    # celdas lejos del borde de la rejilla y de la banda vacía de la imagen desplazada
    inner = np.s_[2:-2, 2:-3]
    ok = matches.valid[inner]
    assert ok.mean() > 0.6
    du = matches.flow[inner][..., 0][ok]
    dv = matches.flow[inner][..., 1][ok]
    assert abs(du.mean() - shift_px / 8.0) < 0.1
    assert abs(dv.mean()) < 0.1
    assert np.median(np.abs(du - shift_px / 8.0)) < 0.25


def test_correspondencia_salta_al_pico_con_softargmax_simetrico():
    grid = np.zeros((5, 5))
    grid[2, 3] = 1.0
    matches, score = match_flow(_window_from(grid), FlowField.zeros(1, 1), np.ones((1, 1), dtype=bool),
                                RefineConfig())
    # vecinos del pico simétricos en la ventana: el soft-argmax cae sobre el pico
    assert_allclose(matches.flow[0, 0, :2], [1.0, 0.0], atol=1e-12)
    assert score[0, 0] == pytest.approx(1.0)


def test_correspondencia_en_el_borde_de_la_ventana():
    grid = np.zeros((5, 5))
    grid[0, 4] = 1.0
    matches, _ = match_flow(_window_from(grid), FlowField.zeros(1, 1), np.ones((1, 1), dtype=bool),
                            RefineConfig())
    du, dv = matches.flow[0, 0, :2]
    # las celdas fuera de la ventana no participan: el desplazamiento se queda dentro
    assert 1.0 < du <= 2.0
    assert -2.0 <= dv < -1.0


def test_correspondencia_bajo_el_umbral_es_invalida():
    grid = np.full((5, 5), 0.1)
    matches, _ = match_flow(_window_from(grid), FlowField.zeros(1, 1), np.ones((1, 1), dtype=bool),
                            RefineConfig())
    assert not matches.valid.any()
    matches, _ = match_flow(_window_from(np.full((5, 5), 0.9)), FlowField.zeros(1, 1),
                            np.zeros((1, 1), dtype=bool), RefineConfig())
    assert not matches.valid.any()


# ============================
# Línea base RANSAC-Kabsch
# ============================
def test_linea_base_traslacion_pura_sobre_plano(small_k):
    depth = np.full((48, 64), 1000.0)
    flow = np.zeros((48, 64, 3))
    flow[..., 0] = 2.0
    matches = FlowField(flow, np.ones((48, 64), dtype=bool))
    est = ransac_kabsch_baseline(matches, depth, depth, small_k, RefineConfig())
    # 2 px con f = 500 a 1000 mm = 4 mm en x
    assert_allclose(est.t, [4.0, 0.0, 0.0], atol=1e-6)
    assert_allclose(est.R, np.eye(3), atol=1e-9)


def test_linea_base_sin_profundidad(small_k):
    matches = FlowField(np.zeros((48, 64, 3)), np.ones((48, 64), dtype=bool))
    with pytest.raises(TooFewCorrespondences):
        ransac_kabsch_baseline(matches, np.full((48, 64), 1000.0), np.zeros((48, 64)), small_k, RefineConfig())


# ============================
# Bucle de refinamiento
# ============================
@pytest.fixture(scope="module")
def clean_scene():
    return gen_scene("cube", 11, SensorNoise.clean(), diameter=150.0)


def test_traza_tiene_la_estructura_esperada(clean_scene):
    cfg = RefineConfig(iterations=3)
    trace = refine(clean_scene.rgb, clean_scene.depth, clean_scene.mesh, clean_scene.k, clean_scene.pose_gt, cfg)
    assert len(trace) == 4
    assert [r.k for r in trace.records] == [0, 1, 2, 3]
    assert trace.initial_pose is clean_scene.pose_gt
    assert trace.records[0].residual9 is None
    assert not trace.records[0].flow.valid.any()
    assert (trace.grid.width, trace.grid.height) == (32, 32)
    assert trace.reference.depth.shape == (32, 32)
    for prev, rec in zip(trace.records, trace.records[1:]):
        assert rec.flow.shape == (32, 32)
        if not rec.diagnostics.skipped:
            assert rec.residual9.as_vector().shape == (9,)
            assert rec.matches is not None
            assert 0.0 <= rec.diagnostics.inlier_fraction <= 1.0
            assert rec.pose.allclose(rec.residual.compose(prev.pose), atol=1e-6)
    assert trace.elapsed_s > 0


def test_la_pose_gt_es_un_punto_fijo(clean_scene):
    trace = refine(clean_scene.rgb, clean_scene.depth, clean_scene.mesh, clean_scene.k, clean_scene.pose_gt,
                   RefineConfig(iterations=8))
    for prev, rec in zip(trace.records, trace.records[1:]):
        assert rotation_error_deg(rec.pose.R, prev.pose.R) < 0.1
        assert translation_error_mm(rec.pose.t, prev.pose.t) < 0.5
    final = trace.final_pose
    assert rotation_error_deg(final.R, clean_scene.pose_gt.R) < 0.1
    assert translation_error_mm(final.t, clean_scene.pose_gt.t) < 0.5


def test_cubo_converge_desde_L15():
    scene = gen_scene("cube", 5, SensorNoise(), diameter=150.0)
    p_init = perturb_pose(scene.pose_gt, level_spec(15), "cubo")
    trace = refine(scene.rgb, scene.depth, scene.mesh, scene.k, p_init, RefineConfig())
    assert rotation_error_deg(trace.final_pose.R, scene.pose_gt.R) < 2.0
    assert translation_error_mm(trace.final_pose.t, scene.pose_gt.t) < 5.0


def test_convergencia_sobre_varias_escenas_L15():
    converged = 0
    for i in range(10):
        scene = gen_scene("cube", 100 + i, SensorNoise(), diameter=150.0)
        p_init = perturb_pose(scene.pose_gt, level_spec(15), i)
        final = refine(scene.rgb, scene.depth, scene.mesh, scene.k, p_init, RefineConfig()).final_pose
        converged += (rotation_error_deg(final.R, scene.pose_gt.R) < 2.0
                      and translation_error_mm(final.t, scene.pose_gt.t) < 5.0)
    assert converged >= 8


def test_refinamiento_reproducible(clean_scene):
    cfg = RefineConfig(iterations=2, vote="ransac", seed=4)
    R = Rotation.from_rotvec([0.05, 0.0, -0.03]).as_matrix()
    p_init = Pose(R @ clean_scene.pose_gt.R, clean_scene.pose_gt.t + np.array([5.0, -5.0, 10.0]))
    a = refine(clean_scene.rgb, clean_scene.depth, clean_scene.mesh, clean_scene.k, p_init, cfg)
    b = refine(clean_scene.rgb, clean_scene.depth, clean_scene.mesh, clean_scene.k, p_init, cfg)
    for ra, rb in zip(a.records, b.records):
        assert np.array_equal(ra.pose.R, rb.pose.R)
        assert np.array_equal(ra.pose.t, rb.pose.t)


def test_iteraciones_omitidas_conservan_la_pose(clean_scene):
    # ninguna correlación alcanza el umbral: el campo queda vacío en todas las iteraciones
    cfg = RefineConfig(iterations=2, correlation_gate=2.0)
    trace = refine(clean_scene.rgb, clean_scene.depth, clean_scene.mesh, clean_scene.k, clean_scene.pose_gt, cfg)
    assert all(r.diagnostics.skipped for r in trace.records[1:])
    assert all(r.diagnostics.error == "TooFewCells" for r in trace.records[1:])
    assert trace.final_pose is clean_scene.pose_gt


def test_sin_profundidad_observada(clean_scene):
    with pytest.raises(TooFewValidPixels):
        refine(clean_scene.rgb, np.zeros_like(clean_scene.depth), clean_scene.mesh, clean_scene.k,
               clean_scene.pose_gt, RefineConfig(iterations=1))


def test_perdida_sobre_la_traza(clean_scene):
    from cache.points_cache import points_cache

    trace = refine(clean_scene.rgb, clean_scene.depth, clean_scene.mesh, clean_scene.k, clean_scene.pose_gt,
                   RefineConfig(iterations=2))
    out = trace_loss(trace, clean_scene.pose_gt, points_cache.get_model_points(clean_scene.mesh))
    assert len(out.flow_losses) == 2
    assert len(out.pose_losses) == 2
    assert np.isfinite(out.total) and out.total >= 0.0


# ============================
# Campo clásico
# ============================
def test_campo_clasico_con_observacion_identica(small_k):
    depth = np.full((48, 64), 1000.0)
    depth[:, :8] = 0.0
    cloud = lift(depth, small_k)
    grid = np.zeros((48, 64, 1, 3, 3))
    grid[..., 1, 1] = 1.0
    field, matches, score = classical_field(LookupWindow(grid, radius=1), cloud, depth, small_k, RefineConfig())
    assert np.array_equal(field.valid, cloud.valid)
    assert_allclose(matches.flow[cloud.valid], 0.0, atol=1e-12)
    assert_allclose(score, 1.0)
    assert_allclose(field.R[field.valid], np.broadcast_to(np.eye(3), (int(field.valid.sum()), 3, 3)), atol=1e-9)
    assert_allclose(field.t[field.valid], 0.0, atol=1e-6)


def test_campo_clasico_y_linea_base_coinciden_en_movimiento_rigido(small_k):
    depth = np.full((48, 64), 1000.0)
    cloud = lift(depth, small_k)
    grid = np.zeros((48, 64, 1, 5, 5))
    grid[..., 2, 4] = 1.0   # todas las celdas a +2 px en u
    cfg = RefineConfig()
    field, matches, _ = classical_field(LookupWindow(grid, radius=2), cloud, depth, small_k, cfg)
    voted, _ = vote_global_pose(field, cloud, cfg)
    baseline = ransac_kabsch_baseline(matches, depth, depth, small_k, cfg)
    assert_allclose(voted.t, [4.0, 0.0, 0.0], atol=1e-6)
    assert rotation_error_deg(voted.R, baseline.R) < 1e-4
    assert translation_error_mm(voted.t, baseline.t) < 1e-3


def test_campo_clasico_sin_pares_suficientes(small_k):
    depth = np.zeros((48, 64))
    depth[::6, ::6] = 1000.0   # celdas aisladas: menos de min_pairs en cada ventana
    cloud = lift(depth, small_k)
    grid = np.zeros((48, 64, 1, 3, 3))
    grid[..., 1, 1] = 1.0
    field, _, _ = classical_field(LookupWindow(grid, radius=1), cloud, depth, small_k, RefineConfig())
    assert not field.valid.any()
