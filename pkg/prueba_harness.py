# prueba_harness.py
import csv
import json

import numpy as np
import pytest
from numpy.testing import assert_allclose
from PIL import Image
from pydantic import ValidationError

from config import settings
from config.refine_config import NoiseSpec, RefineConfig, load_config_file
from core.errors import ConfigError, MalformedJson, MissingFile
from core.geometry import Pose, rotation_error_deg, translation_error_mm
from harness.bench import baseline_compare, iteration_sweep, noise_sweep, run_scene, run_suite, write_table
from harness.bop_io import (
    BopResultRow,
    load_bop_scene,
    load_object_model,
    load_symmetries,
    read_bop_results,
    refine_bop_results,
    write_bop_frame,
    write_bop_results,
    write_object_model,
)
from harness.synthetic import SHAPES, SensorNoise, gen_scene, level_spec, make_mesh, perturb_pose


# ============================
# Escenas sintéticas
# ============================
def test_escena_reproducible():
    a = gen_scene("cylinder", 5)
    b = gen_scene("cylinder", 5)
    assert np.array_equal(a.depth, b.depth)
    assert np.array_equal(a.rgb, b.rgb)
    assert np.array_equal(a.pose_gt.as_matrix(), b.pose_gt.as_matrix())
    c = gen_scene("cylinder", 6)
    assert not np.array_equal(a.depth, c.depth)


def test_escena_sin_ruido_es_el_render():
    scene = gen_scene("cube", 3, SensorNoise.clean())
    assert np.array_equal(scene.depth, scene.render_depth)
    assert np.array_equal(scene.visible_mask, scene.mask)
    assert scene.mask.sum() > 1000
    assert scene.visible_fraction == 1.0


def test_ruido_de_sensor_respeta_el_fondo():
    scene = gen_scene("icosphere", 8)
    assert np.all(scene.depth[~scene.mask] == 0.0)
    assert scene.rgb.min() >= 0.0 and scene.rgb.max() <= 1.0


def test_oclusor_tapa_la_fraccion_pedida():
    noise = SensorNoise(depth_sigma_mm=0.0, dropout=0.0, intensity_sigma=0.0, occluder_fraction=0.3)
    scene = gen_scene("cube", 4, noise)
    assert scene.visible_fraction == pytest.approx(0.7, abs=0.02)
    occluded = scene.mask & ~scene.visible_mask
    # el oclusor queda delante del objeto
    assert np.all(scene.depth[occluded] < scene.render_depth[occluded])
    assert np.array_equal(scene.depth[scene.visible_mask], scene.render_depth[scene.visible_mask])


@pytest.mark.parametrize("shape", SHAPES)
def test_diametro_de_las_mallas_procedurales(shape):
    mesh = make_mesh(shape, 120.0, np.random.default_rng(0))
    assert mesh.diameter == pytest.approx(120.0, rel=1e-6)


def test_escena_sin_textura():
    plain = gen_scene("cube", 3, SensorNoise.clean(), textured=False)
    assert plain.mesh.texture is None
    # sin textura solo queda el sombreado plano de cada cara visible
    assert len(np.unique(np.round(plain.rgb[plain.mask], 9))) <= 3
    textured = gen_scene("cube", 3, SensorNoise.clean())
    assert len(np.unique(textured.rgb[textured.mask])) > 100
    assert np.array_equal(plain.depth, textured.depth)


def test_forma_desconocida():
    with pytest.raises(ValueError):
        make_mesh("teapot", 100.0, np.random.default_rng(0))


# ============================
# Perturbación de poses
# ============================
P_GT = Pose(np.eye(3), np.array([10.0, -20.0, 900.0]))


@pytest.mark.parametrize("level", [3, 15, 50])
def test_nivel_L_es_exacto(level):
    p = perturb_pose(P_GT, level_spec(level, seed=2), 0, 1)
    assert rotation_error_deg(p.R, P_GT.R) == pytest.approx(level, abs=1e-6)
    assert translation_error_mm(p.t, P_GT.t) == pytest.approx(level, abs=1e-9)


def test_sigma_nula_no_perturba():
    spec = NoiseSpec(sigma_rot_deg=(0.0, 0.0, 0.0), sigma_t_mm=(0.0, 0.0, 0.0))
    assert perturb_pose(P_GT, spec, 7).allclose(P_GT, atol=1e-12)


def test_perturbacion_reproducible_por_clave():
    spec = NoiseSpec(seed=3)
    a = perturb_pose(P_GT, spec, 0, 1)
    assert a.allclose(perturb_pose(P_GT, spec, 0, 1), atol=0.0)
    assert not a.allclose(perturb_pose(P_GT, spec, 0, 2), atol=1e-6)


# ============================
# Formato BOP
# ============================
def test_escena_bop_ida_y_vuelta(tmp_path):
    scene = gen_scene("cube", 9)
    write_object_model(tmp_path, 1, scene.mesh)
    write_bop_frame(tmp_path, 0, 3, scene.rgb, scene.depth, scene.k, [(1, scene.pose_gt)])
    frame = load_bop_scene(tmp_path, 0, 3)
    assert_allclose(frame.depth, scene.depth, atol=0.05 + 1e-6)
    assert_allclose(frame.rgb, scene.rgb, atol=1.0 / 255.0)
    assert frame.k.as_matrix() == pytest.approx(scene.k.as_matrix())
    assert frame.gt_for(1).allclose(scene.pose_gt, atol=1e-9)
    with pytest.raises(MalformedJson):
        frame.gt_for(2)
    mesh = load_object_model(tmp_path, 1)
    assert mesh.diameter == pytest.approx(scene.mesh.diameter, rel=1e-6)
    assert len(load_symmetries(tmp_path, 1)) == 1


def test_textura_viaja_en_models_info(tmp_path):
    scene = gen_scene("icosphere", 12)
    write_object_model(tmp_path, 4, scene.mesh)
    mesh = load_object_model(tmp_path, 4)
    assert mesh.texture is not None
    assert np.array_equal(mesh.texture.values, scene.mesh.texture.values)
    assert_allclose(mesh.texture.origin, scene.mesh.texture.origin)
    assert mesh.texture.spacing == pytest.approx(scene.mesh.texture.spacing)


def test_textura_mal_formada_en_models_info(tmp_path):
    scene = gen_scene("cube", 12)
    write_object_model(tmp_path, 1, scene.mesh)
    info_path = tmp_path / "models" / "models_info.json"
    info = json.loads(info_path.read_text())
    del info["1"]["texture"]["seed"]
    info_path.write_text(json.dumps(info))
    with pytest.raises(MalformedJson):
        load_object_model(tmp_path, 1)


def test_escala_de_profundidad_del_json(tmp_path):
    scene_dir = tmp_path / "test" / "000000"
    (scene_dir / "depth").mkdir(parents=True)
    (scene_dir / "rgb").mkdir()
    Image.fromarray(np.full((4, 4), 10000, dtype=np.uint16)).save(scene_dir / "depth" / "000000.png")
    Image.fromarray(np.zeros((4, 4), dtype=np.uint8)).save(scene_dir / "rgb" / "000000.jpg")
    (scene_dir / "scene_camera.json").write_text(
        '{"0": {"cam_K": [100, 0, 2, 0, 100, 2, 0, 0, 1], "depth_scale": 0.1}}')
    (scene_dir / "scene_gt.json").write_text('{"0": []}')
    frame = load_bop_scene(tmp_path, 0, 0)
    assert_allclose(frame.depth, 1000.0)
    assert frame.gts == []


def test_escena_bop_inexistente(tmp_path):
    with pytest.raises(MissingFile):
        load_bop_scene(tmp_path, 0, 0)


def test_json_mal_formado(tmp_path):
    scene_dir = tmp_path / "test" / "000000"
    scene_dir.mkdir(parents=True)
    (scene_dir / "scene_camera.json").write_text("{ no es json")
    (scene_dir / "scene_gt.json").write_text("{}")
    with pytest.raises(MalformedJson):
        load_bop_scene(tmp_path, 0, 0)


def test_csv_de_resultados(tmp_path):
    rows = [BopResultRow(1, 2, 3, 0.5, P_GT, 0.25), BopResultRow(1, 4, 5, 1.0, Pose.identity())]
    path = tmp_path / "results.csv"
    write_bop_results(rows, path)
    with open(path, newline="") as f:
        header = next(csv.reader(f))
    assert header == ["scene_id", "im_id", "obj_id", "score", "R", "t", "time"]
    back = read_bop_results(path)
    assert [(r.scene_id, r.im_id, r.obj_id) for r in back] == [(1, 2, 3), (1, 4, 5)]
    assert back[0].pose.allclose(P_GT, atol=1e-6)
    assert back[0].time == pytest.approx(0.25)
    assert back[1].time == pytest.approx(-1.0)


def test_csv_de_resultados_mal_formado(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(MalformedJson):
        read_bop_results(path)
    path.write_text("scene_id,im_id,obj_id,score,R,t,time\n0,0,1,1,1 0 0,0 0 1,0\n")
    with pytest.raises(MalformedJson):
        read_bop_results(path)
    with pytest.raises(MissingFile):
        read_bop_results(tmp_path / "nada.csv")


def test_refinamiento_por_lotes_conserva_los_fallos(tmp_path):
    scene = gen_scene("cube", 12)
    write_object_model(tmp_path, 1, scene.mesh)
    write_bop_frame(tmp_path, 0, 0, scene.rgb, scene.depth, scene.k, [(1, scene.pose_gt)])
    behind = Pose(np.eye(3), np.array([0.0, 0.0, -500.0]))
    rows = [BopResultRow(0, 0, 1, 1.0, behind, 0.0)]
    out = refine_bop_results(tmp_path, rows, RefineConfig(iterations=1))
    assert out[0] is rows[0]


# ============================
# Archivo de configuración
# ============================
def test_archivo_de_configuracion(tmp_path):
    path = tmp_path / "refine.env"
    path.write_text(
        "# refinador\n"
        "ITERATIONS=3\nVOTE=ransac\nRANSAC_ITERS=64\nPATCH=7\n"
        "NOISE_MODE=level\nNOISE_LEVEL=20\nNOISE_SIGMA_T_MM=1,2,3\n"
    )
    cfg, noise = load_config_file(path)
    assert cfg.iterations == 3
    assert cfg.vote == "ransac"
    assert cfg.ransac.iters == 64
    assert cfg.ransac.inlier_mm == 10.0
    assert cfg.patch == 7
    assert noise.mode == "level"
    assert noise.level == 20.0
    assert noise.sigma_t_mm == (1.0, 2.0, 3.0)


@pytest.mark.parametrize("content", ["FOO=1\n", "PATCH=4\n", "CROP_SIZE=100\n", "NOISE_LEVEL=0\n", "VOTE=median\n"])
def test_archivo_de_configuracion_invalido(tmp_path, content):
    path = tmp_path / "bad.env"
    path.write_text(content)
    with pytest.raises(ConfigError):
        load_config_file(path)


def test_archivo_de_configuracion_inexistente(tmp_path):
    with pytest.raises(MissingFile):
        load_config_file(tmp_path / "nada.env")


def test_configuracion_por_defecto():
    cfg = RefineConfig()
    assert (cfg.iterations, cfg.radius, cfg.levels, cfg.patch) == (8, 4, 4, 5)
    assert (cfg.huber_delta_mm, cfg.irls_iters, cfg.ransac.iters) == (10.0, 5, 256)
    with pytest.raises(ValidationError):
        RefineConfig(unknown=1)


# ============================
# Benchmarks
# ============================
def test_escena_de_benchmark():
    run = run_scene(0, 1, 10, RefineConfig(iterations=1), with_baseline=True)
    assert run.shape == "cube"
    assert run.init.rot_deg == pytest.approx(10.0, abs=1e-6)
    assert run.init.trans_mm == pytest.approx(10.0, abs=1e-9)
    assert len(run.per_iteration) == 2
    assert run.baseline is not None


def test_tabla_de_benchmark_reproducible(tmp_path):
    cfg = RefineConfig(iterations=1)
    rows = noise_sweep(2, seed=1, cfg=cfg, levels=(5,), threads=2)
    assert len(rows) == 1
    assert rows[0]["level"] == 5 and rows[0]["scenes"] == 2
    write_table(rows, tmp_path / "a.csv")
    write_table(noise_sweep(2, seed=1, cfg=cfg, levels=(5,), threads=1), tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_barrido_de_iteraciones():
    rows = iteration_sweep(1, seed=0, cfg=RefineConfig(), level=5, max_iterations=2, threads=1)
    assert [r["iteration"] for r in rows] == [0, 1, 2]
    assert rows[0]["median_rot_deg"] == pytest.approx(5.0, abs=1e-6)


def test_comparacion_con_la_linea_base():
    rows = baseline_compare(1, seed=0, cfg=RefineConfig(iterations=1), occlusions=(0.0,), level=5, threads=1)
    assert len(rows) == 1
    assert rows[0]["occlusion"] == 0.0
    assert np.isfinite(rows[0]["baseline_median_rot_deg"])


def test_tasa_de_convergencia_a_L15():
    runs = [run_scene(i, 7, 15, RefineConfig()) for i in range(10)]
    converged = [r.per_iteration[-1].rot_deg < 2.0 and r.per_iteration[-1].trans_mm < 0.01 * r.init.diameter
                 for r in runs]
    assert sum(converged) >= 8


def test_recall_refinado_frente_al_nivel():
    rows = noise_sweep(6, seed=2, cfg=RefineConfig(), levels=(5, 15, 30), threads=2)
    for row in rows:
        assert row["refined_recall"] >= row["init_recall"]
    recalls = [row["refined_recall"] for row in rows]
    assert all(a >= b for a, b in zip(recalls, recalls[1:]))


def test_mediana_de_ADD_por_iteracion():
    rows = iteration_sweep(6, seed=3, cfg=RefineConfig(), level=30, max_iterations=8, threads=2)
    add = [rows[k]["median_add_mm"] for k in (0, 2, 4, 6, 8)]
    assert add[1] <= 0.5 * add[0]
    assert all(b <= a * 1.01 for a, b in zip(add, add[1:]))
    assert abs(add[3] - add[4]) <= 0.05 * add[4]


def test_refinador_frente_a_la_linea_base_con_oclusion():
    rows = baseline_compare(8, seed=4, cfg=RefineConfig(), occlusions=(0.3,), level=15, threads=2)
    assert rows[0]["refiner_median_rot_deg"] <= rows[0]["baseline_median_rot_deg"]


def test_suite_desconocida():
    with pytest.raises(ValueError):
        run_suite("cualquiera", 1)


# ============================
# Variables de entorno
# ============================
def test_validacion_de_settings(monkeypatch):
    settings.validate_settings()
    monkeypatch.setattr(settings, "POSE_REFINE_THREADS", 0)
    with pytest.raises(ValueError, match="POSE_REFINE_THREADS"):
        settings.validate_settings()
    monkeypatch.setattr(settings, "POSE_REFINE_THREADS", 2)
    monkeypatch.setattr(settings, "LOG_LEVEL", "VERBOSO")
    with pytest.raises(ValueError, match="LOG_LEVEL"):
        settings.validate_settings()
