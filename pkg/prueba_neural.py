# prueba_neural.py
import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.spatial.transform import Rotation

from config.refine_config import RefineConfig
from core.correlation import LookupWindow
from core.errors import MissingFile, ParseError, ShapeMismatch
from core.flowfield import DenseSE3Field, field_from_residual
from core.geometry import Pose
from core.refiner import refine
from harness.synthetic import SensorNoise, gen_scene
from models.neural import (
    NeuralBackend,
    NeuralWeights,
    gru_cell,
    initial_hidden,
    load_weights,
    neural_step,
    retract,
    save_weights,
)


def _scalar_weights(**overrides) -> NeuralWeights:
    tensors = {}
    for g in ("z", "r", "h"):
        tensors[f"gru.W_{g}"] = np.zeros((1, 1))
        tensors[f"gru.U_{g}"] = np.zeros((1, 1))
        tensors[f"gru.b_{g}"] = np.zeros(1)
    tensors.update({
        "twist_head.W": np.zeros((6, 1)), "twist_head.b": np.zeros(6),
        "pose_head.W": np.zeros((1, 1)), "pose_head.b": np.zeros(1),
    })
    tensors.update({k: np.asarray(v, dtype=np.float64) for k, v in overrides.items()})
    return NeuralWeights(tensors)


def _window(rng, h=2, w=3, levels=1, radius=1):
    K = 2 * radius + 1
    return LookupWindow(rng.uniform(-1.0, 1.0, size=(h, w, levels, K, K)), radius)


# ============================
# Celda GRU
# ============================
def test_gru_escalar_con_ceros():
    h = gru_cell(np.zeros((1, 1)), np.zeros((1, 1)), _scalar_weights())
    assert h[0, 0] == 0.0


def test_gru_escalar_a_mano():
    weights = _scalar_weights(**{"gru.W_h": [[1.0]]})
    # z = σ(0) = 0.5, h̃ = tanh(1), h' = 0.5·0 + 0.5·tanh(1)
    h = gru_cell(np.ones((1, 1)), np.zeros((1, 1)), weights)
    assert h[0, 0] == pytest.approx(0.5 * np.tanh(1.0))


def test_gru_compuerta_cerrada_conserva_el_estado():
    weights = _scalar_weights(**{"gru.b_z": [-50.0], "gru.W_h": [[3.0]]})
    h = gru_cell(np.ones((1, 1)), np.full((1, 1), 0.7), weights)
    assert h[0, 0] == pytest.approx(0.7, abs=1e-12)


# ============================
# Paso recurrente
# ============================
def test_cabeza_nula_no_cambia_el_campo(rng):
    R = Rotation.from_rotvec([0.1, -0.2, 0.05]).as_matrix()
    field = field_from_residual(Pose(R, np.array([1.0, 2.0, 3.0])), np.ones((2, 3), dtype=bool))
    weights = NeuralWeights.random(hidden_dim=4, lookup_dim=9, seed=1)
    tensors = dict(weights.tensors)
    tensors["twist_head.W"] = np.zeros((6, 4))
    weights = NeuralWeights(tensors)
    out, hidden, conf = neural_step(_window(rng), field, initial_hidden(2, 3, weights), weights)
    assert_allclose(out.R, field.R, atol=1e-12)
    assert_allclose(out.t, field.t, atol=1e-12)
    assert hidden.shape == (2, 3, 4)
    assert conf.shape == (2, 3)


def test_retraccion_compone_por_la_izquierda():
    field = DenseSE3Field.identity(1, 1)
    field.t[0, 0] = [1.0, 0.0, 0.0]
    delta = np.zeros((1, 1, 6))
    delta[0, 0, 5] = np.pi / 2   # giro de 90° en z
    out = retract(field, delta)
    assert_allclose(out.t[0, 0], [0.0, 1.0, 0.0], atol=1e-12)


def test_pesos_aleatorios_dan_salidas_finitas(rng):
    weights = NeuralWeights.random(hidden_dim=8, lookup_dim=2 * 9, seed=3)
    backend = NeuralBackend(weights, 2, 3)
    field = DenseSE3Field.identity(2, 3)
    for _ in range(4):
        field = backend.estimate(_window(rng, levels=2), field)
    assert np.all(np.isfinite(field.R)) and np.all(np.isfinite(field.t))
    assert np.all((backend.vote_weights > 0) & (backend.vote_weights < 1))


def test_paso_con_dimensiones_incompatibles(rng):
    weights = NeuralWeights.random(hidden_dim=4, lookup_dim=9)
    field = DenseSE3Field.identity(2, 3)
    with pytest.raises(ShapeMismatch):
        neural_step(_window(rng, levels=2), field, initial_hidden(2, 3, weights), weights)
    with pytest.raises(ShapeMismatch):
        neural_step(_window(rng), field, np.zeros((2, 3, 5)), weights)


# ============================
# Pesos y formato SCW2
# ============================
def test_pesos_incompletos_o_mal_formados():
    weights = NeuralWeights.random(hidden_dim=4, lookup_dim=9)
    tensors = dict(weights.tensors)
    del tensors["pose_head.b"]
    with pytest.raises(ShapeMismatch):
        NeuralWeights(tensors)
    tensors = dict(weights.tensors)
    tensors["gru.U_r"] = np.zeros((4, 5))
    with pytest.raises(ShapeMismatch):
        NeuralWeights(tensors)
    tensors = dict(weights.tensors)
    tensors["twist_head.b"] = np.full(6, np.nan)
    with pytest.raises(ShapeMismatch):
        NeuralWeights(tensors)


def test_guardar_y_cargar_pesos(tmp_path):
    weights = NeuralWeights.random(hidden_dim=5, lookup_dim=9, seed=2)
    path = tmp_path / "pesos.scw"
    save_weights(path, weights)
    assert path.read_bytes()[:4] == b"SCW2"
    back = load_weights(path)
    assert (back.hidden_dim, back.input_dim) == (5, 15)
    assert set(back.tensors) == set(weights.tensors)
    for name, value in weights.tensors.items():
        assert_allclose(back[name], value.astype(np.float32))


def test_pesos_corruptos(tmp_path):
    path = tmp_path / "malo.scw"
    path.write_bytes(b"NOPE")
    with pytest.raises(ParseError):
        load_weights(path)
    weights = NeuralWeights.random(hidden_dim=3, lookup_dim=9)
    save_weights(path, weights)
    path.write_bytes(path.read_bytes()[:40])
    with pytest.raises(ParseError):
        load_weights(path)
    with pytest.raises(MissingFile):
        load_weights(tmp_path / "nada.scw")


# ============================
# Refinamiento con el backend neuronal
# ============================
def test_refinamiento_neuronal_con_pesos_aleatorios():
    scene = gen_scene("icosphere", 21, SensorNoise.clean(), diameter=150.0)
    cfg = RefineConfig(backend="neural", iterations=2, hidden_dim=8)
    trace = refine(scene.rgb, scene.depth, scene.mesh, scene.k, scene.pose_gt, cfg)
    assert len(trace) == 3
    for record in trace.records:
        assert np.all(np.isfinite(record.pose.R)) and np.all(np.isfinite(record.pose.t))


def test_refinamiento_neuronal_con_pesos_de_archivo(tmp_path):
    scene = gen_scene("cube", 22, SensorNoise.clean(), diameter=150.0)
    weights = NeuralWeights.random(hidden_dim=6, lookup_dim=4 * 81, seed=9)
    path = tmp_path / "pesos.scw"
    save_weights(path, weights)
    cfg = RefineConfig(backend="neural", iterations=1, weights_path=str(path))
    trace = refine(scene.rgb, scene.depth, scene.mesh, scene.k, scene.pose_gt, cfg)
    assert len(trace) == 2
