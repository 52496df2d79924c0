# prueba_correlation.py
import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import ndimage

from core.correlation import (
    FeatureMap,
    build_volume,
    depth_context,
    dump_volume,
    extract_features,
    fuse,
    intensity_descriptor,
    lookup,
)
from core.errors import DimensionMismatch
from core.flowfield import FlowField
from core.geometry import Intrinsics


def _random_features(rng, h=8, w=8, c=4):
    data = rng.normal(size=(h, w, c))
    return FeatureMap(data / np.linalg.norm(data, axis=-1, keepdims=True))


def _flow(h, w, du=0.0, dv=0.0):
    flow = np.zeros((h, w, 3))
    flow[..., 0] = du
    flow[..., 1] = dv
    return FlowField(flow, np.ones((h, w), dtype=bool))


def test_volumen_coincide_con_bucle_explicito(rng):
    f1, f2 = _random_features(rng), _random_features(rng)
    V = build_volume(f1, f2, levels=1).levels[0]
    for i in range(8):
        for j in range(8):
            for k in range(8):
                for l in range(8):
                    assert V[i, j, k, l] == pytest.approx(f1.data[i, j] @ f2.data[k, l])


def test_niveles_promedian_bloques(rng):
    f1, f2 = _random_features(rng), _random_features(rng)
    pyr = build_volume(f1, f2, levels=4)
    assert [V.shape[2:] for V in pyr.levels] == [(8, 8), (4, 4), (2, 2), (1, 1)]
    V0, V1 = pyr.levels[0], pyr.levels[1]
    assert V1[3, 5, 1, 2] == pytest.approx(V0[3, 5, 2:4, 4:6].mean())
    assert_allclose(pyr.levels[3][..., 0, 0], V0.mean(axis=(2, 3)))


def test_niveles_se_detienen_en_tamano_uno(rng):
    pyr = build_volume(_random_features(rng, 2, 2), _random_features(rng, 2, 2), levels=4)
    assert len(pyr.levels) == 2


def test_busqueda_con_flujo_nulo_es_recogida_directa(rng):
    f1, f2 = _random_features(rng), _random_features(rng)
    pyr = build_volume(f1, f2, levels=1)
    V = pyr.levels[0]
    win = lookup(pyr, _flow(8, 8), radius=1, stride=1)
    assert win.values.shape == (8, 8, 1, 3, 3)
    for i in range(8):
        for j in range(8):
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    k, l = min(max(i + dy, 0), 7), min(max(j + dx, 0), 7)
                    assert win.level0()[i, j, dy + 1, dx + 1] == pytest.approx(V[i, j, k, l])


def test_busqueda_con_flujo_entero_en_pixeles(rng):
    pyr = build_volume(_random_features(rng), _random_features(rng), levels=2)
    # 16 px a resolución completa = 2 celdas
    win = lookup(pyr, _flow(8, 8, du=16.0, dv=-8.0), radius=2)
    assert win.level0()[4, 3, 2, 2] == pytest.approx(pyr.levels[0][4, 3, 3, 5])
    assert win.as_features().shape == (8, 8, 2 * 25)


def test_busqueda_bilineal_a_media_celda(rng):
    pyr = build_volume(_random_features(rng), _random_features(rng), levels=1)
    win = lookup(pyr, _flow(8, 8, du=0.5), radius=0, stride=1)
    V = pyr.levels[0]
    assert win.level0()[2, 2, 0, 0] == pytest.approx(0.5 * (V[2, 2, 2, 2] + V[2, 2, 2, 3]))


def test_busqueda_con_tamano_distinto(rng):
    pyr = build_volume(_random_features(rng), _random_features(rng), levels=1)
    with pytest.raises(DimensionMismatch):
        lookup(pyr, _flow(4, 4))


def test_volumen_con_mapas_distintos(rng):
    with pytest.raises(DimensionMismatch):
        build_volume(_random_features(rng, 8, 8), _random_features(rng, 4, 8))


# ============================
# Descriptores
# ============================
def test_imagen_constante_da_descriptor_nulo():
    assert_allclose(intensity_descriptor(np.full((16, 24), 0.7)), 0.0, atol=1e-12)


def test_contexto_de_profundidad_constante():
    ctx = depth_context(np.full((16, 16), 800.0))
    # celdas interiores: sin contraste con los vecinos y ocupación completa
    assert_allclose(ctx[..., 4], 0.0, atol=1e-12)
    assert_allclose(ctx[..., 5], 1.0)
    assert_allclose(ctx[..., 6], 0.0, atol=1e-12)


def test_descriptores_normalizados(rng, small_k):
    rgb = rng.random((48, 64))
    depth = np.full((48, 64), 1000.0)
    depth[:, :16] = 0.0
    feats = extract_features(rgb, depth, small_k)
    assert feats.shape == (6, 8)
    assert feats.channels == 32
    norms = np.linalg.norm(feats.data, axis=-1)
    assert_allclose(norms[norms > 0], 1.0)


def test_descriptores_con_dimensiones_incorrectas(small_k):
    with pytest.raises(DimensionMismatch):
        extract_features(np.zeros((48, 64)), np.zeros((40, 64)), small_k)
    odd = Intrinsics(500.0, 500.0, 30.0, 20.0, 60, 40)
    with pytest.raises(DimensionMismatch):
        extract_features(np.zeros((40, 60)), np.zeros((40, 60)), odd)


def test_volcado_de_volumen(tmp_path, rng):
    pyr = build_volume(_random_features(rng), _random_features(rng), levels=2)
    path = tmp_path / "volume.scc"
    dump_volume(path, pyr)
    data = path.read_bytes()
    assert data[:4] == b"SCC2"
    assert len(data) == 4 + 4 + (16 + 8 ** 4 * 4) + (16 + 8 * 8 * 4 * 4 * 4)


def test_fusion_concatena_y_renormaliza():
    f_rgb = FeatureMap(np.array([[[3.0, 0.0], [0.0, 0.0]]]))
    f_geo = FeatureMap(np.array([[[0.0, 4.0], [0.0, 0.0]]]))
    fused = fuse(f_rgb, f_geo)
    assert fused.channels == 4
    assert_allclose(fused.data[0, 0], [0.6, 0.0, 0.0, 0.8])
    assert_allclose(fused.data[0, 1], 0.0)
    with pytest.raises(DimensionMismatch):
        fuse(f_rgb, FeatureMap(np.zeros((2, 2, 2))))


@pytest.mark.parametrize("axis", [0, 1])
def test_desplazar_la_imagen_una_celda_desplaza_los_descriptores(rng, small_k, axis):
    rgb = ndimage.gaussian_filter(rng.random((48, 64)), 1.0)
    depth = np.full((48, 64), 1000.0)
    shifted = np.zeros_like(rgb)
    if axis == 1:
        shifted[:, 8:] = rgb[:, :-8]
    else:
        shifted[8:, :] = rgb[:-8, :]
    f = extract_features(rgb, depth, small_k).data
    g = extract_features(shifted, depth, small_k).data
    # celdas interiores: la celda c de la imagen original es la c + 1 de la desplazada
    if axis == 1:
        assert_allclose(g[:, 2:-1], f[:, 1:-2], atol=1e-12)
    else:
        assert_allclose(g[2:-1], f[1:-2], atol=1e-12)
