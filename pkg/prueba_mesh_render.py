# prueba_mesh_render.py
import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.spatial.transform import Rotation

from core.errors import EmptyMesh, InvalidDepth, MissingFile, OutOfView, ParseError
from core.geometry import Pose
from core.mesh_render import (
    BACKGROUND_FACE,
    TEXTURE_MIN_ALBEDO,
    SolidTexture,
    TriMesh,
    crop_camera,
    lift,
    load_mesh,
    project,
    project_points,
    read_depth_png,
    read_intensity_png,
    render,
    resample_to_camera,
    save_ply,
    write_depth_png,
    write_intensity_png,
)


def _front(z=1000.0):
    return Pose(np.eye(3), np.array([0.0, 0.0, z]))


# ============================
# Lectura de mallas
# ============================
def test_obj_con_cuadrilatero_e_indices_negativos(tmp_path):
    path = tmp_path / "quad.obj"
    path.write_text(
        "# cuadrado\n"
        "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\n"
        "vn 0 0 1\n"
        "f 1/1/1 2/2/1 3/3/1 4/4/1\n"
        "f -4 -3 -2\n"
    )
    mesh = load_mesh(path)
    assert mesh.vertices.shape == (4, 3)
    assert mesh.faces.tolist() == [[0, 1, 2], [0, 2, 3], [0, 1, 2]]
    assert mesh.name == "quad"


def test_obj_indice_fuera_de_rango_indica_linea(tmp_path):
    path = tmp_path / "bad.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 7\n")
    with pytest.raises(ParseError) as err:
        load_mesh(path)
    assert err.value.line == 4


def test_obj_sin_caras_es_malla_vacia(tmp_path):
    path = tmp_path / "empty.obj"
    path.write_text("v 0 0 0\nv 1 0 0\n")
    with pytest.raises(EmptyMesh):
        load_mesh(path)


def test_malla_inexistente(tmp_path):
    with pytest.raises(MissingFile):
        load_mesh(tmp_path / "nada.ply")


def test_ply_ascii_guardado_y_leido(tmp_path, cube_mesh):
    path = tmp_path / "cube.ply"
    save_ply(cube_mesh, path)
    mesh = load_mesh(path)
    assert_allclose(mesh.vertices, cube_mesh.vertices, atol=1e-6)
    assert np.array_equal(mesh.faces, cube_mesh.faces)


def test_ply_binario_little_endian(tmp_path):
    verts = np.zeros(3, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4")])
    verts["x"] = [0.0, 10.0, 0.0]
    verts["y"] = [0.0, 0.0, 10.0]
    faces = np.zeros(1, dtype=[("n", "u1"), ("idx", "<i4", (3,))])
    faces["n"] = 3
    faces["idx"] = [[0, 1, 2]]
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        "element vertex 3\nproperty float x\nproperty float y\nproperty float z\n"
        "element face 1\nproperty list uchar int vertex_indices\nend_header\n"
    )
    path = tmp_path / "tri.ply"
    path.write_bytes(header.encode("ascii") + verts.tobytes() + faces.tobytes())
    mesh = load_mesh(path)
    assert_allclose(mesh.vertices[1], [10.0, 0.0, 0.0])
    assert mesh.faces.tolist() == [[0, 1, 2]]


def test_ply_truncado(tmp_path):
    header = "ply\nformat binary_little_endian 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n"
    path = tmp_path / "short.ply"
    path.write_bytes(header.encode("ascii") + b"\x00" * 10)
    with pytest.raises(ParseError):
        load_mesh(path)


def test_trimesh_valida_indices():
    with pytest.raises(ParseError):
        TriMesh(np.zeros((3, 3)), np.array([[0, 1, 3]]))
    with pytest.raises(EmptyMesh):
        TriMesh(np.zeros((0, 3)), np.zeros((0, 3)))


def test_diametro_del_cubo(cube_mesh):
    assert cube_mesh.diameter == pytest.approx(100.0 * np.sqrt(3.0))


# ============================
# Proyección y elevación
# ============================
def test_proyectar_punto(small_k):
    u, v, z = project([10.0, -20.0, 1000.0], small_k)
    assert (u, v, z) == pytest.approx((37.0, 14.0, 1000.0))
    with pytest.raises(InvalidDepth):
        project([0.0, 0.0, 0.0], small_k)


def test_elevar_y_proyectar_devuelve_centros_de_pixel(small_k):
    depth = np.full((48, 64), 1000.0)
    depth[0, 0] = 0.0
    cloud = lift(depth, small_k)
    assert not cloud.valid[0, 0]
    uvz = project_points(cloud.points[1:], small_k)
    assert_allclose(uvz[..., :2], cloud.uv[1:], atol=1e-9)


def test_elevar_con_tamano_incorrecto(small_k):
    with pytest.raises(InvalidDepth):
        lift(np.ones((10, 10)), small_k)


# ============================
# Rasterizado
# ============================
def test_render_de_plano_frontal(plane_mesh, small_k):
    out = render(plane_mesh, _front(), small_k)
    assert out.mask.all()
    assert_allclose(out.depth, 1000.0, rtol=1e-9)
    assert_allclose(out.intensity, 1.0)


def test_render_de_cubo_cara_cercana(cube_mesh, small_k):
    out = render(cube_mesh, _front(), small_k)
    assert out.depth[24, 32] == pytest.approx(950.0)
    assert not out.mask[0, 0]
    assert out.depth[0, 0] == 0.0
    assert out.face_id[0, 0] == BACKGROUND_FACE
    assert out.face_id[24, 32] in (8, 9)


def test_render_con_hilos_coincide(cube_mesh, vga_k):
    a = render(cube_mesh, _front(600.0), vga_k, threads=1)
    b = render(cube_mesh, _front(600.0), vga_k, threads=4)
    assert np.array_equal(a.depth, b.depth)
    assert np.array_equal(a.face_id, b.face_id)


def test_render_detras_de_la_camara_vacio(cube_mesh, small_k):
    out = render(cube_mesh, _front(-1000.0), small_k)
    assert not out.mask.any()


def test_submuestreo_de_render(plane_mesh, small_k):
    grid = render(plane_mesh, _front(), small_k).subsample(8)
    assert grid.depth.shape == (6, 8)


# ============================
# Recorte
# ============================
def test_recorte_centrado(cube_mesh, vga_k):
    crop = crop_camera(cube_mesh, _front(), vga_k, out_size=256, pad=1.4)
    assert (crop.width, crop.height) == (256, 256)
    assert crop.cx == pytest.approx(128.0)
    assert crop.cy == pytest.approx(128.0)
    out = render(cube_mesh, _front(), crop)
    rows, cols = np.nonzero(out.mask)
    assert rows.min() > 0 and cols.min() > 0
    assert rows.max() < 255 and cols.max() < 255


def test_recorte_fuera_de_vista(cube_mesh, vga_k):
    with pytest.raises(OutOfView):
        crop_camera(cube_mesh, _front(-1000.0), vga_k)
    with pytest.raises(OutOfView):
        crop_camera(cube_mesh, Pose(np.eye(3), np.array([5000.0, 0.0, 1000.0])), vga_k)


@pytest.mark.parametrize("pad", [1.2, 1.4])
def test_recorte_contiene_el_objeto_en_poses_aleatorias(cube_mesh, vga_k, pad):
    rng = np.random.default_rng(21)
    out_size = 128
    # la caja proyectada ocupa out_size / pad en su lado mayor, centrada
    margin = 0.5 * out_size * (1.0 - 1.0 / pad)
    for _ in range(100):
        R = Rotation.random(random_state=rng).as_matrix()
        t = np.array([rng.uniform(-150.0, 150.0), rng.uniform(-100.0, 100.0), rng.uniform(600.0, 1500.0)])
        pose = Pose(R, t)
        crop = crop_camera(cube_mesh, pose, vga_k, out_size=out_size, pad=pad)
        uv = project_points(pose.transform(cube_mesh.vertices), crop)
        assert uv[:, :2].min() >= margin - 1e-6
        assert uv[:, :2].max() <= out_size - margin + 1e-6


def test_remuestreo_identidad(small_k, rng):
    img = rng.random((48, 64))
    assert_allclose(resample_to_camera(img, small_k, small_k, order=0), img)


# ============================
# E/S de imágenes
# ============================
def test_png_de_profundidad_con_escala(tmp_path):
    depth = np.array([[0.0, 1234.5], [1000.0, 6553.5]])
    path = tmp_path / "depth.png"
    write_depth_png(path, depth, depth_scale=0.1)
    assert_allclose(read_depth_png(path, depth_scale=0.1), depth)


def test_png_de_intensidad(tmp_path):
    img = np.array([[0.0, 1.0], [0.5, 0.25]])
    path = tmp_path / "rgb.png"
    write_intensity_png(path, img)
    assert_allclose(read_intensity_png(path), img, atol=1.0 / 255.0)


def test_png_inexistente(tmp_path):
    with pytest.raises(MissingFile):
        read_depth_png(tmp_path / "nada.png")


# ============================
# Textura sólida
# ============================
def _texture(seed=3):
    return SolidTexture.covering(np.full(3, -100.0), np.full(3, 100.0), 12.0, seed)


def test_albedo_en_rango_y_reproducible(rng):
    pts = rng.uniform(-100.0, 100.0, size=(500, 3))
    a = _texture().albedo(pts)
    assert a.min() >= TEXTURE_MIN_ALBEDO - 1e-12
    assert a.max() <= 1.0 + 1e-12
    assert a.std() > 0.05
    assert np.array_equal(a, _texture().albedo(pts))
    assert not np.array_equal(a, _texture(seed=4).albedo(pts))


def test_textura_cubre_la_caja_con_margen():
    tex = _texture()
    assert_allclose(tex.origin, np.full(3, -112.0))
    assert tex.values.shape == (20, 20, 20)


def test_textura_en_json():
    tex = _texture()
    back = SolidTexture.from_json(tex.to_json())
    assert np.array_equal(back.values, tex.values)
    assert_allclose(back.origin, tex.origin)
    assert back.spacing == tex.spacing and back.seed == tex.seed


def test_render_modulado_por_la_textura(plane_mesh, small_k):
    pose = Pose(Rotation.from_euler("z", 30.0, degrees=True).as_matrix(), np.array([0.0, 0.0, 1000.0]))
    plain = render(plane_mesh, pose, small_k)
    textured = render(TriMesh(plane_mesh.vertices, plane_mesh.faces, "plane", _texture()), pose, small_k)
    assert np.array_equal(plain.mask, textured.mask)
    assert_allclose(plain.intensity[plain.mask], 1.0)
    surface = lift(textured.depth, small_k).points[textured.mask]
    expected = _texture().albedo((surface - pose.t) @ pose.R)
    assert_allclose(textured.intensity[textured.mask], expected, atol=1e-12)
