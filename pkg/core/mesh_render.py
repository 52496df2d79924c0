# core/mesh_render.py
"""Mallas triangulares, rasterizado por software y geometría de cámara pinhole.

Convención de píxel: el píxel (fila i, columna j) tiene centro continuo (j + 0.5, i + 0.5).
"""
from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage
from scipy.spatial import ConvexHull
from scipy.spatial.distance import pdist

from config.settings import POSE_REFINE_THREADS
from core.errors import EmptyMesh, InvalidDepth, MissingFile, OutOfView, ParseError
from core.geometry import Intrinsics, Pose
from core.random_streams import stream

logger = logging.getLogger(__name__)

NEAR_PLANE_MM = 1.0
BACKGROUND_FACE = -1
_MIN_BAND_ROWS = 32
TEXTURE_MIN_ALBEDO = 0.25


# ============================
# Tipos
# ============================
@dataclass(frozen=True, eq=False)
class SolidTexture:
    """Albedo sólido en el marco del objeto: ruido de valores en una rejilla 3D, interpolación trilineal.

    Queda determinado por (origin, spacing, shape, seed), así viaja en models_info.json.
    """

    origin: np.ndarray
    spacing: float
    values: np.ndarray  # (nx, ny, nz) en [0, 1)
    seed: int = 0

    @classmethod
    def from_seed(cls, origin, spacing: float, shape, seed: int) -> "SolidTexture":
        shape = tuple(int(n) for n in shape)
        values = stream(seed, "texture").random(shape)
        return cls(np.asarray(origin, dtype=np.float64).reshape(3), float(spacing), values, int(seed))

    @classmethod
    def covering(cls, lo, hi, spacing: float, seed: int) -> "SolidTexture":
        """Rejilla que cubre la caja [lo, hi] con un nodo de margen por lado"""
        lo = np.asarray(lo, dtype=np.float64) - spacing
        hi = np.asarray(hi, dtype=np.float64) + spacing
        shape = np.ceil((hi - lo) / spacing).astype(int) + 1
        return cls.from_seed(lo, spacing, shape, seed)

    def albedo(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        idx = (points - self.origin) / self.spacing
        raw = ndimage.map_coordinates(self.values, idx.T, order=1, mode="nearest")
        return TEXTURE_MIN_ALBEDO + (1.0 - TEXTURE_MIN_ALBEDO) * raw

    def to_json(self) -> dict:
        return {"seed": self.seed, "spacing_mm": self.spacing, "origin": self.origin.tolist(),
                "shape": list(self.values.shape)}

    @classmethod
    def from_json(cls, data: dict) -> "SolidTexture":
        return cls.from_seed(data["origin"], data["spacing_mm"], data["shape"], data["seed"])


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Malla en el marco del objeto (mm); `texture` opcional modula la intensidad renderizada"""

    vertices: np.ndarray
    faces: np.ndarray
    name: str = ""
    texture: Optional[SolidTexture] = None

    def __post_init__(self):
        vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(vertices) == 0 or len(faces) == 0:
            raise EmptyMesh(f"malla '{self.name}' sin vértices o sin caras")
        if not np.all(np.isfinite(vertices)):
            raise ParseError("coordenadas no finitas en la malla", path=self.name or None)
        if faces.min() < 0 or faces.max() >= len(vertices):
            raise ParseError("índice de cara fuera de rango", path=self.name or None)
        vertices.setflags(write=False)
        faces.setflags(write=False)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "faces", faces)

    @cached_property
    def diameter(self) -> float:
        pts = self.vertices
        if len(pts) < 2:
            return 0.0
        if len(pts) > 3000:
            try:
                pts = pts[ConvexHull(pts).vertices]
            except Exception:
                logger.debug("casco convexo no disponible, se usa pdist completo")
        return float(pdist(pts).max())

    @cached_property
    def fingerprint(self) -> str:
        h = hashlib.sha1()
        h.update(self.vertices.tobytes())
        h.update(self.faces.tobytes())
        return h.hexdigest()


@dataclass(frozen=True, eq=False)
class RenderOutput:
    depth: np.ndarray      # (H, W) mm, 0 = sin retorno
    mask: np.ndarray       # (H, W) bool
    intensity: np.ndarray  # (H, W) en [0, 1]
    face_id: np.ndarray    # (H, W) int, BACKGROUND_FACE fuera del objeto

    def subsample(self, stride: int) -> "RenderOutput":
        """Toma el píxel (s·i + s/2, s·j + s/2) de cada celda (ver Intrinsics.subsampled)"""
        return RenderOutput(
            subsample_grid(self.depth, stride),
            subsample_grid(self.mask, stride),
            subsample_grid(self.intensity, stride),
            subsample_grid(self.face_id, stride),
        )


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray  # (H, W, 3) marco de cámara
    valid: np.ndarray   # (H, W) bool

    @property
    def shape(self) -> Tuple[int, int]:
        return self.valid.shape

    @property
    def uv(self) -> np.ndarray:
        """Centros de píxel (H, W, 2) en orden (u, v)"""
        return pixel_centers(*self.valid.shape)


def pixel_centers(height: int, width: int) -> np.ndarray:
    vv, uu = np.meshgrid(np.arange(height) + 0.5, np.arange(width) + 0.5, indexing="ij")
    return np.stack([uu, vv], axis=-1)


def subsample_grid(grid: np.ndarray, stride: int) -> np.ndarray:
    h, w = grid.shape[0] // stride, grid.shape[1] // stride
    off = stride // 2
    return np.ascontiguousarray(grid[off::stride, off::stride][:h, :w])


# ============================
# Lectura de mallas
# ============================
def load_mesh(path, fmt: Optional[str] = None) -> TriMesh:
    """Carga una malla OBJ (solo registros v/f) o PLY (ASCII o binario)"""
    path = Path(path)
    if not path.exists():
        raise MissingFile(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    if fmt == "obj":
        vertices, faces = _read_obj(path)
    elif fmt == "ply":
        vertices, faces = _read_ply(path)
    else:
        raise ParseError(f"formato de malla no soportado: {fmt}", path=str(path))
    if len(vertices) == 0 or len(faces) == 0:
        raise EmptyMesh(f"{path}: la malla no tiene vértices o caras")
    mesh = TriMesh(vertices, faces, name=path.stem)
    logger.info(f"Malla {path.name} cargada: {len(mesh.vertices)} vértices, {len(mesh.faces)} caras")
    return mesh


def _fan(polygon: List[int]) -> List[Tuple[int, int, int]]:
    return [(polygon[0], polygon[i], polygon[i + 1]) for i in range(1, len(polygon) - 1)]


def _read_obj(path: Path):
    vertices = []
    faces = []
    face_lines = []
    with open(path, "r", encoding="utf-8", errors="replace") as f:
        for line_no, line in enumerate(f, 1):
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "v":
                try:
                    vertices.append([float(x) for x in tok[1:4]])
                except ValueError:
                    raise ParseError("vértice mal formado", path=str(path), line=line_no)
                if len(vertices[-1]) != 3:
                    raise ParseError("vértice con menos de 3 coordenadas", path=str(path), line=line_no)
            elif tok[0] == "f":
                polygon = []
                for item in tok[1:]:
                    try:
                        idx = int(item.split("/")[0])
                    except ValueError:
                        raise ParseError(f"índice de cara mal formado '{item}'", path=str(path), line=line_no)
                    # índices OBJ base 1; negativos relativos al último vértice leído
                    polygon.append(idx - 1 if idx > 0 else len(vertices) + idx)
                if len(polygon) < 3:
                    raise ParseError("cara con menos de 3 vértices", path=str(path), line=line_no)
                for tri in _fan(polygon):
                    faces.append(tri)
                    face_lines.append(line_no)
    n = len(vertices)
    for tri, line_no in zip(faces, face_lines):
        if min(tri) < 0 or max(tri) >= n:
            raise ParseError(f"índice de cara fuera de rango {tri}", path=str(path), line=line_no)
    return np.array(vertices, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


@dataclass
class _PlyElement:
    name: str
    count: int
    props: list  # (nombre, tipo) o (nombre, ("list", tipo_cuenta, tipo_item))


def _parse_ply_header(data: bytes, path: Path):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise ParseError("cabecera PLY inválida", path=str(path), line=1)
    nl = data.find(b"\n", end)
    body_start = len(data) if nl < 0 else nl + 1
    lines = data[:body_start].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements: List[_PlyElement] = []
    for line_no, line in enumerate(lines, 1):
        tok = line.split()
        if not tok or tok[0] in ("ply", "comment", "obj_info", "end_header"):
            continue
        try:
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                elements.append(_PlyElement(tok[1], int(tok[2]), []))
            elif tok[0] == "property":
                if not elements:
                    raise ParseError("propiedad antes de cualquier elemento", path=str(path), line=line_no)
                if tok[1] == "list":
                    elements[-1].props.append((tok[4], ("list", _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]])))
                else:
                    elements[-1].props.append((tok[2], _PLY_TYPES[tok[1]]))
            else:
                raise ParseError(f"registro de cabecera desconocido '{tok[0]}'", path=str(path), line=line_no)
        except (IndexError, KeyError, ValueError):
            raise ParseError("cabecera PLY mal formada", path=str(path), line=line_no)
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise ParseError(f"formato PLY desconocido: {fmt}", path=str(path), line=2)
    return fmt, elements, body_start, len(lines)


def _read_ply(path: Path):
    data = path.read_bytes()
    fmt, elements, body_start, header_lines = _parse_ply_header(data, path)
    if fmt == "ascii":
        records = _read_ply_ascii(data[body_start:], elements, path, header_lines)
    else:
        order = "<" if fmt == "binary_little_endian" else ">"
        records = _read_ply_binary(data, body_start, elements, order, path)

    if "vertex" not in records:
        raise EmptyMesh(f"{path}: sin elemento vertex")
    vert = records["vertex"]
    try:
        vertices = np.stack([np.asarray(vert[c], dtype=np.float64) for c in ("x", "y", "z")], axis=1)
    except KeyError:
        raise ParseError("el elemento vertex no tiene x/y/z", path=str(path))
    polygons = records.get("face", {}).get("__faces__", [])
    if isinstance(polygons, np.ndarray):
        faces = polygons.reshape(-1, 3)
    else:
        faces = [tri for polygon in polygons for tri in _fan(list(polygon))]
        faces = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if len(faces) and (faces.min() < 0 or faces.max() >= len(vertices)):
        bad = int(np.nonzero((faces < 0).any(axis=1) | (faces >= len(vertices)).any(axis=1))[0][0])
        raise ParseError(f"índice de cara fuera de rango (cara {bad})", path=str(path))
    return vertices, faces


def _read_ply_ascii(body: bytes, elements, path: Path, header_lines: int):
    lines = body.decode("ascii", errors="replace").splitlines()
    cursor = 0
    records = {}
    for el in elements:
        columns = {name: [] for name, _ in el.props}
        polygons = []
        for _ in range(el.count):
            while cursor < len(lines) and not lines[cursor].strip():
                cursor += 1
            line_no = header_lines + cursor + 1
            if cursor >= len(lines):
                raise ParseError(f"faltan filas del elemento {el.name}", path=str(path), line=line_no)
            tok = lines[cursor].split()
            cursor += 1
            pos = 0
            try:
                for name, kind in el.props:
                    if isinstance(kind, tuple):
                        n = int(tok[pos])
                        items = [int(x) for x in tok[pos + 1:pos + 1 + n]]
                        if len(items) != n:
                            raise IndexError
                        pos += 1 + n
                        columns[name].append(items)
                        if name in ("vertex_indices", "vertex_index"):
                            polygons.append(items)
                    else:
                        columns[name].append(float(tok[pos]))
                        pos += 1
            except (IndexError, ValueError):
                raise ParseError(f"fila mal formada en el elemento {el.name}", path=str(path), line=line_no)
        columns["__faces__"] = polygons
        records[el.name] = columns
    return records


def _read_ply_binary(data: bytes, offset: int, elements, order: str, path: Path):
    records = {}
    for el in elements:
        list_props = [p for p in el.props if isinstance(p[1], tuple)]
        if not list_props:
            dtype = np.dtype([(name, order + kind) for name, kind in el.props])
            try:
                arr = np.frombuffer(data, dtype=dtype, count=el.count, offset=offset)
            except ValueError:
                raise ParseError(f"datos insuficientes para {el.name}", path=str(path), offset=offset)
            offset += dtype.itemsize * el.count
            records[el.name] = {name: arr[name] for name, _ in el.props}
            records[el.name]["__faces__"] = []
            continue
        columns, offset = _read_ply_list_element(data, offset, el, order, path)
        records[el.name] = columns
    return records


def _read_ply_list_element(data: bytes, offset: int, el: _PlyElement, order: str, path: Path):
    # Camino rápido: todas las listas de longitud 3 (mallas trianguladas)
    fields = []
    for name, kind in el.props:
        if isinstance(kind, tuple):
            fields.append((name + "__n", order + kind[1]))
            fields.append((name, order + kind[2], (3,)))
        else:
            fields.append((name, order + kind))
    dtype = np.dtype(fields)
    if offset + dtype.itemsize * el.count <= len(data):
        arr = np.frombuffer(data, dtype=dtype, count=el.count, offset=offset)
        counts_ok = all(np.all(arr[name + "__n"] == 3) for name, kind in el.props if isinstance(kind, tuple))
        if counts_ok:
            columns = {name: arr[name] for name, _ in el.props}
            idx_name = next((n for n, k in el.props if isinstance(k, tuple)
                             and n in ("vertex_indices", "vertex_index")), None)
            columns["__faces__"] = arr[idx_name].astype(np.int64) if idx_name else []
            return columns, offset + dtype.itemsize * el.count

    # Camino general: listas de longitud variable
    columns = {name: [] for name, _ in el.props}
    polygons = []
    for _ in range(el.count):
        for name, kind in el.props:
            try:
                if isinstance(kind, tuple):
                    cnt_t = np.dtype(order + kind[1])
                    n = int(np.frombuffer(data, dtype=cnt_t, count=1, offset=offset)[0])
                    offset += cnt_t.itemsize
                    item_t = np.dtype(order + kind[2])
                    items = np.frombuffer(data, dtype=item_t, count=n, offset=offset).astype(np.int64)
                    offset += item_t.itemsize * n
                    columns[name].append(items)
                    if name in ("vertex_indices", "vertex_index"):
                        polygons.append(items.tolist())
                else:
                    t = np.dtype(order + kind)
                    columns[name].append(np.frombuffer(data, dtype=t, count=1, offset=offset)[0])
                    offset += t.itemsize
            except ValueError:
                raise ParseError(f"datos insuficientes para {el.name}", path=str(path), offset=offset)
    columns["__faces__"] = polygons
    return columns, offset


def save_ply(mesh: TriMesh, path) -> None:
    """Escribe la malla como PLY ASCII"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="ascii") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(mesh.vertices)}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        f.write(f"element face {len(mesh.faces)}\n")
        f.write("property list uchar int vertex_indices\nend_header\n")
        for v in mesh.vertices:
            f.write(f"{v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for tri in mesh.faces:
            f.write(f"3 {tri[0]} {tri[1]} {tri[2]}\n")


# ============================
# Proyección y elevación
# ============================
def project(point, k: Intrinsics) -> Tuple[float, float, float]:
    x, y, z = (float(c) for c in np.asarray(point, dtype=np.float64).reshape(3))
    if z <= 0:
        raise InvalidDepth(f"z debe ser > 0 (recibido {z})")
    return k.fx * x / z + k.cx, k.fy * y / z + k.cy, z


def project_points(points: np.ndarray, k: Intrinsics, strict: bool = True) -> np.ndarray:
    """Proyección vectorizada (..., 3) -> (..., 3) con (u, v, z); sin `strict`, z <= 0 da NaN en u, v"""
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    bad = z <= 0
    if strict and np.any(bad):
        raise InvalidDepth(f"{int(bad.sum())} puntos con z <= 0")
    z_safe = np.where(bad, np.nan, z)
    u = k.fx * points[..., 0] / z_safe + k.cx
    v = k.fy * points[..., 1] / z_safe + k.cy
    return np.stack([u, v, z], axis=-1)


def lift(depth: np.ndarray, k: Intrinsics) -> PointCloud:
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (k.height, k.width):
        raise InvalidDepth(f"profundidad {depth.shape} no coincide con intrínsecos {(k.height, k.width)}")
    valid = np.isfinite(depth) & (depth > 0)
    z = np.where(valid, depth, 0.0)
    uv = pixel_centers(*depth.shape)
    x = (uv[..., 0] - k.cx) * z / k.fx
    y = (uv[..., 1] - k.cy) * z / k.fy
    return PointCloud(np.stack([x, y, z], axis=-1), valid)


# ============================
# Rasterizado
# ============================
def render(mesh: TriMesh, pose: Pose, k: Intrinsics, threads: Optional[int] = None) -> RenderOutput:
    """Profundidad, máscara, intensidad Lambertiana plana (× albedo si la malla tiene textura) e id de cara"""
    H, W = k.height, k.width
    cam = pose.transform(mesh.vertices)
    tri = cam[mesh.faces]
    keep = np.all(tri[:, :, 2] > NEAR_PLANE_MM, axis=1)
    face_ids = np.nonzero(keep)[0]
    tri = tri[keep]

    depth = np.full((H, W), np.inf)
    face_id = np.full((H, W), BACKGROUND_FACE, dtype=np.int64)
    if len(tri):
        z = tri[:, :, 2]
        u = k.fx * tri[:, :, 0] / z + k.cx
        v = k.fy * tri[:, :, 1] / z + k.cy
        area = (u[:, 1] - u[:, 0]) * (v[:, 2] - v[:, 0]) - (u[:, 2] - u[:, 0]) * (v[:, 1] - v[:, 0])
        jmin = np.clip(np.ceil(u.min(axis=1) - 0.5), 0, W).astype(np.int64)
        jmax = np.clip(np.floor(u.max(axis=1) - 0.5), -1, W - 1).astype(np.int64)
        imin = np.clip(np.ceil(v.min(axis=1) - 0.5), 0, H).astype(np.int64)
        imax = np.clip(np.floor(v.max(axis=1) - 0.5), -1, H - 1).astype(np.int64)
        live = (np.abs(area) > 1e-12) & (jmin <= jmax) & (imin <= imax)
        raster = _Raster(u[live], v[live], z[live], area[live], jmin[live], jmax[live],
                         imin[live], imax[live], face_ids[live])

        n_threads = max(1, min(threads or POSE_REFINE_THREADS, H // _MIN_BAND_ROWS))
        bounds = np.linspace(0, H, n_threads + 1).astype(int)
        bands = list(zip(bounds[:-1], bounds[1:]))
        if n_threads == 1:
            results = [raster.band(r0, r1, W) for r0, r1 in bands]
        else:
            with ThreadPoolExecutor(max_workers=n_threads) as pool:
                results = list(pool.map(lambda b: raster.band(b[0], b[1], W), bands))
        for (r0, r1), (band_depth, band_face) in zip(bands, results):
            depth[r0:r1] = band_depth
            face_id[r0:r1] = band_face

    mask = face_id != BACKGROUND_FACE
    depth = np.where(mask, depth, 0.0)
    intensity = np.zeros((H, W))
    if mask.any():
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        shade = np.abs(n[:, 2]) / np.maximum(np.linalg.norm(n, axis=1), 1e-300)
        lut = np.zeros(len(mesh.faces))
        lut[face_ids] = np.clip(shade, 0.0, 1.0)
        intensity[mask] = lut[face_id[mask]]
        if mesh.texture is not None:
            # punto de superficie de cada píxel devuelto al marco del objeto: R^T (X - t)
            surface = lift(depth, k).points[mask]
            intensity[mask] *= mesh.texture.albedo((surface - pose.t) @ pose.R)
    return RenderOutput(depth, mask, intensity, face_id)


class _Raster:
    """Triángulos ya proyectados; rasteriza bandas de filas independientes"""

    def __init__(self, u, v, z, area, jmin, jmax, imin, imax, face_ids):
        self.u, self.v, self.z, self.area = u, v, z, area
        self.jmin, self.jmax, self.imin, self.imax = jmin, jmax, imin, imax
        self.face_ids = face_ids

    def band(self, r0: int, r1: int, width: int):
        depth = np.full((r1 - r0, width), np.inf)
        face = np.full((r1 - r0, width), BACKGROUND_FACE, dtype=np.int64)
        rows = np.nonzero((self.imin < r1) & (self.imax >= r0))[0]
        for f in rows:
            i0, i1 = max(self.imin[f], r0), min(self.imax[f], r1 - 1)
            j0, j1 = self.jmin[f], self.jmax[f]
            pu, pv = np.meshgrid(np.arange(j0, j1 + 1) + 0.5, np.arange(i0, i1 + 1) + 0.5)
            (u0, u1, u2), (v0, v1, v2), (z0, z1, z2) = self.u[f], self.v[f], self.z[f]
            a = self.area[f]
            w0 = ((u2 - u1) * (pv - v1) - (v2 - v1) * (pu - u1)) / a
            w1 = ((u0 - u2) * (pv - v2) - (v0 - v2) * (pu - u2)) / a
            w2 = 1.0 - w0 - w1
            inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
            if not inside.any():
                continue
            # interpolación de 1/z: corrección de perspectiva
            zz = 1.0 / (w0 / z0 + w1 / z1 + w2 / z2)
            sub_depth = depth[i0 - r0:i1 - r0 + 1, j0:j1 + 1]
            sub_face = face[i0 - r0:i1 - r0 + 1, j0:j1 + 1]
            closer = inside & (zz < sub_depth)
            sub_depth[closer] = zz[closer]
            sub_face[closer] = self.face_ids[f]
        return depth, face


# ============================
# Recorte
# ============================
def crop_camera(mesh: TriMesh, pose: Pose, k: Intrinsics, out_size: int = 256, pad: float = 1.4) -> Intrinsics:
    """Intrínsecos de la ROI cuadrada (bbox proyectada × pad) reescalada a out_size × out_size"""
    cam = pose.transform(mesh.vertices)
    if np.any(cam[:, 2] <= NEAR_PLANE_MM):
        raise OutOfView("el objeto cruza el plano cercano bajo la pose dada")
    uvz = project_points(cam, k)
    umin, vmin = uvz[:, 0].min(), uvz[:, 1].min()
    umax, vmax = uvz[:, 0].max(), uvz[:, 1].max()
    if umax <= 0 or vmax <= 0 or umin >= k.width or vmin >= k.height:
        raise OutOfView("la caja proyectada no intersecta la imagen")
    side = max(umax - umin, vmax - vmin)
    if side <= 0:
        raise OutOfView("caja proyectada vacía")
    roi = side * pad
    cu, cv = 0.5 * (umin + umax), 0.5 * (vmin + vmax)
    s = out_size / roi
    return Intrinsics(
        k.fx * s,
        k.fy * s,
        (k.cx - (cu - 0.5 * roi)) * s,
        (k.cy - (cv - 0.5 * roi)) * s,
        out_size,
        out_size,
    )


def resample_to_camera(image: np.ndarray, k_src: Intrinsics, k_dst: Intrinsics, order: int = 1) -> np.ndarray:
    """Remuestrea una imagen de la cámara origen a otra que solo difiere en escala y desplazamiento.

    order=0 (vecino más cercano) para profundidad, order=1 para intensidad.
    """
    uv = pixel_centers(k_dst.height, k_dst.width)
    u_src = (uv[..., 0] - k_dst.cx) * k_src.fx / k_dst.fx + k_src.cx
    v_src = (uv[..., 1] - k_dst.cy) * k_src.fy / k_dst.fy + k_src.cy
    if order == 0:
        cols, rows = np.floor(u_src), np.floor(v_src)
    else:
        cols, rows = u_src - 0.5, v_src - 0.5
    return ndimage.map_coordinates(np.asarray(image, dtype=np.float64), [rows, cols],
                                   order=order, mode="constant", cval=0.0)


# ============================
# E/S de profundidad (PNG de 16 bits)
# ============================
def read_depth_png(path, depth_scale: float = 1.0) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingFile(path)
    raw = np.array(Image.open(path)).astype(np.float64)
    return raw * depth_scale


def write_depth_png(path, depth_mm: np.ndarray, depth_scale: float = 1.0) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = np.clip(np.round(np.asarray(depth_mm) / depth_scale), 0, 65535).astype(np.uint16)
    Image.fromarray(raw).save(path)


def read_intensity_png(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingFile(path)
    img = Image.open(path).convert("L")
    return np.asarray(img, dtype=np.float64) / 255.0


def write_intensity_png(path, intensity: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.clip(np.round(np.asarray(intensity) * 255.0), 0, 255).astype(np.uint8)).save(path)
