"""Triangle meshes: containers, OBJ/PLY I/O, normals, sampling and fixtures.

All randomness goes through ``numpy.random.Generator(PCG64(seed))`` so that
sampled clouds and corruptions are reproducible across platforms.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from hallufix.errors import (
    ConfigError,
    DegenerateExtent,
    EmptyMesh,
    IoError,
    ParseError,
    SizeLimit,
    UnsupportedFormat,
)

log = logging.getLogger(__name__)

MIN_FACE_AREA = 1e-12
MAX_ICO_SUBDIVISIONS = 6


class MeshFormat(str, enum.Enum):
    OBJ = "obj"
    PLY = "ply"


class CorruptMode(str, enum.Enum):
    SPIKE = "spike"
    DENT = "dent"


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _readonly(x, dtype) -> np.ndarray:
    # reuse already-frozen arrays so meshes sharing topology share the face buffer
    a = np.asarray(x, dtype=dtype)
    if a.ndim != 2 or a.shape[1] != 3:
        a = a.reshape(-1, 3)
    if a.flags.writeable:
        a = _frozen(a.copy())
    return a


@dataclass(frozen=True)
class TriangleMesh:
    """Indexed triangle mesh.

    ``vertices`` is ``(N, 3)`` float64, ``faces`` is ``(F, 3)`` int64 and
    ``vertex_colors`` is ``None`` or ``(N, 3)`` in ``[0, 1]``. Arrays are made
    read-only on construction. ``dropped_faces`` records how many degenerate
    faces were removed when the mesh was loaded or validated.
    """

    vertices: np.ndarray
    faces: np.ndarray
    vertex_colors: Optional[np.ndarray] = None
    dropped_faces: int = field(default=0, compare=False)

    def __post_init__(self):
        v = _readonly(self.vertices, np.float64)
        f = _readonly(self.faces, np.int64)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ParseError(
                f"face index out of range [0, {len(v)}): "
                f"min={int(f.min())} max={int(f.max())}"
            )
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "faces", _frozen(f))
        if self.vertex_colors is not None:
            c = np.array(self.vertex_colors, dtype=np.float64).reshape(-1, 3)
            if len(c) != len(v):
                raise ParseError(
                    f"{len(c)} vertex colors for {len(v)} vertices"
                )
            object.__setattr__(self, "vertex_colors", _frozen(c))

    @property
    def vertex_count(self) -> int:
        return len(self.vertices)

    @property
    def face_count(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices) -> "TriangleMesh":
        return TriangleMesh(vertices, self.faces, self.vertex_colors)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    face_index: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(
            self, "points", _frozen(np.array(self.points, dtype=np.float64).reshape(-1, 3))
        )
        if self.face_index is not None:
            object.__setattr__(
                self, "face_index", _frozen(np.array(self.face_index, dtype=np.int64))
            )

    def __len__(self) -> int:
        return len(self.points)


# --------------------------------------------------------------------------
# geometry helpers

def face_cross(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Unnormalized face normals ``(p1 - p0) x (p2 - p0)``; length is twice the area."""
    p0 = vertices[faces[:, 0]]
    return np.cross(vertices[faces[:, 1]] - p0, vertices[faces[:, 2]] - p0)


def face_areas(mesh: TriangleMesh) -> np.ndarray:
    return 0.5 * np.linalg.norm(face_cross(mesh.vertices, mesh.faces), axis=1)


def drop_degenerate_faces(mesh: TriangleMesh) -> TriangleMesh:
    """Return a copy without faces of area below ``MIN_FACE_AREA``."""
    keep = face_areas(mesh) >= MIN_FACE_AREA
    dropped = int((~keep).sum())
    if dropped:
        log.warning("dropped %d degenerate face(s)", dropped)
    return TriangleMesh(mesh.vertices, mesh.faces[keep], mesh.vertex_colors, dropped)


def vertex_normals_raw(vertices: np.ndarray, faces: np.ndarray):
    """Area-weighted vertex normals on raw arrays.

    Returns ``(normals, accum, length)`` where ``accum`` is the per-vertex sum
    of face cross products and ``length`` its norm. Vertices without incident
    faces get ``(0, 0, 1)`` and ``length == 0``.
    """
    cross = face_cross(vertices, faces)
    accum = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(accum, faces[:, k], cross)
    length = np.linalg.norm(accum, axis=1)
    normals = np.zeros_like(vertices)
    ok = length > 0
    normals[ok] = accum[ok] / length[ok, None]
    normals[~ok] = (0.0, 0.0, 1.0)
    return normals, accum, length


def vertex_normals_vjp(vertices: np.ndarray, faces: np.ndarray, grad_normals: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. vertex normals back to vertex positions."""
    normals, _, length = vertex_normals_raw(vertices, faces)
    g = np.asarray(grad_normals, dtype=np.float64)
    ok = length > 0
    g_acc = np.zeros_like(vertices)
    gn = g[ok]
    n = normals[ok]
    g_acc[ok] = (gn - n * np.sum(n * gn, axis=1, keepdims=True)) / length[ok, None]

    g_cross = g_acc[faces[:, 0]] + g_acc[faces[:, 1]] + g_acc[faces[:, 2]]
    p0 = vertices[faces[:, 0]]
    e1 = vertices[faces[:, 1]] - p0
    e2 = vertices[faces[:, 2]] - p0
    g_e1 = np.cross(e2, g_cross)
    g_e2 = np.cross(g_cross, e1)
    out = np.zeros_like(vertices)
    np.add.at(out, faces[:, 1], g_e1)
    np.add.at(out, faces[:, 2], g_e2)
    np.add.at(out, faces[:, 0], -(g_e1 + g_e2))
    return out


def vertex_normals(mesh: TriangleMesh) -> np.ndarray:
    """Unit area-weighted vertex normals, one per vertex.

    Isolated vertices get ``(0, 0, 1)`` and trigger a logged warning.
    """
    normals, _, length = vertex_normals_raw(mesh.vertices, mesh.faces)
    isolated = int((length == 0).sum())
    if isolated:
        log.warning("%d isolated vertex(es) given default normal (0, 0, 1)", isolated)
    return normals


def edge_faces(faces: np.ndarray):
    """Unique undirected edges and their (up to two) adjacent faces.

    Returns ``(edges, adj)`` with ``edges`` ``(E, 2)`` sorted vertex pairs and
    ``adj`` ``(E, 2)`` face indices, ``-1`` where an edge has a single face.
    Non-manifold edges keep their first two faces.
    """
    f = np.asarray(faces, dtype=np.int64)
    half = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    owner = np.tile(np.arange(len(f)), 3)
    key = np.sort(half, axis=1)
    edges, inverse = np.unique(key, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    adj = np.full((len(edges), 2), -1, dtype=np.int64)
    order = np.argsort(inverse, kind="stable")
    seen = np.zeros(len(edges), dtype=np.int64)
    for h in order:
        e = inverse[h]
        if seen[e] < 2:
            adj[e, seen[e]] = owner[h]
        seen[e] += 1
    return edges, adj


# --------------------------------------------------------------------------
# I/O

def _detect_format(path: Path, fmt=None) -> MeshFormat:
    if fmt is not None:
        try:
            return MeshFormat(str(getattr(fmt, "value", fmt)).lower())
        except ValueError:
            raise UnsupportedFormat(f"unknown mesh format {fmt!r}") from None
    suffix = path.suffix.lower().lstrip(".")
    try:
        return MeshFormat(suffix)
    except ValueError:
        raise UnsupportedFormat(f"{path}: unsupported extension {path.suffix!r}") from None


def load_mesh(path) -> TriangleMesh:
    """Read an ASCII OBJ or an ASCII / binary little-endian PLY file.

    Degenerate faces are dropped (the count is kept in ``dropped_faces``).
    Raises ``EmptyMesh`` if nothing is left.
    """
    path = Path(path)
    fmt = _detect_format(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise IoError(f"{path}: no such file") from None
    except OSError as exc:
        raise IoError(f"{path}: {exc}") from exc
    if fmt is MeshFormat.OBJ:
        mesh = _parse_obj(data, path)
    else:
        mesh = _parse_ply(data, path)
    mesh = drop_degenerate_faces(mesh)
    if mesh.face_count == 0:
        raise EmptyMesh(f"{path}: no faces after validation")
    return mesh


def _parse_obj(data: bytes, path: Path) -> TriangleMesh:
    verts, colors, faces = [], [], []
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"{path}: not a text OBJ file") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        tag = parts[0]
        try:
            if tag == "v":
                vals = [float(x) for x in parts[1:]]
                if len(vals) < 3:
                    raise ValueError("vertex needs 3 coordinates")
                verts.append(vals[:3])
                if len(vals) >= 6:
                    colors.append(vals[3:6])
            elif tag == "f":
                idx = []
                for tok in parts[1:]:
                    i = int(tok.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                if len(idx) < 3:
                    raise ValueError("face needs at least 3 vertices")
                for k in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[k], idx[k + 1]))
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
    if colors and len(colors) != len(verts):
        log.warning("%s: ignoring partial vertex colors", path)
        colors = []
    n = len(verts)
    for face in faces:
        for i in face:
            if not 0 <= i < n:
                raise ParseError(f"{path}: face index {i + 1} out of range (1..{n})")
    return TriangleMesh(
        np.array(verts, dtype=np.float64).reshape(-1, 3),
        np.array(faces, dtype=np.int64).reshape(-1, 3),
        np.array(colors) if colors else None,
    )


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_ply_header(data: bytes, path: Path):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise ParseError(f"{path}: missing PLY header")
    body_start = data.index(b"\n", end) + 1
    fmt = None
    elements = []
    for raw in data[:end].decode("ascii", "replace").splitlines()[1:]:
        parts = raw.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append({"name": parts[1], "count": int(parts[2]), "props": []})
        elif parts[0] == "property":
            if not elements:
                raise ParseError(f"{path}: property before element")
            if parts[1] == "list":
                elements[-1]["props"].append(
                    (parts[4], "list", _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]])
                )
            else:
                elements[-1]["props"].append((parts[2], _PLY_TYPES[parts[1]]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise UnsupportedFormat(f"{path}: PLY format {fmt!r} not supported")
    return fmt, elements, body_start


def _parse_ply(data: bytes, path: Path) -> TriangleMesh:
    try:
        fmt, elements, offset = _parse_ply_header(data, path)
    except (KeyError, ValueError, IndexError) as exc:
        raise ParseError(f"{path}: bad PLY header ({exc})") from exc
    verts = colors = faces = None
    try:
        if fmt == "ascii":
            tokens = data[offset:].split()
            pos = 0
            for el in elements:
                rows = []
                for _ in range(el["count"]):
                    row = []
                    for prop in el["props"]:
                        if prop[1] == "list":
                            cnt = int(tokens[pos])
                            pos += 1
                            row.append([int(t) for t in tokens[pos:pos + cnt]])
                            pos += cnt
                        else:
                            row.append(float(tokens[pos]))
                            pos += 1
                    rows.append(row)
                verts, colors, faces = _collect_ply(el, rows, verts, colors, faces)
        else:
            for el in elements:
                if all(p[1] != "list" for p in el["props"]):
                    dt = np.dtype([(p[0], "<" + p[1]) for p in el["props"]])
                    arr = np.frombuffer(data, dtype=dt, count=el["count"], offset=offset)
                    offset += dt.itemsize * el["count"]
                    rows = [[float(r[p[0]]) for p in el["props"]] for r in arr] if el["name"] != "vertex" else arr
                else:
                    rows = []
                    for _ in range(el["count"]):
                        row = []
                        for prop in el["props"]:
                            if prop[1] == "list":
                                cdt, idt = np.dtype("<" + prop[2]), np.dtype("<" + prop[3])
                                cnt = int(np.frombuffer(data, cdt, 1, offset)[0])
                                offset += cdt.itemsize
                                row.append(np.frombuffer(data, idt, cnt, offset).tolist())
                                offset += idt.itemsize * cnt
                            else:
                                pdt = np.dtype("<" + prop[1])
                                row.append(float(np.frombuffer(data, pdt, 1, offset)[0]))
                                offset += pdt.itemsize
                        rows.append(row)
                verts, colors, faces = _collect_ply(el, rows, verts, colors, faces)
    except (ValueError, IndexError, KeyError) as exc:
        raise ParseError(f"{path}: truncated or malformed PLY body ({exc})") from exc
    if verts is None:
        raise ParseError(f"{path}: no vertex element")
    if faces is None:
        faces = np.zeros((0, 3), dtype=np.int64)
    if faces.size and (faces.min() < 0 or faces.max() >= len(verts)):
        raise ParseError(f"{path}: face index out of range")
    return TriangleMesh(verts, faces, colors)


def _collect_ply(el, rows, verts, colors, faces):
    names = [p[0] for p in el["props"]]
    if el["name"] == "vertex":
        if isinstance(rows, np.ndarray):
            verts = np.stack([rows[c].astype(np.float64) for c in ("x", "y", "z")], axis=1)
            get = lambda c: rows[c].astype(np.float64)  # noqa: E731
        else:
            table = np.array(rows, dtype=np.float64).reshape(len(rows), len(names))
            verts = table[:, [names.index(c) for c in ("x", "y", "z")]]
            get = lambda c: table[:, names.index(c)]  # noqa: E731
        if all(c in names for c in ("red", "green", "blue")):
            scale = 255.0 if el["props"][names.index("red")][1] == "u1" else 1.0
            colors = np.stack([get(c) for c in ("red", "green", "blue")], axis=1) / scale
    elif el["name"] == "face":
        li = next(i for i, p in enumerate(el["props"]) if p[1] == "list")
        tris = []
        for row in rows:
            idx = row[li]
            for k in range(1, len(idx) - 1):
                tris.append((idx[0], idx[k], idx[k + 1]))
        faces = np.array(tris, dtype=np.int64).reshape(-1, 3)
    return verts, colors, faces


def save_mesh(mesh: TriangleMesh, path, format=None) -> None:
    """Write ``mesh`` as ASCII OBJ or binary little-endian PLY.

    OBJ coordinates are written with 17 significant digits, so a load/save
    round trip is exact. PLY stores float32 coordinates.
    """
    path = Path(path)
    fmt = _detect_format(path, format)
    if mesh.face_count == 0:
        raise EmptyMesh("refusing to save a mesh without faces")
    try:
        if fmt is MeshFormat.OBJ:
            path.write_text(_format_obj(mesh))
        else:
            path.write_bytes(_format_ply(mesh))
    except OSError as exc:
        raise IoError(f"{path}: {exc}") from exc


def _format_obj(mesh: TriangleMesh) -> str:
    lines = []
    if mesh.vertex_colors is None:
        for x, y, z in mesh.vertices.tolist():
            lines.append(f"v {x:.17g} {y:.17g} {z:.17g}")
    else:
        for (x, y, z), (r, g, b) in zip(mesh.vertices.tolist(), mesh.vertex_colors.tolist()):
            lines.append(f"v {x:.17g} {y:.17g} {z:.17g} {r:.17g} {g:.17g} {b:.17g}")
    for a, b, c in (mesh.faces + 1).tolist():
        lines.append(f"f {a} {b} {c}")
    return "\n".join(lines) + "\n"


def _format_ply(mesh: TriangleMesh) -> bytes:
    has_color = mesh.vertex_colors is not None
    header = [
        "ply",
        "format binary_little_endian 1.0",
        f"element vertex {mesh.vertex_count}",
        "property float x",
        "property float y",
        "property float z",
    ]
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if has_color:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    header += [
        f"element face {mesh.face_count}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    vert = np.zeros(mesh.vertex_count, dtype=np.dtype(fields))
    for i, c in enumerate("xyz"):
        vert[c] = mesh.vertices[:, i]
    if has_color:
        rgb = np.clip(np.rint(mesh.vertex_colors * 255.0), 0, 255).astype(np.uint8)
        vert["red"], vert["green"], vert["blue"] = rgb.T
    face = np.zeros(mesh.face_count, dtype=np.dtype([("n", "u1"), ("i", "<i4", (3,))]))
    face["n"] = 3
    face["i"] = mesh.faces
    return ("\n".join(header) + "\n").encode("ascii") + vert.tobytes() + face.tobytes()


# --------------------------------------------------------------------------
# transforms and sampling

def normalize_to_unit_box(mesh: TriangleMesh) -> TriangleMesh:
    """Center the bounding box at the origin and scale its longest side to 1."""
    lo, hi = mesh.bounds()
    extent = float((hi - lo).max())
    if not extent > 0:
        raise DegenerateExtent("all vertices coincide")
    center = 0.5 * (lo + hi)
    return TriangleMesh((mesh.vertices - center) / extent, mesh.faces, mesh.vertex_colors)


def sample_surface(mesh: TriangleMesh, count: int, seed: int) -> PointCloud:
    """Area-weighted uniform surface sampling with barycentric draws."""
    if count < 1:
        raise ConfigError("count must be >= 1")
    rng = np.random.default_rng(seed)
    areas = face_areas(mesh)
    fidx = rng.choice(mesh.face_count, size=count, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    tri = mesh.vertices[mesh.faces[fidx]]
    pts = (
        (1.0 - r1)[:, None] * tri[:, 0]
        + (r1 * (1.0 - r2))[:, None] * tri[:, 1]
        + (r1 * r2)[:, None] * tri[:, 2]
    )
    return PointCloud(pts, fidx)


def icosphere(subdivisions: int = 2, radius: float = 1.0) -> TriangleMesh:
    """Geodesic sphere with ``10 * 4**n + 2`` vertices and outward CCW faces."""
    if subdivisions < 0 or subdivisions > MAX_ICO_SUBDIVISIONS:
        raise SizeLimit(f"subdivisions must be in [0, {MAX_ICO_SUBDIVISIONS}]")
    if not radius > 0:
        raise ConfigError("radius must be positive")
    t = (1.0 + math.sqrt(5.0)) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    v = np.array(verts)
    v = v / np.linalg.norm(v, axis=1, keepdims=True) * radius
    return TriangleMesh(v, np.array(faces, dtype=np.int64))


def corrupt(mesh: TriangleMesh, fraction: float, magnitude: float, mode="spike", seed: int = 0):
    """Displace a random subset of vertices along (SPIKE) or against (DENT) their normals.

    Returns ``(corrupted_mesh, affected_indices)``; indices are sorted.
    """
    mode = CorruptMode(str(getattr(mode, "value", mode)).lower())
    if not 0 < fraction <= 1:
        raise ConfigError("fraction must be in (0, 1]")
    n = mesh.vertex_count
    count = math.ceil(round(fraction * n, 9))
    if count < 1:
        raise ConfigError("fraction * vertex_count must be >= 1")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=count, replace=False))
    sign = 1.0 if mode is CorruptMode.SPIKE else -1.0
    normals = vertex_normals(mesh)
    verts = mesh.vertices.copy()
    verts[idx] += sign * magnitude * normals[idx]
    return TriangleMesh(verts, mesh.faces, mesh.vertex_colors), idx


def beveled_cube(half_size: float = 0.3, cells: int = 8, bevel_cells: int = 2):
    """Closed cube mesh with the ``+x/+y`` edge beveled at 45 degrees.

    Each face is a ``cells x cells`` grid. The bevel removes ``bevel_cells``
    grid steps from both adjacent faces, so both bevel creases run along grid
    lines. Returns ``(mesh, labels)`` where ``labels`` maps ``"ridge"`` to the
    vertices on the two bevel creases and ``"flat"`` to vertices strictly
    inside a planar face (not on any crease or cube edge).
    """
    if bevel_cells < 1 or bevel_cells >= cells // 2 + 1:
        raise ConfigError("bevel_cells out of range")
    g = np.linspace(-1.0, 1.0, cells + 1)
    verts, faces, index = [], [], {}

    def vid(p):
        key = tuple(np.round(p, 12))
        if key not in index:
            index[key] = len(verts)
            verts.append(np.array(p, dtype=np.float64))
        return index[key]

    for axis in range(3):
        for sgn in (-1.0, 1.0):
            u_ax, v_ax = [a for a in range(3) if a != axis]
            for i in range(cells):
                for j in range(cells):
                    quad = []
                    for di, dj in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        p = np.zeros(3)
                        p[axis] = sgn
                        p[u_ax] = g[i + di]
                        p[v_ax] = g[j + dj]
                        quad.append(vid(p))
                    a, b, c, d = quad
                    # orient outward: (u, v, axis) right-handed for axis 0 and 2
                    flip = (sgn < 0) != (axis == 1)
                    if flip:
                        faces += [(a, c, b), (a, d, c)]
                    else:
                        faces += [(a, b, c), (a, c, d)]
    v = np.array(verts)
    limit = 2.0 - 2.0 * bevel_cells / cells
    excess = v[:, 0] + v[:, 1] - limit
    cut = excess > 1e-12
    v[cut, 0] -= excess[cut] / 2.0
    v[cut, 1] -= excess[cut] / 2.0

    # weld vertices that collapsed onto each other, then drop collapsed faces
    keys = np.round(v, 10)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    v = v[first]
    f = inverse[np.array(faces)]
    mesh = drop_degenerate_faces(TriangleMesh(v * half_size, f))
    used = np.unique(mesh.faces)
    remap = np.full(len(v), -1)
    remap[used] = np.arange(len(used))
    mesh = TriangleMesh(mesh.vertices[used], remap[mesh.faces])
    v = mesh.vertices / half_size

    on_bevel_plane = np.abs(v[:, 0] + v[:, 1] - limit) < 1e-9
    crease_a = on_bevel_plane & (np.abs(v[:, 0] - 1.0) < 1e-9)
    crease_b = on_bevel_plane & (np.abs(v[:, 1] - 1.0) < 1e-9)
    ridge = np.flatnonzero(crease_a | crease_b)
    on_box = np.abs(np.abs(v) - 1.0) < 1e-9
    n_box = on_box.sum(axis=1)
    flat = np.flatnonzero(
        ((n_box == 1) & ~on_bevel_plane) | ((n_box == 0) & on_bevel_plane)
    )
    return mesh, {"ridge": ridge, "flat": flat}
