"""Minimal PLY and OBJ readers/writers for point sets and triangle meshes."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import PlyParseError

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


@dataclass
class _Element:
    name: str
    count: int
    props: list  # (name, dtype-str) or (name, ("list", count_dtype, item_dtype))

    @property
    def has_list(self) -> bool:
        return any(isinstance(t, tuple) for _, t in self.props)


def _parse_header(raw: bytes):
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise PlyParseError("header: missing 'ply' magic or 'end_header'")
    nl = raw.find(b"\n", end)
    if nl < 0:
        raise PlyParseError("header: unterminated 'end_header' line")
    lines = raw[:end].decode("ascii", errors="replace").splitlines()
    fmt, comments, elements = None, [], []
    for line in lines[1:]:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] in ("comment", "obj_info"):
            comments.append(" ".join(tok[1:]))
        elif tok[0] == "element":
            elements.append(_Element(tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise PlyParseError("header: property before any element")
            try:
                if tok[1] == "list":
                    spec = ("list", _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]])
                    elements[-1].props.append((tok[4], spec))
                else:
                    elements[-1].props.append((tok[2], _PLY_TYPES[tok[1]]))
            except KeyError as exc:
                raise PlyParseError(f"header: unknown property type {exc.args[0]!r}") from None
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise PlyParseError(f"header: unsupported format {fmt!r}")
    return fmt, comments, elements, nl + 1


def read_ply(path, stop_after: str | None = None) -> tuple[dict[str, dict[str, np.ndarray]], list[str]]:
    """Parse a PLY file into ``{element: {property: column}}``.

    List properties come back as an object array of integer arrays. Reading
    stops after ``stop_after`` if given. Raises :class:`PlyParseError`
    naming the element on truncated or malformed bodies.
    """
    raw = Path(path).read_bytes()
    fmt, comments, elements, offset = _parse_header(raw)
    out: dict[str, dict[str, np.ndarray]] = {}
    if fmt == "ascii":
        tokens = raw[offset:].split()
        pos = 0
        for el in elements:
            cols: dict[str, list] = {n: [] for n, _ in el.props}
            try:
                for _ in range(el.count):
                    for n, t in el.props:
                        if isinstance(t, tuple):
                            cnt = int(tokens[pos])
                            cols[n].append(np.array([int(v) for v in tokens[pos + 1 : pos + 1 + cnt]]))
                            if len(cols[n][-1]) != cnt:
                                raise IndexError
                            pos += 1 + cnt
                        else:
                            cols[n].append(float(tokens[pos]))
                            pos += 1
            except (IndexError, ValueError):
                raise PlyParseError(f"element {el.name!r}: truncated or malformed ascii body") from None
            out[el.name] = {n: _finish(v, t) for (n, t), v in zip(el.props, cols.values())}
            if el.name == stop_after:
                break
        return out, comments

    endian = "<" if fmt == "binary_little_endian" else ">"
    for el in elements:
        if el.has_list:
            cols, offset = _read_list_element(raw, offset, el, endian)
        else:
            dtype = np.dtype([(n, endian + t) for n, t in el.props])
            nbytes = dtype.itemsize * el.count
            if len(raw) - offset < nbytes:
                raise PlyParseError(
                    f"element {el.name!r}: expected {el.count} rows ({nbytes} bytes), "
                    f"only {len(raw) - offset} bytes remain"
                )
            table = np.frombuffer(raw, dtype=dtype, count=el.count, offset=offset)
            cols = {n: table[n].astype(table[n].dtype.newbyteorder("=")) for n, _ in el.props}
            offset += nbytes
        out[el.name] = cols
        if el.name == stop_after:
            break
    return out, comments


def _finish(values: list, t):
    if isinstance(t, tuple):
        arr = np.empty(len(values), dtype=object)
        arr[:] = values
        return arr
    return np.asarray(values, dtype=np.dtype(t))


def _read_list_element(raw: bytes, offset: int, el: _Element, endian: str):
    cols: dict[str, list] = {n: [] for n, _ in el.props}
    try:
        for _ in range(el.count):
            for n, t in el.props:
                if isinstance(t, tuple):
                    cnt_t, item_t = np.dtype(endian + t[1]), np.dtype(endian + t[2])
                    cnt = int(np.frombuffer(raw, cnt_t, 1, offset)[0])
                    offset += cnt_t.itemsize
                    cols[n].append(np.frombuffer(raw, item_t, cnt, offset).astype(np.int64))
                    offset += cnt * item_t.itemsize
                else:
                    dt = np.dtype(endian + t)
                    cols[n].append(np.frombuffer(raw, dt, 1, offset)[0])
                    offset += dt.itemsize
    except ValueError:
        raise PlyParseError(f"element {el.name!r}: file truncated") from None
    return {n: _finish(v, t) for (n, t), v in zip(el.props, cols.values())}, offset


def read_ply_vertices(path) -> tuple[dict[str, np.ndarray], list[str]]:
    elements, comments = read_ply(path, stop_after="vertex")
    if "vertex" not in elements:
        raise PlyParseError("no 'vertex' element in file")
    return elements["vertex"], comments


def vertex_colors(cols: dict[str, np.ndarray]) -> np.ndarray | None:
    """RGB in [0, 1] from red/green/blue vertex properties, if present."""
    names = ("red", "green", "blue")
    if not all(n in cols for n in names):
        return None
    rgb = np.stack([cols[n] for n in names], axis=1).astype(np.float64)
    return rgb / 255.0 if rgb.max(initial=0) > 1.0 else rgb


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int
    colors: np.ndarray | None = None  # (V, 3) in [0, 1]


def _triangulate(polys) -> np.ndarray:
    tris = []
    for poly in polys:
        poly = np.asarray(poly, dtype=np.int64)
        for k in range(1, len(poly) - 1):
            tris.append((poly[0], poly[k], poly[k + 1]))
    return np.asarray(tris, dtype=np.int64).reshape(-1, 3)


def read_obj(path) -> Mesh:
    verts, colors, faces = [], [], []
    for line in Path(path).read_text().splitlines():
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "v":
            verts.append([float(v) for v in tok[1:4]])
            if len(tok) >= 7:
                colors.append([float(v) for v in tok[4:7]])
        elif tok[0] == "f":
            idx = [int(v.split("/")[0]) for v in tok[1:]]
            n = len(verts)
            faces.append([i - 1 if i > 0 else n + i for i in idx])
    v = np.asarray(verts, dtype=np.float64).reshape(-1, 3)
    c = np.asarray(colors, dtype=np.float64) if len(colors) == len(verts) and colors else None
    return Mesh(v, _triangulate(faces), c)


def read_mesh(path) -> Mesh:
    """Load an OBJ or PLY point set / mesh (faces optional)."""
    path = Path(path)
    if path.suffix.lower() == ".obj":
        return read_obj(path)
    elements, _ = read_ply(path)
    if "vertex" not in elements:
        raise PlyParseError("no 'vertex' element in file")
    vcols = elements["vertex"]
    for axis in "xyz":
        if axis not in vcols:
            raise PlyParseError(f"element 'vertex': missing property {axis!r}")
    verts = np.stack([vcols[a] for a in "xyz"], axis=1).astype(np.float64)
    faces = np.zeros((0, 3), dtype=np.int64)
    if "face" in elements:
        key = next((k for k in ("vertex_indices", "vertex_index") if k in elements["face"]), None)
        if key is not None:
            faces = _triangulate(elements["face"][key])
    return Mesh(verts, faces, vertex_colors(vcols))


def write_obj(path, vertices: np.ndarray, faces: np.ndarray) -> None:
    lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in np.asarray(vertices)]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces, dtype=np.int64)]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def write_point_ply(path, points: np.ndarray, colors: np.ndarray | None = None) -> None:
    """Binary PLY with float xyz and optional uchar rgb (colors in [0, 1])."""
    points = np.asarray(points, dtype=np.float64)
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    table = np.zeros(len(points), dtype=fields)
    for i, a in enumerate("xyz"):
        table[a] = points[:, i]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(points)}"]
    header += ["property float x", "property float y", "property float z"]
    if colors is not None:
        rgb = np.clip(np.round(np.asarray(colors) * 255.0), 0, 255).astype(np.uint8)
        for i, a in enumerate(("red", "green", "blue")):
            table[a] = rgb[:, i]
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(table.tobytes())
