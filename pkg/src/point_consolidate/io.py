"""File formats (PLY, XYZ, OBJ), run configuration, and provenance sidecars.

PLY support covers ASCII and binary little-endian; big-endian files are
rejected. Binary round trips are bit exact; ASCII uses shortest round-trip
formatting. Label exports color positive points red and negative points blue.
"""
from __future__ import annotations

import json
import struct
import sys
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .cloud import PointCloud
from .metrics import TriangleMesh

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}

POSITIVE_COLOR = (255, 0, 0)
NEGATIVE_COLOR = (0, 0, 255)


class _PlyElement:
    def __init__(self, name: str, count: int):
        self.name = name
        self.count = count
        self.properties: list[tuple] = []  # ("scalar", np_type, name) or ("list", count_t, item_t, name)

    @property
    def has_list(self) -> bool:
        return any(p[0] == "list" for p in self.properties)

    def row_dtype(self) -> np.dtype:
        return np.dtype([(p[2], "<" + p[1]) for p in self.properties])


def _parse_ply_header(fh) -> tuple[str, list[_PlyElement], int]:
    """Returns (format, elements, header_byte_length)."""
    line = fh.readline()
    if line.strip() != b"ply":
        raise ValueError("not a PLY file: missing 'ply' magic on line 1")
    fmt = None
    elements: list[_PlyElement] = []
    lineno = 1
    while True:
        raw = fh.readline()
        if not raw:
            raise ValueError(f"PLY header ended prematurely at line {lineno}")
        lineno += 1
        tokens = raw.decode("ascii", errors="replace").split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            if tokens[1] == "binary_big_endian":
                raise ValueError("big-endian PLY is not supported")
            if tokens[1] not in ("ascii", "binary_little_endian"):
                raise ValueError(f"unknown PLY format '{tokens[1]}' (line {lineno})")
            fmt = tokens[1]
        elif tokens[0] == "element":
            elements.append(_PlyElement(tokens[1], int(tokens[2])))
        elif tokens[0] == "property":
            if not elements:
                raise ValueError(f"property before any element (line {lineno})")
            if tokens[1] == "list":
                elements[-1].properties.append(
                    ("list", _PLY_TYPES[tokens[2]], _PLY_TYPES[tokens[3]], tokens[4])
                )
            else:
                elements[-1].properties.append(
                    ("scalar", _PLY_TYPES[tokens[1]], tokens[2])
                )
        elif tokens[0] == "end_header":
            break
        else:
            raise ValueError(f"unrecognized PLY header line {lineno}: {tokens[0]}")
    if fmt is None:
        raise ValueError("PLY header missing format line")
    return fmt, elements, fh.tell()


def _read_binary_element(fh, element: _PlyElement):
    """Returns a structured array for scalar elements, or a list of
    (scalars..., lists...) rows when list properties are present."""
    if not element.has_list:
        dtype = element.row_dtype()
        buf = fh.read(dtype.itemsize * element.count)
        if len(buf) != dtype.itemsize * element.count:
            raise ValueError(
                f"element '{element.name}' declares {element.count} rows but "
                f"the file ends after byte {fh.tell()}"
            )
        return np.frombuffer(buf, dtype=dtype)
    rows = []
    for _ in range(element.count):
        row = []
        for prop in element.properties:
            if prop[0] == "scalar":
                size = np.dtype(prop[1]).itemsize
                raw = fh.read(size)
                if len(raw) != size:
                    raise ValueError(f"file truncated inside element '{element.name}'")
                row.append(np.frombuffer(raw, dtype="<" + prop[1])[0])
            else:
                csize = np.dtype(prop[1]).itemsize
                raw = fh.read(csize)
                if len(raw) != csize:
                    raise ValueError(f"file truncated inside element '{element.name}'")
                count = int(np.frombuffer(raw, dtype="<" + prop[1])[0])
                isize = np.dtype(prop[2]).itemsize
                raw = fh.read(isize * count)
                if len(raw) != isize * count:
                    raise ValueError(f"file truncated inside element '{element.name}'")
                row.append(np.frombuffer(raw, dtype="<" + prop[2]))
        rows.append(row)
    return rows


def _read_ascii_element(fh, element: _PlyElement, lineno_start: int):
    rows = []
    lineno = lineno_start
    for _ in range(element.count):
        raw = fh.readline()
        lineno += 1
        if not raw:
            raise ValueError(
                f"element '{element.name}' declares {element.count} rows but "
                f"the file ends at line {lineno}"
            )
        tokens = raw.split()
        row = []
        pos = 0
        for prop in element.properties:
            if prop[0] == "scalar":
                row.append(float(tokens[pos]))
                pos += 1
            else:
                count = int(tokens[pos])
                pos += 1
                row.append(np.array([float(t) for t in tokens[pos : pos + count]]))
                pos += count
        rows.append(row)
    return rows, lineno


def _read_ply(path) -> tuple[str, dict]:
    """Parse all elements of a PLY file into {name: rows-or-structured-array}."""
    with open(path, "rb") as fh:
        fmt, elements, _ = _parse_ply_header(fh)
        data = {}
        lineno = 0
        for element in elements:
            if fmt == "binary_little_endian":
                data[element.name] = _read_binary_element(fh, element)
            else:
                data[element.name], lineno = _read_ascii_element(fh, element, lineno)
        return fmt, {e.name: (e, data[e.name]) for e in elements}


def _cloud_from_vertex_element(element: _PlyElement, rows) -> PointCloud:
    names = [p[-1] for p in element.properties]
    for axis in "xyz":
        if axis not in names:
            raise ValueError(f"PLY vertex element missing property '{axis}'")
    if isinstance(rows, np.ndarray):
        pts = np.stack([rows[a].astype(np.float64) for a in "xyz"], axis=1)
        has_normals = all(f"n{a}" in names for a in "xyz")
        normals = (
            np.stack([rows[f"n{a}"].astype(np.float64) for a in "xyz"], axis=1)
            if has_normals
            else None
        )
    else:
        scalar_names = [p[-1] for p in element.properties if p[0] == "scalar"]
        cols = {n: i for i, n in enumerate(scalar_names)}
        scalars = np.array(
            [[row[i] for i, p in enumerate(element.properties) if p[0] == "scalar"]
             for row in rows],
            dtype=np.float64,
        )
        pts = scalars[:, [cols["x"], cols["y"], cols["z"]]]
        has_normals = all(f"n{a}" in cols for a in "xyz")
        normals = (
            scalars[:, [cols["nx"], cols["ny"], cols["nz"]]] if has_normals else None
        )
    return PointCloud(pts, normals)


def read_point_cloud(path) -> PointCloud:
    """Load a cloud from PLY (ASCII or binary LE) or whitespace XYZ text."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(3)
    if magic == b"ply":
        _, elements = _read_ply(path)
        if "vertex" not in elements:
            raise ValueError("PLY file has no vertex element")
        return _cloud_from_vertex_element(*elements["vertex"])
    return _read_xyz(path)


def _read_xyz(path) -> PointCloud:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) not in (3, 6):
                raise ValueError(
                    f"{path}: line {lineno} has {len(tokens)} columns, expected 3 or 6"
                )
            try:
                rows.append([float(t) for t in tokens])
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
    if not rows:
        raise ValueError(f"{path}: no points found")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ValueError(f"{path}: inconsistent column counts {sorted(widths)}")
    arr = np.asarray(rows, dtype=np.float64)
    if arr.shape[1] == 6:
        return PointCloud(arr[:, :3], arr[:, 3:])
    return PointCloud(arr)


def _format_g17(value: float) -> str:
    return format(value, ".17g")


def write_point_cloud(
    cloud: PointCloud, path, fmt: str = "binary", colors: np.ndarray | None = None
) -> None:
    """Write PLY ('binary' or 'ascii') or XYZ text ('xyz').

    `colors` is an optional (n, 3) uint8 array; XYZ output ignores colors.
    """
    path = Path(path)
    if colors is not None:
        colors = np.asarray(colors, dtype=np.uint8)
        if colors.shape != (cloud.n, 3):
            raise ValueError("colors must be (n, 3) uint8")
    if fmt == "xyz":
        with open(path, "w") as fh:
            for i in range(cloud.n):
                row = [_format_g17(v) for v in cloud.points[i]]
                if cloud.normals is not None:
                    row += [_format_g17(v) for v in cloud.normals[i]]
                fh.write(" ".join(row) + "\n")
        return
    if fmt not in ("binary", "ascii"):
        raise ValueError(f"unknown point cloud format '{fmt}'")

    props = [("x", "f8"), ("y", "f8"), ("z", "f8")]
    if cloud.normals is not None:
        props += [("nx", "f8"), ("ny", "f8"), ("nz", "f8")]
    if colors is not None:
        props += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    header = ["ply"]
    header.append(
        "format binary_little_endian 1.0" if fmt == "binary" else "format ascii 1.0"
    )
    header.append(f"element vertex {cloud.n}")
    type_names = {"f8": "double", "u1": "uchar"}
    header += [f"property {type_names[t]} {n}" for n, t in props]
    header.append("end_header")

    record = np.empty(cloud.n, dtype=np.dtype([(n, "<" + t) for n, t in props]))
    record["x"], record["y"], record["z"] = cloud.points.T
    if cloud.normals is not None:
        record["nx"], record["ny"], record["nz"] = cloud.normals.T
    if colors is not None:
        record["red"], record["green"], record["blue"] = colors.T

    if fmt == "binary":
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            fh.write(record.tobytes())
    else:
        with open(path, "w") as fh:
            fh.write("\n".join(header) + "\n")
            for row in record:
                cells = []
                for name, t in props:
                    cells.append(
                        str(int(row[name])) if t == "u1" else _format_g17(float(row[name]))
                    )
                fh.write(" ".join(cells) + "\n")


def label_colors(positive: np.ndarray) -> np.ndarray:
    """Red for positive points, blue for negative."""
    colors = np.empty((positive.size, 3), dtype=np.uint8)
    colors[positive] = POSITIVE_COLOR
    colors[~positive] = NEGATIVE_COLOR
    return colors


def _fan_triangulate(indices: list[int], context: str) -> list[tuple[int, int, int]]:
    if len(indices) < 3:
        raise ValueError(f"{context}: face needs at least 3 vertices")
    return [(indices[0], indices[i], indices[i + 1]) for i in range(1, len(indices) - 1)]


def read_mesh(path) -> TriangleMesh:
    """Load a triangle mesh from OBJ (v/f, polygons fan-triangulated) or PLY."""
    path = Path(path)
    if path.suffix.lower() == ".obj":
        return _read_obj(path)
    _, elements = _read_ply(path)
    if "vertex" not in elements or "face" not in elements:
        raise ValueError("PLY mesh needs vertex and face elements")
    cloud = _cloud_from_vertex_element(*elements["vertex"])
    face_element, rows = elements["face"]
    list_pos = [i for i, p in enumerate(face_element.properties) if p[0] == "list"]
    if not list_pos:
        raise ValueError("PLY face element has no vertex index list")
    faces = []
    for r, row in enumerate(rows):
        idx = [int(v) for v in row[list_pos[0]]]
        faces.extend(_fan_triangulate(idx, f"face {r}"))
    return TriangleMesh(cloud.points, np.asarray(faces, dtype=np.int64))


def _read_obj(path) -> TriangleMesh:
    vertices: list[list[float]] = []
    faces: list[tuple[int, int, int]] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens or tokens[0].startswith("#"):
                continue
            if tokens[0] == "v":
                if len(tokens) < 4:
                    raise ValueError(f"{path}: line {lineno}: malformed vertex")
                vertices.append([float(t) for t in tokens[1:4]])
            elif tokens[0] == "f":
                idx = []
                for tok in tokens[1:]:
                    raw = tok.split("/")[0]
                    value = int(raw)
                    if value <= 0:
                        raise ValueError(
                            f"{path}: line {lineno}: unsupported vertex index {value}"
                        )
                    idx.append(value - 1)
                faces.extend(_fan_triangulate(idx, f"{path}: line {lineno}"))
    if not vertices or not faces:
        raise ValueError(f"{path}: OBJ file contains no usable mesh")
    verts = np.asarray(vertices, dtype=np.float64)
    face_arr = np.asarray(faces, dtype=np.int64)
    if face_arr.max() >= len(verts):
        raise ValueError(
            f"{path}: face references vertex {face_arr.max() + 1} but only "
            f"{len(verts)} vertices are defined"
        )
    return TriangleMesh(verts, face_arr)


def write_mesh(mesh: TriangleMesh, path) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {_format_g17(v[0])} {_format_g17(v[1])} {_format_g17(v[2])}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


@dataclass
class RunConfig:
    """Full pipeline configuration; flags override config-file values."""

    criterion: str | None = None  # sharp | sparse | uniform; None = auto
    p_target: float = 0.85
    p_source: float = 0.10
    subset_fraction: float = 0.08
    iterations: int = 10_000
    learning_rate: float = 1e-4
    out_points: int = 100_000
    tau: float | None = None  # None = 1% of the GT bbox diagonal
    curvature_k: int = 16
    density_k: int = 8
    normals_k: int = 16
    low_res_threshold: int = 20_000
    seed: int = 0
    input: str | None = None
    output: str | None = None
    checkpoint: str | None = None

    def __post_init__(self):
        if self.criterion not in (None, "sharp", "sparse", "uniform"):
            raise ValueError(f"unknown criterion '{self.criterion}'")
        if self.tau is not None and self.tau <= 0:
            raise ValueError("tau must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "RunConfig":
        unknown = set(payload) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**payload)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        if path.suffix.lower() == ".toml":
            with open(path, "rb") as fh:
                return cls.from_dict(tomllib.load(fh))
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def merged_with_flags(self, **flags) -> "RunConfig":
        """New config with every non-None flag value taking precedence."""
        updates = {k: v for k, v in flags.items() if v is not None}
        return replace(self, **updates)

    def resolve_criterion(self, n_points: int) -> str:
        """Explicit criterion, or the low-resolution default: uniform below
        the threshold, sharp otherwise."""
        if self.criterion is not None:
            return self.criterion
        return "uniform" if n_points < self.low_res_threshold else "sharp"


def write_provenance(output_path, command: str, config: dict, extra: dict | None = None) -> None:
    """Drop a JSON sidecar next to an output file recording how it was made."""
    from . import __version__

    payload = {
        "command": command,
        "config": config,
        "version": __version__,
    }
    if extra:
        payload.update(extra)
    sidecar = Path(str(output_path) + ".provenance.json")
    with open(sidecar, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
