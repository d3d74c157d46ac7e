"""Point cloud I/O and grid quantization.

Points are translated by an offset, divided by a quantization step ``qs`` and
rounded to integer cells; reconstruction maps a cell index back with
``coords * qs + offset``.  The per-axis reconstruction error of every input
point is bounded by ``qs / 2``.
"""
from __future__ import annotations

import os
import re
from dataclasses import dataclass

import numpy as np

MAX_DEPTH = 16


class PointCloudParseError(ValueError):
    """A point cloud file could not be parsed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class EmptyCloudError(ValueError):
    pass


class DegenerateExtentError(ValueError):
    pass


@dataclass
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (n, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        self.points = pts

    @property
    def count(self) -> int:
        return len(self.points)

    def __len__(self):
        return len(self.points)


@dataclass
class QuantizedCloud:
    """Integer grid cells plus the parameters that map them back to space."""

    coords: np.ndarray
    offset: np.ndarray
    qs: float
    depth: int

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.int64)
        if coords.size == 0:
            coords = coords.reshape(0, 3)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise ValueError(f"coords must have shape (n, 3), got {coords.shape}")
        if not 1 <= int(self.depth) <= MAX_DEPTH:
            raise ValueError(f"depth must be in [1, {MAX_DEPTH}], got {self.depth}")
        if not (self.qs > 0 and np.isfinite(self.qs)):
            raise ValueError(f"qs must be a positive finite number, got {self.qs}")
        if len(coords) and (coords.min() < 0 or coords.max() > (1 << int(self.depth)) - 1):
            raise ValueError(f"coords outside [0, 2^{self.depth} - 1]")
        self.coords = coords
        self.offset = np.broadcast_to(np.asarray(self.offset, dtype=np.float64), (3,)).copy()
        self.qs = float(self.qs)
        self.depth = int(self.depth)

    @property
    def count(self) -> int:
        return len(self.coords)

    def same_cells(self, other: "QuantizedCloud") -> bool:
        """Set equality of the occupied cells (order-insensitive)."""
        a = np.unique(self.coords, axis=0)
        b = np.unique(other.coords, axis=0)
        return a.shape == b.shape and bool(np.all(a == b))


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

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


def _infer_format(path: str) -> str:
    ext = os.path.splitext(path)[1].lower()
    if ext == ".ply":
        return "ply"
    if ext == ".bin":
        return "kitti-bin"
    if ext in (".xyz", ".txt", ".pts"):
        return "xyz"
    raise ValueError(f"cannot infer point cloud format from extension {ext!r}")


def load_point_cloud(path, format: str | None = None) -> PointCloud:
    """Read a cloud from ``ply``, ``xyz`` or ``kitti-bin``.

    Only geometry is kept; colors, normals and intensities are dropped.
    """
    path = os.fspath(path)
    fmt = format or _infer_format(path)
    with open(path, "rb") as f:
        data = f.read()
    if fmt == "ply":
        pts = _parse_ply(data)
    elif fmt == "xyz":
        pts = _parse_xyz(data)
    elif fmt in ("kitti-bin", "kitti", "bin"):
        pts = _parse_kitti(data)
    else:
        raise ValueError(f"unknown point cloud format {fmt!r}")
    if len(pts) == 0:
        raise EmptyCloudError(f"{path}: point cloud is empty")
    bad = ~np.all(np.isfinite(pts), axis=1)
    if bad.any():
        raise PointCloudParseError("non-finite coordinate in record %d" % int(np.argmax(bad)), 0)
    return PointCloud(pts)


def _parse_kitti(data: bytes) -> np.ndarray:
    if len(data) % 16:
        raise PointCloudParseError(
            "kitti-bin size is not a multiple of 16 bytes", len(data) - len(data) % 16)
    rec = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
    return rec[:, :3].astype(np.float64)


def _parse_xyz(data: bytes) -> np.ndarray:
    rows = []
    offset = 0
    for line in data.splitlines(keepends=True):
        text = line.strip()
        if text and not text.startswith(b"#"):
            parts = text.split()
            if len(parts) < 3:
                raise PointCloudParseError("expected at least 3 columns", offset)
            try:
                rows.append((float(parts[0]), float(parts[1]), float(parts[2])))
            except ValueError:
                raise PointCloudParseError("non-numeric coordinate", offset) from None
        offset += len(line)
    return np.asarray(rows, dtype=np.float64).reshape(-1, 3)


def _parse_ply(data: bytes) -> np.ndarray:
    m = re.search(rb"end_header\r?\n", data)
    if not data.startswith(b"ply") or m is None:
        raise PointCloudParseError("missing ply magic or end_header", 0)
    header = data[: m.start()].decode("ascii", errors="replace").splitlines()
    body_start = m.end()

    fmt = None
    elements = []  # [name, count, [(prop_name, dtype or ('list', cnt, item))]]
    line_off = 0
    for line in header:
        tok = line.split()
        if not tok or tok[0] in ("ply", "comment", "obj_info"):
            pass
        elif tok[0] == "format":
            fmt = tok[1] if len(tok) > 1 else None
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise PointCloudParseError("malformed element line", line_off)
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            if not elements:
                raise PointCloudParseError("property before element", line_off)
            if tok[1] == "list":
                if len(tok) != 5 or tok[2] not in _PLY_TYPES or tok[3] not in _PLY_TYPES:
                    raise PointCloudParseError("malformed list property", line_off)
                elements[-1][2].append((tok[4], ("list", _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]])))
            else:
                if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                    raise PointCloudParseError(f"unsupported property type {tok[1:]}", line_off)
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
        else:
            raise PointCloudParseError(f"unexpected header keyword {tok[0]!r}", line_off)
        line_off += len(line) + 1

    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise PointCloudParseError(f"unsupported ply format {fmt!r}", 0)
    names = [e[0] for e in elements]
    if "vertex" not in names:
        raise PointCloudParseError("no vertex element", 0)
    vidx = names.index("vertex")
    vprops = elements[vidx][2]
    pnames = [p[0] for p in vprops]
    for axis in "xyz":
        if axis not in pnames:
            raise PointCloudParseError(f"vertex element has no {axis!r} property", 0)
    if any(isinstance(p[1], tuple) for p in vprops):
        raise PointCloudParseError("list properties on vertices are not supported", 0)
    count = elements[vidx][1]

    if fmt == "ascii":
        return _parse_ply_ascii(data, body_start, elements, vidx, pnames, count)

    endian = "<" if fmt == "binary_little_endian" else ">"
    offset = body_start
    for e in elements[:vidx]:
        if any(isinstance(p[1], tuple) for p in e[2]):
            raise PointCloudParseError(f"cannot skip list element {e[0]!r} before vertices", offset)
        offset += e[1] * np.dtype([(p[0], endian + p[1]) for p in e[2]]).itemsize
    dt = np.dtype([(p[0], endian + p[1]) for p in vprops])
    need = offset + count * dt.itemsize
    if len(data) < need:
        full = max(0, (len(data) - offset) // dt.itemsize)
        raise PointCloudParseError(
            f"truncated vertex data: {count} vertices declared, {full} present",
            offset + full * dt.itemsize)
    rec = np.frombuffer(data, dtype=dt, count=count, offset=offset)
    return np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)


def _parse_ply_ascii(data, body_start, elements, vidx, pnames, count):
    lines = data[body_start:].splitlines(keepends=True)
    offset = body_start
    li = 0
    for e in elements[:vidx]:
        for _ in range(e[1]):
            if li >= len(lines):
                raise PointCloudParseError("truncated ascii element data", offset)
            offset += len(lines[li])
            li += 1
    ix, iy, iz = (pnames.index(a) for a in "xyz")
    pts = np.empty((count, 3), dtype=np.float64)
    for r in range(count):
        if li >= len(lines):
            raise PointCloudParseError(f"truncated vertex data: {count} declared, {r} present", offset)
        parts = lines[li].split()
        if len(parts) < len(pnames):
            raise PointCloudParseError("too few values in vertex line", offset)
        try:
            pts[r] = (float(parts[ix]), float(parts[iy]), float(parts[iz]))
        except ValueError:
            raise PointCloudParseError("non-numeric vertex value", offset) from None
        offset += len(lines[li])
        li += 1
    return pts


def save_point_cloud(path, pc, format: str | None = None, binary: bool = True) -> None:
    """Write ``pc`` (PointCloud or (n, 3) array) as ply, xyz or kitti-bin."""
    path = os.fspath(path)
    pts = pc.points if isinstance(pc, PointCloud) else np.asarray(pc, dtype=np.float64)
    fmt = format or _infer_format(path)
    if fmt == "xyz":
        np.savetxt(path, pts, fmt="%.17g")
    elif fmt in ("kitti-bin", "kitti", "bin"):
        rec = np.zeros((len(pts), 4), dtype="<f4")
        rec[:, :3] = pts
        with open(path, "wb") as f:
            f.write(rec.tobytes())
    elif fmt == "ply":
        kind = "binary_little_endian" if binary else "ascii"
        header = (
            f"ply\nformat {kind} 1.0\nelement vertex {len(pts)}\n"
            "property double x\nproperty double y\nproperty double z\nend_header\n"
        )
        with open(path, "wb") as f:
            f.write(header.encode("ascii"))
            if binary:
                f.write(np.ascontiguousarray(pts, dtype="<f8").tobytes())
            else:
                for p in pts:
                    f.write(("%.17g %.17g %.17g\n" % tuple(p)).encode("ascii"))
    else:
        raise ValueError(f"unknown point cloud format {fmt!r}")


# ---------------------------------------------------------------------------
# quantization
# ---------------------------------------------------------------------------

def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def grid_cells(points: np.ndarray, offset, qs: float) -> np.ndarray:
    """Per-point integer cells, before duplicate merging."""
    return round_half_away((np.asarray(points, dtype=np.float64) - offset) / qs).astype(np.int64)


def quantize(pc: PointCloud, depth: int, qs_override: float | None = None,
             offset_override=None) -> QuantizedCloud:
    """Quantize ``pc`` onto a ``2^depth`` grid.

    By default the offset is the per-axis minimum and ``qs`` is the smallest
    step allowed for ``depth``, ``(max(P) - min(P)) / (2^depth - 1)`` with
    max/min taken over all coordinate components.  Cells hit by several
    points are merged.
    """
    if not isinstance(pc, PointCloud):
        pc = PointCloud(pc)
    if pc.count == 0:
        raise EmptyCloudError("cannot quantize an empty point cloud")
    depth = int(depth)
    if not 1 <= depth <= MAX_DEPTH:
        raise ValueError(f"depth must be in [1, {MAX_DEPTH}], got {depth}")
    pts = pc.points
    cells = (1 << depth) - 1
    if offset_override is None:
        offset = pts.min(axis=0)
    else:
        offset = np.broadcast_to(np.asarray(offset_override, dtype=np.float64), (3,)).copy()
    extent = float(pts.max() - pts.min())
    min_qs = extent / cells
    if qs_override is None:
        if extent == 0.0:
            raise DegenerateExtentError(
                "cloud has zero extent so the minimal qs is 0; pass qs_override")
        qs = min_qs
    else:
        qs = float(qs_override)
        if not (qs > 0 and np.isfinite(qs)):
            raise ValueError(f"qs_override must be positive, got {qs_override}")
        if qs < min_qs * (1 - 1e-12):
            raise ValueError(
                f"qs_override {qs} below the minimum {min_qs} for depth {depth}")
    coords = grid_cells(pts, offset, qs)
    if coords.min() < 0 or coords.max() > cells:
        raise ValueError(
            f"quantized coordinates fall outside [0, {cells}]; check offset/qs")
    coords = np.unique(coords, axis=0)
    return QuantizedCloud(coords, offset, qs, depth)


def dequantize(qc: QuantizedCloud) -> PointCloud:
    return PointCloud(qc.coords.astype(np.float64) * qc.qs + qc.offset)
