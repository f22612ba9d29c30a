"""Point cloud container plus PLY/CSV readers and writers.

Coordinates are kept as float64 everywhere. Colours are normalised to [0, 1]
on load; 8-bit colour properties are divided by 255.
"""
from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import IoError, ParseError, ValidationError

FORMATS = ("ply_binary", "ply_ascii", "csv")

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

_COLOR_NAMES = (("red", "green", "blue"), ("r", "g", "b"))


@dataclass
class PointCloud:
    """An ordered set of scanned points.

    ``rows``/``cols`` are the scanner's scan-direction indices and are either
    present for every point or absent altogether.
    """

    xyz: np.ndarray
    rgb: np.ndarray
    rows: Optional[np.ndarray] = None
    cols: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    class_count: int = 0
    source_id: str = ""
    extra: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.xyz = np.ascontiguousarray(self.xyz, dtype=np.float64)
        if self.xyz.ndim != 2 or self.xyz.shape[1] != 3:
            raise ValidationError(f"xyz must be (n, 3), got {self.xyz.shape}")
        n = self.xyz.shape[0]
        self.rgb = np.ascontiguousarray(self.rgb, dtype=np.float64)
        if self.rgb.shape != (n, 3):
            raise ValidationError(f"rgb must be ({n}, 3), got {self.rgb.shape}")
        if (self.rows is None) != (self.cols is None):
            raise ValidationError("scan_row and scan_col must be present together")
        if self.rows is not None:
            self.rows = _as_index_array(self.rows, n, "scan_row")
            self.cols = _as_index_array(self.cols, n, "scan_col")
        if self.labels is not None:
            self.labels = _as_index_array(self.labels, n, "label")
            if n and self.class_count <= int(self.labels.max()):
                raise ValidationError(
                    f"label {int(self.labels.max())} outside [0, {self.class_count})")
        self.validate()

    @property
    def n(self) -> int:
        return self.xyz.shape[0]

    @property
    def has_metadata(self) -> bool:
        return self.rows is not None

    def validate(self) -> None:
        if not np.all(np.isfinite(self.xyz)):
            raise ValidationError("non-finite coordinate")
        if not np.all(np.isfinite(self.rgb)) or self.rgb.min(initial=0.0) < 0 or self.rgb.max(initial=0.0) > 1:
            raise ValidationError("colour channel outside [0, 1]")

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx, dtype=np.int64)
        return PointCloud(
            xyz=self.xyz[idx],
            rgb=self.rgb[idx],
            rows=None if self.rows is None else self.rows[idx],
            cols=None if self.cols is None else self.cols[idx],
            labels=None if self.labels is None else self.labels[idx],
            class_count=self.class_count,
            source_id=self.source_id,
        )

    def same_as(self, other: "PointCloud") -> bool:
        """Bit-exact equality of every field."""
        def eq(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and np.array_equal(a, b)

        return (
            eq(self.xyz, other.xyz) and eq(self.rgb, other.rgb)
            and eq(self.rows, other.rows) and eq(self.cols, other.cols)
            and eq(self.labels, other.labels)
            and self.class_count == other.class_count
            and self.source_id == other.source_id
        )


def _as_index_array(values, n, name):
    arr = np.asarray(values)
    if arr.shape != (n,):
        raise ValidationError(f"{name} must have shape ({n},), got {arr.shape}")
    if arr.dtype.kind == "f":
        if not np.all(np.isfinite(arr)) or np.any(arr != np.round(arr)):
            raise ValidationError(f"{name} must hold integers")
    if n and arr.min() < 0:
        raise ValidationError(f"{name} must be non-negative")
    return arr.astype(np.int64)


# --------------------------------------------------------------------------
# PLY
# --------------------------------------------------------------------------

def _parse_ply_header(fh):
    first = fh.readline().strip()
    if first != b"ply":
        raise ParseError("missing 'ply' magic")
    fmt = None
    n = None
    props = []
    comments = {}
    in_vertex = False
    while True:
        line = fh.readline()
        if not line:
            raise ParseError("unterminated PLY header")
        tokens = line.decode("ascii", errors="replace").split()
        if not tokens:
            continue
        key = tokens[0]
        if key == "end_header":
            break
        if key == "format":
            if len(tokens) != 3:
                raise ParseError(f"bad format line: {line!r}")
            fmt = tokens[1]
        elif key == "comment":
            if len(tokens) >= 2:
                comments[tokens[1]] = " ".join(tokens[2:])
        elif key == "element":
            if len(tokens) != 3:
                raise ParseError(f"bad element line: {line!r}")
            in_vertex = tokens[1] == "vertex"
            if in_vertex:
                try:
                    n = int(tokens[2])
                except ValueError as exc:
                    raise ParseError(f"bad vertex count: {tokens[2]}") from exc
        elif key == "property":
            if not in_vertex:
                continue
            if len(tokens) != 3 or tokens[1] not in _PLY_TYPES:
                raise ParseError(f"unsupported property line: {line!r}")
            props.append((tokens[2], _PLY_TYPES[tokens[1]]))
        else:
            raise ParseError(f"unknown header keyword {key!r}")
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise ParseError(f"unsupported PLY format {fmt!r}")
    if n is None:
        raise ParseError("no vertex element")
    return fmt, n, props, comments


def _read_ply(path):
    with open(path, "rb") as fh:
        fmt, n, props, comments = _parse_ply_header(fh)
        names = [p[0] for p in props]
        if len(set(names)) != len(names):
            raise ParseError("duplicate property names")
        if fmt == "ascii":
            text = fh.read().decode("ascii", errors="replace")
            rows = [ln.split() for ln in text.splitlines() if ln.strip()]
            if len(rows) < n or any(len(r) != len(props) for r in rows[:n]):
                raise ParseError("ASCII body does not match header")
            columns = {}
            for j, (name, code) in enumerate(props):
                col = [r[j] for r in rows[:n]]
                try:
                    if code[0] == "f":
                        columns[name] = np.array([float(v) for v in col], dtype=np.float64)
                    else:
                        columns[name] = np.array([int(v) for v in col], dtype=np.int64)
                except ValueError as exc:
                    raise ParseError(f"bad value in column {name}") from exc
        else:
            endian = "<" if fmt == "binary_little_endian" else ">"
            dtype = np.dtype([(name, endian + code) for name, code in props])
            raw = fh.read(dtype.itemsize * n)
            if len(raw) != dtype.itemsize * n:
                raise ParseError("binary body shorter than header declares")
            data = np.frombuffer(raw, dtype=dtype, count=n)
            columns = {name: data[name] for name in names}
    return columns, comments


def _columns_to_cloud(columns, comments, class_count=None, source_id=None):
    for axis in "xyz":
        if axis not in columns:
            raise ParseError(f"missing coordinate column {axis!r}")
    xyz = np.stack([np.asarray(columns[a], dtype=np.float64) for a in "xyz"], axis=1)
    if not np.all(np.isfinite(xyz)):
        raise ValidationError("non-finite coordinate")
    n = xyz.shape[0]
    rgb = np.zeros((n, 3))
    for names in _COLOR_NAMES:
        if all(c in columns for c in names):
            chans = [np.asarray(columns[c]) for c in names]
            if chans[0].dtype.kind in "iu":
                rgb = np.stack(chans, axis=1).astype(np.float64) / 255.0
            else:
                rgb = np.stack(chans, axis=1).astype(np.float64)
            break
    rows = columns.get("scan_row")
    cols = columns.get("scan_col")
    labels = columns.get("label")
    if class_count is None:
        if "class_count" in comments:
            class_count = int(comments["class_count"])
        elif labels is not None and n:
            class_count = int(np.max(labels)) + 1
        else:
            class_count = 0
    if source_id is None:
        source_id = comments.get("source_id", "")
    return PointCloud(xyz=xyz, rgb=rgb, rows=rows, cols=cols, labels=labels,
                      class_count=class_count, source_id=source_id)


def _ply_fields(cloud, float_color=True):
    fields = [("x", "f8", cloud.xyz[:, 0]), ("y", "f8", cloud.xyz[:, 1]), ("z", "f8", cloud.xyz[:, 2])]
    if float_color:
        fields += [(c, "f8", cloud.rgb[:, j]) for j, c in enumerate(("red", "green", "blue"))]
    else:
        rgb8 = np.clip(np.rint(cloud.rgb * 255.0), 0, 255).astype(np.uint8)
        fields += [(c, "u1", rgb8[:, j]) for j, c in enumerate(("red", "green", "blue"))]
    if cloud.rows is not None:
        fields += [("scan_row", "u4", cloud.rows), ("scan_col", "u4", cloud.cols)]
    if cloud.labels is not None:
        fields += [("label", "u2", cloud.labels)]
    return fields


_TYPE_NAMES = {"f8": "double", "u4": "uint", "u2": "ushort", "u1": "uchar"}


def _write_ply(cloud, path, binary, float_color=True):
    fields = _ply_fields(cloud, float_color)
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0"]
    if cloud.source_id:
        header.append(f"comment source_id {cloud.source_id}")
    header.append(f"comment class_count {cloud.class_count}")
    header.append(f"element vertex {cloud.n}")
    header += [f"property {_TYPE_NAMES[code]} {name}" for name, code, _ in fields]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")
    if binary:
        dtype = np.dtype([(name, "<" + code) for name, code, _ in fields])
        body = np.empty(cloud.n, dtype=dtype)
        for name, _, values in fields:
            body[name] = values
        payload = body.tobytes()
    else:
        out = io.StringIO()
        columns = [values for _, _, values in fields]
        kinds = [code[0] for _, code, _ in fields]
        for i in range(cloud.n):
            out.write(" ".join(repr(float(c[i])) if k == "f" else str(int(c[i]))
                               for c, k in zip(columns, kinds)))
            out.write("\n")
        payload = out.getvalue().encode("ascii")
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(payload)


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------

def _read_csv(path):
    comments = {}
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    body = []
    for ln in lines:
        if ln.startswith("#"):
            for item in ln[1:].split(","):
                if "=" in item:
                    k, v = item.split("=", 1)
                    comments[k.strip()] = v.strip()
        elif ln.strip():
            body.append(ln)
    if not body:
        raise ParseError("empty CSV")
    reader = csv.reader(body)
    header = [h.strip() for h in next(reader)]
    if len(set(header)) != len(header):
        raise ParseError("duplicate CSV columns")
    raw = {h: [] for h in header}
    for rec in reader:
        if len(rec) != len(header):
            raise ParseError("ragged CSV row")
        for h, v in zip(header, rec):
            raw[h].append(v.strip())
    columns = {}
    for h, vals in raw.items():
        if h in ("scan_row", "scan_col", "label"):
            present = [v != "" for v in vals]
            if not all(present):
                if any(present):
                    raise ValidationError(f"column {h} is only partially populated")
                continue
            try:
                columns[h] = np.array([int(v) for v in vals], dtype=np.int64)
            except ValueError as exc:
                raise ParseError(f"non-integer value in {h}") from exc
        else:
            try:
                columns[h] = np.array([float(v) for v in vals], dtype=np.float64)
            except ValueError as exc:
                raise ParseError(f"non-numeric value in {h}") from exc
    if ("scan_row" in columns) != ("scan_col" in columns):
        raise ValidationError("scan_row and scan_col must be present together")
    return columns, comments


def _write_csv(cloud, path):
    header = ["x", "y", "z", "r", "g", "b"]
    cols = [cloud.xyz[:, 0], cloud.xyz[:, 1], cloud.xyz[:, 2],
            cloud.rgb[:, 0], cloud.rgb[:, 1], cloud.rgb[:, 2]]
    ints = [False] * 6
    if cloud.rows is not None:
        header += ["scan_row", "scan_col"]
        cols += [cloud.rows, cloud.cols]
        ints += [True, True]
    if cloud.labels is not None:
        header.append("label")
        cols.append(cloud.labels)
        ints.append(True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# source_id={cloud.source_id},class_count={cloud.class_count}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(cloud.n):
            writer.writerow([str(int(c[i])) if is_int else repr(float(c[i]))
                             for c, is_int in zip(cols, ints)])


# --------------------------------------------------------------------------
# public API
# --------------------------------------------------------------------------

def _infer_format(path):
    suffix = Path(path).suffix.lower()
    if suffix == ".csv":
        return "csv"
    return "ply_binary"


def load_cloud(path, format=None, class_count=None) -> PointCloud:
    """Read a cloud; ``format`` is one of ``ply_binary``, ``ply_ascii`` or ``csv``.

    Both PLY flavours are detected from the header, so the two PLY formats are
    interchangeable on read.
    """
    if not os.path.exists(path):
        raise IoError(f"no such file: {path}")
    fmt = format or _infer_format(path)
    if fmt not in FORMATS:
        raise ParseError(f"unknown format {fmt!r}")
    if fmt == "csv":
        columns, comments = _read_csv(path)
        if "class_count" in comments and class_count is None:
            class_count = int(comments["class_count"])
        for a, b in zip(("r", "g", "b"), ("red", "green", "blue")):
            if a not in columns and b in columns:
                columns[a] = columns[b]
        return _columns_to_cloud(columns, comments, class_count)
    columns, comments = _read_ply(path)
    return _columns_to_cloud(columns, comments, class_count)


def save_cloud(cloud: PointCloud, path, format="ply_binary") -> None:
    if format not in FORMATS:
        raise ParseError(f"unknown format {format!r}")
    try:
        if format == "csv":
            _write_csv(cloud, path)
        else:
            _write_ply(cloud, path, binary=format == "ply_binary")
    except OSError as exc:
        raise IoError(str(exc)) from exc


DEFAULT_PALETTE = np.array([
    [0.12, 0.35, 0.85],  # wall
    [0.60, 0.45, 0.25],  # ground
    [0.20, 0.75, 0.30],  # other
    [0.85, 0.20, 0.20],
    [0.90, 0.80, 0.20],
    [0.60, 0.20, 0.70],
    [0.20, 0.80, 0.80],
    [0.95, 0.55, 0.10],
    [0.50, 0.50, 0.50],
])


def export_colored(cloud: PointCloud, predictions, path, palette=None) -> str:
    """Write ``cloud`` as binary PLY with 8-bit colours taken from ``palette[prediction]``."""
    predictions = np.asarray(predictions)
    if predictions.shape != (cloud.n,):
        raise ValidationError(
            f"expected {cloud.n} predictions, got shape {predictions.shape}")
    palette = DEFAULT_PALETTE if palette is None else np.asarray(palette, dtype=np.float64)
    if predictions.size and (predictions.min() < 0 or predictions.max() >= len(palette)):
        raise ValidationError("prediction outside palette")
    colored = PointCloud(xyz=cloud.xyz, rgb=palette[predictions.astype(np.int64)],
                         labels=predictions.astype(np.int64),
                         class_count=max(cloud.class_count, int(predictions.max(initial=-1)) + 1),
                         source_id=cloud.source_id)
    try:
        _write_ply(colored, path, binary=True, float_color=False)
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return str(path)
