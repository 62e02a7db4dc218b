"""PLY reader/writer for the pipeline's interchange format.

Supported schema: double x/y/z positions, optional uchar `label`,
optional float scalar channels. ASCII and binary little-endian.
"""

from __future__ import annotations

import warnings

import numpy as np

from boltpipe.cloud import PointCloud


class PlyFormatError(ValueError):
    """Malformed PLY header or body; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)
        self.line = line


_TYPE_MAP = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}

_FLOAT_TYPES = {"float", "float32", "double", "float64"}


def _parse_header(fh):
    """Returns (format, vertex_count, properties, header_bytes). properties is
    a list of (type_name, prop_name)."""
    line_no = 0

    def next_line():
        nonlocal line_no
        raw = fh.readline()
        if not raw:
            raise PlyFormatError("unexpected end of header", line_no)
        line_no += 1
        return raw.decode("ascii", errors="replace").strip()

    if next_line() != "ply":
        raise PlyFormatError("missing 'ply' magic line", 1)

    fmt = None
    count = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    while True:
        line = next_line()
        if line == "end_header":
            break
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            if len(parts) < 2 or parts[1] not in ("ascii", "binary_little_endian"):
                raise PlyFormatError(f"unsupported format {line!r}", line_no)
            fmt = parts[1]
        elif parts[0] == "element":
            if len(parts) != 3:
                raise PlyFormatError(f"malformed element line {line!r}", line_no)
            if parts[1] == "vertex":
                try:
                    count = int(parts[2])
                except ValueError:
                    raise PlyFormatError(f"bad vertex count {parts[2]!r}", line_no)
                in_vertex = True
            else:
                in_vertex = False
        elif parts[0] == "property":
            if parts[1] == "list":
                if in_vertex:
                    raise PlyFormatError("list properties on vertices unsupported", line_no)
                continue
            if len(parts) != 3:
                raise PlyFormatError(f"malformed property line {line!r}", line_no)
            if parts[1] not in _TYPE_MAP:
                raise PlyFormatError(f"unknown property type {parts[1]!r}", line_no)
            if in_vertex:
                props.append((parts[1], parts[2]))
    if fmt is None:
        raise PlyFormatError("header missing format line", line_no)
    if count is None:
        raise PlyFormatError("header missing vertex element", line_no)
    for axis in ("x", "y", "z"):
        typ = dict((n, t) for t, n in props).get(axis)
        if typ is None:
            raise PlyFormatError(f"header missing coordinate property {axis!r}", line_no)
        if typ not in _FLOAT_TYPES:
            raise PlyFormatError(f"coordinate {axis!r} must be a floating type", line_no)
    return fmt, count, props, line_no


def load_ply(path) -> PointCloud:
    """Load a PLY file into a PointCloud.

    Recognizes x/y/z, an optional uchar `label`, and float/double scalar
    properties as channels; anything else is skipped with a warning.
    """
    with open(path, "rb") as fh:
        fmt, count, props, header_lines = _parse_header(fh)
        dtype = np.dtype([(name, "<" + _TYPE_MAP[typ]) for typ, name in props])
        if fmt == "binary_little_endian":
            data = np.frombuffer(fh.read(), dtype=dtype, count=-1)
            if data.shape[0] < count:
                raise PlyFormatError(
                    f"body has {data.shape[0]} vertices, header declares {count}",
                    header_lines,
                )
            data = data[:count]
        else:
            rows = []
            for i in range(count):
                raw = fh.readline()
                if not raw:
                    raise PlyFormatError(
                        f"body has {i} vertices, header declares {count}",
                        header_lines + i,
                    )
                fields = raw.split()
                if len(fields) != len(props):
                    raise PlyFormatError(
                        f"vertex row has {len(fields)} fields, expected {len(props)}",
                        header_lines + i + 1,
                    )
                rows.append(tuple(fields))
            data = np.array(rows, dtype=dtype) if rows else np.empty(0, dtype=dtype)

    positions = np.stack(
        [data["x"], data["y"], data["z"]], axis=1
    ).astype(np.float64) if count else np.empty((0, 3))

    labels = None
    channels = {}
    for typ, name in props:
        if name in ("x", "y", "z"):
            continue
        if name == "label":
            if typ in ("uchar", "uint8"):
                values = data["label"]
                if values.size and values.max() > 1:
                    raise ValueError("label values must be 0 or 1")
                labels = values.astype(np.uint8)
            else:
                warnings.warn(f"ignoring label property of type {typ!r}")
        elif typ in _FLOAT_TYPES:
            channels[name] = data[name].astype(np.float64)
        else:
            warnings.warn(f"ignoring property {name!r} of type {typ!r}")
    return PointCloud(positions, labels, channels)


def save_ply(cloud: PointCloud, path, format: str = "binary-little-endian") -> None:
    """Write a cloud as PLY. Positions are double, channels float32."""
    if format not in ("ascii", "binary-little-endian"):
        raise ValueError(f"unknown format {format!r}")
    n = len(cloud)
    channel_names = sorted(cloud.channels)
    header = ["ply"]
    header.append(
        "format ascii 1.0" if format == "ascii" else "format binary_little_endian 1.0"
    )
    header.append(f"element vertex {n}")
    header += ["property double x", "property double y", "property double z"]
    if cloud.labels is not None:
        header.append("property uchar label")
    for name in channel_names:
        header.append(f"property float {name}")
    header.append("end_header")

    fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    if cloud.labels is not None:
        fields.append(("label", "u1"))
    fields += [(name, "<f4") for name in channel_names]
    data = np.empty(n, dtype=np.dtype(fields))
    data["x"], data["y"], data["z"] = cloud.positions.T
    if cloud.labels is not None:
        data["label"] = cloud.labels
    for name in channel_names:
        data[name] = cloud.channels[name].astype(np.float32)

    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if format == "binary-little-endian":
            fh.write(data.tobytes())
        else:
            for row in data:
                parts = [f"{row['x']:.17g}", f"{row['y']:.17g}", f"{row['z']:.17g}"]
                if cloud.labels is not None:
                    parts.append(str(int(row["label"])))
                parts += [f"{float(row[name]):.9g}" for name in channel_names]
                fh.write((" ".join(parts) + "\n").encode("ascii"))
