"""Binary little-endian PLY and ``.npz`` array containers."""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

from .errors import InvalidInput
from .geometry import PointCloud

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_PLY_NAMES = {"u1": "uchar", "i4": "int", "f4": "float", "f8": "double", "i1": "char", "u2": "ushort", "i2": "short", "u4": "uint"}


def write_ply(path, columns: dict[str, np.ndarray]):
    """Write a vertex-only binary little-endian PLY from named columns."""
    names = list(columns)
    n = len(next(iter(columns.values())))
    dtype = np.dtype([(k, np.asarray(columns[k]).dtype.newbyteorder("<")) for k in names])
    rec = np.empty(n, dtype=dtype)
    for k in names:
        rec[k] = columns[k]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    for k in names:
        header.append(f"property {_PLY_NAMES[rec.dtype[k].str[1:]]} {k}")
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())


def read_ply(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise InvalidInput(f"{path}: not a PLY file")
        fmt = None
        n = None
        props = []
        in_vertex = False
        while True:
            line = fh.readline()
            if not line:
                raise InvalidInput(f"{path}: truncated header")
            tok = line.decode("ascii").split()
            if not tok:
                continue
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                in_vertex = tok[1] == "vertex"
                if in_vertex:
                    n = int(tok[2])
                elif n is not None:
                    raise InvalidInput(f"{path}: only vertex elements are supported")
            elif tok[0] == "property" and in_vertex:
                if tok[1] == "list":
                    raise InvalidInput(f"{path}: list properties are not supported")
                props.append((tok[2], "<" + _PLY_TYPES[tok[1]]))
            elif tok[0] == "end_header":
                break
        if fmt != "binary_little_endian":
            raise InvalidInput(f"{path}: unsupported PLY format {fmt}")
        rec = np.frombuffer(fh.read(np.dtype(props).itemsize * n), dtype=np.dtype(props), count=n)
    return {name: rec[name].copy() for name, _ in props}


def save_cloud_ply(path, cloud: PointCloud, extra: dict[str, np.ndarray] | None = None):
    cols = {
        "x": cloud.points[:, 0].astype(np.float32),
        "y": cloud.points[:, 1].astype(np.float32),
        "z": cloud.points[:, 2].astype(np.float32),
    }
    if cloud.part_labels is not None:
        cols["part_label"] = cloud.part_labels.astype(np.uint8)
    cols.update(extra or {})
    write_ply(path, cols)


def load_cloud_ply(path) -> PointCloud:
    cols = read_ply(path)
    pts = np.stack([cols["x"], cols["y"], cols["z"]], axis=1).astype(np.float64)
    labels = cols["part_label"].astype(np.int64) if "part_label" in cols else None
    return PointCloud(pts, labels)


def save_cloud_npz(path, cloud: PointCloud):
    arrays = {"points": cloud.points}
    if cloud.part_labels is not None:
        arrays["part_labels"] = cloud.part_labels
    for key, h in sorted(cloud.heatmaps.items()):
        arrays[f"heatmap/{key}"] = h
    save_arrays(path, arrays)


def load_cloud_npz(path) -> PointCloud:
    arrays = load_arrays(path)
    heat = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("heatmap/")}
    return PointCloud(arrays["points"], arrays.get("part_labels"), heat)


def load_cloud(path) -> PointCloud:
    path = Path(path)
    if path.suffix == ".ply":
        return load_cloud_ply(path)
    return load_cloud_npz(path)


def save_arrays(path, arrays: dict[str, np.ndarray], header: dict | None = None):
    """Write named arrays; ``header`` is stored as a JSON string array."""
    out = {k: np.asarray(v) for k, v in arrays.items()}
    if header is not None:
        out["header"] = np.array(json.dumps(header, sort_keys=True))
    # fixed timestamps keep the archive byte-identical across runs
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for key, arr in out.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, arr, allow_pickle=False)
            info = zipfile.ZipInfo(key + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def load_arrays(path) -> dict[str, np.ndarray]:
    with np.load(path, allow_pickle=False) as z:
        return {k: z[k] for k in z.files}


def read_header(arrays) -> dict:
    if "header" not in arrays:
        return {}
    return json.loads(str(arrays["header"]))
