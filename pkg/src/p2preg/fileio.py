"""Reading and writing clouds, transforms, feature caches and benchmark suites.

Clouds are stored as PLY (ASCII or binary) or whitespace-separated XYZ.
Transforms are row-major 3x4 matrices inside JSON. Everything written here
is a pure function of its inputs, so regenerating a suite reproduces the
same bytes.
"""

from __future__ import annotations

import json
import math
import os
import struct
from pathlib import Path
from typing import Any, Iterable

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .benchgen import BenchmarkSample, SampleSpec, SuiteConfig
from .cloud import PointCloud, RigidTransform
from .errors import ParameterError
from .features import FeatureMatrix

PathLike = str | os.PathLike

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_FORMATS = {"ascii": None, "binary_little_endian": "<", "binary_big_endian": ">"}
FEATURE_MAGIC = b"P2PFEAT1\n"


# --------------------------------------------------------------------- JSON

def _jsonable(obj: Any) -> Any:
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, RigidTransform):
        return obj.to_list()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj: Any) -> str:
    """Canonical JSON: sorted keys, fixed indentation, trailing newline.

    Non-finite floats are written as ``null`` so the output stays strict JSON.
    """
    return json.dumps(_finite(obj), indent=2, sort_keys=True, default=_jsonable, allow_nan=False) + "\n"


def _finite(obj: Any) -> Any:
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, np.generic):
        return _finite(obj.item())
    return obj


def write_json(path: PathLike, obj: Any) -> None:
    Path(path).write_text(dumps(obj), encoding="utf-8")


def read_json(path: PathLike) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def transform_to_json(T: RigidTransform) -> dict[str, Any]:
    return {"matrix": T.to_list(), "layout": "row-major 3x4"}


def transform_from_json(obj: dict[str, Any] | list) -> RigidTransform:
    """Accepts ``{"matrix": [[...], [...], [...]]}`` or the bare nested list.

    Exact rotations are kept bit for bit; slightly rounded ones are
    projected back onto SO(3).
    """
    m = np.asarray(obj["matrix"] if isinstance(obj, dict) else obj, dtype=np.float64)
    try:
        return RigidTransform.from_matrix(m)
    except ParameterError:
        return RigidTransform.from_matrix(m, orthonormalize=True)


def write_transform(path: PathLike, T: RigidTransform) -> None:
    write_json(path, transform_to_json(T))


def read_transform(path: PathLike) -> RigidTransform:
    return transform_from_json(read_json(path))


# ---------------------------------------------------------------------- PLY

def _parse_header(fh) -> tuple[str, list[dict[str, Any]]]:
    if fh.readline().strip() != b"ply":
        raise ParameterError("not a PLY file")
    fmt, elements = None, []
    while True:
        line = fh.readline()
        if not line:
            raise ParameterError("PLY header has no end_header line")
        parts = line.decode("ascii", errors="replace").split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "end_header":
            break
        if parts[0] == "format":
            if parts[1] not in _FORMATS:
                raise ParameterError(f"unsupported PLY format {parts[1]!r}")
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append({"name": parts[1], "count": int(parts[2]), "props": []})
        elif parts[0] == "property":
            if not elements:
                raise ParameterError("PLY property before any element")
            if parts[1] == "list":
                elements[-1]["props"].append((parts[4], "list", _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]]))
            else:
                if parts[1] not in _PLY_TYPES:
                    raise ParameterError(f"unknown PLY property type {parts[1]!r}")
                elements[-1]["props"].append((parts[2], "scalar", _PLY_TYPES[parts[1]], None))
    if fmt is None:
        raise ParameterError("PLY header has no format line")
    return fmt, elements


def _skip_binary_element(fh, element: dict[str, Any], endian: str) -> None:
    for _ in range(element["count"]):
        for _, kind, t1, t2 in element["props"]:
            if kind == "scalar":
                fh.read(np.dtype(t1).itemsize)
            else:
                n = int(np.frombuffer(fh.read(np.dtype(t1).itemsize), dtype=endian + t1)[0])
                fh.read(n * np.dtype(t2).itemsize)


def read_ply(path: PathLike, role: str = "source") -> PointCloud:
    """Vertex positions, and normals when ``nx ny nz`` are present."""
    with open(path, "rb") as fh:
        fmt, elements = _parse_header(fh)
        endian = _FORMATS[fmt]
        lines: Iterable[bytes] | None = None if endian else iter(fh.read().splitlines())
        table = None
        for el in elements:
            names = [p[0] for p in el["props"]]
            if el["name"] != "vertex":
                if endian:
                    _skip_binary_element(fh, el, endian)
                else:
                    for _ in range(el["count"]):
                        next(lines)
                continue
            if any(p[1] == "list" for p in el["props"]):
                raise ParameterError("list properties on vertices are not supported")
            if endian:
                dt = np.dtype([(n, endian + p[2]) for n, p in zip(names, el["props"])])
                raw = fh.read(dt.itemsize * el["count"])
                if len(raw) != dt.itemsize * el["count"]:
                    raise ParameterError("PLY vertex data is truncated")
                rec = np.frombuffer(raw, dtype=dt)
                table = {n: rec[n].astype(np.float64) for n in names}
            else:
                rows = [next(lines).split() for _ in range(el["count"])]
                arr = np.array(rows, dtype=np.float64).reshape(el["count"], len(names))
                table = {n: arr[:, k] for k, n in enumerate(names)}
            break
    if table is None:
        raise ParameterError("PLY file has no vertex element")
    if not all(k in table for k in "xyz"):
        raise ParameterError("PLY vertices need x, y and z")
    pts = np.column_stack([table["x"], table["y"], table["z"]])
    normals = None
    if all(k in table for k in ("nx", "ny", "nz")):
        normals = np.column_stack([table["nx"], table["ny"], table["nz"]])
    return PointCloud(pts, normals, role=role)


def write_ply(path: PathLike, cloud: PointCloud, binary: bool = True) -> None:
    """Write doubles; binary output is little-endian and round-trips exactly."""
    cols = [cloud.points]
    names = ["x", "y", "z"]
    if cloud.has_normals:
        cols.append(cloud.normals)
        names += ["nx", "ny", "nz"]
    data = np.ascontiguousarray(np.hstack(cols), dtype=np.float64)
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {data.shape[0]}"]
    header += [f"property double {n}" for n in names]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(data.astype("<f8").tobytes())
        else:
            fh.write("".join(" ".join(repr(float(v)) for v in row) + "\n" for row in data).encode("ascii"))


# ---------------------------------------------------------------------- XYZ

def read_xyz(path: PathLike, role: str = "source") -> PointCloud:
    """Three columns of coordinates, optionally followed by three of normals."""
    arr = np.loadtxt(path, dtype=np.float64, ndmin=2, comments="#")
    if arr.size == 0:
        raise ParameterError(f"{path} holds no points")
    if arr.shape[1] not in (3, 6):
        raise ParameterError(f"XYZ rows need 3 or 6 columns, got {arr.shape[1]}")
    return PointCloud(arr[:, :3], arr[:, 3:] if arr.shape[1] == 6 else None, role=role)


def write_xyz(path: PathLike, cloud: PointCloud) -> None:
    data = np.hstack([cloud.points, cloud.normals]) if cloud.has_normals else cloud.points
    with open(path, "w", encoding="ascii") as fh:
        for row in data:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_cloud(path: PathLike, role: str = "source") -> PointCloud:
    ext = Path(path).suffix.lower()
    if ext == ".ply":
        return read_ply(path, role)
    if ext in (".xyz", ".txt"):
        return read_xyz(path, role)
    raise ParameterError(f"unknown cloud format {ext!r}; use .ply or .xyz")


def write_cloud(path: PathLike, cloud: PointCloud) -> None:
    ext = Path(path).suffix.lower()
    if ext == ".ply":
        write_ply(path, cloud)
    elif ext in (".xyz", ".txt"):
        write_xyz(path, cloud)
    else:
        raise ParameterError(f"unknown cloud format {ext!r}; use .ply or .xyz")


# ------------------------------------------------------------ feature cache

def write_features(path: PathLike, features: FeatureMatrix) -> None:
    """Magic line, 4-byte little-endian header length, JSON header, float64 rows."""
    vals = np.ascontiguousarray(features.values, dtype="<f8")
    header = json.dumps({"rows": vals.shape[0], "dim": vals.shape[1], "dtype": "<f8",
                         "layout": "row-major"}, sort_keys=True).encode("ascii")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(vals.tobytes())


def read_features(path: PathLike) -> FeatureMatrix:
    with open(path, "rb") as fh:
        if fh.read(len(FEATURE_MAGIC)) != FEATURE_MAGIC:
            raise ParameterError(f"{path} is not a feature cache")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n))
        if header.get("layout") != "row-major":
            raise ParameterError(f"unsupported feature layout {header.get('layout')!r}")
        rows, dim = int(header["rows"]), int(header["dim"])
        raw = fh.read()
    dt = np.dtype(header["dtype"])
    if len(raw) != rows * dim * dt.itemsize:
        raise ParameterError(f"{path}: expected {rows}x{dim} values, found {len(raw) // dt.itemsize}")
    return FeatureMatrix(np.frombuffer(raw, dtype=dt).astype(np.float64).reshape(rows, dim))


# ------------------------------------------------------------------ suites

SAMPLE_FILES = {
    "source": "source.ply",
    "target": "target.ply",
    "source_fiducials": "source_fiducials.csv",
    "target_fiducials": "target_fiducials.csv",
    "correspondence": "correspondence.npy",
    "noise": "noise.npy",
}


def write_fiducials(path: PathLike, points: ArrayLike) -> None:
    pts = np.asarray(points, dtype=np.float64)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("x,y,z\n")
        for p in pts:
            fh.write(",".join(repr(float(v)) for v in p) + "\n")


def read_fiducials(path: PathLike) -> NDArray[np.float64]:
    return np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.float64, ndmin=2)


def sample_manifest(sample: BenchmarkSample) -> dict[str, Any]:
    return {
        "sample_id": sample.sample_id,
        "spec": sample.spec.to_dict(),
        "metadata": dict(sample.metadata),
        "transform": transform_to_json(sample.transform),
        "files": dict(SAMPLE_FILES),
    }


def write_sample(directory: PathLike, sample: BenchmarkSample) -> Path:
    """Write one sample into ``directory``; returns the manifest path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_ply(d / SAMPLE_FILES["source"], sample.source)
    write_ply(d / SAMPLE_FILES["target"], sample.target)
    write_fiducials(d / SAMPLE_FILES["source_fiducials"], sample.source_fiducials)
    write_fiducials(d / SAMPLE_FILES["target_fiducials"], sample.target_fiducials)
    np.save(d / SAMPLE_FILES["correspondence"], np.asarray(sample.correspondence, dtype="<i8"))
    np.save(d / SAMPLE_FILES["noise"], np.asarray(sample.noise, dtype="<f8"))
    manifest = d / "sample.json"
    write_json(manifest, sample_manifest(sample))
    return manifest


def read_sample(manifest: PathLike) -> BenchmarkSample:
    manifest = Path(manifest)
    if manifest.is_dir():
        manifest = manifest / "sample.json"
    m = read_json(manifest)
    d = manifest.parent
    files = m["files"]
    return BenchmarkSample(
        spec=SampleSpec.from_dict(m["spec"]),
        source=read_ply(d / files["source"], role="source"),
        source_fiducials=read_fiducials(d / files["source_fiducials"]),
        target=read_ply(d / files["target"], role="target"),
        target_fiducials=read_fiducials(d / files["target_fiducials"]),
        transform=RigidTransform.from_matrix(m["transform"]["matrix"]),
        correspondence=np.load(d / files["correspondence"]).astype(np.int64),
        noise=np.load(d / files["noise"]).astype(np.float64),
        metadata=m["metadata"],
    )


def suite_index(config: SuiteConfig, specs: Iterable[SampleSpec], built: bool = True) -> dict[str, Any]:
    return {
        "config": config.to_dict(),
        "built": built,
        "samples": [{"sample_id": s.sample_id, "manifest": f"samples/{s.sample_id}/sample.json",
                     "spec": s.to_dict()} for s in specs],
    }


def read_suite(directory: PathLike) -> dict[str, Any]:
    path = Path(directory) / "index.json"
    if not path.exists():
        raise ParameterError(f"no suite index at {path}")
    return read_json(path)
