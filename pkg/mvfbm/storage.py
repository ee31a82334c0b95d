"""
Output formats: path CSVs (t, x_1..x_d at full precision), JSON reports, and the MVFB binary block file.

MVFB layout: b"MVFB" | u16 version | u32 header length | JSON header | little-endian f64 arrays, row-major,
in header order. The header lists {"name", "shape"} per array plus free-form metadata.
"""
from __future__ import annotations

import json
import math
import struct
from pathlib import Path as FsPath
from typing import Mapping, Union

import numpy as np
import pandas as pd

from mvfbm.errors import DomainError
from mvfbm.fractional import Density, Path, TimeGrid

FLOAT_FORMAT = "%.17g"
MVFB_MAGIC = b"MVFB"
MVFB_VERSION = 1

PathLike = Union[str, FsPath]


def path_frame(path: Path, prefix: str = "x") -> pd.DataFrame:
    df = pd.DataFrame(path.values, columns=[f"{prefix}_{i + 1}" for i in range(path.dim)])
    df.insert(0, "t", path.grid.nodes)
    return df


def write_path_csv(path: Path, dest: PathLike, prefix: str = "x") -> None:
    path_frame(path, prefix).to_csv(dest, index=False, float_format=FLOAT_FORMAT)


def read_path_csv(src: PathLike) -> Path:
    df = pd.read_csv(src)
    if "t" not in df.columns or df.shape[1] < 2:
        raise DomainError(f"{src}: expected columns t, x_1, ..., x_d")
    t = df["t"].to_numpy(dtype=float)
    grid = TimeGrid(T=float(t[-1]), N=len(t) - 1)
    if not np.allclose(t, grid.nodes, rtol=1e-12, atol=1e-12):
        raise DomainError(f"{src}: time column is not a uniform grid starting at 0")
    return Path(grid, df.drop(columns="t").to_numpy(dtype=float))


def write_density_csv(density: Density, dest: PathLike, prefix: str = "u") -> None:
    """One row per cell, keyed by the cell's left endpoint."""
    df = pd.DataFrame(density.values, columns=[f"{prefix}_{i + 1}" for i in range(density.dim)])
    df.insert(0, "t", density.grid.nodes[:-1])
    df.to_csv(dest, index=False, float_format=FLOAT_FORMAT)


def read_density_csv(src: PathLike, T: float) -> Density:
    df = pd.read_csv(src)
    if "t" not in df.columns or df.shape[1] < 2:
        raise DomainError(f"{src}: expected columns t, u_1, ..., u_d")
    grid = TimeGrid(T=T, N=len(df))
    if not np.allclose(df["t"].to_numpy(dtype=float), grid.nodes[:-1], rtol=1e-12, atol=1e-12):
        raise DomainError(f"{src}: cell column does not match a uniform grid on [0, {T}]")
    return Density(grid, df.drop(columns="t").to_numpy(dtype=float))


def ensemble_frame(grid: TimeGrid, values: np.ndarray, prefix: str) -> pd.DataFrame:
    """Long format for a (P, N+1, d) ensemble: columns particle, t, prefix_1..prefix_d."""
    P, rows, d = values.shape
    df = pd.DataFrame(values.reshape(P * rows, d), columns=[f"{prefix}_{i + 1}" for i in range(d)])
    df.insert(0, "t", np.tile(grid.nodes, P))
    df.insert(0, "particle", np.repeat(np.arange(P), rows))
    return df


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _finite_or_str(obj):
    # JSON has no inf/nan; keep them readable
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    if isinstance(obj, Mapping):
        return {k: _finite_or_str(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite_or_str(v) for v in obj]
    return obj


def write_json(data: Mapping, dest: PathLike) -> None:
    text = json.dumps(_finite_or_str(json.loads(json.dumps(data, default=_json_default))), indent=2, sort_keys=True)
    with open(dest, "w", encoding="utf-8") as f:
        f.write(text + "\n")


def read_json(src: PathLike) -> dict:
    with open(src, "r", encoding="utf-8") as f:
        return json.load(f)


def write_blocks(dest: PathLike, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    entries, payload = [], []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape)})
        payload.append(arr.tobytes(order="C"))
    header = json.dumps({"arrays": entries, "meta": dict(meta or {})}, default=_json_default, sort_keys=True)
    header_bytes = header.encode("utf-8")
    with open(dest, "wb") as f:
        f.write(MVFB_MAGIC)
        f.write(struct.pack("<HI", MVFB_VERSION, len(header_bytes)))
        f.write(header_bytes)
        for chunk in payload:
            f.write(chunk)


def read_blocks(src: PathLike) -> tuple[dict[str, np.ndarray], dict]:
    """Returns ({name: array}, meta)."""
    with open(src, "rb") as f:
        blob = f.read()
    if blob[:4] != MVFB_MAGIC:
        raise DomainError(f"{src}: not an MVFB file")
    version, header_len = struct.unpack_from("<HI", blob, 4)
    if version != MVFB_VERSION:
        raise DomainError(f"{src}: unsupported MVFB version {version}")
    start = 4 + struct.calcsize("<HI")
    header = json.loads(blob[start : start + header_len].decode("utf-8"))
    offset = start + header_len
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arrays[entry["name"]] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += 8 * count
    if offset != len(blob):
        raise DomainError(f"{src}: {len(blob) - offset} trailing bytes after declared arrays")
    return arrays, header.get("meta", {})
