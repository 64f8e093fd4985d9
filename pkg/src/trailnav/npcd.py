"""NPCD v1 point-cloud file format.

Header line: ``npcd 1 <count> <fields>`` with fields drawn from
{xyz, normal, t, pdyn}; body is little-endian 64-bit floats, record-major.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .geom import FRAME_MAP, PointCloud

MAGIC = "npcd"
VERSION = 1
_FIELD_WIDTHS = {"xyz": 3, "normal": 3, "t": 1, "pdyn": 1}
_FIELD_ORDER = ("xyz", "normal", "t", "pdyn")


class NpcdError(ValueError):
    """Malformed or inconsistent NPCD file."""


def write_npcd(path, cloud: PointCloud) -> None:
    path = Path(path)
    fields = ["xyz"]
    cols = [cloud.points]
    if cloud.normals is not None:
        fields.append("normal")
        cols.append(cloud.normals)
    if cloud.timestamps is not None:
        fields.append("t")
        cols.append(cloud.timestamps.reshape(-1, 1))
    if cloud.dyn_prob is not None:
        fields.append("pdyn")
        cols.append(cloud.dyn_prob.reshape(-1, 1))
    header = f"{MAGIC} {VERSION} {len(cloud)} {' '.join(fields)}\n"
    body = np.ascontiguousarray(np.hstack(cols), dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(body.tobytes())


def read_npcd(path, frame: str = FRAME_MAP) -> PointCloud:
    path = Path(path)
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").strip()
        raw = fh.read()
    parts = header.split()
    if len(parts) < 4 or parts[0] != MAGIC:
        raise NpcdError(f"{path}: not an NPCD file (header {header!r})")
    if parts[1] != str(VERSION):
        raise NpcdError(f"{path}: unsupported NPCD version {parts[1]}")
    try:
        count = int(parts[2])
    except ValueError:
        raise NpcdError(f"{path}: bad point count {parts[2]!r}") from None
    fields = parts[3:]
    for f in fields:
        if f not in _FIELD_WIDTHS:
            raise NpcdError(f"{path}: unknown field {f!r}")
    if fields != [f for f in _FIELD_ORDER if f in fields] or "xyz" not in fields:
        raise NpcdError(f"{path}: fields must be a subset of {_FIELD_ORDER} in order, "
                        "with xyz present")
    width = sum(_FIELD_WIDTHS[f] for f in fields)
    expected = count * width * 8
    if len(raw) != expected:
        raise NpcdError(f"{path}: body has {len(raw)} bytes, expected {expected}")
    body = np.frombuffer(raw, dtype="<f8").reshape(count, width)
    out = {}
    col = 0
    for f in fields:
        w = _FIELD_WIDTHS[f]
        out[f] = body[:, col:col + w].copy()
        col += w
    return PointCloud(
        points=out["xyz"],
        frame=frame,
        normals=out.get("normal"),
        timestamps=None if "t" not in out else out["t"].ravel(),
        dyn_prob=None if "pdyn" not in out else out["pdyn"].ravel(),
    )
