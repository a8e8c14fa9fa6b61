"""PBG1 binary grids and small CSV/JSON helpers.

Layout (all little-endian):
    b"PBG1"
    u32 d, u32 N_X' for each of the d-1 transversal axes, u32 N_V for each of the
    d-1 angular axes, u32 number of slices
    per slice: f64 depth, f64 (lo, hi) for each X' axis then each V axis,
    f64 values in row-major order with the last V axis fastest.
Extents are cell-centre coordinates of the first and last node on each axis.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PBG1"


class FormatError(ValueError):
    pass


def write_pbg1(path, d: int, slices: list[tuple[float, np.ndarray, np.ndarray, np.ndarray]]) -> None:
    """Write slices given as (depth, lo, hi, values) with values of shape N_X'... x N_V...."""
    if not slices:
        raise FormatError("at least one slice is required")
    shape = np.shape(slices[0][3])
    if len(shape) != 2 * (d - 1):
        raise FormatError(f"slice values must have {2 * (d - 1)} axes, got {len(shape)}")
    with open(Path(path), "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack(f"<{2 + len(shape)}I", d, *shape, len(slices)))
        for depth, lo, hi, values in slices:
            if np.shape(values) != shape:
                raise FormatError("all slices must share one shape")
            ext = np.stack([np.asarray(lo, float), np.asarray(hi, float)], axis=1).ravel()
            fh.write(np.asarray([depth], "<f8").tobytes())
            fh.write(ext.astype("<f8").tobytes())
            fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def read_pbg1(path) -> tuple[int, list[tuple[float, np.ndarray, np.ndarray, np.ndarray]]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError("missing PBG1 magic bytes")
    (d,) = struct.unpack_from("<I", raw, 4)
    naxes = 2 * (d - 1)
    header = struct.unpack_from(f"<{naxes + 1}I", raw, 8)
    shape, nslices = tuple(header[:naxes]), header[naxes]
    off = 8 + 4 * (naxes + 1)
    size = int(np.prod(shape))
    out = []
    for _ in range(nslices):
        depth = np.frombuffer(raw, "<f8", 1, off)[0]
        off += 8
        ext = np.frombuffer(raw, "<f8", 2 * naxes, off).reshape(naxes, 2)
        off += 16 * naxes
        vals = np.frombuffer(raw, "<f8", size, off).reshape(shape).copy()
        off += 8 * size
        out.append((float(depth), ext[:, 0].copy(), ext[:, 1].copy(), vals))
    if off != len(raw):
        raise FormatError("trailing bytes after the last slice")
    return d, out


def field_to_pbg1(path, field) -> None:
    """Export a BeamField (values U on each slice grid)."""
    slices = []
    for sl in field.slices:
        axes = sl.grid.axes()
        slices.append((sl.depth, [a[0] for a in axes], [a[-1] for a in axes], sl.values))
    write_pbg1(path, field.d, slices)


def histogram_to_pbg1(path, measure) -> None:
    """Export an MC histogram: one slice per depth bin, values are bin masses."""
    spec = measure.meta["spec"]
    d = spec.d
    for e in spec.x_edges + spec.v_edges:
        if not np.allclose(np.diff(e), np.diff(e)[0]):
            raise FormatError("PBG1 export needs uniform bin edges")
    mids = [0.5 * (np.asarray(e)[1:] + np.asarray(e)[:-1]) for e in spec.x_edges + spec.v_edges]
    hist = measure.w.reshape(spec.shape)
    hist = np.moveaxis(hist, d - 1, 0)
    other = mids[: d - 1] + mids[d:]
    lo = [m[0] for m in other]
    hi = [m[-1] for m in other]
    write_pbg1(path, d, [(float(z), lo, hi, hist[k]) for k, z in enumerate(mids[d - 1])])


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n")
