"""File formats: curves, ensembles, field grids, observation data and CSV tables.

FieldGrid files are a JSON header plus a payload file next to it.  The
payload holds the array ``[time, i_1, ..., i_d, component]`` in row-major
(C) order with components ``v_1 .. v_d, g`` and, when present, ``rho``.
The binary encoding is little-endian IEEE float64 without any framing; the
CSV encoding has one grid node per row.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
from typing import Any, Iterable, Sequence

import numpy as np

from .cone_space import DomainBox, WeightedCurve
from .characteristics import FieldGrid
from .config import validate_document
from .errors import SchemaError, ValidationError
from .superposition import CurveEnsemble, MeasureSlice

FIELDGRID_LAYOUT = "row-major [time, i_1..i_d, component]; components v_1..v_d, g[, rho]"


def _finite(obj: Any) -> Any:
    """Replace non-finite floats by ``None`` so the output is strict JSON."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, np.generic):
        return _finite(obj.item())
    if isinstance(obj, np.ndarray):
        return _finite(obj.tolist())
    return obj


def dumps(obj: Any) -> str:
    return json.dumps(_finite(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path: str, obj: Any, schema: str | None = None) -> None:
    obj = _finite(obj)
    if schema is not None:
        validate_document(obj, schema)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(obj))


def read_json(path: str) -> Any:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise SchemaError(os.path.basename(path), f"invalid JSON: {exc}") from None


def write_text(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


# -- curves and ensembles ----------------------------------------------------------


def load_curve(path: str) -> WeightedCurve:
    """Curve from ``.json`` or ``.csv`` (header ``t,h,x1..xd``)."""
    if path.endswith(".csv"):
        try:
            with open(path, encoding="utf-8") as fh:
                return WeightedCurve.from_csv(fh.read())
        except FileNotFoundError:
            raise ValidationError(f"file not found: {path}") from None
    obj = read_json(path)
    validate_document(obj, "curve")
    return WeightedCurve.from_json(obj)


def save_curve(path: str, c: WeightedCurve) -> None:
    if path.endswith(".csv"):
        write_text(path, c.to_csv())
    else:
        write_json(path, c.to_json(), "curve")


def load_ensemble(path: str) -> CurveEnsemble:
    obj = read_json(path)
    validate_document(obj, "ensemble")
    return CurveEnsemble.from_json(obj)


def save_ensemble(path: str, e: CurveEnsemble) -> None:
    write_json(path, e.to_json(), "ensemble")


def load_initial(path: str, dim: int):
    """Initial data ``{"points": [[...], ...], "masses": [...]}``."""
    obj = read_json(path)
    if not isinstance(obj, dict) or "points" not in obj or "masses" not in obj:
        raise SchemaError("initial", "expected an object with points and masses")
    X = np.atleast_2d(np.asarray(obj["points"], dtype=float))
    r = np.asarray(obj["masses"], dtype=float).ravel()
    if X.shape[1] != dim or X.shape[0] != r.size:
        raise SchemaError("initial.points", f"expected {r.size} points of dimension {dim}")
    return X, r


# -- field grids -------------------------------------------------------------------


def _components(dim: int, has_rho: bool) -> list:
    return [f"v{j + 1}" for j in range(dim)] + ["g"] + (["rho"] if has_rho else [])


def save_fieldgrid(path: str, fg: FieldGrid, encoding: str = "float64-le") -> None:
    """Write header ``path`` (JSON) and the payload next to it."""
    if encoding not in ("float64-le", "csv"):
        raise ValidationError(f"unknown encoding {encoding!r}")
    stem = os.path.splitext(os.path.basename(path))[0]
    payload_name = stem + (".bin" if encoding == "float64-le" else ".csv")
    parts = [fg.v, fg.g[..., None]]
    if fg.rho is not None:
        parts.append(fg.rho[..., None])
    data = np.concatenate(parts, axis=-1)
    header = {
        "format": "wfr-fieldgrid",
        "version": 1,
        "box": fg.box.to_json(),
        "shape": list(fg.shape),
        "M": fg.M,
        "dim": fg.dim,
        "has_rho": fg.rho is not None,
        "density_weighted": bool(fg.density_weighted),
        "encoding": encoding,
        "payload": payload_name,
        "components": _components(fg.dim, fg.rho is not None),
        "layout": FIELDGRID_LAYOUT,
    }
    payload_path = os.path.join(os.path.dirname(path), payload_name)
    if encoding == "float64-le":
        np.ascontiguousarray(data, dtype="<f8").tofile(payload_path)
    else:
        flat = data.reshape(-1, data.shape[-1])
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header["components"])
        for row in flat:
            w.writerow([repr(float(v)) for v in row])
        write_text(payload_path, buf.getvalue())
    write_json(path, header, "fieldgrid")


def load_fieldgrid(path: str) -> FieldGrid:
    header = read_json(path)
    validate_document(header, "fieldgrid")
    d = header["dim"]
    shape = tuple(header["shape"])
    if len(shape) != d:
        raise SchemaError("shape", "length must equal dim")
    ncomp = d + 1 + (1 if header["has_rho"] else 0)
    full = (header["M"] + 1,) + shape + (ncomp,)
    payload_path = os.path.join(os.path.dirname(path), header["payload"])
    if not os.path.exists(payload_path):
        raise ValidationError(f"payload not found: {payload_path}")
    if header["encoding"] == "float64-le":
        data = np.fromfile(payload_path, dtype="<f8")
    else:
        with open(payload_path, encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    if data.size != int(np.prod(full)):
        raise SchemaError("payload", f"expected {int(np.prod(full))} values, found {data.size}")
    data = data.reshape(full).astype(float)
    rho = data[..., d + 1] if header["has_rho"] else None
    return FieldGrid(
        DomainBox.from_json(header["box"]),
        data[..., :d],
        data[..., d],
        rho,
        header.get("density_weighted", False),
    )


# -- observation data and tables --------------------------------------------------------


def load_data(path: str, sizes: Sequence[int]):
    """Observation data: JSON list of per-time vectors, or CSV with columns ``i,j,y``."""
    if path.endswith(".csv"):
        with open(path, encoding="utf-8") as fh:
            rows = [r for r in csv.DictReader(fh)]
        out = [np.zeros(m) for m in sizes]
        for r in rows:
            out[int(r["i"])][int(r["j"])] = float(r["y"])
        return out
    obj = read_json(path)
    if not isinstance(obj, list) or len(obj) != len(sizes) or any(len(y) != m for y, m in zip(obj, sizes)):
        raise SchemaError("data", "expected one vector per observation time matching the detector counts")
    return [np.asarray(y, dtype=float) for y in obj]


def table_csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def slices_csv(slices: Sequence[MeasureSlice], dim: int) -> str:
    header = ["t", "mass"] + [f"c{j + 1}" for j in range(dim)]
    rows = []
    for s in slices:
        c = s.centroid() if s.total_mass > 0 else np.full(dim, np.nan)
        rows.append([float(s.t), float(s.total_mass)] + [float(v) for v in c])
    return table_csv(header, rows)


def trajectories_csv(e: CurveEnsemble) -> str:
    """Long-format table ``atom, coefficient, t, h, x1..xd`` for plotting."""
    if len(e) == 0:
        return "atom,coefficient,t,h\n"
    dim = e.curves[0].dim
    rows = []
    for k, (c, curve) in enumerate(e.atoms):
        for t, h, x in zip(curve.times, curve.masses, curve.positions):
            rows.append([k, float(c), float(t), float(h)] + [float(v) for v in x])
    return table_csv(["atom", "coefficient", "t", "h"] + [f"x{j + 1}" for j in range(dim)], rows)
