"""File formats: 16-bit normal and depth PNGs, 8-bit masks, canonical JSON.

Every writer goes through a temporary file in the target directory followed
by an atomic rename, so readers never observe a partial file.
"""
from __future__ import annotations

import csv
import io
import json
import os
import tempfile

import cv2
import numpy as np

from .direction_stats import Binning, SphericalHistogram
from .errors import FileError, FormatError, RangeError, SchemaError, ValidationError
from .geometry import CameraIntrinsics
from .metrics import THRESHOLDS_DEG, EvalSummary
from .plane_refine import DepthMap, PlaneMask
from .rectifier import RectifierResult
from .warping import NormalMap

U16 = 65535
DEPTH_MAX_M = U16 / 1000.0


# -- raw file plumbing ------------------------------------------------------


def atomic_write_bytes(path, data: bytes) -> None:
    path = os.fspath(path)
    folder = os.path.dirname(os.path.abspath(path))
    try:
        fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=folder)
    except OSError as exc:
        raise FileError(f"cannot write into {folder}: {exc}") from exc
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise FileError(f"cannot write {path}: {exc}") from exc


def _read_bytes(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise FileError(f"cannot read {path}: {exc}") from exc


def _encode_png(arr: np.ndarray) -> bytes:
    # cv2 stores channels as BGR; callers pass RGB.
    if arr.ndim == 3:
        arr = arr[..., ::-1]
    ok, buf = cv2.imencode(".png", np.ascontiguousarray(arr))
    if not ok:
        raise FormatError("PNG encoding failed")
    return buf.tobytes()


def _decode_png(path) -> np.ndarray:
    data = np.frombuffer(_read_bytes(path), dtype=np.uint8)
    arr = cv2.imdecode(data, cv2.IMREAD_UNCHANGED) if data.size else None
    if arr is None:
        raise FormatError(f"{path} is not a readable PNG")
    if arr.ndim == 3:
        if arr.shape[2] == 4:
            raise FormatError(f"{path}: alpha channels are not supported")
        arr = arr[..., ::-1]
    return arr


# -- normal maps --------------------------------------------------------------


def encode_normals(nm: NormalMap) -> np.ndarray:
    """``round((n + 1) / 2 * 65535)`` per channel; invalid pixels are (0, 0, 0).

    A valid normal that would encode to (0, 0, 0) has its last channel moved
    up by one step so it stays distinguishable from the invalid marker.
    """
    n = np.clip(nm.normals, -1.0, 1.0)
    q = np.rint((n + 1.0) / 2.0 * U16).astype(np.uint16)
    zero = nm.valid & np.all(q == 0, axis=-1)
    q[zero, 2] = 1
    q[~nm.valid] = 0
    return q


def decode_normals(q: np.ndarray, renormalize: bool = True) -> NormalMap:
    """Inverse of :func:`encode_normals`.

    The raw decode is within 1/65535 per component of the written normal;
    renormalizing to unit length can add up to another sqrt(3)/65535.
    """
    q = np.asarray(q)
    valid = np.any(q != 0, axis=-1)
    n = q.astype(float) / U16 * 2.0 - 1.0
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    valid &= norm[..., 0] > 0
    scale = np.where(norm > 0, norm, 1.0) if renormalize else 1.0
    n = np.where(valid[..., None], n / scale, 0.0)
    return NormalMap(n, valid)


def write_normal_map(nm: NormalMap, path) -> None:
    atomic_write_bytes(path, _encode_png(encode_normals(nm)))


def read_normal_map(path, renormalize: bool = True) -> NormalMap:
    arr = _decode_png(path)
    if arr.dtype != np.uint16 or arr.ndim != 3 or arr.shape[2] != 3:
        raise FormatError(f"{path}: expected a 16-bit 3-channel PNG, got {arr.dtype} {arr.shape}")
    return decode_normals(arr, renormalize)


# -- depth maps ----------------------------------------------------------------


def write_depth_map(dm: DepthMap, path) -> None:
    """Depth in millimetres, 0 for invalid pixels."""
    d = np.where(dm.valid, dm.depth, 0.0)
    if np.any(d > DEPTH_MAX_M + 5e-4):
        raise RangeError(f"depth {d.max():.3f} m exceeds {DEPTH_MAX_M} m")
    mm = np.rint(d * 1000.0)
    if np.any(dm.valid & (mm == 0)):
        raise RangeError("valid depth below 0.5 mm would be stored as invalid")
    atomic_write_bytes(path, _encode_png(mm.astype(np.uint16)))


def read_depth_map(path) -> DepthMap:
    arr = _decode_png(path)
    if arr.dtype != np.uint16 or arr.ndim != 2:
        raise FormatError(f"{path}: expected a 16-bit single-channel PNG, got {arr.dtype} {arr.shape}")
    return DepthMap(arr.astype(float) / 1000.0)


# -- masks and images ------------------------------------------------------------


def write_mask(mask, path) -> None:
    m = np.asarray(getattr(mask, "mask", mask), dtype=bool)
    atomic_write_bytes(path, _encode_png(np.where(m, 255, 0).astype(np.uint8)))


def read_mask(path) -> PlaneMask:
    arr = _decode_png(path)
    if arr.dtype != np.uint8 or arr.ndim != 2:
        raise FormatError(f"{path}: expected an 8-bit single-channel PNG, got {arr.dtype} {arr.shape}")
    return PlaneMask(arr >= 128)


def write_image(img, path) -> None:
    """Float images in [0, 1] are stored as 16-bit RGB; integer images as-is."""
    img = np.asarray(img)
    if np.issubdtype(img.dtype, np.floating):
        img = np.rint(np.clip(img, 0.0, 1.0) * U16).astype(np.uint16)
    atomic_write_bytes(path, _encode_png(img))


def read_image(path) -> np.ndarray:
    """Float image in [0, 1]."""
    arr = _decode_png(path)
    return arr.astype(float) / np.iinfo(arr.dtype).max


# -- canonical JSON ----------------------------------------------------------------


class ExactFloats(list):
    """List of floats written at full round-trip precision instead of ``%.9g``."""


def _fmt_float(x: float, exact: bool = False) -> str:
    if not np.isfinite(x):
        raise ValidationError(f"non-finite number {x} cannot be serialized")
    text = repr(x) if exact else "%.9g" % x
    # keep floats recognisable as floats after a round trip
    if not any(ch in text for ch in ".en"):
        text += ".0"
    return text


def _dump(obj, indent: str) -> str:
    inner = indent + "  "
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = sorted((str(k), v) for k, v in obj.items())
        body = ",\n".join(f"{inner}{json.dumps(k)}: {_dump(v, inner)}" for k, v in items)
        return "{\n" + body + "\n" + indent + "}"
    if isinstance(obj, ExactFloats):
        return "[\n" + ",\n".join(inner + _fmt_float(float(v), True) for v in obj) + "\n" + indent + "]"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        return "[\n" + ",\n".join(inner + _dump(v, inner) for v in obj) + "\n" + indent + "]"
    if obj is None or isinstance(obj, (bool, np.bool_)):
        return json.dumps(None if obj is None else bool(obj))
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def canonical_json(obj) -> str:
    """Sorted keys, two-space indent, floats as ``%.9g``, trailing newline."""
    return _dump(obj, "") + "\n"


def write_json(obj, path) -> None:
    atomic_write_bytes(path, canonical_json(obj).encode("utf-8"))


def read_json(path):
    try:
        return json.loads(_read_bytes(path).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc


def _check_keys(d, required, optional=(), where=""):
    if not isinstance(d, dict):
        raise SchemaError(where or "$", "expected an object")
    for key in required:
        if key not in d:
            raise SchemaError(f"{where}{key}", "missing field")
    extra = sorted(set(d) - set(required) - set(optional))
    if extra:
        raise SchemaError(f"{where}{extra[0]}", "unknown field")


def _number(d, key, where="", integer=False):
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise SchemaError(f"{where}{key}", "expected a number")
    if integer and (not float(v).is_integer()):
        raise SchemaError(f"{where}{key}", "expected an integer")
    return int(v) if integer else float(v)


INTRINSICS_KEYS = ("fx", "fy", "cx", "cy", "width", "height")


def intrinsics_from_dict(d) -> CameraIntrinsics:
    _check_keys(d, INTRINSICS_KEYS)
    vals = {k: _number(d, k, integer=k in ("width", "height")) for k in INTRINSICS_KEYS}
    return CameraIntrinsics(**vals)


def read_intrinsics(path) -> CameraIntrinsics:
    return intrinsics_from_dict(read_json(path))


def write_intrinsics(K: CameraIntrinsics, path) -> None:
    write_json(K.to_dict(), path)


def histogram_to_dict(Q: SphericalHistogram) -> dict:
    return {
        "n_theta": Q.binning.n_theta,
        "n_phi": Q.binning.n_phi,
        "floor": Q.floor,
        # full precision keeps the unit-sum invariant through a round trip
        "mass": ExactFloats(Q.mass.reshape(-1).tolist()),
    }


def histogram_from_dict(d) -> SphericalHistogram:
    _check_keys(d, ("n_theta", "n_phi", "floor", "mass"))
    n_theta = _number(d, "n_theta", integer=True)
    n_phi = _number(d, "n_phi", integer=True)
    floor = _number(d, "floor")
    mass = d["mass"]
    if not isinstance(mass, list):
        raise SchemaError("mass", "expected a list")
    for i, v in enumerate(mass):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise SchemaError(f"mass[{i}]", "expected a number")
    if len(mass) != n_theta * n_phi:
        raise ValidationError(f"mass has {len(mass)} entries, expected {n_theta * n_phi}")
    mass = np.array(mass, dtype=float)
    total = mass.sum()
    if abs(total - 1.0) > 1e-6:
        raise ValidationError(f"mass sums to {total}, expected 1")
    if abs(total - 1.0) > 1e-12:
        mass = mass / total  # hand-written files with rounded masses
    try:
        return SphericalHistogram(Binning(n_theta, n_phi), mass, floor)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc


def read_histogram(path) -> SphericalHistogram:
    return histogram_from_dict(read_json(path))


def write_histogram(Q: SphericalHistogram, path) -> None:
    write_json(histogram_to_dict(Q), path)


SUMMARY_KEYS = ("mean", "median", "rmse") + tuple(
    "p" + f"{t:g}".replace(".", "_") for t in THRESHOLDS_DEG
) + ("count",)


def summary_from_dict(d) -> EvalSummary:
    _check_keys(d, SUMMARY_KEYS)
    vals = {k: _number(d, k, integer=k == "count") for k in SUMMARY_KEYS}
    below = tuple(vals[k] for k in SUMMARY_KEYS[3:-1])
    if any(not 0.0 <= b <= 1.0 for b in below) or vals["count"] < 1:
        raise ValidationError("fractions must lie in [0, 1] and count must be positive")
    return EvalSummary(vals["mean"], vals["median"], vals["rmse"], below, vals["count"])


def read_summary(path) -> EvalSummary:
    return summary_from_dict(read_json(path))


def write_summary(s: EvalSummary, path) -> None:
    write_json(s.to_dict(), path)


def summary_row(s: EvalSummary | None) -> list[str]:
    """CSV cells in ``SUMMARY_KEYS`` order; empty cells when ``s`` is None."""
    if s is None:
        return [""] * len(SUMMARY_KEYS)
    d = s.to_dict()
    return [str(d[k]) if k == "count" else "%.9g" % d[k] for k in SUMMARY_KEYS]


def write_csv(header, rows, path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def result_from_dict(d) -> RectifierResult:
    _check_keys(d, ("e_star", "objective_trace", "converged"))
    e = d["e_star"]
    if not isinstance(e, list) or len(e) != 3:
        raise SchemaError("e_star", "expected 3 numbers")
    if not isinstance(d["converged"], bool):
        raise SchemaError("converged", "expected a boolean")
    return RectifierResult(np.array(e, dtype=float), [float(v) for v in d["objective_trace"]], d["converged"])


def read_result(path) -> RectifierResult:
    return result_from_dict(read_json(path))


def write_result(r: RectifierResult, path) -> None:
    write_json(r.to_dict(), path)
