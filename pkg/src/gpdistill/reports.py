"""Report files: training-trace CSV, canonical JSON, and binary PGM images.

Identical inputs must produce byte-identical files, so nothing here writes
timestamps, floats are rendered with repr (shortest exact round-trip), JSON
keys are sorted, and non-finite reals become JSON null.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .distill import TrainTrace
from .errors import ParameterError, ShapeError

__all__ = [
    "canonical_json",
    "image_grid",
    "write_json_report",
    "write_pgm",
    "write_trace_csv",
]


def _fmt(x: float) -> str:
    """Shortest decimal string that round-trips the float64 exactly."""
    return repr(float(x))


def write_trace_csv(path, trace: TrainTrace, n_heads: int) -> None:
    """Schema: ``iter,loss,r_head_0..r_head_{L-1}``, one row per iteration.

    Pearson columns carry the most recent probe value forward between
    probes; iterations before the first probe (or a run without probes)
    show nan.  Wall-clock stamps are never written.
    """
    header = "iter,loss," + ",".join(f"r_head_{h}" for h in range(n_heads))
    lines = [header]
    probe_at = dict(zip(trace.probe_iters, trace.probe_pearson))
    current = [float("nan")] * n_heads
    for i, loss in enumerate(trace.losses, start=1):
        if i in probe_at:
            current = probe_at[i]
        row = [str(i), _fmt(loss)] + [_fmt(r) for r in current]
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def _jsonable(obj):
    """Recursively convert to plain JSON types; non-finite floats -> null."""
    if obj is None or isinstance(obj, (bool, str, int)):
        return obj
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, dict):
        out = {}
        for k, v in obj.items():
            if not isinstance(k, str):
                raise ParameterError("JSON report keys must be strings")
            out[k] = _jsonable(v)
        return out
    raise ParameterError(f"cannot serialize {type(obj).__name__} into a report")


def canonical_json(obj: dict) -> str:
    """Sorted-key JSON text with a schema version stamped at the top level."""
    if not isinstance(obj, dict):
        raise ParameterError("a JSON report must be a mapping at top level")
    body = dict(obj)
    body.setdefault("schema", 1)
    return json.dumps(_jsonable(body), sort_keys=True, indent=2,
                      allow_nan=False) + "\n"


def write_json_report(path, obj: dict) -> None:
    Path(path).write_text(canonical_json(obj))


def write_pgm(path, array: np.ndarray) -> tuple[float, float]:
    """Binary PGM (P5, maxval 255), min-max scaled per image.

    Returns the (low, high) scale actually used so the caller can record it
    next to the image; a constant image maps to all zeros.
    """
    a = np.asarray(array, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError("write_pgm: need a 2-D array")
    if not np.all(np.isfinite(a)):
        raise ParameterError("write_pgm: non-finite pixels")
    lo = float(a.min())
    hi = float(a.max())
    if hi > lo:
        scaled = np.rint((a - lo) / (hi - lo) * 255.0)
    else:
        scaled = np.zeros_like(a)
    h, w = a.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + scaled.astype(np.uint8).tobytes())
    return lo, hi


def image_grid(images: list[np.ndarray], pad: int = 1,
               pad_value: float = 0.0) -> np.ndarray:
    """Lay out equal-shape 2-D images in one row, separated by padding."""
    if not images:
        raise ParameterError("image_grid: need at least one image")
    shapes = {im.shape for im in images}
    if len(shapes) != 1 or images[0].ndim != 2:
        raise ShapeError("image_grid: images must share one 2-D shape")
    h, w = images[0].shape
    n = len(images)
    grid = np.full((h, n * w + (n - 1) * pad), pad_value)
    for i, im in enumerate(images):
        x0 = i * (w + pad)
        grid[:, x0:x0 + w] = im
    return grid
