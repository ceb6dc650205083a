"""Grayscale PNG export of parameter and uncertainty maps.

Each channel kind has a fixed documented intensity window so exported
images are comparable across runs: t1 0-3 s, pd 0-1.2 a.u., b 0-2.
Uncertainty maps are auto-windowed to their own 99th percentile.  The
window used is recorded in PNG text metadata (keys ``window_min``,
``window_max``, ``kind``).
"""

from __future__ import annotations

import numpy as np
from PIL import Image
from PIL.PngImagePlugin import PngInfo

WINDOWS = {
    "t1": (0.0, 3.0),
    "pd": (0.0, 1.2),
    "b": (0.0, 2.0),
}


def window_for(kind: str, array=None) -> tuple[float, float]:
    if kind in WINDOWS:
        return WINDOWS[kind]
    if kind == "uncertainty":
        hi = float(np.percentile(array, 99)) if array is not None else 1.0
        return (0.0, hi if hi > 0 else 1.0)
    raise ValueError(f"unknown channel kind {kind!r}; expected one of "
                     f"{sorted(WINDOWS) + ['uncertainty']}")


def export_png(array, path, kind: str = None, window: tuple = None) -> str:
    """Write a 2-D array as an 8-bit grayscale PNG with its window recorded."""
    array = np.asarray(array, dtype=np.float64)
    if array.ndim != 2:
        raise ValueError(f"PNG export needs a 2-D array, got shape {array.shape}")
    if window is None:
        if kind is None:
            raise ValueError("need either an explicit window or a channel kind")
        window = window_for(kind, array)
    lo, hi = window
    if hi <= lo:
        raise ValueError(f"window must have max > min, got ({lo}, {hi})")
    scaled = np.clip((array - lo) / (hi - lo), 0.0, 1.0)
    img = Image.fromarray(np.round(255.0 * scaled).astype(np.uint8), mode="L")
    info = PngInfo()
    info.add_text("window_min", repr(float(lo)))
    info.add_text("window_max", repr(float(hi)))
    if kind is not None:
        info.add_text("kind", kind)
    img.save(path, pnginfo=info)
    return str(path)


def export_quantmap_pngs(qmap, prefix) -> list:
    """Write t1/pd/b PNGs as ``<prefix>_{t1,pd,b}.png``; returns the paths."""
    written = []
    for kind, channel in (("t1", qmap.t1_map), ("pd", qmap.pd_map), ("b", qmap.b_map)):
        written.append(export_png(channel, f"{prefix}_{kind}.png", kind=kind))
    return written


def read_png_window(path) -> dict:
    """Window metadata recorded by :func:`export_png` (for verification)."""
    with Image.open(path) as img:
        text = dict(getattr(img, "text", {}))
    out = {}
    if "window_min" in text:
        out["window_min"] = float(text["window_min"])
    if "window_max" in text:
        out["window_max"] = float(text["window_max"])
    if "kind" in text:
        out["kind"] = text["kind"]
    return out
