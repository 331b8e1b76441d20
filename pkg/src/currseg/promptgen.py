"""Automatic prompt generation: box proposals and edge points.

The built-in generators are desk-scale stand-ins for a fine-tuned detector and
a keypoint network.  Real detector output can be fed in through JSON sidecars
(``<image_stem>.boxes.json`` / ``<image_stem>.points.json``).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu

from .core import (
    BoxPrompt,
    Contour,
    PointPrompt,
    PromptError,
    check_same_shape,
    connected_components,
    extract_contours,
    intensity,
)

BOX_METHODS = ("builtin-threshold", "external-json")
POLARITIES = ("dark-on-bright", "bright-on-dark")


class SidecarNotFoundError(FileNotFoundError):
    pass


class SchemaError(ValueError):
    pass


class OutOfBoundsError(ValueError):
    pass


@dataclass(frozen=True)
class BoxProposerConfig:
    method: str = "builtin-threshold"
    # forwarded to external detectors only
    text_label: str = "lesion"
    polarity: str = "dark-on-bright"
    min_area: int = 30
    smoothing_sigma: float = 1.5
    nms_iou: float = 0.5
    max_boxes: int = 10
    ring_width: int = 3
    sidecar_path: Optional[str] = None

    def __post_init__(self) -> None:
        if self.method not in BOX_METHODS:
            raise ValueError(f"method must be one of {BOX_METHODS}, got {self.method!r}")
        if self.polarity not in POLARITIES:
            raise ValueError(f"polarity must be one of {POLARITIES}, got {self.polarity!r}")
        if self.min_area < 1:
            raise ValueError("min_area must be >= 1")
        if not 0 < self.nms_iou <= 1:
            raise ValueError("nms_iou must lie in (0, 1]")
        if self.max_boxes < 1:
            raise ValueError("max_boxes must be >= 1")
        if self.smoothing_sigma < 0 or self.ring_width < 1:
            raise ValueError("smoothing_sigma must be >= 0 and ring_width >= 1")


@dataclass(frozen=True)
class EdgePointConfig:
    k: int = 8
    label: int = 0
    snap_radius: float = 4.0
    min_perimeter: float = 8.0
    per_component: bool = True
    gradient_sigma: float = 1.0
    # half-width (in px of arc length) of the chord used to estimate normals
    normal_span: float = 2.0
    # distance from the located edge to the emitted point: outward for
    # negative points, inward for positive ones
    edge_offset: float = 3.0

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.label not in (0, 1):
            raise ValueError("label must be 0 or 1")
        if self.snap_radius < 0 or self.min_perimeter < 0 or self.edge_offset < 0:
            raise ValueError("snap_radius, min_perimeter and edge_offset must be >= 0")
        if self.gradient_sigma <= 0 or self.normal_span <= 0:
            raise ValueError("gradient_sigma and normal_span must be > 0")


# --------------------------------------------------------------------------- boxes


def propose_boxes(image: np.ndarray, cfg: BoxProposerConfig) -> List[BoxPrompt]:
    """Candidate lesion boxes, best score first; NMS is left to the caller."""
    h, w = np.asarray(image).shape[:2]
    if cfg.method == "external-json":
        if cfg.sidecar_path is None:
            raise SidecarNotFoundError("external-json box method needs a sidecar_path")
        boxes = load_boxes_json(cfg.sidecar_path, image_size=(h, w))
        return _rank(boxes)[: cfg.max_boxes]

    gray = intensity(image)
    smooth = ndimage.gaussian_filter(gray, cfg.smoothing_sigma, mode="nearest") if cfg.smoothing_sigma > 0 else gray
    lo, hi = float(smooth.min()), float(smooth.max())
    if hi - lo < 1e-9:
        return []
    t = threshold_otsu(smooth)
    fg = smooth < t if cfg.polarity == "dark-on-bright" else smooth > t
    labels, _ = connected_components(fg)
    boxes = []
    for idx, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        comp = labels[sl] == idx
        if comp.sum() < cfg.min_area:
            continue
        s = _contrast_score(smooth, labels, idx, sl, cfg.ring_width, hi - lo)
        boxes.append(BoxPrompt(float(sl[1].start), float(sl[0].start), float(sl[1].stop), float(sl[0].stop), s))
    return _rank(boxes)[: cfg.max_boxes]


def _rank(boxes: List[BoxPrompt]) -> List[BoxPrompt]:
    return sorted(boxes, key=lambda b: (-b.score, b.x1, b.y1))


def _contrast_score(smooth, labels, idx, sl, ring, span) -> float:
    h, w = labels.shape
    r0, r1 = max(sl[0].start - ring, 0), min(sl[0].stop + ring, h)
    c0, c1 = max(sl[1].start - ring, 0), min(sl[1].stop + ring, w)
    comp = labels[r0:r1, c0:c1] == idx
    grown = ndimage.binary_dilation(comp, iterations=ring)
    ring_px = grown & ~comp
    inner = smooth[r0:r1, c0:c1][comp].mean()
    if not ring_px.any():
        return 0.0
    outer = smooth[r0:r1, c0:c1][ring_px].mean()
    return float(np.clip(abs(outer - inner) / span, 0.0, 1.0))


# --------------------------------------------------------------------------- points


def _arclength_positions(pts: np.ndarray, targets: np.ndarray) -> np.ndarray:
    closed = np.vstack([pts, pts[:1]])
    seg = np.diff(closed, axis=0)
    cum = np.concatenate([[0.0], np.cumsum(np.hypot(seg[:, 0], seg[:, 1]))])
    targets = np.mod(targets, cum[-1])
    x = np.interp(targets, cum, closed[:, 0])
    y = np.interp(targets, cum, closed[:, 1])
    return np.column_stack([x, y])


def _outward_normals(contour: Contour, s: np.ndarray, span: float) -> np.ndarray:
    ahead = _arclength_positions(contour.points, s + span)
    behind = _arclength_positions(contour.points, s - span)
    t = ahead - behind
    t /= np.maximum(np.hypot(t[:, 0], t[:, 1]), 1e-12)[:, None]
    # contours run clockwise on screen, so the exterior is on the left
    return np.column_stack([t[:, 1], -t[:, 0]])


def _snap(points: np.ndarray, normals: np.ndarray, grad: np.ndarray, radius: float) -> np.ndarray:
    h, w = grad.shape
    n_steps = int(np.floor(radius / 0.25))
    steps = np.arange(1, n_steps + 1) * 0.25
    # 0, +d, -d, +2d, ... so that ties resolve to the nearest offset
    offsets = np.concatenate([[0.0], np.column_stack([steps, -steps]).ravel()])
    out = points.copy()
    for i, (p, n) in enumerate(zip(points, normals)):
        q = p[None, :] + offsets[:, None] * n[None, :]
        q[:, 0] = np.clip(q[:, 0], 0.0, w)
        q[:, 1] = np.clip(q[:, 1], 0.0, h)
        vals = ndimage.map_coordinates(grad, [q[:, 1] - 0.5, q[:, 0] - 0.5], order=1, mode="nearest")
        out[i] = q[int(np.argmax(vals))]
    return out


def sample_edge_points(coarse: np.ndarray, image: np.ndarray, cfg: EdgePointConfig) -> List[PointPrompt]:
    """Equally spaced edge points on the coarse mask's outer contours.

    Sampling starts at each contour's topmost vertex.  With ``snap_radius > 0``
    each point slides along its outward normal to the strongest image gradient
    within ``+-snap_radius``.  All points carry ``cfg.label``.
    """
    coarse = np.asarray(coarse, dtype=bool)
    check_same_shape(coarse, np.asarray(image), "coarse mask and image")
    h, w = coarse.shape
    contours = [c for c in extract_contours(coarse) if c.perimeter >= cfg.min_perimeter]
    if not contours:
        return []
    if not cfg.per_component:
        contours = contours[:1]
    grad = None
    if cfg.snap_radius > 0:
        grad = ndimage.gaussian_gradient_magnitude(intensity(image), cfg.gradient_sigma, mode="nearest")
    out: List[PointPrompt] = []
    for c in contours:
        s = np.arange(cfg.k) * (c.perimeter / cfg.k)
        pts = _arclength_positions(c.points, s)
        if grad is not None or cfg.edge_offset > 0:
            normals = _outward_normals(c, s, cfg.normal_span)
            if grad is not None:
                pts = _snap(pts, normals, grad, cfg.snap_radius)
            sign = -1.0 if cfg.label == 1 else 1.0
            pts = pts + sign * cfg.edge_offset * normals
        for x, y in pts:
            out.append(PointPrompt(_inside(x, w), _inside(y, h), cfg.label))
    return out


def _inside(v: float, size: int) -> float:
    return float(min(max(v, 0.0), np.nextafter(float(size), 0.0)))


# --------------------------------------------------------------------------- sidecars


def sidecar_path(image_path, kind: str) -> Path:
    """``<image_stem>.boxes.json`` or ``<image_stem>.points.json`` next to the image."""
    if kind not in ("boxes", "points"):
        raise ValueError("kind must be 'boxes' or 'points'")
    p = Path(image_path)
    return p.with_name(f"{p.stem}.{kind}.json")


def _load_array(path) -> list:
    path = Path(path)
    if not path.is_file():
        raise SidecarNotFoundError(f"sidecar {path} not found")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, list):
        raise SchemaError(f"{path}: top level must be an array")
    return data


def _number(entry: dict, key: str, path, i: int) -> float:
    v = entry.get(key)
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not np.isfinite(v):
        raise SchemaError(f"{path}[{i}]: {key!r} must be a finite number")
    return float(v)


def load_boxes_json(path, image_size: Optional[Tuple[int, int]] = None, strict: bool = False) -> List[BoxPrompt]:
    """Parse a boxes sidecar; out-of-frame boxes are clamped unless ``strict``."""
    data = _load_array(path)
    out = []
    for i, entry in enumerate(data):
        if not isinstance(entry, dict):
            raise SchemaError(f"{path}[{i}]: entries must be objects")
        unknown = set(entry) - {"x1", "y1", "x2", "y2", "score", "text"}
        if unknown:
            raise SchemaError(f"{path}[{i}]: unknown keys {sorted(unknown)}")
        x1, y1, x2, y2 = (_number(entry, k, path, i) for k in ("x1", "y1", "x2", "y2"))
        sc = _number(entry, "score", path, i) if "score" in entry else 1.0
        if "text" in entry and not isinstance(entry["text"], str):
            raise SchemaError(f"{path}[{i}]: 'text' must be a string")
        if not (x1 < x2 and y1 < y2) or not 0 <= sc <= 1:
            raise SchemaError(f"{path}[{i}]: need x1 < x2, y1 < y2 and score in [0, 1]")
        if image_size is not None:
            h, w = image_size
            outside = x1 < 0 or y1 < 0 or x2 > w or y2 > h
            if outside and strict:
                raise OutOfBoundsError(f"{path}[{i}]: box exceeds {w}x{h} image")
            try:
                box = BoxPrompt(x1, y1, x2, y2, sc).clamped(w, h)
            except PromptError as exc:
                raise OutOfBoundsError(f"{path}[{i}]: box lies outside {w}x{h} image") from exc
        else:
            box = BoxPrompt(x1, y1, x2, y2, sc)
        out.append(box)
    return out


def load_points_json(path, image_size: Optional[Tuple[int, int]] = None, strict: bool = False) -> List[PointPrompt]:
    """Parse a points sidecar; out-of-frame points are clamped unless ``strict``."""
    data = _load_array(path)
    out = []
    for i, entry in enumerate(data):
        if not isinstance(entry, dict):
            raise SchemaError(f"{path}[{i}]: entries must be objects")
        unknown = set(entry) - {"x", "y", "label"}
        if unknown:
            raise SchemaError(f"{path}[{i}]: unknown keys {sorted(unknown)}")
        x, y = _number(entry, "x", path, i), _number(entry, "y", path, i)
        label = entry.get("label")
        if isinstance(label, bool) or label not in (0, 1):
            raise SchemaError(f"{path}[{i}]: 'label' must be 0 or 1, got {label!r}")
        if image_size is not None:
            h, w = image_size
            if not (0 <= x < w and 0 <= y < h):
                if strict:
                    raise OutOfBoundsError(f"{path}[{i}]: point ({x}, {y}) outside {w}x{h} image")
                x, y = _inside(x, w), _inside(y, h)
        out.append(PointPrompt(x, y, int(label)))
    return out


def write_boxes_json(path, boxes, text_label: Optional[str] = None) -> Path:
    rows = []
    for b in boxes:
        d = b.to_dict()
        if text_label is not None:
            d["text"] = text_label
        rows.append(d)
    path = Path(path)
    path.write_text(json.dumps(rows, indent=2))
    return path


def write_points_json(path, points) -> Path:
    path = Path(path)
    path.write_text(json.dumps([p.to_dict() for p in points], indent=2))
    return path
