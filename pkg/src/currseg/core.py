"""Rasters, prompt geometry, contours, overlap metrics, losses and NMS.

Conventions used throughout the package:

* Images are float arrays of shape ``(H, W)`` or ``(H, W, 3)`` with values in
  ``[0, 1]``; binary masks are ``bool`` arrays of shape ``(H, W)``; soft masks
  are float arrays of shape ``(H, W)`` with values in ``[0, 1]``.
* Coordinates are continuous: pixel ``(row, col)`` covers ``[col, col + 1) x
  [row, row + 1)`` and its center sits at ``(col + 0.5, row + 0.5)``.  Boxes use
  the same frame, so a box's area is ``(x2 - x1) * (y2 - y1)`` with no ``+1``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from scipy import ndimage
from skimage import draw, measure

# 4-connectivity for foreground components.
FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


class ShapeMismatchError(ValueError):
    """Raised when two rasters that must share dimensions do not."""


class PromptError(ValueError):
    """Raised for malformed, empty or out-of-bounds prompts."""


# --------------------------------------------------------------------------- rasters


def as_image(pixels) -> np.ndarray:
    """Validate and return an image as a float64 array."""
    img = np.asarray(pixels, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] != 3):
        raise ValueError(f"image must be (H, W) or (H, W, 3), got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError("image must be at least 1x1")
    if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image intensities must lie in [0, 1]")
    return img


def intensity(image: np.ndarray) -> np.ndarray:
    """Channel-averaged intensity of an image."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        return image.mean(axis=2)
    return image


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "masks") -> None:
    if a.shape[:2] != b.shape[:2]:
        raise ShapeMismatchError(f"{what} differ in size: {a.shape[:2]} vs {b.shape[:2]}")


def connected_components(mask: np.ndarray) -> Tuple[np.ndarray, int]:
    """4-connected component labelling; returns ``(labels, count)``."""
    labels, n = ndimage.label(np.asarray(mask, dtype=bool), structure=FOUR_CONNECTED)
    return labels, int(n)


def mask_union(masks: Sequence[np.ndarray]) -> np.ndarray:
    """Pixelwise OR of a nonempty list of equally sized masks."""
    if len(masks) == 0:
        raise ValueError("mask_union needs at least one mask")
    out = np.asarray(masks[0], dtype=bool).copy()
    for m in masks[1:]:
        m = np.asarray(m, dtype=bool)
        check_same_shape(out, m)
        out |= m
    return out


def rasterize_polygon(vertices: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    """Mask of pixels whose centers fall inside the polygon given as (x, y) vertices."""
    v = np.asarray(vertices, dtype=np.float64)
    rr, cc = draw.polygon(v[:, 1] - 0.5, v[:, 0] - 0.5, shape=shape)
    mask = np.zeros(shape, dtype=bool)
    mask[rr, cc] = True
    return mask


def disk_mask(shape: Tuple[int, int], x: float, y: float, radius: float) -> np.ndarray:
    """Pixels whose centers lie within ``radius`` of ``(x, y)``."""
    h, w = shape
    cols = np.arange(w) + 0.5
    rows = np.arange(h) + 0.5
    d2 = (cols[None, :] - x) ** 2 + (rows[:, None] - y) ** 2
    return d2 <= radius * radius


# --------------------------------------------------------------------------- prompts


@dataclass(frozen=True)
class PointPrompt:
    x: float
    y: float
    label: int = 0

    def __post_init__(self) -> None:
        if self.label not in (0, 1):
            raise PromptError(f"point label must be 0 or 1, got {self.label!r}")
        if not (np.isfinite(self.x) and np.isfinite(self.y)):
            raise PromptError("point coordinates must be finite")

    def in_bounds(self, width: int, height: int) -> bool:
        return 0.0 <= self.x < width and 0.0 <= self.y < height

    def to_dict(self) -> dict:
        return {"x": float(self.x), "y": float(self.y), "label": int(self.label)}


@dataclass(frozen=True)
class BoxPrompt:
    x1: float
    y1: float
    x2: float
    y2: float
    score: float = 1.0

    def __post_init__(self) -> None:
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise PromptError(f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2})")
        if not 0.0 <= self.score <= 1.0:
            raise PromptError(f"box score must lie in [0, 1], got {self.score}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def center(self) -> Tuple[float, float]:
        return 0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2)

    def clamped(self, width: int, height: int) -> "BoxPrompt":
        """Clip to the image frame. Raises PromptError if nothing is left."""
        return BoxPrompt(
            min(max(self.x1, 0.0), width),
            min(max(self.y1, 0.0), height),
            min(max(self.x2, 0.0), width),
            min(max(self.y2, 0.0), height),
            self.score,
        )

    def to_dict(self) -> dict:
        return {
            "x1": float(self.x1),
            "y1": float(self.y1),
            "x2": float(self.x2),
            "y2": float(self.y2),
            "score": float(self.score),
        }


def box_iou(a: BoxPrompt, b: BoxPrompt) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def nms(boxes: Sequence[BoxPrompt], iou_threshold: float) -> List[BoxPrompt]:
    """Greedy non-maximum suppression.

    Boxes are visited by descending score (ties: smaller ``x1``, then smaller
    ``y1``); a box is dropped when its IoU with an already kept box exceeds
    ``iou_threshold``.  The survivors come back in visiting order.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
    if not boxes:
        return []
    order = sorted(boxes, key=lambda b: (-b.score, b.x1, b.y1))
    coords = np.array([[b.x1, b.y1, b.x2, b.y2] for b in order])
    areas = (coords[:, 2] - coords[:, 0]) * (coords[:, 3] - coords[:, 1])
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for i in range(len(order)):
        if not alive[i]:
            continue
        keep.append(order[i])
        rest = np.arange(i + 1, len(order))
        rest = rest[alive[rest]]
        if rest.size == 0:
            continue
        iw = np.minimum(coords[i, 2], coords[rest, 2]) - np.maximum(coords[i, 0], coords[rest, 0])
        ih = np.minimum(coords[i, 3], coords[rest, 3]) - np.maximum(coords[i, 1], coords[rest, 1])
        inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
        ious = inter / (areas[i] + areas[rest] - inter)
        alive[rest[ious > iou_threshold]] = False
    return keep


# --------------------------------------------------------------------------- contours


@dataclass(frozen=True)
class Contour:
    """Closed polygon in (x, y) image coordinates; the last vertex joins the first."""

    points: np.ndarray

    @property
    def perimeter(self) -> float:
        seg = np.roll(self.points, -1, axis=0) - self.points
        return float(np.hypot(seg[:, 0], seg[:, 1]).sum())

    def __len__(self) -> int:
        return len(self.points)


def _signed_area(pts: np.ndarray) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _normalize_contour(pts: np.ndarray) -> np.ndarray:
    # drop the repeated closing vertex and consecutive duplicates
    if len(pts) > 1 and np.allclose(pts[0], pts[-1]):
        pts = pts[:-1]
    keep = np.ones(len(pts), dtype=bool)
    keep[1:] = np.any(np.diff(pts, axis=0) != 0, axis=1)
    pts = pts[keep]
    # clockwise on screen (y grows downward) == positive shoelace area here
    if _signed_area(pts) < 0:
        pts = pts[::-1]
    start = np.lexsort((pts[:, 0], pts[:, 1]))[0]
    return np.roll(pts, -start, axis=0)


def extract_contours(mask: np.ndarray) -> List[Contour]:
    """Outer boundaries of the 4-connected foreground components.

    Marching squares at the 0.5 iso-level over pixel centers, with background
    treated as 8-connected so that the foreground reads as 4-connected.  An
    axis-aligned pixel edge therefore lands on the pixel boundary, and each
    convex corner is cut by a half-pixel diagonal (a filled ``s x s`` square
    has perimeter ``4 (s - 1) + 2 sqrt(2)``).  Holes are ignored.  Each contour
    runs clockwise on screen starting from its topmost (then leftmost) vertex;
    the list is ordered by descending perimeter.
    """
    mask = np.asarray(mask, dtype=bool)
    labels, n = connected_components(mask)
    contours = []
    for sl, idx in zip(ndimage.find_objects(labels), range(1, n + 1)):
        r0, c0 = sl[0].start, sl[1].start
        comp = labels[sl] == idx
        comp = ndimage.binary_fill_holes(comp, structure=EIGHT_CONNECTED)
        padded = np.pad(comp, 1).astype(np.float64)
        found = measure.find_contours(padded, 0.5, fully_connected="low")
        if not found:
            continue
        rc = max(found, key=len)
        # (row, col) in padded frame -> (x, y) continuous image coordinates
        pts = np.column_stack([rc[:, 1] + c0 - 1 + 0.5, rc[:, 0] + r0 - 1 + 0.5])
        contours.append(Contour(_normalize_contour(pts)))
    contours.sort(key=lambda c: (-c.perimeter, c.points[0, 1], c.points[0, 0]))
    return contours


# --------------------------------------------------------------------------- metrics


@dataclass(frozen=True)
class MetricsRecord:
    dice: float
    iou: float


def _overlap(a: np.ndarray, b: np.ndarray) -> Tuple[int, int, int]:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    check_same_shape(a, b)
    return int(np.count_nonzero(a & b)), int(np.count_nonzero(a)), int(np.count_nonzero(b))


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """``2|A&B| / (|A| + |B|)``; two empty masks score 1.0."""
    inter, na, nb = _overlap(a, b)
    if na + nb == 0:
        return 1.0
    return 2.0 * inter / (na + nb)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """``|A&B| / |A|B|``; two empty masks score 1.0."""
    inter, na, nb = _overlap(a, b)
    union = na + nb - inter
    if union == 0:
        return 1.0
    return inter / union


def score(pred: np.ndarray, gt: np.ndarray) -> MetricsRecord:
    return MetricsRecord(dice=dice(pred, gt), iou=iou(pred, gt))


# --------------------------------------------------------------------------- losses


def _loss_inputs(pred, gt) -> Tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    check_same_shape(p, g, "prediction and ground truth")
    return p, g


def dice_loss(pred: np.ndarray, gt: np.ndarray, smooth: float = 1.0) -> float:
    """Soft Dice loss ``1 - (2 sum(p g) + s) / (sum(p) + sum(g) + s)``."""
    p, g = _loss_inputs(pred, gt)
    if smooth < 0:
        raise ValueError("smooth must be nonnegative")
    num = 2.0 * float(np.sum(p * g)) + smooth
    den = float(np.sum(p)) + float(np.sum(g)) + smooth
    if den == 0.0:
        return 0.0
    return 1.0 - num / den


def bce_loss(pred: np.ndarray, gt: np.ndarray, clamp_eps: float = 1e-7) -> float:
    """Mean binary cross-entropy with predictions clamped to ``[eps, 1 - eps]``."""
    if not 0.0 < clamp_eps < 0.5:
        raise ValueError("clamp_eps must lie in (0, 0.5)")
    p, g = _loss_inputs(pred, gt)
    p = np.clip(p, clamp_eps, 1.0 - clamp_eps)
    return float(np.mean(-(g * np.log(p) + (1.0 - g) * np.log1p(-p))))


def bce_grad(pred: np.ndarray, gt: np.ndarray, clamp_eps: float = 1e-7) -> np.ndarray:
    """Analytic gradient of :func:`bce_loss` w.r.t. each unclamped prediction."""
    p, g = _loss_inputs(pred, gt)
    grad = (p - g) / (p * (1.0 - p)) / p.size
    inside = (p > clamp_eps) & (p < 1.0 - clamp_eps)
    return np.where(inside, grad, 0.0)


def combined_loss(pred: np.ndarray, gt: np.ndarray, smooth: float = 1.0,
                  clamp_eps: float = 1e-7) -> float:
    """Dice + BCE, the training objective for box-prompted segmentation."""
    return dice_loss(pred, gt, smooth) + bce_loss(pred, gt, clamp_eps)


def boxes_from_mask(mask: np.ndarray) -> List[BoxPrompt]:
    """Tight box around each 4-connected component of a mask."""
    labels, _ = connected_components(mask)
    out = []
    for sl in ndimage.find_objects(labels):
        if sl is None:
            continue
        out.append(BoxPrompt(float(sl[1].start), float(sl[0].start), float(sl[1].stop), float(sl[0].stop), 1.0))
    return out



def rle_encode(mask: np.ndarray) -> dict:
    """Row-major run lengths, starting with a (possibly empty) background run."""
    flat = np.asarray(mask, dtype=bool).ravel()
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        counts = [0] + counts
    return {"size": list(np.asarray(mask).shape), "counts": [int(c) for c in counts]}


def rle_decode(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    values = np.zeros(len(rle["counts"]), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, rle["counts"])
    if flat.size != h * w:
        raise ValueError(f"run lengths cover {flat.size} pixels, expected {h * w}")
    return flat.reshape(h, w)
