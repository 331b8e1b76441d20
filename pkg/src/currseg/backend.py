"""Promptable segmenters.

The built-in backend is a seeded random walker with a screened dense prior.
Boxes, points and a soft mask prior are turned into hard seeds and a tether
term, and the unseeded pixels solve

    sum_j w_ij (u_i - u_j) + lam * (u_i - m_i) = 0

on the 4-neighbour pixel lattice with ``w_ij = exp(-beta (I_i - I_j)^2)``.
The system is symmetric positive (semi-)definite and is solved with a
Jacobi-preconditioned conjugate gradient that runs directly on the pixel grid.

All reductions in the solver are evaluated on arrays symmetrised under
horizontal and vertical flips, so mirroring the inputs mirrors the output bit
for bit.  The solver is single-threaded numpy; results are reproducible for a
fixed numpy build and floating-point mode.

:class:`ExternalSegmenter` lets a real model run behind the same interface by
exchanging a JSON prompt document and PNG masks with a subprocess or a watched
directory.
"""
from __future__ import annotations

import hashlib
import json
import os
import subprocess
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from . import pngio
from .core import (
    BoxPrompt,
    PointPrompt,
    PromptError,
    ShapeMismatchError,
    as_image,
    disk_mask,
    intensity,
)

# A disk this wide always covers the pixel containing its center.
_MIN_SEED_RADIUS = 0.7072
# Prior levels that become hard seeds when no box or positive point is present.
PRIOR_FG_LEVEL = 0.9
PRIOR_BG_LEVEL = 0.1


@dataclass(frozen=True)
class StageProfile:
    """Per-stage segmenter settings (the stand-in for a stage-tuned prompt encoder)."""

    prior_weight: float = 0.0
    box_margin: float = 5.0
    box_center_seed_radius: float = 3.0
    point_seed_radius: float = 2.0
    beta: float = 2000.0
    solver_tolerance: float = 1e-6
    solver_max_iters: int = 2000
    threshold: float = 0.5
    # Gaussian pre-smoothing of the intensity before edge weights (0 = off)
    feature_sigma: float = 0.0

    def __post_init__(self) -> None:
        if self.feature_sigma < 0:
            raise ValueError("feature_sigma must be >= 0")
        if self.prior_weight < 0:
            raise ValueError("prior_weight must be >= 0")
        if min(self.box_margin, self.box_center_seed_radius, self.point_seed_radius) < 0:
            raise ValueError("box_margin and seed radii must be >= 0")
        if not self.beta > 0:
            raise ValueError("beta must be > 0")
        if not 0 < self.solver_tolerance < 1:
            raise ValueError("solver_tolerance must lie in (0, 1)")
        if self.solver_max_iters < 1:
            raise ValueError("solver_max_iters must be >= 1")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")


def coarse_profile(**overrides) -> StageProfile:
    """Box stage: no prior tether."""
    return StageProfile(**{"prior_weight": 0.0, **overrides})


def fine_profile(**overrides) -> StageProfile:
    """Refinement stage: weak tether to the previous soft mask, edge weights on
    lightly denoised intensity, and narrow point seeds."""
    defaults = {"prior_weight": 0.05, "beta": 3000.0, "feature_sigma": 1.0, "point_seed_radius": 1.0}
    return StageProfile(**{**defaults, **overrides})


@dataclass
class PromptBundle:
    """Sparse prompts (points, boxes) plus an optional dense soft-mask prior."""

    points: Tuple[PointPrompt, ...] = ()
    boxes: Tuple[BoxPrompt, ...] = ()
    dense_prior: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.points = tuple(self.points)
        self.boxes = tuple(self.boxes)
        if self.dense_prior is not None:
            self.dense_prior = np.asarray(self.dense_prior, dtype=np.float64)

    @property
    def is_empty(self) -> bool:
        return not self.points and not self.boxes and self.dense_prior is None

    def to_dict(self) -> dict:
        return {
            "points": [p.to_dict() for p in self.points],
            "boxes": [b.to_dict() for b in self.boxes],
            "prior": self.dense_prior is not None,
        }


@dataclass(frozen=True)
class ImageFeatures:
    """Lattice edge weights; ``east[r, c]`` links (r, c)-(r, c+1), ``south`` links (r, c)-(r+1, c)."""

    east: np.ndarray
    south: np.ndarray
    beta: float
    sigma: float = 0.0

    @property
    def shape(self) -> Tuple[int, int]:
        return self.east.shape[0], self.east.shape[1] + 1


@dataclass
class SegmentationResult:
    soft: np.ndarray
    binary: np.ndarray
    solver_iters: int = 0
    solver_residual: float = 0.0
    converged: bool = True
    # unclamped solution; None when the mask came from an external model
    raw: Optional[np.ndarray] = None


def precompute_features(image: np.ndarray, profile: StageProfile) -> ImageFeatures:
    gray = intensity(as_image(image))
    if profile.feature_sigma > 0:
        gray = ndimage.gaussian_filter(gray, profile.feature_sigma, mode="nearest")
    east = np.exp(-profile.beta * (gray[:, 1:] - gray[:, :-1]) ** 2)
    south = np.exp(-profile.beta * (gray[1:, :] - gray[:-1, :]) ** 2)
    east.setflags(write=False)
    south.setflags(write=False)
    return ImageFeatures(east=east, south=south, beta=float(profile.beta), sigma=float(profile.feature_sigma))


def threshold(soft: np.ndarray, t: float) -> np.ndarray:
    if not 0 < t < 1:
        raise ValueError("threshold must lie in (0, 1)")
    return np.asarray(soft) > t


# --------------------------------------------------------------------------- seeds


def validate_prompts(prompts: PromptBundle, shape: Tuple[int, int]) -> Tuple[BoxPrompt, ...]:
    """Check a bundle against an image size; returns the boxes clamped to the frame."""
    h, w = shape
    if prompts.is_empty:
        raise PromptError("empty prompt bundle")
    for p in prompts.points:
        if not p.in_bounds(w, h):
            raise PromptError(f"point ({p.x}, {p.y}) outside {w}x{h} image")
    boxes = []
    for b in prompts.boxes:
        if b.x2 <= 0 or b.y2 <= 0 or b.x1 >= w or b.y1 >= h:
            raise PromptError(f"box {b.to_dict()} lies outside {w}x{h} image")
        boxes.append(b.clamped(w, h))
    if prompts.dense_prior is not None:
        m = prompts.dense_prior
        if m.shape != (h, w):
            raise ShapeMismatchError(f"dense prior is {m.shape}, image is {(h, w)}")
        if not np.all(np.isfinite(m)) or m.min() < 0 or m.max() > 1:
            raise PromptError("dense prior values must lie in [0, 1]")
    return tuple(boxes)


def build_seeds(shape: Tuple[int, int], prompts: PromptBundle,
                profile: StageProfile) -> Tuple[np.ndarray, np.ndarray]:
    """Foreground and background hard-seed masks for a bundle.

    Pixels outside every margin-dilated box are background; a disk at each
    box center and at each positive point is foreground; a disk at each
    negative point is background.  Without boxes or positive points, a dense
    prior contributes seeds where it is above 0.9 / below 0.1.  Background wins
    conflicts.
    """
    boxes = validate_prompts(prompts, shape)
    h, w = shape
    fg = np.zeros(shape, dtype=bool)
    bg = np.zeros(shape, dtype=bool)
    if boxes:
        cx = np.arange(w) + 0.5
        cy = np.arange(h) + 0.5
        inside = np.zeros(shape, dtype=bool)
        m = profile.box_margin
        for b in boxes:
            in_x = (cx >= b.x1 - m) & (cx <= b.x2 + m)
            in_y = (cy >= b.y1 - m) & (cy <= b.y2 + m)
            inside |= in_y[:, None] & in_x[None, :]
            bx, by = b.center
            fg |= disk_mask(shape, bx, by, max(profile.box_center_seed_radius, _MIN_SEED_RADIUS))
        bg |= ~inside
    r = max(profile.point_seed_radius, _MIN_SEED_RADIUS)
    for p in prompts.points:
        disk = disk_mask(shape, p.x, p.y, r)
        if p.label == 1:
            fg |= disk
        else:
            bg |= disk
    has_positive = any(p.label == 1 for p in prompts.points)
    if not boxes and not has_positive and prompts.dense_prior is not None:
        fg |= prompts.dense_prior > PRIOR_FG_LEVEL
        bg |= prompts.dense_prior < PRIOR_BG_LEVEL
    fg &= ~bg
    return fg, bg


# --------------------------------------------------------------------------- solver


def _sym_sum(z: np.ndarray) -> float:
    """Sum that is bitwise invariant under horizontal and vertical flips of ``z``."""
    s = z + z[:, ::-1]
    s = s + s[::-1, :]
    return float(np.sum(s)) * 0.25


class _LatticeOperator:
    """``(L + lam I)`` restricted to the unseeded pixels, applied on the full grid."""

    def __init__(self, features: ImageFeatures, unknown: np.ndarray, lam: float):
        h, w = features.shape
        self.unknown = unknown
        we = np.zeros((h, w))
        ww = np.zeros((h, w))
        wn = np.zeros((h, w))
        ws = np.zeros((h, w))
        we[:, :-1] = features.east
        ww[:, 1:] = features.east
        ws[:-1, :] = features.south
        wn[1:, :] = features.south
        self.we, self.ww, self.wn, self.ws = we, ww, wn, ws
        self.diag = (we + ww) + (wn + ws) + lam

    def neighbour_sum(self, v: np.ndarray) -> np.ndarray:
        ve = np.zeros_like(v)
        vw = np.zeros_like(v)
        vn = np.zeros_like(v)
        vs = np.zeros_like(v)
        ve[:, :-1] = v[:, 1:]
        vw[:, 1:] = v[:, :-1]
        vs[:-1, :] = v[1:, :]
        vn[1:, :] = v[:-1, :]
        # pairs are grouped so that mirrored inputs give identical bits
        return (self.we * ve + self.ww * vw) + (self.wn * vn + self.ws * vs)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        out = self.diag * x - self.neighbour_sum(x)
        out[~self.unknown] = 0.0
        return out


def conjugate_gradient(apply_a, b: np.ndarray, diag: np.ndarray, tol: float,
                       max_iters: int) -> Tuple[np.ndarray, int, float, bool]:
    """Jacobi-preconditioned CG on grid-shaped vectors.

    Stops when ``||b - A x|| <= tol * ||b||`` (starting from ``x = 0``).  When
    the recursively updated residual reaches the target, the true residual is
    recomputed and the iteration restarts from the current iterate if it has
    drifted.  Returns ``(x, iterations, relative_residual, converged)``.
    """
    x = np.zeros_like(b)
    b_norm = np.sqrt(_sym_sum(b * b))
    if b_norm == 0.0:
        return x, 0, 0.0, True
    inv_d = np.where(diag > 0, 1.0 / np.where(diag > 0, diag, 1.0), 0.0)
    r = b.copy()
    z = r * inv_d
    p = z.copy()
    rz = _sym_sum(r * z)
    target = tol * b_norm
    rel = 1.0
    for it in range(1, max_iters + 1):
        ap = apply_a(p)
        pap = _sym_sum(p * ap)
        if pap <= 0.0:
            # exhausted the Krylov space (only the semidefinite null space is left)
            r = b - apply_a(x)
            rel = np.sqrt(_sym_sum(r * r)) / b_norm
            return x, it, rel, rel <= tol
        alpha = rz / pap
        x = x + alpha * p
        r = r - alpha * ap
        if np.sqrt(_sym_sum(r * r)) <= target:
            r = b - apply_a(x)
            rel = np.sqrt(_sym_sum(r * r)) / b_norm
            if rel <= tol:
                return x, it, rel, True
            z = r * inv_d
            p = z.copy()
            rz = _sym_sum(r * z)
            continue
        z = r * inv_d
        rz_new = _sym_sum(r * z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    r = b - apply_a(x)
    rel = np.sqrt(_sym_sum(r * r)) / b_norm
    return x, max_iters, rel, rel <= tol


def assemble_system(features: ImageFeatures, prompts: PromptBundle, profile: StageProfile):
    """Grid operator, right-hand side, seed masks and seed values for a bundle."""
    fg, bg = build_seeds(features.shape, prompts, profile)
    seeded = fg | bg
    unknown = ~seeded
    lam = profile.prior_weight if prompts.dense_prior is not None else 0.0
    op = _LatticeOperator(features, unknown, lam)
    seed_values = fg.astype(np.float64)
    rhs = op.neighbour_sum(seed_values)
    if lam > 0:
        rhs = rhs + lam * prompts.dense_prior
    rhs[seeded] = 0.0
    return op, rhs, fg, bg


def segment(features: ImageFeatures, prompts: PromptBundle, profile: StageProfile) -> SegmentationResult:
    """Segment the image behind ``features`` from a prompt bundle.

    CG non-convergence within ``solver_max_iters`` is reported through
    ``converged=False`` rather than raised.
    """
    if (features.beta, features.sigma) != (profile.beta, profile.feature_sigma):
        raise ValueError(
            f"features were computed with beta={features.beta}, feature_sigma={features.sigma}; "
            f"profile has beta={profile.beta}, feature_sigma={profile.feature_sigma}"
        )
    op, rhs, fg, bg = assemble_system(features, prompts, profile)
    x, iters, rel, ok = conjugate_gradient(
        op, rhs, op.diag, profile.solver_tolerance, profile.solver_max_iters
    )
    raw = np.where(fg, 1.0, np.where(bg, 0.0, x))
    soft = np.clip(raw, 0.0, 1.0)
    return SegmentationResult(
        soft=soft,
        binary=soft > profile.threshold,
        solver_iters=iters,
        solver_residual=float(rel),
        converged=bool(ok),
        raw=raw,
    )


class BuiltinSegmenter:
    """Random-walker backend; ``prepare`` binds an image like a model's set_image."""

    name = "builtin"

    def prepare(self, image: np.ndarray, image_path=None) -> "BuiltinSession":
        return BuiltinSession(as_image(image))


class BuiltinSession:
    def __init__(self, image: np.ndarray):
        self.image = image
        self.shape = image.shape[:2]
        self._features: Dict[Tuple[float, float], ImageFeatures] = {}

    def features(self, profile: StageProfile) -> ImageFeatures:
        key = (profile.beta, profile.feature_sigma)
        if key not in self._features:
            self._features[key] = precompute_features(self.image, profile)
        return self._features[key]

    def segment(self, prompts: PromptBundle, profile: StageProfile) -> SegmentationResult:
        return segment(self.features(profile), prompts, profile)


# --------------------------------------------------------------------------- external adapter


class AdapterError(RuntimeError):
    """Base class for external adapter failures."""


class AdapterLaunchError(AdapterError):
    pass


class AdapterTimeoutError(AdapterError):
    pass


class AdapterFailedError(AdapterError):
    pass


class MaskFormatError(AdapterError):
    pass


@dataclass(frozen=True)
class AdapterConfig:
    """Either ``command`` (argv prefix, the document path is appended) or ``exchange_dir``.

    In directory mode the prompt document is written as ``<token>.json`` and the
    adapter is expected to drop ``<token>.mask.png`` next to it.
    """

    command: Tuple[str, ...] = ()
    exchange_dir: Optional[str] = None
    timeout: float = 60.0
    poll_interval: float = 0.05
    workdir: Optional[str] = None

    def __post_init__(self) -> None:
        if isinstance(self.command, str):
            object.__setattr__(self, "command", (self.command,))
        else:
            object.__setattr__(self, "command", tuple(self.command))
        if not self.command and self.exchange_dir is None:
            raise ValueError("adapter needs a command or an exchange_dir")


def prompt_document(image_path, prompts: PromptBundle, prior_path=None) -> dict:
    return {
        "image": str(image_path),
        "points": [p.to_dict() for p in prompts.points],
        "boxes": [b.to_dict() for b in prompts.boxes],
        "prior": None if prior_path is None else str(prior_path),
    }


def _read_returned_mask(path: Path, shape: Tuple[int, int]) -> SegmentationResult:
    if not path.is_file():
        raise MaskFormatError(f"adapter returned {path}, which does not exist")
    try:
        values = pngio.read_mask_values(path)
    except (OSError, ValueError) as exc:
        raise MaskFormatError(f"adapter mask {path} is unreadable: {exc}") from exc
    if values.shape != tuple(shape):
        raise MaskFormatError(f"adapter mask {path} is {values.shape}, expected {tuple(shape)}")
    soft = values.astype(np.float64) / 255.0
    return SegmentationResult(soft=soft, binary=soft > 0.5)


def external_segment(image_path, prompts: PromptBundle, adapter: AdapterConfig) -> SegmentationResult:
    """Run an external promptable model through the JSON/PNG exchange."""
    image_path = Path(image_path)
    shape = pngio.image_size(image_path)
    validate_prompts(prompts, shape)
    with tempfile.TemporaryDirectory(dir=adapter.workdir) as tmp:
        tmp = Path(tmp)
        prior_path = None
        if prompts.dense_prior is not None:
            prior_path = pngio.write_soft(tmp / "prior.png", prompts.dense_prior)
        doc = prompt_document(image_path.resolve(), prompts,
                              None if prior_path is None else prior_path.resolve())
        text = json.dumps(doc, indent=2, sort_keys=True)
        if adapter.command:
            return _run_subprocess(adapter, tmp, text, shape)
        return _run_exchange(adapter, text, shape)


def _run_subprocess(adapter: AdapterConfig, tmp: Path, text: str, shape) -> SegmentationResult:
    doc_path = tmp / "prompts.json"
    doc_path.write_text(text)
    argv = list(adapter.command) + [str(doc_path)]
    try:
        proc = subprocess.run(argv, capture_output=True, text=True, timeout=adapter.timeout)
    except (FileNotFoundError, PermissionError, NotADirectoryError) as exc:
        raise AdapterLaunchError(f"could not launch adapter {adapter.command[0]!r}: {exc}") from exc
    except subprocess.TimeoutExpired as exc:
        raise AdapterTimeoutError(f"adapter {adapter.command[0]!r} exceeded {adapter.timeout}s") from exc
    if proc.returncode != 0:
        raise AdapterFailedError(
            f"adapter {adapter.command[0]!r} exited with {proc.returncode}: {proc.stderr.strip()}"
        )
    lines = [ln.strip() for ln in proc.stdout.splitlines() if ln.strip()]
    if not lines:
        raise MaskFormatError(f"adapter {adapter.command[0]!r} printed no mask path")
    out = Path(lines[-1])
    if not out.is_absolute():
        out = doc_path.parent / out
    return _read_returned_mask(out, shape)


def _run_exchange(adapter: AdapterConfig, text: str, shape) -> SegmentationResult:
    root = Path(adapter.exchange_dir)
    if not root.is_dir():
        raise AdapterLaunchError(f"exchange directory {root} does not exist")
    token = hashlib.sha256(text.encode()).hexdigest()[:16]
    doc_path = root / f"{token}.json"
    mask_path = root / f"{token}.mask.png"
    partial = root / f".{token}.json.part"
    partial.write_text(text)
    os.replace(partial, doc_path)
    deadline = time.monotonic() + adapter.timeout
    while not mask_path.exists():
        if time.monotonic() > deadline:
            raise AdapterTimeoutError(f"no {mask_path.name} in {root} after {adapter.timeout}s")
        time.sleep(adapter.poll_interval)
    return _read_returned_mask(mask_path, shape)


@dataclass
class ExternalSegmenter:
    """Backend that forwards every prompt bundle to an external adapter."""

    adapter: AdapterConfig
    name: str = field(default="external", init=False)

    def prepare(self, image: np.ndarray, image_path=None) -> "ExternalSession":
        return ExternalSession(self.adapter, as_image(image), image_path)


class ExternalSession:
    def __init__(self, adapter: AdapterConfig, image: np.ndarray, image_path=None):
        self.adapter = adapter
        self.shape = image.shape[:2]
        self._tmp = None
        if image_path is None:
            self._tmp = tempfile.TemporaryDirectory(dir=adapter.workdir)
            image_path = pngio.write_image(Path(self._tmp.name) / "image.png", image)
        self.image_path = Path(image_path)

    def segment(self, prompts: PromptBundle, profile: StageProfile) -> SegmentationResult:
        return external_segment(self.image_path, prompts, self.adapter)


def flip_prompts(prompts: PromptBundle, width: int) -> PromptBundle:
    """Mirror a bundle left-right inside an image of the given width."""
    return PromptBundle(
        points=tuple(PointPrompt(width - p.x, p.y, p.label) for p in prompts.points),
        boxes=tuple(BoxPrompt(width - b.x2, b.y1, width - b.x1, b.y2, b.score) for b in prompts.boxes),
        dense_prior=None if prompts.dense_prior is None else prompts.dense_prior[:, ::-1].copy(),
    )

