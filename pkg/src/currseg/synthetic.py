"""Synthetic lesion corpora with crisp ground truth and blurred, noisy images."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np
from scipy import ndimage

from . import pngio
from .core import connected_components


@dataclass(frozen=True)
class SyntheticSpec:
    """Star-shaped lesions ``r(t) = r0 (1 + sum_k a_k cos(k t + phi_k))``, k = 2..harmonics+1.

    The ground truth is the crisp rasterised shape; only the rendered
    intensity is blurred by ``edge_fuzz_sigma`` and then corrupted by noise.
    """

    width: int = 128
    height: int = 128
    lesions_min: int = 1
    lesions_max: int = 1
    base_radius: float = 22.0
    radius_jitter: float = 0.25
    harmonics: int = 3
    amplitude_min: float = 0.0
    amplitude_max: float = 0.12
    contrast: float = 0.5
    background: float = 0.75
    edge_fuzz_sigma: float = 3.0
    noise_sigma: float = 0.03
    min_separation: float = 10.0
    rng_seed: int = 0
    max_attempts: int = 200

    def __post_init__(self) -> None:
        if self.width < 8 or self.height < 8:
            raise ValueError("width and height must be >= 8")
        if not 0 <= self.lesions_min <= self.lesions_max:
            raise ValueError("need 0 <= lesions_min <= lesions_max")
        if self.base_radius <= 0 or not 0 <= self.radius_jitter < 1:
            raise ValueError("base_radius must be > 0 and radius_jitter in [0, 1)")
        if self.harmonics < 0 or not 0 <= self.amplitude_min <= self.amplitude_max:
            raise ValueError("need harmonics >= 0 and 0 <= amplitude_min <= amplitude_max")
        if self.harmonics * self.amplitude_max >= 1:
            raise ValueError("harmonics * amplitude_max must stay below 1 so that r(t) > 0")
        if not 0 <= self.contrast <= 1 or not 0 <= self.background <= 1:
            raise ValueError("contrast and background must lie in [0, 1]")
        if self.edge_fuzz_sigma < 0 or self.noise_sigma < 0 or self.min_separation < 0:
            raise ValueError("edge_fuzz_sigma, noise_sigma and min_separation must be >= 0")


class PackingError(ValueError):
    pass


def _shape_params(rng, spec: SyntheticSpec):
    r0 = spec.base_radius * (1 + rng.uniform(-spec.radius_jitter, spec.radius_jitter))
    amps = rng.uniform(spec.amplitude_min, spec.amplitude_max, spec.harmonics)
    phases = rng.uniform(0, 2 * np.pi, spec.harmonics)
    return r0, amps, phases


def _rasterize(xx, yy, cx, cy, r0, amps, phases):
    dx, dy = xx - cx, yy - cy
    theta = np.arctan2(dy, dx)
    k = np.arange(2, len(amps) + 2)
    radius = r0 * (1 + np.sum(amps[:, None, None] * np.cos(k[:, None, None] * theta + phases[:, None, None]), axis=0))
    return np.hypot(dx, dy) <= radius


def _params_dict(cx, cy, r0, amps, phases) -> dict:
    return {"cx": cx, "cy": cy, "r0": r0, "amplitudes": amps.tolist(), "phases": phases.tolist()}


def _lesion(rng, spec: SyntheticSpec, xx, yy):
    r0, amps, phases = _shape_params(rng, spec)
    margin = r0 * (1 + amps.sum()) + 2
    if 2 * margin >= min(spec.width, spec.height):
        raise PackingError(f"base_radius={spec.base_radius} does not fit a {spec.width}x{spec.height} image")
    cx = rng.uniform(margin, spec.width - margin)
    cy = rng.uniform(margin, spec.height - margin)
    return _rasterize(xx, yy, cx, cy, r0, amps, phases), _params_dict(cx, cy, r0, amps, phases)


def _gap(a: np.ndarray, b: np.ndarray) -> float:
    """Smallest centre-to-centre distance between pixels of ``a`` and ``b``."""
    return float(ndimage.distance_transform_edt(~a)[b].min())


def _render_image(rng, spec: SyntheticSpec, gt: np.ndarray) -> np.ndarray:
    base = spec.background - spec.contrast * gt.astype(np.float64)
    if spec.edge_fuzz_sigma > 0:
        base = ndimage.gaussian_filter(base, spec.edge_fuzz_sigma, mode="nearest")
    noisy = base + rng.normal(0.0, spec.noise_sigma, base.shape) if spec.noise_sigma > 0 else base
    return pngio.to_uint8(np.clip(noisy, 0, 1)).astype(np.float64) / 255.0


def render_sample(spec: SyntheticSpec, index: int) -> Tuple[np.ndarray, np.ndarray, dict]:
    """Image (8-bit quantised floats), crisp ground truth, and lesion parameters for one index.

    The generator is seeded from ``(rng_seed, index)`` so each sample can be
    regenerated on its own.
    """
    rng = np.random.default_rng([spec.rng_seed, index])
    yy, xx = np.mgrid[: spec.height, : spec.width] + 0.5
    gt = np.zeros((spec.height, spec.width), dtype=bool)
    n = int(rng.integers(spec.lesions_min, spec.lesions_max + 1))
    lesions = []
    for i in range(n):
        for _ in range(spec.max_attempts):
            shape, params = _lesion(rng, spec, xx, yy)
            if connected_components(shape)[1] != 1:
                continue
            if gt.any() and _gap(gt, shape) < spec.min_separation + 1:
                continue
            gt |= shape
            lesions.append(params)
            break
        else:
            raise PackingError(
                f"could not place lesion {i + 1} of {n} with min_separation={spec.min_separation} "
                f"after {spec.max_attempts} attempts (check lesions_max / min_separation)"
            )
    return _render_image(rng, spec, gt), gt, {"index": index, "lesions": lesions}


def render_pair(spec: SyntheticSpec, index: int, gap: float = None, step: float = 0.25):
    """Two lesions whose outlines are exactly ``gap`` background pixels apart.

    ``gap`` defaults to ``spec.min_separation``.  The pair sits on a random
    axis through the image centre; the centres are pushed apart in ``step``
    increments until the nearest pixels of the two shapes are ``gap + 1``
    apart, so the thinnest background strip between them is ``gap`` pixels.
    """
    gap = spec.min_separation if gap is None else gap
    rng = np.random.default_rng([spec.rng_seed, index, 2])
    yy, xx = np.mgrid[: spec.height, : spec.width] + 0.5
    shapes = [_shape_params(rng, spec) for _ in range(2)]
    angle = rng.uniform(0, np.pi)
    u = np.array([np.cos(angle), np.sin(angle)])
    mid = np.array([spec.width / 2, spec.height / 2])
    d = 0.0
    while True:
        c1, c2 = mid - u * d / 2, mid + u * d / 2
        a = _rasterize(xx, yy, c1[0], c1[1], *shapes[0])
        b = _rasterize(xx, yy, c2[0], c2[1], *shapes[1])
        if not (a & b).any() and _gap(a, b) >= gap + 1:
            break
        d += step
    for m in (a, b):
        if connected_components(m)[1] != 1 or m[0].any() or m[-1].any() or m[:, 0].any() or m[:, -1].any():
            raise PackingError(f"pair {index} does not fit a {spec.width}x{spec.height} image "
                               f"(reduce base_radius or gap)")
    gt = a | b
    params = {"index": index, "gap": _gap(a, b) - 1,
              "lesions": [_params_dict(c[0], c[1], *p) for c, p in zip((c1, c2), shapes)]}
    return _render_image(rng, spec, gt), gt, params


def sample_id(index: int) -> str:
    return f"img_{index:04d}"


def generate_synthetic(spec: SyntheticSpec, count: int, out_dir, split: str = "test"):
    """Write ``count`` image/mask pairs under ``out_dir/<split>/{images,masks}``."""
    from .harness import Dataset

    if count < 0:
        raise ValueError("count must be >= 0")
    root = Path(out_dir)
    entries = []
    if count == 0:
        return Dataset(entries=[], split=split, root=root)
    img_dir = root / split / "images"
    mask_dir = root / split / "masks"
    img_dir.mkdir(parents=True, exist_ok=True)
    mask_dir.mkdir(parents=True, exist_ok=True)
    meta = []
    for i in range(count):
        image, gt, params = render_sample(spec, i)
        name = sample_id(i) + ".png"
        pngio.write_image(img_dir / name, image)
        pngio.write_mask(mask_dir / name, gt)
        entries.append((img_dir / name, mask_dir / name))
        meta.append(params)
    manifest = {"spec": dataclasses.asdict(spec), "split": split, "count": count, "samples": meta}
    (root / split / "synthetic.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return Dataset(entries=entries, split=split, root=root)
