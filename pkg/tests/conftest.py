from pathlib import Path

import numpy as np
import pytest

from currseg.core import disk_mask

FIXTURES = Path(__file__).parent / "fixtures"
FUZZY50 = FIXTURES / "fuzzy50"


def disk_image(size=128, radius=25.0, fg=0.2, bg=0.8, noise=0.0, seed=0, center=None):
    """Dark disk on a bright background; returns ``(image, true_mask)``."""
    cx, cy = center if center is not None else (size / 2, size / 2)
    gt = disk_mask((size, size), cx, cy, radius)
    img = np.where(gt, fg, bg).astype(np.float64)
    if noise > 0:
        img = img + np.random.default_rng(seed).normal(0, noise, img.shape)
    return np.clip(img, 0, 1), gt


def random_mask(rng, shape=(16, 16), p=0.4):
    return rng.random(shape) < p


@pytest.fixture
def disk():
    return disk_image(noise=0.02)


@pytest.fixture
def fuzzy_root():
    if not (FUZZY50 / "test" / "images").is_dir():
        pytest.skip("shipped corpus missing; run scripts/make_fixture_corpus.py")
    return FUZZY50


@pytest.fixture
def small_corpus(tmp_path):
    """Six fuzzy images written in the standard dataset layout."""
    from currseg.synthetic import SyntheticSpec, generate_synthetic

    generate_synthetic(SyntheticSpec(), 6, tmp_path / "data")
    return tmp_path / "data"
