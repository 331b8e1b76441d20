import json
import sys
import textwrap
import threading
import time
from pathlib import Path

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.sparse.linalg import spsolve

from currseg import pngio
from currseg.backend import (
    AdapterConfig,
    AdapterFailedError,
    AdapterLaunchError,
    AdapterTimeoutError,
    BuiltinSegmenter,
    ExternalSegmenter,
    MaskFormatError,
    PromptBundle,
    StageProfile,
    assemble_system,
    build_seeds,
    coarse_profile,
    external_segment,
    fine_profile,
    flip_prompts,
    precompute_features,
    segment,
    threshold,
)
from currseg.core import BoxPrompt, PointPrompt, PromptError, ShapeMismatchError, dice, disk_mask

from conftest import disk_image


def sparse_system(features, fg, bg, lam, prior):
    """Independent assembly of the screened Laplace system with scipy.sparse."""
    h, w = features.shape
    idx = np.arange(h * w).reshape(h, w)
    rows = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    cols = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    vals = np.concatenate([features.east.ravel(), features.south.ravel()])
    W = sp.coo_matrix((vals, (rows, cols)), shape=(h * w, h * w)).tocsr()
    W = W + W.T
    L = sp.diags(np.asarray(W.sum(axis=1)).ravel()) - W
    seeded = (fg | bg).ravel()
    u, s = np.flatnonzero(~seeded), np.flatnonzero(seeded)
    A = L[u][:, u] + lam * sp.identity(len(u))
    b = -L[u][:, s] @ fg.ravel()[s].astype(float)
    if lam > 0:
        b = b + lam * prior.ravel()[u]
    return A.tocsr(), b, u


def fixture(seed, size=24, lam=0.0):
    rng = np.random.default_rng(seed)
    img, _ = disk_image(size, radius=rng.uniform(4, 8), noise=0.05, seed=seed,
                        center=rng.uniform(size / 3, 2 * size / 3, 2))
    c = size / 2
    bundle = PromptBundle(
        boxes=(BoxPrompt(c - 8, c - 8, c + 8, c + 8),),
        points=(PointPrompt(float(rng.uniform(0, size)), float(rng.uniform(0, size)), int(rng.integers(0, 2))),),
        dense_prior=rng.random((size, size)) if lam > 0 else None,
    )
    return img, bundle, coarse_profile(prior_weight=lam, beta=float(rng.uniform(20, 400)))


class TestFeatures:
    def test_constant_image(self):
        f = precompute_features(np.full((5, 7), 0.3), StageProfile())
        assert np.all(f.east == 1.0) and np.all(f.south == 1.0)
        assert f.east.shape == (5, 6) and f.south.shape == (4, 7)

    def test_step_edge(self):
        img = np.array([[0.25, 0.75], [0.25, 0.75]])
        f = precompute_features(img, StageProfile(beta=50.0))
        assert np.allclose(f.east, np.exp(-12.5), rtol=0, atol=1e-15)
        assert np.all(f.south == 1.0)

    def test_deterministic_and_read_only(self):
        img = np.random.default_rng(0).random((9, 9))
        a, b = precompute_features(img, StageProfile()), precompute_features(img, StageProfile())
        assert np.array_equal(a.east, b.east) and np.array_equal(a.south, b.south)
        with pytest.raises(ValueError):
            a.east[0, 0] = 0.0

    def test_rgb_uses_channel_mean(self):
        rgb = np.random.default_rng(0).random((6, 6, 3))
        a = precompute_features(rgb, StageProfile())
        b = precompute_features(rgb.mean(axis=2), StageProfile())
        assert np.array_equal(a.east, b.east)


class TestProfiles:
    def test_defaults(self):
        c, f = coarse_profile(), fine_profile()
        assert c.prior_weight == 0.0 and f.prior_weight == 0.05
        assert (c.box_margin, c.box_center_seed_radius, c.threshold) == (5.0, 3.0, 0.5)
        assert f.point_seed_radius < c.point_seed_radius

    @pytest.mark.parametrize("bad", [{"prior_weight": -1}, {"beta": 0}, {"solver_tolerance": 1},
                                     {"solver_max_iters": 0}, {"threshold": 1.0}, {"box_margin": -1}])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            StageProfile(**bad)

    def test_threshold(self):
        assert threshold(np.full((2, 2), 0.6), 0.5).all()
        assert not threshold(np.full((2, 2), 0.4), 0.5).any()
        assert threshold(np.array([[0.5, 0.50001]]), 0.5).tolist() == [[False, True]]
        with pytest.raises(ValueError):
            threshold(np.zeros(1), 0.0)


class TestSeeds:
    def test_box_seeds(self):
        shape = (40, 40)
        fg, bg = build_seeds(shape, PromptBundle(boxes=(BoxPrompt(10, 10, 20, 20),)), StageProfile())
        assert fg[15, 15] and fg.sum() == disk_mask(shape, 15, 15, 3).sum()
        assert bg[0, 0] and not bg[24, 24] and bg[25, 25]
        assert not (fg & bg).any()

    def test_background_wins(self):
        b = PromptBundle(boxes=(BoxPrompt(10, 10, 20, 20),), points=(PointPrompt(15, 15, 0),))
        fg, bg = build_seeds((40, 40), b, StageProfile())
        assert bg[14:16, 14:16].all() and not fg[14:16, 14:16].any()

    def test_prior_fallback(self):
        prior = np.zeros((10, 10))
        prior[3:6, 3:6] = 0.95
        prior[0, 0] = 0.5
        fg, bg = build_seeds((10, 10), PromptBundle(dense_prior=prior), StageProfile())
        assert np.array_equal(fg, prior > 0.9)
        assert not bg[0, 0] and bg[9, 9]

    def test_tiny_radius_still_seeds_pixel(self):
        fg, _ = build_seeds((8, 8), PromptBundle(points=(PointPrompt(3.0, 4.0, 1),)),
                            StageProfile(point_seed_radius=0.0))
        assert fg[4, 3]

    def test_errors(self):
        prof = StageProfile()
        with pytest.raises(PromptError, match="empty prompt bundle"):
            build_seeds((8, 8), PromptBundle(), prof)
        with pytest.raises(PromptError):
            build_seeds((8, 8), PromptBundle(points=(PointPrompt(8.0, 1.0),)), prof)
        with pytest.raises(PromptError):
            build_seeds((8, 8), PromptBundle(boxes=(BoxPrompt(9, 9, 12, 12),)), prof)
        with pytest.raises(ShapeMismatchError):
            build_seeds((8, 8), PromptBundle(dense_prior=np.zeros((7, 8))), prof)


class TestSolver:
    @pytest.mark.parametrize("seed", range(6))
    def test_residual_matches_sparse_recomputation(self, seed):
        lam = [0.0, 0.05, 3.0][seed % 3]
        img, bundle, prof = fixture(seed, lam=lam)
        feats = precompute_features(img, prof)
        res = segment(feats, bundle, prof)
        fg, bg = build_seeds(feats.shape, bundle, prof)
        A, b, u = sparse_system(feats, fg, bg, lam, bundle.dense_prior)
        x = res.raw.ravel()[u]
        assert res.converged
        assert np.linalg.norm(A @ x - b) <= prof.solver_tolerance * np.linalg.norm(b) * (1 + 1e-9)

    @pytest.mark.parametrize("seed", range(4))
    def test_agrees_with_direct_solve(self, seed):
        img, bundle, prof = fixture(seed, lam=0.05 * seed)
        prof = coarse_profile(prior_weight=prof.prior_weight, beta=prof.beta, solver_tolerance=1e-12)
        feats = precompute_features(img, prof)
        res = segment(feats, bundle, prof)
        fg, bg = build_seeds(feats.shape, bundle, prof)
        A, b, u = sparse_system(feats, fg, bg, prof.prior_weight, bundle.dense_prior)
        assert np.max(np.abs(res.raw.ravel()[u] - spsolve(A.tocsc(), b))) < 1e-8

    def test_assembled_operator_matches_sparse(self):
        img, bundle, prof = fixture(11, lam=0.2)
        feats = precompute_features(img, prof)
        op, rhs, fg, bg = assemble_system(feats, bundle, prof)
        A, b, u = sparse_system(feats, fg, bg, 0.2, bundle.dense_prior)
        v = np.random.default_rng(0).random(feats.shape)
        v[fg | bg] = 0.0
        assert np.allclose(op(v).ravel()[u], A @ v.ravel()[u], rtol=0, atol=1e-12)
        assert np.allclose(rhs.ravel()[u], b, rtol=0, atol=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from([0.0, 0.05, 1.0]))
    def test_maximum_principle_and_seeds(self, seed, lam):
        img, bundle, prof = fixture(seed, size=20, lam=lam)
        res = segment(precompute_features(img, prof), bundle, prof)
        fg, bg = build_seeds(img.shape, bundle, prof)
        assert np.all(res.soft[fg] == 1.0) and np.all(res.soft[bg] == 0.0)
        assert np.all(res.raw[fg] == 1.0) and np.all(res.raw[bg] == 0.0)
        slack = 10 * prof.solver_tolerance
        assert res.raw.min() >= -slack and res.raw.max() <= 1 + slack
        assert res.soft.min() >= 0.0 and res.soft.max() <= 1.0
        assert np.array_equal(res.binary, res.soft > prof.threshold)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from([0.0, 0.05]))
    def test_mirror_equivariance(self, seed, lam):
        img, bundle, prof = fixture(seed, size=20, lam=lam)
        a = segment(precompute_features(img, prof), bundle, prof)
        flipped = img[:, ::-1].copy()
        b = segment(precompute_features(flipped, prof), flip_prompts(bundle, img.shape[1]), prof)
        assert np.max(np.abs(a.soft[:, ::-1] - b.soft)) <= 1e-10

    def test_nonconvergence_is_flagged(self):
        img, bundle, _ = fixture(2, size=32)
        prof = coarse_profile(solver_max_iters=2, solver_tolerance=1e-12)
        res = segment(precompute_features(img, prof), bundle, prof)
        assert not res.converged and res.solver_iters == 2 and res.solver_residual > 1e-12

    def test_feature_profile_mismatch(self):
        img, bundle, prof = fixture(0)
        with pytest.raises(ValueError, match="beta"):
            segment(precompute_features(img, prof), bundle, coarse_profile(beta=prof.beta + 1))

    def test_deterministic(self):
        img, bundle, prof = fixture(4, lam=0.05)
        a = segment(precompute_features(img, prof), bundle, prof)
        b = segment(precompute_features(img, prof), bundle, prof)
        assert np.array_equal(a.raw, b.raw)


class TestBehaviour:
    def test_disk_from_tight_box(self, disk):
        img, gt = disk
        session = BuiltinSegmenter().prepare(img)
        box = BoxPrompt(64 - 25, 64 - 25, 64 + 25, 64 + 25)
        res = session.segment(PromptBundle(boxes=(box,)), coarse_profile())
        assert dice(res.binary, gt) >= 0.95

    def test_negative_point_carves(self, disk):
        img, _ = disk
        prof = coarse_profile()
        box = BoxPrompt(39, 39, 89, 89)
        res = BuiltinSegmenter().prepare(img).segment(
            PromptBundle(boxes=(box,), points=(PointPrompt(64.0, 64.0, 0),)), prof)
        assert not res.binary[disk_mask(img.shape, 64.0, 64.0, prof.point_seed_radius)].any()

    def _prior_case(self, lam):
        img, gt = disk_image(64, radius=14, noise=0.05, seed=5)
        prior = np.zeros(gt.shape)
        prior[20:44, 16:40] = 0.8  # deliberately not the disk
        prof = fine_profile(prior_weight=lam)
        res = BuiltinSegmenter().prepare(img).segment(
            PromptBundle(points=(PointPrompt(28.0, 32.0, 1),), dense_prior=prior), prof)
        return dice(res.binary, prior > 0.5)

    def test_dominant_prior(self):
        assert self._prior_case(1e6) >= 0.999

    def test_prior_limit_monotone(self):
        scores = [self._prior_case(lam) for lam in (0.0, 1.0, 1e2, 1e4, 1e6)]
        assert all(b >= a for a, b in zip(scores, scores[1:]))


# --------------------------------------------------------------------------- external adapter

ECHO_STUB = textwrap.dedent("""
    import json, sys
    from pathlib import Path
    import numpy as np
    from PIL import Image

    doc_path = Path(sys.argv[-1])
    doc = json.loads(doc_path.read_text())
    mode = sys.argv[1] if len(sys.argv) > 2 else "echo"
    w, h = Image.open(doc["image"]).size
    if mode == "fail":
        print("boom", file=sys.stderr)
        sys.exit(3)
    if mode == "sleep":
        import time
        time.sleep(5)
    if mode == "wrong-size":
        mask = np.zeros((h + 1, w), dtype=np.uint8)
    elif doc["prior"] is not None:
        mask = np.asarray(Image.open(doc["prior"]))
    else:
        mask = np.zeros((h, w), dtype=np.uint8)
        for b in doc["boxes"]:
            mask[int(b["y1"]):int(b["y2"]), int(b["x1"]):int(b["x2"])] = 255
    out = doc_path.with_name("out.png")
    Image.fromarray(mask).save(out)
    print("adapter log line")
    print(out)
""")


@pytest.fixture
def stub(tmp_path):
    path = tmp_path / "stub.py"
    path.write_text(ECHO_STUB)
    return path


@pytest.fixture
def image_file(tmp_path):
    img, _ = disk_image(32, radius=8)
    return pngio.write_image(tmp_path / "img.png", img)


class TestExternal:
    def test_echo_prior(self, stub, image_file):
        prior = np.random.default_rng(0).random((32, 32))
        adapter = AdapterConfig(command=(sys.executable, str(stub)))
        res = external_segment(image_file, PromptBundle(dense_prior=prior), adapter)
        assert np.array_equal(res.soft, pngio.to_uint8(prior) / 255.0)
        assert np.array_equal(res.binary, res.soft > 0.5)

    def test_boxes_document(self, stub, image_file):
        adapter = AdapterConfig(command=(sys.executable, str(stub)))
        res = external_segment(image_file, PromptBundle(boxes=(BoxPrompt(4, 6, 10, 12),)), adapter)
        expected = np.zeros((32, 32), bool)
        expected[6:12, 4:10] = True
        assert np.array_equal(res.binary, expected)

    def test_wrong_size(self, stub, image_file):
        adapter = AdapterConfig(command=(sys.executable, str(stub), "wrong-size"))
        with pytest.raises(MaskFormatError, match="expected"):
            external_segment(image_file, PromptBundle(boxes=(BoxPrompt(1, 1, 5, 5),)), adapter)

    def test_missing_adapter(self, tmp_path, image_file):
        missing = str(tmp_path / "no-such-adapter")
        with pytest.raises(AdapterLaunchError, match="no-such-adapter"):
            external_segment(image_file, PromptBundle(boxes=(BoxPrompt(1, 1, 5, 5),)), AdapterConfig(command=missing))

    def test_failure_and_timeout(self, stub, image_file):
        bundle = PromptBundle(boxes=(BoxPrompt(1, 1, 5, 5),))
        with pytest.raises(AdapterFailedError, match="boom"):
            external_segment(image_file, bundle, AdapterConfig(command=(sys.executable, str(stub), "fail")))
        with pytest.raises(AdapterTimeoutError):
            external_segment(image_file, bundle,
                             AdapterConfig(command=(sys.executable, str(stub), "sleep"), timeout=0.5))

    def test_config_needs_a_channel(self):
        with pytest.raises(ValueError):
            AdapterConfig()

    def test_exchange_directory(self, tmp_path, image_file):
        ex = tmp_path / "exchange"
        ex.mkdir()
        stop = threading.Event()

        def responder():
            while not stop.is_set():
                for doc in ex.glob("*.json"):
                    d = json.loads(doc.read_text())
                    mask = np.zeros((32, 32), bool)
                    for b in d["boxes"]:
                        mask[int(b["y1"]):int(b["y2"]), int(b["x1"]):int(b["x2"])] = True
                    pngio.write_mask(ex / (doc.stem + ".mask.png"), mask)
                    doc.unlink()
                time.sleep(0.01)

        t = threading.Thread(target=responder, daemon=True)
        t.start()
        try:
            adapter = AdapterConfig(exchange_dir=str(ex), timeout=10, poll_interval=0.01)
            res = external_segment(image_file, PromptBundle(boxes=(BoxPrompt(2, 3, 9, 7),)), adapter)
        finally:
            stop.set()
            t.join()
        assert res.binary.sum() == 7 * 4

    def test_exchange_timeout(self, tmp_path, image_file):
        adapter = AdapterConfig(exchange_dir=str(tmp_path), timeout=0.2, poll_interval=0.02)
        with pytest.raises(AdapterTimeoutError):
            external_segment(image_file, PromptBundle(boxes=(BoxPrompt(1, 1, 5, 5),)), adapter)

    def test_segmenter_writes_image_when_path_unknown(self, stub):
        img, _ = disk_image(16, radius=4)
        session = ExternalSegmenter(AdapterConfig(command=(sys.executable, str(stub)))).prepare(img)
        assert Path(session.image_path).is_file()
        res = session.segment(PromptBundle(boxes=(BoxPrompt(0, 0, 8, 8),)), coarse_profile())
        assert res.binary.sum() == 64
