import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from currseg.core import BoxPrompt, PointPrompt, connected_components, disk_mask, extract_contours
from currseg.promptgen import (
    BoxProposerConfig,
    EdgePointConfig,
    OutOfBoundsError,
    SchemaError,
    SidecarNotFoundError,
    load_boxes_json,
    load_points_json,
    propose_boxes,
    sample_edge_points,
    sidecar_path,
    write_boxes_json,
    write_points_json,
)

from conftest import disk_image


def circle(radius, size=128):
    return disk_mask((size, size), size / 2, size / 2, radius)


def polar(points, c=64.0):
    xy = np.array([[p.x, p.y] for p in points]) - c
    return np.hypot(xy[:, 0], xy[:, 1]), np.degrees(np.arctan2(xy[:, 1], xy[:, 0]))


def two_blobs(shift=(0, 0)):
    img = np.full((96, 96), 0.8)
    gt = np.zeros((96, 96), bool)
    gt |= disk_mask(gt.shape, 28 + shift[0], 30 + shift[1], 10)
    gt |= disk_mask(gt.shape, 66 + shift[0], 62 + shift[1], 12)
    img[gt] = 0.25
    return img, gt


class TestBoxes:
    def test_blank(self):
        assert propose_boxes(np.full((32, 32), 0.5), BoxProposerConfig()) == []

    def test_two_blobs(self):
        img, gt = two_blobs()
        noisy = np.clip(img + np.random.default_rng(0).normal(0, 0.03, img.shape), 0, 1)
        boxes = propose_boxes(noisy, BoxProposerConfig())
        assert len(boxes) == 2
        labels, _ = connected_components(gt)
        truth = [ndimage.find_objects(labels)[i] for i in range(2)]
        for sl in truth:
            tb = (sl[1].start, sl[0].start, sl[1].stop, sl[0].stop)
            match = [b for b in boxes if max(abs(b.x1 - tb[0]), abs(b.y1 - tb[1]),
                                             abs(b.x2 - tb[2]), abs(b.y2 - tb[3])) <= 2]
            assert len(match) == 1
        assert all(0 <= b.score <= 1 for b in boxes)
        assert [b.score for b in boxes] == sorted((b.score for b in boxes), reverse=True)

    def test_polarity(self):
        img, _ = two_blobs()
        assert len(propose_boxes(1 - img, BoxProposerConfig(polarity="bright-on-dark"))) == 2

    def test_min_area_and_max_boxes(self):
        img, _ = two_blobs()
        assert len(propose_boxes(img, BoxProposerConfig(min_area=350))) == 1
        assert len(propose_boxes(img, BoxProposerConfig(max_boxes=1))) == 1

    @settings(max_examples=15, deadline=None)
    @given(st.integers(-8, 8), st.integers(-8, 8))
    def test_translation_equivariance(self, dx, dy):
        base = propose_boxes(two_blobs()[0], BoxProposerConfig())
        moved = propose_boxes(two_blobs((dx, dy))[0], BoxProposerConfig())
        expected = [BoxPrompt(b.x1 + dx, b.y1 + dy, b.x2 + dx, b.y2 + dy, b.score) for b in base]
        assert sorted(moved, key=lambda b: b.x1) == sorted(expected, key=lambda b: b.x1)

    def test_external_json(self, tmp_path):
        side = tmp_path / "a.boxes.json"
        side.write_text(json.dumps([
            {"x1": 1, "y1": 1, "x2": 5, "y2": 5, "score": 0.2},
            {"x1": -3, "y1": 2, "x2": 10, "y2": 40, "score": 0.9, "text": "lesion"},
            {"x1": 2, "y1": 2, "x2": 3, "y2": 3},
        ]))
        cfg = BoxProposerConfig(method="external-json", sidecar_path=str(side))
        boxes = propose_boxes(np.zeros((32, 32)), cfg)
        assert boxes == [BoxPrompt(2, 2, 3, 3, 1.0), BoxPrompt(0, 2, 10, 32, 0.9), BoxPrompt(1, 1, 5, 5, 0.2)]

    def test_external_json_needs_path(self):
        with pytest.raises(SidecarNotFoundError):
            propose_boxes(np.zeros((8, 8)), BoxProposerConfig(method="external-json"))

    @pytest.mark.parametrize("bad", [{"method": "dino"}, {"polarity": "up"}, {"min_area": 0},
                                     {"nms_iou": 0}, {"max_boxes": 0}])
    def test_invalid_config(self, bad):
        with pytest.raises(ValueError):
            BoxProposerConfig(**bad)


class TestEdgePoints:
    def test_circle_geometry(self):
        m = circle(20)
        pts = sample_edge_points(m, m.astype(float), EdgePointConfig(k=8, snap_radius=0, edge_offset=0))
        r, ang = polar(pts)
        assert len(pts) == 8
        assert np.all(np.abs(r - 20) <= 1.5)
        gaps = np.mod(np.diff(np.concatenate([ang, ang[:1] + 360])), 360)
        assert np.all(np.abs(gaps - 45) <= 5)
        assert all(p.label == 0 for p in pts)

    def test_k1_is_topmost(self):
        m = circle(20)
        (p,) = sample_edge_points(m, m.astype(float), EdgePointConfig(k=1, snap_radius=0, edge_offset=0))
        top = extract_contours(m)[0].points[0]
        assert (p.x, p.y) == tuple(top)
        assert p.y == extract_contours(m)[0].points[:, 1].min()

    def test_snap_to_true_edge(self):
        true = circle(20)
        image = np.where(true, 0.2, 0.8)
        pts = sample_edge_points(circle(18), image, EdgePointConfig(k=8, snap_radius=4, edge_offset=0))
        r, _ = polar(pts)
        assert np.all(np.abs(r - 20) <= 1.5)

    def test_offset_direction(self):
        m = circle(20)
        cfg = EdgePointConfig(k=8, snap_radius=0, edge_offset=3)
        r0, _ = polar(sample_edge_points(m, m.astype(float), cfg))
        r1, _ = polar(sample_edge_points(m, m.astype(float), EdgePointConfig(k=8, label=1, snap_radius=0, edge_offset=3)))
        assert np.all(np.abs(r0 - 23) <= 1.5)
        assert np.all(np.abs(r1 - 17) <= 1.5)

    def test_counts_per_component(self):
        _, gt = two_blobs()
        img = gt.astype(float)
        assert len(sample_edge_points(gt, img, EdgePointConfig(k=5))) == 10
        assert len(sample_edge_points(gt, img, EdgePointConfig(k=5, per_component=False))) == 5
        assert sample_edge_points(np.zeros_like(gt), img, EdgePointConfig()) == []

    def test_min_perimeter(self):
        m = np.zeros((20, 20), bool)
        m[5, 5] = True
        assert sample_edge_points(m, m.astype(float), EdgePointConfig(min_perimeter=8)) == []

    @settings(max_examples=25, deadline=None)
    @given(st.floats(6, 30), st.floats(0, 6), st.floats(0, 5), st.integers(1, 16), st.integers(0, 1))
    def test_points_stay_near_contour(self, radius, snap, offset, k, label):
        img, gt = disk_image(80, radius=radius, noise=0.05)
        coarse = ndimage.binary_erosion(gt, iterations=2) | (gt & (np.arange(80)[None, :] < 40))
        cfg = EdgePointConfig(k=k, label=label, snap_radius=snap, edge_offset=offset)
        pts = sample_edge_points(coarse, img, cfg)
        contour = np.vstack([c.points for c in extract_contours(coarse)])
        for p in pts:
            assert p.label == label and p.in_bounds(80, 80)
            d = np.hypot(contour[:, 0] - p.x, contour[:, 1] - p.y).min()
            assert d <= snap + offset + 1

    @settings(max_examples=10, deadline=None)
    @given(st.integers(-10, 10), st.integers(-10, 10))
    def test_translation_equivariance(self, dx, dy):
        img, gt = disk_image(96, radius=15, noise=0.05, seed=3)
        coarse = ndimage.binary_erosion(gt, iterations=2)
        base = sample_edge_points(coarse, img, EdgePointConfig())
        moved = sample_edge_points(np.roll(coarse, (dy, dx), (0, 1)), np.roll(img, (dy, dx), (0, 1)),
                                   EdgePointConfig())
        a = np.array([[p.x + dx, p.y + dy] for p in base])
        b = np.array([[p.x, p.y] for p in moved])
        assert np.allclose(a, b, atol=1e-9)

    def test_deterministic(self):
        img, gt = disk_image(64, radius=12, noise=0.05)
        a = sample_edge_points(gt, img, EdgePointConfig())
        b = sample_edge_points(gt, img, EdgePointConfig())
        assert json.dumps([p.to_dict() for p in a]) == json.dumps([p.to_dict() for p in b])

    def test_shape_check(self):
        with pytest.raises(ValueError):
            sample_edge_points(np.zeros((4, 4), bool), np.zeros((5, 4)), EdgePointConfig())

    @pytest.mark.parametrize("bad", [{"k": 0}, {"label": 2}, {"snap_radius": -1}, {"gradient_sigma": 0}])
    def test_invalid_config(self, bad):
        with pytest.raises(ValueError):
            EdgePointConfig(**bad)


class TestSidecars:
    def test_paths(self, tmp_path):
        assert sidecar_path(tmp_path / "img_0001.png", "boxes").name == "img_0001.boxes.json"
        assert sidecar_path(tmp_path / "img_0001.png", "points").name == "img_0001.points.json"
        with pytest.raises(ValueError):
            sidecar_path("a.png", "masks")

    def test_roundtrip(self, tmp_path):
        boxes = [BoxPrompt(1, 2, 3, 4, 0.5), BoxPrompt(0.5, 0.25, 9, 9, 1.0)]
        points = [PointPrompt(1.5, 2.5, 0), PointPrompt(3.0, 4.0, 1)]
        assert load_boxes_json(write_boxes_json(tmp_path / "b.json", boxes, "nodule")) == boxes
        assert load_points_json(write_points_json(tmp_path / "p.json", points)) == points

    def test_empty_array(self, tmp_path):
        (tmp_path / "e.json").write_text("[]")
        assert load_boxes_json(tmp_path / "e.json") == []
        assert load_points_json(tmp_path / "e.json") == []

    def test_errors(self, tmp_path):
        with pytest.raises(SidecarNotFoundError):
            load_boxes_json(tmp_path / "missing.json")
        bad = tmp_path / "bad.json"
        for content in ['[{"x": 1, "y": 1, "label": 3}]', '[{"x": 1, "y": 1}]', '{"x": 1}',
                        '[{"x": 1, "y": 1, "label": 0, "z": 2}]', "not json", '[{"x": "1", "y": 1, "label": 0}]']:
            bad.write_text(content)
            with pytest.raises(SchemaError):
                load_points_json(bad)
        bad.write_text('[{"x1": 5, "y1": 0, "x2": 1, "y2": 3}]')
        with pytest.raises(SchemaError):
            load_boxes_json(bad)

    def test_bounds(self, tmp_path):
        f = tmp_path / "b.json"
        f.write_text('[{"x1": -2, "y1": 0, "x2": 5, "y2": 5}]')
        assert load_boxes_json(f, image_size=(8, 8)) == [BoxPrompt(0, 0, 5, 5)]
        with pytest.raises(OutOfBoundsError):
            load_boxes_json(f, image_size=(8, 8), strict=True)
        f.write_text('[{"x1": 20, "y1": 20, "x2": 25, "y2": 25}]')
        with pytest.raises(OutOfBoundsError):
            load_boxes_json(f, image_size=(8, 8))
        p = tmp_path / "p.json"
        p.write_text('[{"x": 9, "y": 1, "label": 1}]')
        assert load_points_json(p, image_size=(8, 8))[0].in_bounds(8, 8)
        with pytest.raises(OutOfBoundsError):
            load_points_json(p, image_size=(8, 8), strict=True)
