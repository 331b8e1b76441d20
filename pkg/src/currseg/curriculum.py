"""Coarse-to-fine prompting schedule.

Stage 1 segments from detector boxes (after NMS).  Every later stage samples
edge points on the previous binary mask and segments again with those points
in the sparse channel and the previous soft mask as the dense prior.  The
:class:`Scenario` wirings reproduce the prompt combinations of the ablation
table: point-only, box-only, box + mask, point + box at once, and the full
schedule.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional, Sequence

import numpy as np

from .backend import BuiltinSegmenter, PromptBundle, SegmentationResult, StageProfile, coarse_profile, fine_profile
from .core import BoxPrompt, MetricsRecord, PointPrompt, nms, rle_encode, score
from .promptgen import BoxProposerConfig, EdgePointConfig, propose_boxes, sample_edge_points

EMPTY_BOX_POLICIES = ("return-empty", "whole-image-box")


class Scenario(str, Enum):
    POINT_ONLY = "point-only"
    BOX_ONLY = "box-only"
    BOX_PLUS_MASK = "box-plus-mask"
    POINT_PLUS_BOX = "point-plus-box-simultaneous"
    FULL = "full-curriculum"

    @classmethod
    def parse(cls, name) -> "Scenario":
        if isinstance(name, cls):
            return name
        try:
            return cls(name)
        except ValueError:
            valid = ", ".join(s.value for s in cls)
            raise ValueError(f"unknown scenario {name!r}; valid names: {valid}") from None


# (point, box, mask) prompt types each scenario uses
SCENARIO_PROMPTS = {
    Scenario.POINT_ONLY: (True, False, False),
    Scenario.BOX_ONLY: (False, True, False),
    Scenario.BOX_PLUS_MASK: (False, True, True),
    Scenario.POINT_PLUS_BOX: (True, True, False),
    Scenario.FULL: (True, True, True),
}


class StageError(RuntimeError):
    """A backend failure, tagged with the stage that raised it."""

    def __init__(self, stage: int, cause: BaseException):
        super().__init__(f"stage {stage}: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


class MissingPointsError(ValueError):
    pass


@dataclass(frozen=True)
class CurriculumConfig:
    steps: int = 2
    coarse_profile: StageProfile = field(default_factory=coarse_profile)
    fine_profile: StageProfile = field(default_factory=fine_profile)
    box_cfg: BoxProposerConfig = field(default_factory=BoxProposerConfig)
    point_cfg: EdgePointConfig = field(default_factory=EdgePointConfig)
    per_box_segmentation: bool = True
    empty_box_policy: str = "return-empty"

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.empty_box_policy not in EMPTY_BOX_POLICIES:
            raise ValueError(f"empty_box_policy must be one of {EMPTY_BOX_POLICIES}")


@dataclass
class Generators:
    """Prompt sources.  ``fixed_points`` (e.g. from a sidecar) bypass point generation."""

    boxes: Callable[[np.ndarray, BoxProposerConfig], List[BoxPrompt]] = propose_boxes
    points: Callable[[np.ndarray, np.ndarray, EdgePointConfig], List[PointPrompt]] = sample_edge_points
    fixed_points: Optional[Sequence[PointPrompt]] = None


@dataclass
class StageTrace:
    stage_index: int
    prompts_used: PromptBundle
    result: SegmentationResult
    metrics_vs_gt: Optional[MetricsRecord] = None
    note: Optional[str] = None

    def to_dict(self) -> dict:
        r = self.result
        return {
            "stage": self.stage_index,
            "prompts": self.prompts_used.to_dict(),
            "mask": rle_encode(r.binary),
            "soft_sha256": hashlib.sha256(np.ascontiguousarray(r.soft, dtype=np.float64).tobytes()).hexdigest(),
            "solver_iters": int(r.solver_iters),
            "solver_residual": float(r.solver_residual),
            "converged": bool(r.converged),
            "metrics": None if self.metrics_vs_gt is None else dataclasses.asdict(self.metrics_vs_gt),
            "note": self.note,
        }


@dataclass
class PipelineResult:
    final: SegmentationResult
    stages: List[StageTrace]
    scenario: Scenario = Scenario.FULL

    def to_dict(self) -> dict:
        return {"scenario": self.scenario.value, "stages": [s.to_dict() for s in self.stages]}


def empty_result(shape) -> SegmentationResult:
    return SegmentationResult(soft=np.zeros(shape), binary=np.zeros(shape, dtype=bool))


def merge_results(results: Sequence[SegmentationResult]) -> SegmentationResult:
    """Pixelwise max of soft masks and union of binary masks."""
    if len(results) == 1:
        return results[0]
    raws = [r.raw for r in results]
    return SegmentationResult(
        soft=np.maximum.reduce([r.soft for r in results]),
        binary=np.logical_or.reduce([r.binary for r in results]),
        solver_iters=sum(r.solver_iters for r in results),
        solver_residual=max(r.solver_residual for r in results),
        converged=all(r.converged for r in results),
        raw=None if any(x is None for x in raws) else np.maximum.reduce(raws),
    )


class _Runner:
    """Per-image state shared by the scenario wirings."""

    def __init__(self, image, cfg: CurriculumConfig, backend, generators, image_path=None):
        self.image = np.asarray(image, dtype=np.float64)
        self.shape = self.image.shape[:2]
        self.cfg = cfg
        self.gen = generators or Generators()
        self.session = (backend or BuiltinSegmenter()).prepare(self.image, image_path)

    def call(self, stage: int, bundle: PromptBundle, profile: StageProfile) -> SegmentationResult:
        try:
            return self.session.segment(bundle, profile)
        except Exception as exc:  # tagged and re-raised
            raise StageError(stage, exc) from exc

    def detect(self) -> List[BoxPrompt]:
        try:
            raw = self.gen.boxes(self.image, self.cfg.box_cfg)
        except Exception as exc:
            raise StageError(1, exc) from exc
        boxes = nms(raw, self.cfg.box_cfg.nms_iou)
        if not boxes and self.cfg.empty_box_policy == "whole-image-box":
            h, w = self.shape
            boxes = [BoxPrompt(0.0, 0.0, float(w), float(h), 0.0)]
        return boxes

    def boxes_stage(self, boxes: List[BoxPrompt], points: Sequence[PointPrompt] = (), stage: int = 1) -> StageTrace:
        """One sparse-prompt call (or one per box), coarse profile."""
        profile = self.cfg.coarse_profile
        bundle = PromptBundle(points=tuple(points), boxes=tuple(boxes))
        if self.cfg.per_box_segmentation and len(boxes) > 1:
            parts = []
            for b in boxes:
                own = tuple(p for p in points if _near_box(p, b, profile.box_margin))
                parts.append(self.call(stage, PromptBundle(points=own, boxes=(b,)), profile))
            result = merge_results(parts)
        else:
            result = self.call(stage, bundle, profile)
        return StageTrace(stage, bundle, result)

    def no_detection(self) -> StageTrace:
        return StageTrace(1, PromptBundle(), empty_result(self.shape), note="no boxes detected")

    def refine(self, prev: StageTrace, stage: int, with_points: bool = True) -> StageTrace:
        points: Sequence[PointPrompt] = ()
        if with_points:
            try:
                points = self.gen.points(prev.result.binary, self.image, self.cfg.point_cfg)
            except Exception as exc:
                raise StageError(stage, exc) from exc
        bundle = PromptBundle(points=tuple(points), dense_prior=prev.result.soft)
        return StageTrace(stage, bundle, self.call(stage, bundle, self.cfg.fine_profile))


def _near_box(p: PointPrompt, b: BoxPrompt, margin: float) -> bool:
    return b.x1 - margin <= p.x <= b.x2 + margin and b.y1 - margin <= p.y <= b.y2 + margin


def _finish(stages: List[StageTrace], scenario: Scenario, gt) -> PipelineResult:
    if gt is not None:
        gt = np.asarray(gt, dtype=bool)
        for s in stages:
            s.metrics_vs_gt = score(s.result.binary, gt)
    return PipelineResult(final=stages[-1].result, stages=stages, scenario=scenario)


def run(image, cfg: Optional[CurriculumConfig] = None, backend=None, generators: Optional[Generators] = None,
        gt=None, image_path=None) -> PipelineResult:
    """Run ``cfg.steps`` stages: boxes first, then edge points + previous soft mask."""
    cfg = cfg or CurriculumConfig()
    runner = _Runner(image, cfg, backend, generators, image_path)
    boxes = runner.detect()
    if not boxes:
        return _finish([runner.no_detection()], Scenario.FULL if cfg.steps > 1 else Scenario.BOX_ONLY, gt)
    stages = [runner.boxes_stage(boxes)]
    for k in range(2, cfg.steps + 1):
        stages.append(runner.refine(stages[-1], k))
    return _finish(stages, Scenario.FULL if cfg.steps > 1 else Scenario.BOX_ONLY, gt)


def gt_edge_points(gt, image, point_cfg: EdgePointConfig) -> List[PointPrompt]:
    """Edge points taken from the ground-truth outline (no gradient snapping)."""
    return sample_edge_points(np.asarray(gt, dtype=bool), image, dataclasses.replace(point_cfg, snap_radius=0.0))


def run_scenario(image, scenario, cfg: Optional[CurriculumConfig] = None, backend=None,
                 generators: Optional[Generators] = None, gt=None, image_path=None) -> PipelineResult:
    """Run one ablation wiring.

    point-only needs ``generators.fixed_points`` or ``gt`` (points come from the
    true outline).  point-plus-box puts boxes and edge points into a single
    sparse call; its edge points come from ``fixed_points`` when given, else
    from an auxiliary box-only pass recorded as stage 1.
    """
    scenario = Scenario.parse(scenario)
    cfg = cfg or CurriculumConfig()
    if scenario is Scenario.BOX_ONLY:
        res = run(image, dataclasses.replace(cfg, steps=1), backend, generators, gt, image_path)
        res.scenario = scenario
        return res
    if scenario is Scenario.FULL:
        res = run(image, dataclasses.replace(cfg, steps=2), backend, generators, gt, image_path)
        res.scenario = scenario
        return res

    gen = generators or Generators()
    if scenario is Scenario.POINT_ONLY:
        if gen.fixed_points is not None:
            points = list(gen.fixed_points)
        elif gt is not None:
            points = gt_edge_points(gt, image, cfg.point_cfg)
        else:
            raise MissingPointsError("point-only scenario needs sidecar points or a ground-truth mask")
        runner = _Runner(image, cfg, backend, gen, image_path)
        if not points:
            return _finish([StageTrace(1, PromptBundle(), empty_result(runner.shape), note="no edge points")],
                           scenario, gt)
        bundle = PromptBundle(points=tuple(points))
        return _finish([StageTrace(1, bundle, runner.call(1, bundle, cfg.coarse_profile))], scenario, gt)

    runner = _Runner(image, cfg, backend, gen, image_path)
    boxes = runner.detect()
    if not boxes:
        return _finish([runner.no_detection()], scenario, gt)
    if scenario is Scenario.BOX_PLUS_MASK:
        first = runner.boxes_stage(boxes)
        return _finish([first, runner.refine(first, 2, with_points=False)], scenario, gt)

    # point + box in the sparse channel at once
    if gen.fixed_points is not None:
        return _finish([runner.boxes_stage(boxes, list(gen.fixed_points))], scenario, gt)
    aux = runner.boxes_stage(boxes)
    aux.note = "auxiliary box-only pass used to place edge points"
    try:
        points = gen.points(aux.result.binary, runner.image, cfg.point_cfg)
    except Exception as exc:
        raise StageError(2, exc) from exc
    return _finish([aux, runner.boxes_stage(boxes, points, stage=2)], scenario, gt)
