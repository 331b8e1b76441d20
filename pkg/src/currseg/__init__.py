"""Coarse-to-fine automatic prompting for promptable segmentation.

Boxes from a detector give a coarse mask; edge points sampled on that mask,
together with the mask itself as a dense prior, give the refined mask.  A
random-walker segmenter is built in; any external segmenter can be plugged in
through a file-exchange adapter.
"""
from .backend import (
    AdapterConfig,
    BuiltinSegmenter,
    ExternalSegmenter,
    PromptBundle,
    SegmentationResult,
    StageProfile,
    coarse_profile,
    fine_profile,
)
from .core import BoxPrompt, Contour, MetricsRecord, PointPrompt, box_iou, dice, iou, nms, score
from .curriculum import CurriculumConfig, Generators, PipelineResult, Scenario, StageTrace, run, run_scenario
from .harness import (
    Dataset,
    EvalReport,
    ablation_run,
    emit_report,
    evaluate,
    load_dataset,
    polarity_experiment,
    render_overlay,
)
from .promptgen import BoxProposerConfig, EdgePointConfig, propose_boxes, sample_edge_points
from .synthetic import SyntheticSpec, generate_synthetic

__version__ = "0.1.0"

__all__ = [
    "AdapterConfig", "BoxPrompt", "BoxProposerConfig", "BuiltinSegmenter", "Contour", "CurriculumConfig",
    "Dataset", "EdgePointConfig", "EvalReport", "ExternalSegmenter", "Generators", "MetricsRecord",
    "PipelineResult", "PointPrompt", "PromptBundle", "Scenario", "SegmentationResult", "StageProfile",
    "StageTrace", "SyntheticSpec", "ablation_run", "box_iou", "coarse_profile", "dice", "emit_report",
    "evaluate", "fine_profile", "generate_synthetic", "iou", "load_dataset", "nms", "polarity_experiment",
    "propose_boxes", "render_overlay", "run", "run_scenario", "sample_edge_points", "score",
]
