"""Datasets, evaluation, ablation and polarity runs, reports and overlays.

Scoring is per image (whole-mask Dice/IoU against the ground truth).  An
image whose pipeline raises is kept as a zero-score entry with an error note,
so a missed detection costs the mean exactly like a wrong mask would.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import pngio
from .backend import PromptBundle, SegmentationResult
from .core import BoxPrompt, MetricsRecord, PointPrompt, rle_decode, score
from .curriculum import (
    SCENARIO_PROMPTS,
    CurriculumConfig,
    Generators,
    Scenario,
    StageTrace,
    run_scenario,
)
from .promptgen import load_boxes_json, load_points_json, sidecar_path
from .synthetic import SyntheticSpec, generate_synthetic, render_sample  # noqa: F401  (re-exported)

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    entries: List[Tuple[Path, Path]]
    split: str = "test"
    root: Optional[Path] = None

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def ids(self) -> List[str]:
        return [Path(img).stem for img, _ in self.entries]


def load_dataset(root, split: str = "test") -> Dataset:
    """Read ``root/<split>/images/*.png`` with masks of the same name under ``masks/``."""
    if split not in SPLITS:
        raise DatasetError(f"unknown split {split!r}; expected one of {SPLITS}")
    root = Path(root)
    img_dir = root / split / "images"
    mask_dir = root / split / "masks"
    images = sorted(img_dir.glob("*.png")) if img_dir.is_dir() else []
    if not images:
        log.warning("no images found under %s", img_dir)
        return Dataset(entries=[], split=split, root=root)
    entries = []
    for img in images:
        mask = mask_dir / img.name
        if not mask.is_file():
            raise DatasetError(f"image {img} has no mask (expected {mask})")
        if pngio.image_size(img) != pngio.image_size(mask):
            raise DatasetError(f"{img} and {mask} differ in size")
        entries.append((img, mask))
    return Dataset(entries=entries, split=split, root=root)


# --------------------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class ImageRecord:
    id: str
    scenario: str
    metrics: MetricsRecord
    stage_metrics: Tuple[MetricsRecord, ...] = ()
    error_note: str = ""

    @property
    def n_stages(self) -> int:
        return len(self.stage_metrics)


@dataclass
class EvalReport:
    rows: List[ImageRecord]
    fingerprint: str = ""
    wall_clock: float = 0.0
    # scenario -> (point, box, mask) check marks, in table order
    table: Dict[str, Tuple[bool, bool, bool]] = field(default_factory=dict)

    def scenarios(self) -> List[str]:
        seen: List[str] = []
        for r in self.rows:
            if r.scenario not in seen:
                seen.append(r.scenario)
        return seen

    def select(self, scenario: str) -> List[ImageRecord]:
        return [r for r in self.rows if r.scenario == scenario]

    def mean_dice(self, scenario: Optional[str] = None) -> float:
        rows = self.rows if scenario is None else self.select(scenario)
        return math.fsum(r.metrics.dice for r in rows) / len(rows) if rows else float("nan")

    def mean_iou(self, scenario: Optional[str] = None) -> float:
        rows = self.rows if scenario is None else self.select(scenario)
        return math.fsum(r.metrics.iou for r in rows) / len(rows) if rows else float("nan")

    @property
    def n_errors(self) -> int:
        return sum(1 for r in self.rows if r.error_note)


def _generators_for(image_path: Path, cfg: CurriculumConfig) -> Tuple[Generators, CurriculumConfig]:
    gen = Generators()
    if cfg.box_cfg.method == "external-json":
        box_cfg = dataclasses.replace(cfg.box_cfg, sidecar_path=str(sidecar_path(image_path, "boxes")))
        cfg = dataclasses.replace(cfg, box_cfg=box_cfg)
    points_file = sidecar_path(image_path, "points")
    if points_file.is_file():
        shape = pngio.image_size(image_path)
        gen.fixed_points = load_points_json(points_file, image_size=shape)
    return gen, cfg


def evaluate_one(image_path, mask_path, cfg: CurriculumConfig, scenario, backend=None,
                 label: Optional[str] = None) -> ImageRecord:
    """Score one image; failures become zero-score records."""
    scenario = Scenario.parse(scenario)
    name = label or scenario.value
    image_path = Path(image_path)
    try:
        image = pngio.read_image(image_path)
        gt = pngio.read_mask(mask_path)
        gen, run_cfg = _generators_for(image_path, cfg)
        res = run_scenario(image, scenario, run_cfg, backend, gen, gt=gt, image_path=image_path)
    except Exception as exc:  # scored miss
        zero = MetricsRecord(0.0, 0.0)
        return ImageRecord(image_path.stem, name, zero, (), f"{type(exc).__name__}: {exc}")
    stage_metrics = tuple(s.metrics_vs_gt for s in res.stages)
    note = "; ".join(s.note for s in res.stages if s.note and s.note.startswith("no "))
    return ImageRecord(image_path.stem, name, score(res.final.binary, gt), stage_metrics, note)


def _evaluate_task(args):
    return evaluate_one(*args)


def _run_tasks(tasks: List[tuple], jobs: int) -> List[ImageRecord]:
    if jobs <= 1 or len(tasks) <= 1:
        return [_evaluate_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        # map preserves input order, so the reduction stays deterministic
        return list(pool.map(_evaluate_task, tasks))


def config_fingerprint(cfg) -> str:
    """Stable short hash of a (nested) dataclass or plain mapping."""
    data = dataclasses.asdict(cfg) if dataclasses.is_dataclass(cfg) else cfg
    text = json.dumps(data, sort_keys=True, separators=(",", ":"), default=str)
    import hashlib

    return hashlib.sha256(text.encode()).hexdigest()[:16]


def evaluate(dataset: Dataset, cfg: CurriculumConfig, scenario, backend=None, jobs: int = 1,
             label: Optional[str] = None) -> EvalReport:
    if len(dataset) == 0:
        raise DatasetError("cannot evaluate an empty dataset")
    scenario = Scenario.parse(scenario)
    t0 = time.perf_counter()
    tasks = [(img, mask, cfg, scenario, backend, label) for img, mask in dataset.entries]
    rows = _run_tasks(tasks, jobs)
    return EvalReport(
        rows=rows,
        fingerprint=config_fingerprint(cfg),
        wall_clock=time.perf_counter() - t0,
        table={label or scenario.value: SCENARIO_PROMPTS[scenario]},
    )


def _concat(reports: Sequence[EvalReport], fingerprint: str) -> EvalReport:
    out = EvalReport(rows=[], fingerprint=fingerprint)
    for r in reports:
        out.rows.extend(r.rows)
        out.wall_clock += r.wall_clock
        out.table.update(r.table)
    return out


ABLATION_ORDER = (
    Scenario.POINT_ONLY,
    Scenario.BOX_ONLY,
    Scenario.BOX_PLUS_MASK,
    Scenario.POINT_PLUS_BOX,
    Scenario.FULL,
)


def ablation_run(dataset: Dataset, cfg: CurriculumConfig, backend=None, jobs: int = 1) -> EvalReport:
    """All five prompt-combination scenarios over the same dataset."""
    parts = [evaluate(dataset, cfg, s, backend, jobs) for s in ABLATION_ORDER]
    return _concat(parts, config_fingerprint(cfg))


def polarity_label(label: int) -> str:
    return f"{Scenario.FULL.value}[label={label}]"


def polarity_experiment(dataset: Dataset, cfg: CurriculumConfig, backend=None, jobs: int = 1) -> EvalReport:
    """Full curriculum with negative (0) and then positive (1) edge points."""
    parts = []
    for label in (0, 1):
        c = dataclasses.replace(cfg, point_cfg=dataclasses.replace(cfg.point_cfg, label=label))
        parts.append(evaluate(dataset, c, Scenario.FULL, backend, jobs, label=polarity_label(label)))
    return _concat(parts, config_fingerprint(cfg))


# --------------------------------------------------------------------------- reports


CSV_COLUMNS = ("id", "scenario", "stage", "dice", "iou", "error_note")


def _mark(flag: bool) -> str:
    return "x" if flag else ""


def summary_table(report: EvalReport) -> str:
    lines = [
        "| scenario | point | box | mask | n | errors | mDice | mIoU |",
        "|---|:-:|:-:|:-:|--:|--:|--:|--:|",
    ]
    for sc in report.scenarios():
        rows = report.select(sc)
        p, b, m = report.table.get(sc, (False, False, False))
        lines.append(
            f"| {sc} | {_mark(p)} | {_mark(b)} | {_mark(m)} | {len(rows)} | "
            f"{sum(1 for r in rows if r.error_note)} | {report.mean_dice(sc):.12f} | {report.mean_iou(sc):.12f} |"
        )
    return "\n".join(lines)


def emit_report(report: EvalReport, out_dir, title: str = "Evaluation") -> Dict[str, Path]:
    """Write ``results.csv`` (one row per image and scenario), ``stages.csv`` and ``summary.md``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = out / "results.csv"
    with results.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in report.rows:
            w.writerow([r.id, r.scenario, r.n_stages, repr(r.metrics.dice), repr(r.metrics.iou), r.error_note])
    stages = out / "stages.csv"
    with stages.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in report.rows:
            for k, m in enumerate(r.stage_metrics, start=1):
                w.writerow([r.id, r.scenario, k, repr(m.dice), repr(m.iou), r.error_note])
    summary = out / "summary.md"
    summary.write_text(
        f"# {title}\n\nconfig fingerprint: `{report.fingerprint}`\n\n"
        f"```\n{summary_table(report)}\n```\n"
    )
    return {"results": results, "stages": stages, "summary": summary}


# --------------------------------------------------------------------------- overlays

MASK_TINT = np.array([0.0, 90.0, 255.0])
GT_TINT = np.array([0.0, 200.0, 80.0])
BOX_COLOR = np.array([255, 255, 0], dtype=np.uint8)
POINT_COLORS = {0: np.array([255, 0, 0], dtype=np.uint8), 1: np.array([0, 255, 0], dtype=np.uint8)}


def _rgb(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    return np.rint(np.clip(img, 0, 1) * 255.0)


def _tint(base: np.ndarray, mask: np.ndarray, color: np.ndarray, alpha: float = 0.45) -> np.ndarray:
    out = base.copy()
    out[mask] = np.rint((1 - alpha) * base[mask] + alpha * color)
    return out.astype(np.uint8)


def _draw_box(panel: np.ndarray, b: BoxPrompt) -> None:
    h, w = panel.shape[:2]
    x1, y1 = int(np.clip(np.floor(b.x1), 0, w - 1)), int(np.clip(np.floor(b.y1), 0, h - 1))
    x2, y2 = int(np.clip(np.ceil(b.x2) - 1, 0, w - 1)), int(np.clip(np.ceil(b.y2) - 1, 0, h - 1))
    panel[y1, x1:x2 + 1] = BOX_COLOR
    panel[y2, x1:x2 + 1] = BOX_COLOR
    panel[y1:y2 + 1, x1] = BOX_COLOR
    panel[y1:y2 + 1, x2] = BOX_COLOR


def _draw_point(panel: np.ndarray, p: PointPrompt, arm: int = 2) -> None:
    h, w = panel.shape[:2]
    c, r = int(min(p.x, w - 1)), int(min(p.y, h - 1))
    color = POINT_COLORS[p.label]
    panel[r, max(c - arm, 0):min(c + arm, w - 1) + 1] = color
    panel[max(r - arm, 0):min(r + arm, h - 1) + 1, c] = color


def overlay_panels(image, stages: Sequence[StageTrace], gt=None) -> np.ndarray:
    """Original, one panel per stage (mask tint plus that stage's prompts), optional ground truth."""
    if not stages:
        raise ValueError("render_overlay needs at least one stage")
    base = _rgb(image)
    panels = [base.astype(np.uint8)]
    for s in stages:
        panel = _tint(base, s.result.binary, MASK_TINT)
        for b in s.prompts_used.boxes:
            _draw_box(panel, b)
        for p in s.prompts_used.points:
            _draw_point(panel, p)
        panels.append(panel)
    if gt is not None:
        panels.append(_tint(base, np.asarray(gt, dtype=bool), GT_TINT))
    return np.concatenate(panels, axis=1)


def render_overlay(image, stages: Sequence[StageTrace], out_path, gt=None) -> Path:
    from PIL import Image as PILImage

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(overlay_panels(image, stages, gt)).save(out_path, format="PNG")
    return out_path


def stage_from_dict(d: dict) -> StageTrace:
    """Rebuild a (mask-only) stage trace from its JSON form."""
    binary = rle_decode(d["mask"])
    prompts = PromptBundle(
        points=tuple(PointPrompt(p["x"], p["y"], p["label"]) for p in d["prompts"]["points"]),
        boxes=tuple(BoxPrompt(b["x1"], b["y1"], b["x2"], b["y2"], b["score"]) for b in d["prompts"]["boxes"]),
    )
    result = SegmentationResult(
        soft=binary.astype(np.float64),
        binary=binary,
        solver_iters=d.get("solver_iters", 0),
        solver_residual=d.get("solver_residual", 0.0),
        converged=d.get("converged", True),
    )
    m = d.get("metrics")
    return StageTrace(d["stage"], prompts, result, None if m is None else MetricsRecord(**m), d.get("note"))


def load_trace(path) -> List[StageTrace]:
    data = json.loads(Path(path).read_text())
    return [stage_from_dict(s) for s in data["stages"]]
