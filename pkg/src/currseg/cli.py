"""``currseg`` command line.

Exit status: 0 success, 1 missing or unreadable input image (``run``/``viz``),
2 configuration error, 3 data error, 4 runtime (backend) failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import harness, pngio
from .backend import AdapterError
from .config import AppConfig, ConfigError, load_config
from .curriculum import MissingPointsError, Scenario, StageError, run, run_scenario
from .promptgen import OutOfBoundsError, SchemaError, SidecarNotFoundError
from .synthetic import PackingError

EXIT_OK, EXIT_INPUT, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3, 4

log = logging.getLogger("currseg")


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _global_flags(defaults: bool) -> argparse.ArgumentParser:
    # Subparsers use SUPPRESS so a flag given before the subcommand is not reset.
    d = None if defaults else argparse.SUPPRESS
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=d, help="YAML config file (default: $CURRSEG_CONFIG)")
    p.add_argument("--seed", type=int, default=d, help="top-level seed (drives synthesis)")
    p.add_argument("--jobs", type=int, default=d, help="worker processes for evaluation")
    p.add_argument("--out", default=d, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true", default=False if defaults else argparse.SUPPRESS)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="currseg",
        description="Coarse-to-fine automatic prompting for promptable segmentation.",
        parents=[_global_flags(True)],
    )
    common = _global_flags(False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic lesion corpus")
    p.add_argument("--count", type=int, default=50)
    p.add_argument("--split", default="test", choices=harness.SPLITS)

    p = sub.add_parser("run", parents=[common], help="run the curriculum on one image")
    p.add_argument("image")
    p.add_argument("--gt", help="ground-truth mask for per-stage scores")
    p.add_argument("--scenario", help="one ablation wiring instead of the configured curriculum.steps schedule")

    p = sub.add_parser("eval", parents=[common], help="evaluate one scenario over a dataset split")
    p.add_argument("root")
    p.add_argument("--split", default="test")
    p.add_argument("--scenario", default=Scenario.FULL.value)

    p = sub.add_parser("ablate", parents=[common], help="all five prompt-combination scenarios")
    p.add_argument("root")
    p.add_argument("--split", default="test")

    p = sub.add_parser("polarity", parents=[common], help="full curriculum with label-0 and label-1 edge points")
    p.add_argument("root")
    p.add_argument("--split", default="test")

    p = sub.add_parser("viz", parents=[common], help="render a stage overlay from a trace.json")
    p.add_argument("trace")
    p.add_argument("image")
    p.add_argument("--gt")
    return parser


def _config(args) -> AppConfig:
    return load_config(args.config, overrides={"seed": args.seed, "jobs": args.jobs, "out": args.out})


def _scenario(name: str) -> Scenario:
    try:
        return Scenario.parse(name)
    except ValueError as exc:
        raise CommandError(EXIT_CONFIG, str(exc)) from None


def _read_input_image(path: str):
    if not Path(path).is_file():
        raise CommandError(EXIT_INPUT, f"image not found: {path}")
    try:
        return pngio.read_image(path)
    except Exception as exc:
        raise CommandError(EXIT_INPUT, f"cannot read image {path}: {exc}") from None


def cmd_synth(cfg: AppConfig, count: int, split: str = "test") -> int:
    if count < 0:
        raise CommandError(EXIT_CONFIG, "--count must be >= 0")
    ds = harness.generate_synthetic(cfg.synthetic_spec(), count, cfg.out, split)
    if count == 0:
        print("empty dataset: count=0, no files written")
        return EXIT_OK
    cfg.echo(cfg.out)
    print(f"wrote {len(ds)} image/mask pairs to {Path(cfg.out) / split} (seed {cfg.seed})")
    return EXIT_OK


def cmd_run(cfg: AppConfig, image_path: str, gt_path: Optional[str] = None,
            scenario: Optional[str] = None) -> int:
    sc = None if scenario is None else _scenario(scenario)
    image = _read_input_image(image_path)
    gt = pngio.read_mask(gt_path) if gt_path else None
    if sc is None:
        res = run(image, cfg.curriculum_config(), cfg.make_backend(), gt=gt, image_path=image_path)
    else:
        res = run_scenario(image, sc, cfg.curriculum_config(), cfg.make_backend(), gt=gt, image_path=image_path)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    pngio.write_mask(out / "final_mask.png", res.final.binary)
    (out / "trace.json").write_text(json.dumps(res.to_dict(), indent=2, sort_keys=True))
    harness.render_overlay(image, res.stages, out / "overlay.png", gt=gt)
    cfg.echo(out)
    for s in res.stages:
        line = f"stage {s.stage_index}: points={len(s.prompts_used.points)} boxes={len(s.prompts_used.boxes)}"
        if s.metrics_vs_gt is not None:
            line += f" dice={s.metrics_vs_gt.dice:.6f} iou={s.metrics_vs_gt.iou:.6f}"
        if s.note:
            line += f" ({s.note})"
        print(line)
    print(f"wrote {out / 'final_mask.png'}, {out / 'trace.json'}, {out / 'overlay.png'}")
    return EXIT_OK


def _load(root: str, split: str) -> harness.Dataset:
    if split not in harness.SPLITS:
        raise CommandError(EXIT_CONFIG, f"unknown split {split!r}; expected one of {harness.SPLITS}")
    ds = harness.load_dataset(root, split)
    if len(ds) == 0:
        raise CommandError(EXIT_DATA, f"no images under {Path(root) / split / 'images'}")
    return ds


def _finish_report(cfg: AppConfig, report: harness.EvalReport, title: str) -> int:
    report.fingerprint = cfg.fingerprint()
    files = harness.emit_report(report, cfg.out, title)
    cfg.echo(cfg.out)
    print(harness.summary_table(report))
    print(f"fingerprint {report.fingerprint}; wrote {files['results']} and {files['summary']}")
    return EXIT_OK


def cmd_eval(cfg: AppConfig, root: str, split: str = "test", scenario: str = Scenario.FULL.value) -> int:
    sc = _scenario(scenario)
    ds = _load(root, split)
    report = harness.evaluate(ds, cfg.curriculum_config(), sc, cfg.make_backend(), jobs=cfg.jobs)
    return _finish_report(cfg, report, f"Evaluation: {sc.value} on {split}")


def cmd_ablate(cfg: AppConfig, root: str, split: str = "test") -> int:
    ds = _load(root, split)
    report = harness.ablation_run(ds, cfg.curriculum_config(), cfg.make_backend(), jobs=cfg.jobs)
    return _finish_report(cfg, report, f"Prompt ablation on {split}")


def cmd_polarity(cfg: AppConfig, root: str, split: str = "test") -> int:
    ds = _load(root, split)
    report = harness.polarity_experiment(ds, cfg.curriculum_config(), cfg.make_backend(), jobs=cfg.jobs)
    return _finish_report(cfg, report, f"Edge-point polarity on {split}")


def cmd_viz(cfg: AppConfig, trace_path: str, image_path: str, gt_path: Optional[str] = None) -> int:
    image = _read_input_image(image_path)
    try:
        stages = harness.load_trace(trace_path)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CommandError(EXIT_DATA, f"cannot read trace {trace_path}: {exc}") from None
    if not stages:
        raise CommandError(EXIT_DATA, f"trace {trace_path} has no stages")
    if stages[0].result.binary.shape != image.shape[:2]:
        raise CommandError(EXIT_DATA, "trace masks and image differ in size")
    gt = pngio.read_mask(gt_path) if gt_path else None
    out = Path(cfg.out)
    path = harness.render_overlay(image, stages, out / "overlay.png", gt=gt)
    cfg.echo(out)
    print(f"wrote {path}")
    return EXIT_OK


DATA_ERRORS = (harness.DatasetError, SchemaError, OutOfBoundsError, SidecarNotFoundError,
               MissingPointsError, FileNotFoundError)


def _dispatch(args) -> int:
    cfg = _config(args)
    if args.command == "synth":
        return cmd_synth(cfg, args.count, args.split)
    if args.command == "run":
        return cmd_run(cfg, args.image, args.gt, args.scenario)
    if args.command == "eval":
        return cmd_eval(cfg, args.root, args.split, args.scenario)
    if args.command == "ablate":
        return cmd_ablate(cfg, args.root, args.split)
    if args.command == "polarity":
        return cmd_polarity(cfg, args.root, args.split)
    return cmd_viz(cfg, args.trace, args.image, args.gt)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"runtime error in {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except AdapterError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except PackingError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
