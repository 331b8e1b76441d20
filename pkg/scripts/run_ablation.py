"""Prompt-combination ablation and edge-point polarity on the shipped corpus.

Writes results.csv, stages.csv and summary.md under --out/ablation and
--out/polarity.
"""
import argparse
from pathlib import Path

from currseg import CurriculumConfig, ablation_run, emit_report, load_dataset, polarity_experiment
from currseg.harness import summary_table

FIXTURE = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "fuzzy50"


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--root", type=Path, default=FIXTURE)
    ap.add_argument("--out", type=Path, default=Path("results"))
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    ds = load_dataset(args.root, "test")
    cfg = CurriculumConfig()
    for name, fn in (("ablation", ablation_run), ("polarity", polarity_experiment)):
        report = fn(ds, cfg, jobs=args.jobs)
        emit_report(report, args.out / name, title=name)
        print(f"{name} ({report.wall_clock:.1f} s)\n{summary_table(report)}\n")


if __name__ == "__main__":
    main()
