"""Per-image box-only vs full-curriculum Dice on the shipped corpus.

Optionally sweeps the fine-stage prior weight to show how much of the gain
comes from re-segmenting with the coarse mask as a dense prior.

    python scripts/curriculum_gain.py --sweep 0.01 0.05 0.2
"""
import argparse
import dataclasses
import time
from pathlib import Path

import numpy as np

from currseg import CurriculumConfig, load_dataset
from currseg.core import score
from currseg.curriculum import run_scenario
from currseg.pngio import read_image, read_mask

FIXTURE = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "fuzzy50"


def compare(ds, cfg: CurriculumConfig):
    box, full, bpm = [], [], []
    for img_path, mask_path in ds.entries:
        img, gt = read_image(img_path), read_mask(mask_path)
        box.append(score(run_scenario(img, "box-only", cfg).final.binary, gt).dice)
        full.append(score(run_scenario(img, "full-curriculum", cfg).final.binary, gt).dice)
        bpm.append(score(run_scenario(img, "box-plus-mask", cfg).final.binary, gt).dice)
    return np.array(box), np.array(full), np.array(bpm)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--root", type=Path, default=FIXTURE)
    ap.add_argument("--sweep", type=float, nargs="*", default=[])
    args = ap.parse_args()
    ds = load_dataset(args.root, "test")
    base = CurriculumConfig()
    weights = args.sweep or [base.fine_profile.prior_weight]
    print("prior_weight  box-only  box+mask  full     better  worse  seconds")
    for w in weights:
        cfg = dataclasses.replace(base, fine_profile=dataclasses.replace(base.fine_profile, prior_weight=w))
        t0 = time.perf_counter()
        box, full, bpm = compare(ds, cfg)
        print(f"{w:<12g}  {box.mean():.4f}    {bpm.mean():.4f}    {full.mean():.4f}   "
              f"{np.mean(full > box):.2f}    {np.mean(full < box):.2f}   {time.perf_counter() - t0:.1f}")


if __name__ == "__main__":
    main()
