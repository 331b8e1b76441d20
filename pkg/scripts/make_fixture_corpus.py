"""Regenerate the shipped 50-image fuzzy-edge corpus under tests/fixtures/fuzzy50.

The corpus uses the default SyntheticSpec (edge_fuzz_sigma=3, noise_sigma=0.03,
seed 0).  tests/test_synthetic.py checks that the shipped files equal a fresh
regeneration, so rerun this after changing the generator.
"""
import argparse
from pathlib import Path

from currseg.synthetic import SyntheticSpec, generate_synthetic

FIXTURE = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "fuzzy50"
COUNT = 50


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=FIXTURE)
    ap.add_argument("--count", type=int, default=COUNT)
    args = ap.parse_args()
    ds = generate_synthetic(SyntheticSpec(), args.count, args.out, split="test")
    print(f"wrote {len(ds)} pairs to {args.out / 'test'}")


if __name__ == "__main__":
    main()
