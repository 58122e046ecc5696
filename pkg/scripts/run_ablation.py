#!/usr/bin/env python3
"""
Ablation script: trains the five removal configurations on one synthetic
dataset and prints a PSNR/SSIM/mask-IoU/HF-separation table over its test
split. Exits with 2 when full >= hfe >= baseline fails by more than 0.3 dB
or a row with HFE does not light HF up more on highlights than background.

Usage:
    python3 scripts/run_ablation.py --work-dir /tmp/ablation [--count 32] [--epochs 30] [--seed 0]

Rows:
    baseline   coarse + refine networks only (no HFE, no attention)
    hfe        HFE without contextual attention
    hfe+ba     HFE with the background-attention map only
    hfe+ha     HFE with the highlight-attention map only
    full       HFE with both attention maps
"""
import argparse
import logging
import sys
import time
from pathlib import Path
from typing import Dict, List

from m2net.schemas import TrainConfig
from m2net.synth import generate_directory, load_quadruple_dir
from m2net.training import build_from_checkpoint, evaluate, hf_separation, train

ROWS = {
    "baseline": dict(use_hfe=False, use_cha=False),
    "hfe": dict(use_cha=False),
    "hfe+ba": dict(use_ha=False),
    "hfe+ha": dict(use_ba=False),
    "full": dict(),
}

# Expected PSNR order of D_2, best first
ORDER = ("full", "hfe", "baseline")
ORDER_TOLERANCE_DB = 0.3


def main():
    parser = argparse.ArgumentParser(
        description="Train and evaluate the ablation configurations",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=__doc__,
    )
    parser.add_argument("--work-dir", required=True,
                        help="Directory for the dataset and per-row checkpoints")
    parser.add_argument("--count", type=int, default=32,
                        help="Number of synthetic samples (default: 32)")
    parser.add_argument("--size", type=int, default=64,
                        help="Image size (default: 64)")
    parser.add_argument("--epochs", type=int, default=30,
                        help="Epochs per row (default: 30)")
    parser.add_argument("--batch-size", type=int, default=4,
                        help="Batch size (default: 4)")
    parser.add_argument("--seed", type=int, default=0,
                        help="Seed for data and training (default: 0)")
    parser.add_argument("--rows", default=",".join(ROWS),
                        help=f"Comma-separated subset of rows (default: {','.join(ROWS)})")
    args = parser.parse_args()

    logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s")

    rows = [r.strip() for r in args.rows.split(",") if r.strip()]
    unknown = [r for r in rows if r not in ROWS]
    if unknown:
        parser.error(f"unknown rows: {', '.join(unknown)}")

    work_dir = Path(args.work_dir)
    data_dir = work_dir / "data"
    if not (data_dir / "manifest.txt").is_file():
        generate_directory(data_dir, args.count, args.seed, args.size)
    train_set = load_quadruple_dir(data_dir, split="train")
    test_set = load_quadruple_dir(data_dir, split="test")
    if len(test_set) == 0:
        print("Test split is empty; raise --count", file=sys.stderr)
        sys.exit(1)

    results = {}
    separations = {}
    for name in rows:
        config = TrainConfig(
            epochs=args.epochs,
            batch_size=args.batch_size,
            seed=args.seed,
            image_size=args.size,
            checkpoint_every=args.epochs,
            **ROWS[name],
        )
        start_time = time.time()
        result = train(config, train_set, work_dir / name)
        report = evaluate(result.checkpoint, test_set)
        results[name] = report
        separations[name] = hf_separation(build_from_checkpoint(result.checkpoint), test_set)
        print(f"  {name}: {report.mean_refine.psnr_db:.2f} dB / {report.mean_refine.ssim:.4f} "
              f"({time.time() - start_time:.1f}s)")

    first = next(iter(results.values()))
    print(f"\n{'row':10}{'PSNR':>10}{'SSIM':>10}{'IoU':>10}{'HF sep':>10}")
    print(f"{'input':10}{first.mean_input.psnr_db:10.2f}{first.mean_input.ssim:10.4f}")
    for name, report in results.items():
        iou = f"{report.mean_mask_iou:10.4f}" if report.mean_mask_iou is not None else f"{'-':>10}"
        print(f"{name:10}{report.mean_refine.psnr_db:10.2f}{report.mean_refine.ssim:10.4f}"
              f"{iou}{separations[name]:10.4f}")

    violations = ordering_violations({name: r.mean_refine.psnr_db for name, r in results.items()})
    for name, sep in separations.items():
        if ROWS[name].get("use_hfe", True) and sep <= 0.0:
            violations.append(f"{name}: HF not brighter on highlights than background ({sep:.4f})")
    if violations:
        print("\nOrdering violations:")
        for line in violations:
            print(f"  {line}")
        sys.exit(2)


def ordering_violations(psnr_db: Dict[str, float]) -> List[str]:
    """Check full >= hfe >= baseline in PSNR, each within ORDER_TOLERANCE_DB."""
    chain = [name for name in ORDER if name in psnr_db]
    return [f"{better} ({psnr_db[better]:.2f} dB) below {worse} ({psnr_db[worse]:.2f} dB)"
            for better, worse in zip(chain, chain[1:])
            if psnr_db[better] < psnr_db[worse] - ORDER_TOLERANCE_DB]


if __name__ == "__main__":
    main()
