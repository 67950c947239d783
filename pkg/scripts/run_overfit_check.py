#!/usr/bin/env python3
"""
Desk-scale overfit check for MH2F-Net.

This script:
- Builds 8 fixed synthetic 64x64 pairs with heavy rain (inputs well below the target)
- Trains a micro model (N=2, C=16) on the full set with the hybrid loss
- Stops once the mean training-set PSNR reaches the target
- Exits 0 on success, 1 if the target is not reached within the iteration cap
  or the rainy inputs already meet it

Usage:
    python scripts/run_overfit_check.py [OPTIONS]

Options:
    --iterations N      Iteration cap (default: 2000)
    --target-psnr DB    PSNR to reach on the training pairs (default: 30.0)
    --eval-every N      Score the training set every N iterations (default: 50)
    --lr LR             Adam learning rate (default: 0.001)
    --seed N            Seed for data and initialization (default: 0)

Environment Variables:
    LOG_LEVEL           Logging level (default: INFO)
    MH2F_NUM_THREADS    Pin torch intra-op threads
"""

import argparse
import logging
import os
import sys
import time
from dataclasses import dataclass

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import cv2
import numpy as np
import torch

from blocks import derain
from config import ModelConfig, PreconditionError, RainParams, configure_logging
from datapipe import Batch
from losses import psnr
from rainsim import apply_rain, derive_seed
from trainer import init_model, make_optimizer, set_deterministic, train_step

logger = logging.getLogger(__name__)

NUM_PAIRS = 8
SIZE = 64
MICRO_MODEL = ModelConfig(num_mheb=2, base_channels=16, seed=0)
# heavy enough that the rainy inputs score well below the target
RAIN_LENGTH_PX = 15
RAIN_DENSITY = 0.05
RAIN_INTENSITY = 0.9


@dataclass(frozen=True)
class OverfitResult:
    baseline_psnr: float
    final_psnr: float
    iterations: int
    passed: bool


def synthetic_pairs(seed: int) -> Batch:
    """Smooth random backgrounds with seeded heavy rain on top."""
    rng = np.random.default_rng(seed)
    clean_images = []
    for _ in range(NUM_PAIRS):
        noise = rng.random((SIZE // 8, SIZE // 8, 3)).astype(np.float32)
        background = cv2.resize(noise, (SIZE, SIZE), interpolation=cv2.INTER_CUBIC)
        background = cv2.GaussianBlur(background, (0, 0), sigmaX=2.0)
        clean_images.append(np.clip(0.1 + 0.6 * background, 0.0, 1.0).transpose(2, 0, 1))
    clean = torch.from_numpy(np.stack(clean_images)).float()

    rainy = torch.empty_like(clean)
    for i in range(NUM_PAIRS):
        params = RainParams(
            angle_deg=-15.0 + 5.0 * i,
            length_px=RAIN_LENGTH_PX,
            density=RAIN_DENSITY,
            intensity=RAIN_INTENSITY,
            seed=derive_seed(seed, i),
        )
        rainy[i:i + 1], _ = apply_rain(clean[i:i + 1], params)
    return Batch(rainy=rainy, clean=clean)


def mean_psnr(prediction: torch.Tensor, target: torch.Tensor) -> float:
    scores = [psnr(prediction[i:i + 1], target[i:i + 1]) for i in range(prediction.shape[0])]
    return sum(scores) / len(scores)


def training_psnr(model, batch: Batch) -> float:
    return mean_psnr(derain(model, batch.rainy), batch.clean)


def run_overfit(
    iterations: int = 2000,
    target_psnr: float = 30.0,
    eval_every: int = 50,
    lr: float = 1e-3,
    seed: int = 0,
) -> OverfitResult:
    """
    Train the micro model on the fixed pairs until the training PSNR reaches
    `target_psnr` or `iterations` runs out.

    Raises:
        PreconditionError: The rainy inputs already meet the target
    """
    set_deterministic(True)
    torch.manual_seed(seed)

    batch = synthetic_pairs(seed)
    baseline = mean_psnr(batch.rainy, batch.clean)
    logger.info(f"Rainy input PSNR: {baseline:.2f} dB; target {target_psnr:.1f} dB")
    if baseline >= target_psnr:
        raise PreconditionError(
            f"Rainy inputs already score {baseline:.2f} dB, at or above the {target_psnr:.1f} dB target"
        )

    model = init_model(MICRO_MODEL.model_copy(update={"seed": seed}))
    optimizer = make_optimizer(model, lr=lr)

    started = time.perf_counter()
    score = training_psnr(model, batch)
    for iteration in range(1, iterations + 1):
        loss = train_step(model, batch, optimizer, lam=0.2)
        if iteration % eval_every == 0 or iteration == iterations:
            score = training_psnr(model, batch)
            logger.info(f"iter {iteration}: total={loss.total:.5f} training PSNR={score:.2f} dB")
            if score >= target_psnr:
                logger.info(f"Reached {score:.2f} dB after {iteration} iterations ({time.perf_counter() - started:.0f}s)")
                return OverfitResult(baseline, score, iteration, True)
    return OverfitResult(baseline, score, iterations, False)


def main():
    parser = argparse.ArgumentParser(description="Overfit a micro MH2F-Net on 8 synthetic pairs")
    parser.add_argument("--iterations", type=int, default=2000, help="Iteration cap (default: 2000)")
    parser.add_argument("--target-psnr", type=float, default=30.0, help="Target training PSNR in dB (default: 30)")
    parser.add_argument("--eval-every", type=int, default=50, help="Score every N iterations (default: 50)")
    parser.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate (default: 0.001)")
    parser.add_argument("--seed", type=int, default=0, help="Seed (default: 0)")
    args = parser.parse_args()

    configure_logging()
    try:
        result = run_overfit(args.iterations, args.target_psnr, args.eval_every, args.lr, args.seed)
    except PreconditionError as e:
        print(f"FAIL overfit: {e}")
        sys.exit(1)

    if result.passed:
        print(f"PASS overfit: {result.final_psnr:.2f} dB at iteration {result.iterations} "
              f"(rainy input {result.baseline_psnr:.2f} dB)")
        sys.exit(0)
    print(f"FAIL overfit: {result.final_psnr:.2f} dB after {result.iterations} iterations "
          f"(target {args.target_psnr:.1f} dB)")
    sys.exit(1)


if __name__ == "__main__":
    main()
