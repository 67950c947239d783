"""
Training losses (L1, SSIM, hybrid) and evaluation metrics (PSNR, SSIM).

SSIM follows the standard Gaussian-windowed definition (11x11, sigma 1.5,
K1 = 0.01, K2 = 0.03, data range 1.0), averaged over valid window positions
and channels. `ssim_reference` is a deliberately naive per-window oracle.
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, model_validator

from config import PreconditionError

logger = logging.getLogger(__name__)

PSNR_CAP_DB = 100.0
DEFAULT_SSIM_WEIGHT = 0.2


class SsimParams(BaseModel):
    """Constants of the structural similarity index."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    window_size: int = 11
    sigma: float = Field(1.5, gt=0)
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0

    @model_validator(mode="after")
    def _check_window(self) -> "SsimParams":
        if self.window_size < 3 or self.window_size % 2 == 0:
            raise ValueError(f"window_size must be odd and >= 3 (got {self.window_size})")
        return self

    @property
    def c1(self) -> float:
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.data_range) ** 2


DEFAULT_SSIM = SsimParams()


def _check_pair(name: str, prediction: torch.Tensor, target: torch.Tensor) -> None:
    if prediction.shape != target.shape:
        raise PreconditionError(
            f"{name}: shape mismatch {tuple(prediction.shape)} vs {tuple(target.shape)}"
        )


# ----- L1 -----

def l1_loss(prediction: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over all elements."""
    _check_pair("l1_loss", prediction, target)
    return (prediction - target).abs().mean()


# ----- SSIM -----

def gaussian_window(params: SsimParams = DEFAULT_SSIM, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """Normalized 2-D Gaussian window (outer product of the 1-D profile)."""
    size = params.window_size
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    profile = torch.exp(-(coords ** 2) / (2.0 * params.sigma ** 2))
    profile = profile / profile.sum()
    return torch.outer(profile, profile).to(dtype)


def _check_ssim_inputs(prediction: torch.Tensor, target: torch.Tensor, params: SsimParams) -> None:
    _check_pair("ssim", prediction, target)
    if prediction.dim() != 4:
        raise PreconditionError(f"ssim: expected B x C x H x W tensors, got shape {tuple(prediction.shape)}")
    height, width = prediction.shape[-2:]
    if height < params.window_size or width < params.window_size:
        raise PreconditionError(
            f"ssim: image {height}x{width} is smaller than the {params.window_size}x{params.window_size} window"
        )


def ssim_map(prediction: torch.Tensor, target: torch.Tensor, params: SsimParams = DEFAULT_SSIM) -> torch.Tensor:
    """Local SSIM at every valid window position, per channel."""
    _check_ssim_inputs(prediction, target, params)
    channels = prediction.shape[1]
    window = gaussian_window(params, prediction.dtype).to(prediction.device)
    window = window.expand(channels, 1, -1, -1).contiguous()

    def blur(x: torch.Tensor) -> torch.Tensor:
        return F.conv2d(x, window, groups=channels)

    mu_x = blur(prediction)
    mu_y = blur(target)
    var_x = blur(prediction * prediction) - mu_x * mu_x
    var_y = blur(target * target) - mu_y * mu_y
    cov_xy = blur(prediction * target) - mu_x * mu_y

    numerator = (2 * mu_x * mu_y + params.c1) * (2 * cov_xy + params.c2)
    denominator = (mu_x * mu_x + mu_y * mu_y + params.c1) * (var_x + var_y + params.c2)
    return numerator / denominator


def ssim_index(prediction: torch.Tensor, target: torch.Tensor, params: SsimParams = DEFAULT_SSIM) -> torch.Tensor:
    """Mean SSIM over window positions and channels; differentiable."""
    return ssim_map(prediction, target, params).mean()


def ssim_reference(prediction: np.ndarray, target: np.ndarray, params: SsimParams = DEFAULT_SSIM) -> float:
    """
    Brute-force SSIM: explicit loops over images, channels and window positions.
    Independent of the convolutional implementation; used as a test oracle.
    """
    x_all = np.asarray(prediction, dtype=np.float64)
    y_all = np.asarray(target, dtype=np.float64)
    if x_all.shape != y_all.shape or x_all.ndim != 4:
        raise PreconditionError(f"ssim_reference: expected equal B x C x H x W arrays, got {x_all.shape} / {y_all.shape}")

    size = params.window_size
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    profile = np.exp(-(coords ** 2) / (2.0 * params.sigma ** 2))
    profile /= profile.sum()
    weights = np.outer(profile, profile)

    batch, channels, height, width = x_all.shape
    if height < size or width < size:
        raise PreconditionError(f"ssim_reference: image {height}x{width} smaller than window {size}")

    total = 0.0
    count = 0
    for b in range(batch):
        for c in range(channels):
            for i in range(height - size + 1):
                for j in range(width - size + 1):
                    x = x_all[b, c, i:i + size, j:j + size]
                    y = y_all[b, c, i:i + size, j:j + size]
                    mu_x = float(np.sum(weights * x))
                    mu_y = float(np.sum(weights * y))
                    var_x = float(np.sum(weights * (x - mu_x) ** 2))
                    var_y = float(np.sum(weights * (y - mu_y) ** 2))
                    cov = float(np.sum(weights * (x - mu_x) * (y - mu_y)))
                    value = ((2 * mu_x * mu_y + params.c1) * (2 * cov + params.c2)) / (
                        (mu_x ** 2 + mu_y ** 2 + params.c1) * (var_x + var_y + params.c2)
                    )
                    total += value
                    count += 1
    return total / count


def ssim_loss(prediction: torch.Tensor, target: torch.Tensor, params: SsimParams = DEFAULT_SSIM) -> torch.Tensor:
    """1 - SSIM; lies in [0, 2]."""
    return 1.0 - ssim_index(prediction, target, params)


# ----- Hybrid loss -----

@dataclass(frozen=True)
class LossBreakdown:
    """
    Reported loss components. `total` is recomputed in double precision from the
    reported components so that total == l1 + lam * ssim_loss holds exactly;
    `objective` is the tensor used for backpropagation.
    """

    l1: float
    ssim_loss: float
    total: float
    lam: float
    objective: Optional[torch.Tensor] = field(default=None, compare=False, repr=False)


def hybrid_loss(
    prediction: torch.Tensor,
    target: torch.Tensor,
    lam: float = DEFAULT_SSIM_WEIGHT,
    params: SsimParams = DEFAULT_SSIM,
) -> LossBreakdown:
    """L_total = L1 + lam * (1 - SSIM)."""
    if lam < 0:
        raise PreconditionError(f"hybrid_loss: lambda must be >= 0 (got {lam})")
    l1 = l1_loss(prediction, target)
    structural = ssim_loss(prediction, target, params)
    objective = l1 + lam * structural

    l1_value = float(l1.detach())
    ssim_value = float(structural.detach())
    return LossBreakdown(
        l1=l1_value,
        ssim_loss=ssim_value,
        total=l1_value + lam * ssim_value,
        lam=lam,
        objective=objective,
    )


# ----- PSNR and evaluation -----

def psnr(prediction: torch.Tensor, target: torch.Tensor) -> float:
    """PSNR in dB for [0, 1] images; zero MSE returns the 100 dB cap."""
    _check_pair("psnr", prediction, target)
    diff = prediction.detach().to(torch.float64) - target.detach().to(torch.float64)
    mse = float(torch.mean(diff * diff))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


@dataclass
class PairScore:
    name: str
    psnr_db: float
    ssim: float


@dataclass
class EvaluationReport:
    """Per-pair and mean PSNR/SSIM."""

    rows: List[PairScore]
    mean_psnr: float
    mean_ssim: float

    def to_text(self) -> str:
        lines = [f"{'file':<32} {'psnr_db':>10} {'ssim':>8}"]
        for row in self.rows:
            lines.append(f"{row.name:<32} {row.psnr_db:>10.4f} {row.ssim:>8.4f}")
        lines.append("-" * 52)
        lines.append(f"{'mean':<32} {self.mean_psnr:>10.4f} {self.mean_ssim:>8.4f}")
        return "\n".join(lines)

    def write_csv(self, path: Path) -> Path:
        """Header, one row per pair, one summary row."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["filename", "psnr_db", "ssim"])
            for row in self.rows:
                writer.writerow([row.name, f"{row.psnr_db:.6f}", f"{row.ssim:.6f}"])
            writer.writerow(["mean", f"{self.mean_psnr:.6f}", f"{self.mean_ssim:.6f}"])
        return path


def evaluate_pairs(
    pairs: Sequence[Tuple[torch.Tensor, torch.Tensor]],
    names: Optional[Sequence[str]] = None,
    params: SsimParams = DEFAULT_SSIM,
) -> EvaluationReport:
    """
    Average PSNR/SSIM over (derained, ground-truth) pairs.

    Args:
        pairs: Sequence of (derained, ground_truth) tensors, each B x 3 x H x W
        names: Optional label per pair (defaults to the pair index)

    Returns:
        EvaluationReport with per-pair rows and arithmetic means

    Raises:
        PreconditionError: If pairs is empty or names do not match
    """
    if not pairs:
        raise PreconditionError("evaluate_pairs: no pairs to evaluate")
    if names is not None and len(names) != len(pairs):
        raise PreconditionError(f"evaluate_pairs: {len(names)} names for {len(pairs)} pairs")

    rows = []
    for i, (derained, truth) in enumerate(pairs):
        name = names[i] if names is not None else str(i)
        with torch.no_grad():
            rows.append(PairScore(name, psnr(derained, truth), float(ssim_index(derained, truth, params))))

    return EvaluationReport(
        rows=rows,
        mean_psnr=sum(r.psnr_db for r in rows) / len(rows),
        mean_ssim=sum(r.ssim for r in rows) / len(rows),
    )
