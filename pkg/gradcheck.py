"""
Finite-difference verification harness.

Every registered block is rebuilt in double precision and its analytic
gradients (autograd, objective = sum of all outputs) are compared with central
differences for the inputs and every parameter tensor. The SSIM oracle check
compares the convolutional SSIM against the per-window reference.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from blocks import (
    DCRBlock,
    HADB,
    MHEB,
    BaselineFusion,
    ChannelAttention,
    ConvHead,
    MH2FNet,
    RPFFusion,
    SpatialAttention,
    StackedHourglassGroup,
    init_parameters,
)
from config import MH2FError, ModelConfig
from losses import SsimParams, ssim_index, ssim_loss, ssim_reference

logger = logging.getLogger(__name__)

STEP = 1e-4
DENOMINATOR_FLOOR = 1e-6
DEFAULT_TOLERANCE = 1e-3
DEFAULT_SHAPE = (1, 8, 8, 8)
MAX_COORDS_PER_TENSOR = 24


class UnknownBlockError(MH2FError, KeyError):
    """Requested block is not registered."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown block"


@dataclass
class GradCase:
    """A double-precision module, its inputs, and how to call it."""

    module: Optional[nn.Module]
    inputs: Dict[str, torch.Tensor]
    call: Callable[..., object]


def _rand(generator: torch.Generator, shape: Sequence[int], low: float = -1.0, high: float = 1.0) -> torch.Tensor:
    values = torch.rand(tuple(shape), generator=generator, dtype=torch.float64)
    return (low + (high - low) * values).requires_grad_(True)


def _prepare(module: nn.Module, seed: int) -> nn.Module:
    init_parameters(module, seed)
    return module.double()


def _image_shape(shape: Sequence[int]) -> Tuple[int, int, int, int]:
    return (shape[0], 3, shape[2], shape[3])


def _case_conv_head(shape, g):
    module = _prepare(ConvHead(shape[1]), 1)
    return GradCase(module, {"image": _rand(g, _image_shape(shape), 0.0, 1.0)}, lambda m, image: m(image))


def _case_dcr(shape, g):
    module = _prepare(DCRBlock(shape[1], max(1, shape[1] // 2), 3), 2)
    return GradCase(module, {"x": _rand(g, shape)}, lambda m, x: m(x))


def _case_mheb(shape, g):
    module = _prepare(MHEB(shape[1], max(1, shape[1] // 2)), 3)
    return GradCase(module, {"x": _rand(g, shape)}, lambda m, x: m(x))


def _case_shg(shape, g):
    module = _prepare(StackedHourglassGroup(2, shape[1], max(1, shape[1] // 2)), 4)

    def call(m, L_o):
        extracted, hierarchy = m(L_o)
        return [extracted, *hierarchy]

    return GradCase(module, {"L_o": _rand(g, shape)}, call)


def _case_spatial_attention(shape, g):
    module = _prepare(SpatialAttention(7), 5)
    return GradCase(module, {"x": _rand(g, shape)}, lambda m, x: m(x))


def _case_channel_attention(shape, g):
    module = _prepare(ChannelAttention(shape[1], 4 if shape[1] % 4 == 0 else 1), 6)
    return GradCase(module, {"x": _rand(g, shape)}, lambda m, x: m(x))


def _case_hadb(shape, g):
    module = _prepare(HADB(shape[1], 2, 4 if shape[1] % 4 == 0 else 1), 7)
    inputs = {"L_h1": _rand(g, shape), "L_h2": _rand(g, shape)}
    return GradCase(module, inputs, lambda m, a, b: m([a, b]))


def _three_features(shape, g):
    return {"L_o": _rand(g, shape), "L_e": _rand(g, shape), "L_d": _rand(g, shape)}


def _case_rpf(shape, g):
    module = _prepare(RPFFusion(shape[1]), 8)
    return GradCase(module, _three_features(shape, g), lambda m, o, e, d: m(o, e, d))


def _case_fuse_add(shape, g):
    module = _prepare(BaselineFusion(shape[1], "add"), 9)
    return GradCase(module, _three_features(shape, g), lambda m, o, e, d: m(o, e, d))


def _case_fuse_concat(shape, g):
    module = _prepare(BaselineFusion(shape[1], "concat"), 10)
    return GradCase(module, _three_features(shape, g), lambda m, o, e, d: m(o, e, d))


def _case_mh2f(shape, g):
    config = ModelConfig(num_mheb=2, base_channels=shape[1], seed=11)
    module = _prepare(MH2FNet(config), config.seed)
    # keep the image away from 0/1 so perturbations stay in range
    return GradCase(module, {"rainy": _rand(g, _image_shape(shape), 0.1, 0.9)}, lambda m, x: m(x))


def _case_ssim_loss(shape, g):
    size = max(12, shape[2])
    prediction = _rand(g, (1, 1, size, size), 0.0, 1.0)
    target = torch.rand((1, 1, size, size), generator=g, dtype=torch.float64)
    return GradCase(None, {"prediction": prediction}, lambda _, x: ssim_loss(x, target, SsimParams()))


BLOCKS: Dict[str, Callable[[Sequence[int], torch.Generator], GradCase]] = {
    "conv_head": _case_conv_head,
    "dcr": _case_dcr,
    "mheb": _case_mheb,
    "shg": _case_shg,
    "spatial_attention": _case_spatial_attention,
    "channel_attention": _case_channel_attention,
    "hadb": _case_hadb,
    "rpf": _case_rpf,
    "fuse_add": _case_fuse_add,
    "fuse_concat": _case_fuse_concat,
    "mh2f": _case_mh2f,
    "ssim_loss": _case_ssim_loss,
}


@dataclass
class GradCheckRow:
    tensor: str
    coords_checked: int
    max_abs_error: float
    max_rel_error: float
    passed: bool


@dataclass
class GradCheckReport:
    block: str
    shape: Tuple[int, ...]
    tolerance: float
    rows: List[GradCheckRow] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def max_rel_error(self) -> float:
        return max((row.max_rel_error for row in self.rows), default=0.0)

    @property
    def passed(self) -> bool:
        return bool(self.rows) and all(row.passed for row in self.rows)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} {self.block:<18} tensors={len(self.rows):<4} "
            f"max_rel_error={self.max_rel_error:.2e} ({self.seconds:.1f}s)"
        )


def _objective(case: GradCase) -> torch.Tensor:
    outputs = case.call(case.module, *case.inputs.values())
    if isinstance(outputs, torch.Tensor):
        return outputs.sum()
    return sum(out.sum() for out in outputs)


def _named_tensors(case: GradCase) -> List[Tuple[str, torch.Tensor]]:
    named = [(f"input:{name}", tensor) for name, tensor in case.inputs.items()]
    if case.module is not None:
        named += [(f"param:{name}", p) for name, p in case.module.named_parameters()]
    return named


def finite_difference_check(
    block_name: str,
    shape: Sequence[int] = DEFAULT_SHAPE,
    tolerance: float = DEFAULT_TOLERANCE,
    step: float = STEP,
    max_coords: int = MAX_COORDS_PER_TENSOR,
    seed: int = 0,
    corrupt: bool = False,
) -> GradCheckReport:
    """
    Compare autograd gradients with central differences for one block.

    Args:
        block_name: Registered block (see BLOCKS)
        shape: Feature-map shape (batch, channels, height, width); image blocks use 3 channels
        tolerance: Pass threshold on the max relative error
        step: Central-difference step h
        max_coords: Coordinates sampled per tensor (all if the tensor is smaller)
        seed: Seed for inputs and coordinate sampling
        corrupt: Perturb the first analytic gradient (harness sensitivity check)

    Returns:
        GradCheckReport with one row per input and parameter tensor

    Raises:
        UnknownBlockError: Listing the valid block names
    """
    if block_name not in BLOCKS:
        raise UnknownBlockError(f"Unknown block '{block_name}' (valid: {', '.join(BLOCKS)})")

    started = time.perf_counter()
    generator = torch.Generator().manual_seed(seed)
    case = BLOCKS[block_name](tuple(shape), generator)
    named = _named_tensors(case)

    objective = _objective(case)
    analytic = torch.autograd.grad(objective, [t for _, t in named], allow_unused=True)
    analytic = [torch.zeros_like(t) if g is None else g.detach() for (_, t), g in zip(named, analytic)]
    if corrupt:
        analytic[0] = analytic[0] * 1.5 + 1e-2

    report = GradCheckReport(block=block_name, shape=tuple(shape), tolerance=tolerance)
    with torch.no_grad():
        for (name, tensor), grad in zip(named, analytic):
            flat = tensor.detach().view(-1)
            flat_grad = grad.reshape(-1)
            if flat.numel() <= max_coords:
                coords = range(flat.numel())
            else:
                coords = torch.randperm(flat.numel(), generator=generator)[:max_coords].tolist()

            max_abs = 0.0
            max_rel = 0.0
            count = 0
            for idx in coords:
                original = flat[idx].item()
                flat[idx] = original + step
                plus = _objective(case).item()
                flat[idx] = original - step
                minus = _objective(case).item()
                flat[idx] = original

                numeric = (plus - minus) / (2.0 * step)
                exact = flat_grad[idx].item()
                error = abs(exact - numeric)
                denominator = max(abs(exact), abs(numeric), DENOMINATOR_FLOOR)
                max_abs = max(max_abs, error)
                max_rel = max(max_rel, error / denominator)
                count += 1

            report.rows.append(GradCheckRow(name, count, max_abs, max_rel, max_rel < tolerance))

    report.seconds = time.perf_counter() - started
    logger.debug(report.summary())
    return report


@dataclass
class SsimOracleReport:
    pairs: int
    max_abs_diff: float
    self_similarity_error: float
    symmetric: bool
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_abs_diff < self.tolerance and self.self_similarity_error < 1e-12 and self.symmetric

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} {'ssim_oracle':<18} pairs={self.pairs} max_abs_diff={self.max_abs_diff:.2e} "
            f"self_error={self.self_similarity_error:.1e} symmetric={self.symmetric}"
        )


def verify_ssim_oracle(
    num_pairs: int = 20,
    size: int = 32,
    channels: int = 3,
    seed: int = 0,
    tolerance: float = 1e-6,
) -> SsimOracleReport:
    """Vectorized SSIM vs the brute-force per-window reference on random images."""
    rng = np.random.default_rng(seed)
    params = SsimParams()
    max_diff = 0.0
    self_error = 0.0
    symmetric = True
    for _ in range(num_pairs):
        a = rng.random((1, channels, size, size))
        b = rng.random((1, channels, size, size))
        ta, tb = torch.from_numpy(a), torch.from_numpy(b)
        fast = float(ssim_index(ta, tb, params))
        slow = ssim_reference(a, b, params)
        max_diff = max(max_diff, abs(fast - slow))
        self_error = max(self_error, abs(float(ssim_index(ta, ta, params)) - 1.0))
        symmetric = symmetric and fast == float(ssim_index(tb, ta, params))
    return SsimOracleReport(num_pairs, max_diff, self_error, symmetric, tolerance)


def run_verification(corrupt: bool = False, blocks: Optional[Sequence[str]] = None) -> Tuple[bool, List[str]]:
    """
    Run every gradient check plus the SSIM oracle.

    Returns:
        (all_passed, summary lines)
    """
    lines = []
    passed = True
    for name in blocks or list(BLOCKS):
        report = finite_difference_check(name, corrupt=corrupt)
        lines.append(report.summary())
        passed = passed and report.passed
    oracle = verify_ssim_oracle()
    lines.append(oracle.summary())
    return passed and oracle.passed, lines
