"""
Training loop for MH2F-Net: Adam on the hybrid L1 + SSIM objective,
per-epoch evaluation, best/last checkpoints, deterministic resumption and
the ablation runner.
"""

import csv
import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import torch
from pydantic import BaseModel, ConfigDict, Field

from blocks import MH2FNet, derain_padded, init_parameters, mh2f_forward, param_count
from checkpoint import (
    Checkpoint,
    capture_checkpoint,
    restore_model,
    restore_optimizer,
    restore_rng,
    save_checkpoint,
)
from config import (
    NUM_THREADS_ENV,
    ConfigurationError,
    MH2FError,
    ModelConfig,
    TrainConfig,
    parse_config,
    validate_model_config,
    validate_train_config,
)
from datapipe import Batch, ImageCache, PairIndex, batches_per_epoch, image_to_tensor, make_batches
from losses import EvaluationReport, LossBreakdown, evaluate_pairs, hybrid_loss

logger = logging.getLogger(__name__)


class NonFiniteLossError(MH2FError):
    """Training produced a NaN or infinite value."""
    pass


# ----- Setup -----

def set_deterministic(enabled: bool) -> None:
    """Toggle deterministic kernels; thread count may be pinned via MH2F_NUM_THREADS."""
    torch.use_deterministic_algorithms(enabled)
    if NUM_THREADS_ENV:
        torch.set_num_threads(int(NUM_THREADS_ENV))


def init_model(config: ModelConfig) -> MH2FNet:
    """
    Allocate MH2F-Net and initialize it from config.seed.

    Raises:
        ConfigurationError: Listing every invalid field
    """
    validate_model_config(config)
    model = MH2FNet(config)
    init_parameters(model, config.seed)
    logger.debug(f"Initialized MH2F-Net with {param_count(config)} parameters (seed={config.seed})")
    return model


def make_optimizer(
    model: torch.nn.Module,
    lr: float = 1e-3,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=lr, betas=betas, eps=eps)


def optimizer_for(model: torch.nn.Module, config: TrainConfig) -> torch.optim.Adam:
    return make_optimizer(model, config.lr, (config.beta1, config.beta2), config.eps)


# ----- Step -----

def first_non_finite(named_tensors: Iterable[Tuple[str, Optional[torch.Tensor]]]) -> Optional[str]:
    """Name of the first tensor holding NaN/inf, or None."""
    for name, tensor in named_tensors:
        if tensor is not None and not torch.isfinite(tensor).all():
            return name
    return None


def train_step(
    model: MH2FNet,
    batch: Batch,
    optimizer: torch.optim.Optimizer,
    lam: float = 0.2,
) -> LossBreakdown:
    """
    Forward, hybrid loss, backward and one Adam update.

    Returns:
        Loss breakdown evaluated before the update

    Raises:
        NonFiniteLossError: Naming the first non-finite tensor
    """
    model.train()
    optimizer.zero_grad(set_to_none=True)
    output = mh2f_forward(batch.rainy, model)
    loss = hybrid_loss(output, batch.clean, lam)

    if not math.isfinite(loss.total):
        culprit = first_non_finite(
            [("derained output", output)] + [(f"parameter {n}", p) for n, p in model.named_parameters()]
        )
        raise NonFiniteLossError(
            f"Non-finite loss (l1={loss.l1}, ssim_loss={loss.ssim_loss}); "
            f"first non-finite tensor: {culprit or 'loss terms'}"
        )

    loss.objective.backward()
    culprit = first_non_finite((f"gradient of {n}", p.grad) for n, p in model.named_parameters())
    if culprit:
        raise NonFiniteLossError(f"Non-finite gradient; first non-finite tensor: {culprit}")
    optimizer.step()
    return loss


# ----- Logs -----

@dataclass
class IterationRecord:
    iteration: int
    epoch: int
    l1: float
    ssim_loss: float
    total: float


@dataclass
class EpochRecord:
    epoch: int
    mean_total: float
    eval_psnr: Optional[float] = None
    eval_ssim: Optional[float] = None


@dataclass
class TrainLog:
    iterations: List[IterationRecord] = field(default_factory=list)
    epochs: List[EpochRecord] = field(default_factory=list)

    def write_csv(self, out_dir: Path) -> Tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        iteration_path = out_dir / "train_log.csv"
        epoch_path = out_dir / "epoch_log.csv"
        with iteration_path.open("w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["iter", "epoch", "l1", "ssim_loss", "total"])
            for r in self.iterations:
                writer.writerow([r.iteration, r.epoch, repr(r.l1), repr(r.ssim_loss), repr(r.total)])
        with epoch_path.open("w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["epoch", "mean_total", "eval_psnr", "eval_ssim"])
            for r in self.epochs:
                writer.writerow([
                    r.epoch,
                    repr(r.mean_total),
                    "" if r.eval_psnr is None else repr(r.eval_psnr),
                    "" if r.eval_ssim is None else repr(r.eval_ssim),
                ])
        return iteration_path, epoch_path


# ----- Evaluation -----

@torch.no_grad()
def evaluate_model(model: MH2FNet, index: PairIndex, cache: Optional[ImageCache] = None) -> EvaluationReport:
    """Derain every rainy image of the index (pad-and-crop) and score it against its clean image."""
    cache = cache if cache is not None else ImageCache()
    pairs, names = [], []
    for entry in index.entries:
        rainy, clean = cache.pair(entry)
        derained = derain_padded(model, image_to_tensor(rainy))
        pairs.append((derained, image_to_tensor(clean)))
        names.append(entry[0].name)
    return evaluate_pairs(pairs, names)


# ----- Fit -----

# the data RNG and batch layout depend on these
RESUME_LOCKED_FIELDS = ("seed", "batch_size", "patch_size")


def check_resume_compatible(resume: Checkpoint, config: TrainConfig) -> None:
    """
    Raise ConfigurationError unless `config` can continue `resume` exactly.

    The model config must match, and so must every field in RESUME_LOCKED_FIELDS.
    """
    if resume.model_config != config.model:
        raise ConfigurationError("Resume checkpoint was trained with a different model config")
    changed = [
        f"{name}: {getattr(resume.train_config, name)} -> {getattr(config, name)}"
        for name in RESUME_LOCKED_FIELDS
        if getattr(resume.train_config, name) != getattr(config, name)
    ]
    if changed:
        raise ConfigurationError(
            f"Resume checkpoint was trained with a different data layout ({', '.join(changed)})"
        )


@dataclass
class FitResult:
    checkpoint: Checkpoint
    log: TrainLog
    model: MH2FNet


def fit(
    train_index: PairIndex,
    eval_index: Optional[PairIndex],
    config: TrainConfig,
    out_dir: Optional[Path] = None,
    resume: Optional[Checkpoint] = None,
    cache: Optional[ImageCache] = None,
) -> FitResult:
    """
    Train with a constant learning rate for config.epochs (or config.max_iterations).

    Args:
        train_index: Training pairs (patches are sampled from them)
        eval_index: Optional evaluation pairs, scored after every epoch
        config: Training configuration
        out_dir: Where checkpoints and logs go; nothing is written when None
        resume: Checkpoint to continue from (model, optimizer and data position)
        cache: Decoded-image cache

    Returns:
        FitResult with the best-PSNR checkpoint (last checkpoint without eval data)

    Raises:
        ConfigurationError: Invalid config or batch larger than the dataset
        CheckpointError: A checkpoint could not be written
    """
    validate_train_config(config)
    if len(train_index) == 0:
        raise ConfigurationError("Training index is empty")
    steps_per_epoch = batches_per_epoch(len(train_index), config.batch_size)
    if steps_per_epoch == 0:
        raise ConfigurationError(
            f"batch_size {config.batch_size} exceeds the {len(train_index)} training pairs"
        )
    set_deterministic(config.deterministic)
    cache = cache if cache is not None else ImageCache(capacity=config.cache_images)
    cache.prefetch(train_index)
    out_dir = Path(out_dir) if out_dir is not None else None

    if resume is not None:
        check_resume_compatible(resume, config)
        model = restore_model(resume)
        optimizer = optimizer_for(model, config)
        restore_optimizer(resume, model, optimizer)
        restore_rng(resume)
        start_epoch, skip, iteration, best_psnr = resume.epoch, resume.batch_in_epoch, resume.iteration, resume.best_psnr
        logger.info(f"Resuming at epoch {start_epoch}, batch {skip}, iteration {iteration}")
    else:
        model = init_model(config.model)
        optimizer = optimizer_for(model, config)
        start_epoch, skip, iteration, best_psnr = 0, 0, 0, None

    log = TrainLog()
    best_checkpoint: Optional[Checkpoint] = None
    last_checkpoint: Optional[Checkpoint] = None
    stop = False
    position = (start_epoch, skip)

    logger.info(f"Training: {config.summary()} ({steps_per_epoch} batches/epoch)")
    for epoch in range(start_epoch, config.epochs):
        totals = []
        batch_number = 0
        for batch_number, batch in enumerate(
            make_batches(train_index, config.batch_size, config.patch_size, config.seed, epoch, cache),
            start=1,
        ):
            if epoch == start_epoch and batch_number <= skip:
                continue
            loss = train_step(model, batch, optimizer, config.lam)
            iteration += 1
            totals.append(loss.total)
            log.iterations.append(IterationRecord(iteration, epoch, loss.l1, loss.ssim_loss, loss.total))
            if iteration % config.log_every == 0:
                logger.info(
                    f"iter {iteration} epoch {epoch}: total={loss.total:.5f} "
                    f"l1={loss.l1:.5f} ssim_loss={loss.ssim_loss:.5f}"
                )
            if config.max_iterations is not None and iteration >= config.max_iterations:
                stop = True
                break

        epoch_done = batch_number == steps_per_epoch
        position = (epoch + 1, 0) if epoch_done else (epoch, batch_number)

        if epoch_done:
            record = EpochRecord(epoch, sum(totals) / len(totals) if totals else float("nan"))
            if eval_index is not None:
                report = evaluate_model(model, eval_index, cache)
                record.eval_psnr, record.eval_ssim = report.mean_psnr, report.mean_ssim
                logger.info(f"epoch {epoch}: eval PSNR={report.mean_psnr:.3f} dB SSIM={report.mean_ssim:.4f}")
                if best_psnr is None or report.mean_psnr > best_psnr:
                    best_psnr = report.mean_psnr
                    best_checkpoint = capture_checkpoint(model, optimizer, config, *position, iteration, best_psnr)
                    if out_dir is not None:
                        save_checkpoint(best_checkpoint, out_dir / "best.ckpt")
            log.epochs.append(record)

        last_checkpoint = capture_checkpoint(model, optimizer, config, *position, iteration, best_psnr)
        if out_dir is not None:
            save_checkpoint(last_checkpoint, out_dir / "last.ckpt")
        if stop:
            break

    if last_checkpoint is None:
        last_checkpoint = capture_checkpoint(model, optimizer, config, *position, iteration, best_psnr)
    if out_dir is not None:
        log.write_csv(out_dir)

    logger.info(f"Training finished after {iteration} iterations")
    return FitResult(checkpoint=best_checkpoint or last_checkpoint, log=log, model=model)


# ----- Ablation -----

class AblationVariant(BaseModel):
    """A named set of ModelConfig overrides."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str
    model: Dict[str, Any] = Field(default_factory=dict)


DEPTH_GRID = [AblationVariant(name=f"N={n}", model={"num_mheb": n}) for n in (4, 6, 8, 10)]

FUSION_GRID = [
    AblationVariant(name="no-HADB concat", model={"use_hadb": False, "fusion_mode": "concat"}),
    AblationVariant(name="concat", model={"use_hadb": True, "fusion_mode": "concat"}),
    AblationVariant(name="add", model={"use_hadb": True, "fusion_mode": "add"}),
    AblationVariant(name="rpf", model={"use_hadb": True, "fusion_mode": "rpf"}),
]

BUILTIN_GRIDS = {"depth": DEPTH_GRID, "fusion": FUSION_GRID}


def load_grid(grid: str) -> List[AblationVariant]:
    """
    Resolve a grid name ('depth', 'fusion') or a JSON file holding a list of
    variants, or {"variants": [...]}.

    Raises:
        ConfigurationError: Unreadable file or empty grid
    """
    if grid in BUILTIN_GRIDS:
        return list(BUILTIN_GRIDS[grid])
    path = Path(grid)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as e:
        raise ConfigurationError(f"Grid file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"Grid file {path} is not valid JSON: {e}") from e
    items = raw.get("variants", []) if isinstance(raw, dict) else raw
    if not isinstance(items, list):
        raise ConfigurationError(f"Grid file {path} must hold a list of variants")
    variants = [parse_config(AblationVariant, item) for item in items]
    if not variants:
        raise ConfigurationError(f"Grid {path} is empty")
    return variants


@dataclass
class AblationRow:
    variant: str
    param_count: Optional[int]
    psnr: Optional[float]
    ssim: Optional[float]
    error: Optional[str] = None
    model: Dict[str, Any] = field(default_factory=dict, repr=False)


@dataclass
class AblationTable:
    rows: List[AblationRow]
    depth_monotonic: bool
    hadb_ratio: Optional[float] = None

    def to_text(self) -> str:
        lines = [f"{'variant':<20} {'params':>10} {'psnr_db':>9} {'ssim':>7}  status"]
        for row in self.rows:
            params = "-" if row.param_count is None else str(row.param_count)
            psnr_text = "-" if row.psnr is None else f"{row.psnr:.3f}"
            ssim_text = "-" if row.ssim is None else f"{row.ssim:.4f}"
            status = "ok" if row.error is None else f"FAILED: {row.error}"
            lines.append(f"{row.variant:<20} {params:>10} {psnr_text:>9} {ssim_text:>7}  {status}")
        lines.append(f"param_count strictly increasing in N: {self.depth_monotonic}")
        if self.hadb_ratio is not None:
            lines.append(f"HADB / no-HADB parameter ratio: {self.hadb_ratio:.3f}")
        return "\n".join(lines)

    def write_csv(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["variant", "param_count", "psnr_db", "ssim", "error"])
            for row in self.rows:
                writer.writerow([
                    row.variant,
                    "" if row.param_count is None else row.param_count,
                    "" if row.psnr is None else f"{row.psnr:.6f}",
                    "" if row.ssim is None else f"{row.ssim:.6f}",
                    row.error or "",
                ])
        return path


def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", name).strip("_") or "variant"


def depth_is_monotonic(rows: Sequence[AblationRow]) -> bool:
    """Within rows that differ only in num_mheb, param_count must strictly increase with N."""
    groups: Dict[str, List[Tuple[int, int]]] = {}
    for row in rows:
        if row.param_count is None or not row.model:
            continue
        key = json.dumps({k: v for k, v in row.model.items() if k != "num_mheb"}, sort_keys=True)
        groups.setdefault(key, []).append((row.model["num_mheb"], row.param_count))
    for members in groups.values():
        members = sorted(set(members))
        for (n_a, count_a), (n_b, count_b) in zip(members, members[1:]):
            if n_b > n_a and count_b <= count_a:
                return False
    return True


def hadb_parameter_ratio(rows: Sequence[AblationRow]) -> Optional[float]:
    """param_count(HADB) / param_count(no-HADB) for the first pair differing only in use_hadb."""
    for with_hadb in rows:
        if not with_hadb.model.get("use_hadb") or with_hadb.param_count is None:
            continue
        for without in rows:
            if without.model.get("use_hadb", True) or without.param_count is None:
                continue
            same = {k: v for k, v in with_hadb.model.items() if k != "use_hadb"} == {
                k: v for k, v in without.model.items() if k != "use_hadb"
            }
            if same:
                return with_hadb.param_count / without.param_count
    return None


def run_ablation(
    base: TrainConfig,
    variants: Sequence[AblationVariant],
    train_index: PairIndex,
    eval_index: Optional[PairIndex] = None,
    out_dir: Optional[Path] = None,
) -> AblationTable:
    """
    Train every variant under identical seeds and data and tabulate
    (variant, param_count, PSNR, SSIM). A failing variant is recorded, not fatal.
    Without an eval index the training pairs are scored.
    """
    if not variants:
        raise ConfigurationError("Ablation needs at least one variant")
    score_index = eval_index or train_index
    cache = ImageCache(capacity=base.cache_images)
    rows = []

    for variant in variants:
        logger.info(f"Ablation variant '{variant.name}': {variant.model}")
        row = AblationRow(variant=variant.name, param_count=None, psnr=None, ssim=None)
        try:
            model_config = parse_config(ModelConfig, {**base.model.model_dump(), **variant.model})
            row.model = model_config.model_dump()
            row.param_count = param_count(model_config)
            config = base.model_copy(update={"model": model_config})
            variant_dir = out_dir / _slug(variant.name) if out_dir is not None else None
            result = fit(train_index, eval_index, config, out_dir=variant_dir, cache=cache)
            report = evaluate_model(result.model, score_index, cache)
            row.psnr, row.ssim = report.mean_psnr, report.mean_ssim
        except Exception as e:
            logger.error(f"Variant '{variant.name}' failed: {e}")
            row.error = str(e)
        rows.append(row)

    table = AblationTable(rows=rows, depth_monotonic=depth_is_monotonic(rows), hadb_ratio=hadb_parameter_ratio(rows))
    if not table.depth_monotonic:
        logger.warning("param_count is not strictly increasing in num_mheb")
    if out_dir is not None:
        table.write_csv(Path(out_dir) / "ablation.csv")
    return table
