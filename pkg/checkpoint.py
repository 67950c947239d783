"""
Versioned binary checkpoints.

Layout (all integers little-endian):

    magic b"MH2FCKPT" | uint32 format_version
    sections: 4-byte tag | uint64 length | payload
        CONF  canonical JSON {"model": ..., "train": ...}
        SHAP  JSON shape manifest [[name, [dims...]], ...]
        PARM  float32 parameter blob in manifest order
        OPTH  JSON optimizer header [step or null per parameter]
        OPTB  float32 blob: exp_avg then exp_avg_sq for each parameter with state
        META  JSON progress: epoch, batch_in_epoch, iteration, best_psnr, rng state
    trailer: b"SHA2" | 32-byte SHA-256 of every preceding byte
"""

import base64
import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch
from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_exponential

from blocks import MH2FNet
from config import MH2FError, ModelConfig, TrainConfig, canonical_json, config_as_dict

logger = logging.getLogger(__name__)

MAGIC = b"MH2FCKPT"
FORMAT_VERSION = 1
DIGEST_TAG = b"SHA2"
PARAM_DTYPE = np.dtype("<f4")
SECTION_ORDER = (b"CONF", b"SHAP", b"PARM", b"OPTH", b"OPTB", b"META")


class CheckpointError(MH2FError):
    """Checkpoint cannot be written, read or applied."""
    pass


@dataclass
class AdamMoments:
    step: int
    exp_avg: np.ndarray
    exp_avg_sq: np.ndarray


@dataclass
class Checkpoint:
    """Model parameters, optimizer moments and training progress."""

    model_config: ModelConfig
    train_config: TrainConfig
    parameters: Dict[str, np.ndarray]
    optimizer_state: List[Optional[AdamMoments]] = field(default_factory=list)
    epoch: int = 0
    batch_in_epoch: int = 0
    iteration: int = 0
    best_psnr: Optional[float] = None
    rng_state: Dict[str, Any] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


# ----- Capture / restore -----

def capture_checkpoint(
    model: MH2FNet,
    optimizer: Optional[torch.optim.Optimizer],
    train_config: TrainConfig,
    epoch: int = 0,
    batch_in_epoch: int = 0,
    iteration: int = 0,
    best_psnr: Optional[float] = None,
) -> Checkpoint:
    """Snapshot a model (and optimizer) into a Checkpoint."""
    parameters = {
        name: p.detach().cpu().numpy().astype(PARAM_DTYPE, copy=True)
        for name, p in model.named_parameters()
    }

    moments: List[Optional[AdamMoments]] = []
    if optimizer is not None:
        state = optimizer.state
        for p in model.parameters():
            entry = state.get(p)
            if not entry:
                moments.append(None)
                continue
            moments.append(
                AdamMoments(
                    step=int(float(entry["step"])),
                    exp_avg=entry["exp_avg"].detach().cpu().numpy().astype(PARAM_DTYPE, copy=True),
                    exp_avg_sq=entry["exp_avg_sq"].detach().cpu().numpy().astype(PARAM_DTYPE, copy=True),
                )
            )

    rng_state = {
        "seed": train_config.seed,
        "epoch": epoch,
        "batch_in_epoch": batch_in_epoch,
        "torch": base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode("ascii"),
    }
    return Checkpoint(
        model_config=model.config,
        train_config=train_config,
        parameters=parameters,
        optimizer_state=moments,
        epoch=epoch,
        batch_in_epoch=batch_in_epoch,
        iteration=iteration,
        best_psnr=best_psnr,
        rng_state=rng_state,
    )


def _check_manifest(checkpoint: Checkpoint, model: MH2FNet) -> None:
    expected = [(name, tuple(p.shape)) for name, p in model.named_parameters()]
    stored = [(name, tuple(values.shape)) for name, values in checkpoint.parameters.items()]
    if expected != stored:
        expected_names = {name for name, _ in expected}
        stored_names = {name for name, _ in stored}
        detail = []
        if expected_names - stored_names:
            detail.append(f"missing {sorted(expected_names - stored_names)[:5]}")
        if stored_names - expected_names:
            detail.append(f"unexpected {sorted(stored_names - expected_names)[:5]}")
        if not detail:
            detail.append("shape mismatch")
        raise CheckpointError(f"Checkpoint shape manifest does not match model: {'; '.join(detail)}")


@torch.no_grad()
def restore_model(checkpoint: Checkpoint) -> MH2FNet:
    """Build a model from the stored config and load every parameter."""
    model = MH2FNet(checkpoint.model_config)
    _check_manifest(checkpoint, model)
    for name, param in model.named_parameters():
        param.copy_(torch.from_numpy(checkpoint.parameters[name].astype(np.float32)))
    return model


def restore_optimizer(checkpoint: Checkpoint, model: MH2FNet, optimizer: torch.optim.Optimizer) -> None:
    """Load stored Adam moments into an optimizer built over model.parameters()."""
    params = list(model.parameters())
    if checkpoint.optimizer_state and len(checkpoint.optimizer_state) != len(params):
        raise CheckpointError(
            f"Optimizer state covers {len(checkpoint.optimizer_state)} tensors, model has {len(params)}"
        )
    state_dict = optimizer.state_dict()
    state = {}
    for i, moments in enumerate(checkpoint.optimizer_state):
        if moments is None:
            continue
        state[i] = {
            "step": torch.tensor(float(moments.step), dtype=torch.float32),
            "exp_avg": torch.from_numpy(moments.exp_avg.astype(np.float32)).reshape(params[i].shape),
            "exp_avg_sq": torch.from_numpy(moments.exp_avg_sq.astype(np.float32)).reshape(params[i].shape),
        }
    state_dict["state"] = state
    optimizer.load_state_dict(state_dict)


def restore_rng(checkpoint: Checkpoint) -> None:
    encoded = checkpoint.rng_state.get("torch")
    if encoded:
        raw = np.frombuffer(base64.b64decode(encoded), dtype=np.uint8).copy()
        torch.set_rng_state(torch.from_numpy(raw))


# ----- Encoding -----

def _section(tag: bytes, payload: bytes) -> bytes:
    return tag + struct.pack("<Q", len(payload)) + payload


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    config_block = canonical_json({
        "model": config_as_dict(checkpoint.model_config),
        "train": config_as_dict(checkpoint.train_config),
    }).encode("utf-8")

    manifest = [[name, list(values.shape)] for name, values in checkpoint.parameters.items()]
    param_blob = b"".join(
        np.ascontiguousarray(values, dtype=PARAM_DTYPE).tobytes() for values in checkpoint.parameters.values()
    )

    optimizer_header = [None if m is None else m.step for m in checkpoint.optimizer_state]
    optimizer_blob = b"".join(
        np.ascontiguousarray(m.exp_avg, dtype=PARAM_DTYPE).tobytes()
        + np.ascontiguousarray(m.exp_avg_sq, dtype=PARAM_DTYPE).tobytes()
        for m in checkpoint.optimizer_state
        if m is not None
    )

    meta = {
        "epoch": checkpoint.epoch,
        "batch_in_epoch": checkpoint.batch_in_epoch,
        "iteration": checkpoint.iteration,
        "best_psnr": checkpoint.best_psnr,
        "rng": checkpoint.rng_state,
    }

    body = MAGIC + struct.pack("<I", checkpoint.format_version)
    body += _section(b"CONF", config_block)
    body += _section(b"SHAP", canonical_json(manifest).encode("utf-8"))
    body += _section(b"PARM", param_blob)
    body += _section(b"OPTH", canonical_json(optimizer_header).encode("utf-8"))
    body += _section(b"OPTB", optimizer_blob)
    body += _section(b"META", canonical_json(meta).encode("utf-8"))
    return body + DIGEST_TAG + hashlib.sha256(body).digest()


def _corrupt(path: Path, reason: str) -> CheckpointError:
    return CheckpointError(f"corrupt checkpoint {path}: {reason}")


def _read_sections(data: bytes, path: Path) -> Dict[bytes, bytes]:
    sections = {}
    offset = len(MAGIC) + 4
    end = len(data) - len(DIGEST_TAG) - 32
    while offset < end:
        if offset + 12 > end:
            raise _corrupt(path, "truncated section header")
        tag = data[offset:offset + 4]
        (length,) = struct.unpack("<Q", data[offset + 4:offset + 12])
        offset += 12
        if offset + length > end:
            raise _corrupt(path, f"section {tag!r} runs past end of file")
        sections[tag] = data[offset:offset + length]
        offset += length
    missing = [tag.decode() for tag in SECTION_ORDER if tag not in sections]
    if missing:
        raise _corrupt(path, f"missing sections {missing}")
    return sections


def decode_checkpoint(data: bytes, path: Path = Path("<memory>")) -> Checkpoint:
    """
    Parse checkpoint bytes. The version is checked first, then the digest,
    then the sections; nothing is returned unless all of it is consistent.
    """
    header_size = len(MAGIC) + 4
    if len(data) < header_size or data[:len(MAGIC)] != MAGIC:
        raise _corrupt(path, "bad magic bytes")
    (version,) = struct.unpack("<I", data[len(MAGIC):header_size])
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"Checkpoint {path} has format version {version}; this build reads version {FORMAT_VERSION}"
        )

    if len(data) < header_size + len(DIGEST_TAG) + 32:
        raise _corrupt(path, "file too short")
    body, trailer = data[:-(len(DIGEST_TAG) + 32)], data[-(len(DIGEST_TAG) + 32):]
    if trailer[:len(DIGEST_TAG)] != DIGEST_TAG or hashlib.sha256(body).digest() != trailer[len(DIGEST_TAG):]:
        raise _corrupt(path, "digest mismatch (truncated or damaged)")

    sections = _read_sections(data, path)
    try:
        config_block = json.loads(sections[b"CONF"])
        manifest = json.loads(sections[b"SHAP"])
        optimizer_header = json.loads(sections[b"OPTH"])
        meta = json.loads(sections[b"META"])
        model_config = ModelConfig.model_validate(config_block["model"])
        train_config = TrainConfig.model_validate({**config_block["train"], "model": model_config})
    except (ValueError, KeyError, TypeError) as e:
        raise _corrupt(path, f"unreadable header: {e}") from e

    parameters, offset = _split_blob(sections[b"PARM"], [(name, tuple(shape)) for name, shape in manifest], path)
    if offset != len(sections[b"PARM"]):
        raise CheckpointError(f"Checkpoint {path}: parameter blob size does not match shape manifest")

    shapes = [tuple(shape) for _, shape in manifest]
    if optimizer_header and len(optimizer_header) != len(shapes):
        raise CheckpointError(f"Checkpoint {path}: optimizer header does not match shape manifest")
    moments: List[Optional[AdamMoments]] = []
    blob = sections[b"OPTB"]
    offset = 0
    for step, shape in zip(optimizer_header, shapes):
        if step is None:
            moments.append(None)
            continue
        pair, offset = _split_blob(blob, [("exp_avg", shape), ("exp_avg_sq", shape)], path, offset)
        moments.append(AdamMoments(step=int(step), exp_avg=pair["exp_avg"], exp_avg_sq=pair["exp_avg_sq"]))
    if offset != len(blob):
        raise CheckpointError(f"Checkpoint {path}: optimizer blob size does not match shape manifest")

    return Checkpoint(
        model_config=model_config,
        train_config=train_config,
        parameters=parameters,
        optimizer_state=moments,
        epoch=int(meta["epoch"]),
        batch_in_epoch=int(meta["batch_in_epoch"]),
        iteration=int(meta["iteration"]),
        best_psnr=meta.get("best_psnr"),
        rng_state=meta.get("rng", {}),
        format_version=version,
    )


def _split_blob(
    blob: bytes,
    layout: List[Tuple[str, Tuple[int, ...]]],
    path: Path,
    offset: int = 0,
) -> Tuple[Dict[str, np.ndarray], int]:
    arrays = {}
    for name, shape in layout:
        count = int(np.prod(shape, dtype=np.int64))
        size = count * PARAM_DTYPE.itemsize
        if offset + size > len(blob):
            raise CheckpointError(f"Checkpoint {path}: blob too short for tensor {name} {shape}")
        arrays[name] = np.frombuffer(blob, dtype=PARAM_DTYPE, count=count, offset=offset).reshape(shape).copy()
        offset += size
    return arrays, offset


# ----- Files -----

@retry(
    stop=stop_after_attempt(3),
    wait=wait_exponential(multiplier=0.5, min=0.5, max=4),
    retry=retry_if_exception_type(OSError),
    reraise=True,
)
def _write_atomic(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(path.name + ".tmp")
    with tmp_path.open("wb") as handle:
        handle.write(data)
        handle.flush()
        os.fsync(handle.fileno())
    os.replace(tmp_path, path)


def save_checkpoint(checkpoint: Checkpoint, path: Path) -> Path:
    """
    Write a checkpoint atomically (temp file + rename), retrying transient OS errors.

    Raises:
        CheckpointError: If the file cannot be written after retries
    """
    path = Path(path)
    data = encode_checkpoint(checkpoint)
    try:
        _write_atomic(path, data)
    except OSError as e:
        logger.error(f"Failed to write checkpoint {path}: {e}")
        raise CheckpointError(f"Cannot write checkpoint {path}: {e}") from e
    logger.debug(f"Saved checkpoint {path} ({len(data)} bytes, iteration {checkpoint.iteration})")
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    """
    Read and fully validate a checkpoint file.

    Raises:
        CheckpointError: Missing file, version mismatch, truncation or damage
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    return decode_checkpoint(data, path)
