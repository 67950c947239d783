"""
Tests for the binary checkpoint format.

Tests cover:
- Exact parameter and optimizer-moment preservation
- Version, magic and digest checks
- Shape manifest mismatches
- Atomic writes with retries
"""

import os
import struct
import sys
from unittest.mock import patch

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from checkpoint import (
    FORMAT_VERSION,
    MAGIC,
    CheckpointError,
    capture_checkpoint,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    restore_model,
    restore_optimizer,
    save_checkpoint,
)
from config import ModelConfig
from datapipe import Batch
from trainer import init_model, make_optimizer, train_step


@pytest.fixture
def trained(micro_train):
    """A micro model after two Adam steps, with its optimizer."""
    model = init_model(micro_train.model)
    optimizer = make_optimizer(model, lr=1e-3)
    generator = torch.Generator().manual_seed(0)
    for _ in range(2):
        clean = torch.rand(2, 3, 12, 12, generator=generator)
        train_step(model, Batch(rainy=torch.clamp(clean + 0.1, 0, 1), clean=clean), optimizer)
    return model, optimizer, micro_train


class TestRoundTrip:
    """Test encoding and decoding checkpoints."""

    def test_parameters_are_exact(self, trained):
        """Test that parameters, configs and the data position survive bit-exactly."""
        model, optimizer, config = trained
        checkpoint = capture_checkpoint(model, optimizer, config, epoch=1, batch_in_epoch=2, iteration=7, best_psnr=31.5)
        restored = decode_checkpoint(encode_checkpoint(checkpoint))
        rebuilt = restore_model(restored)
        for (name, original), (_, loaded) in zip(model.named_parameters(), rebuilt.named_parameters()):
            assert torch.equal(original, loaded), name
        assert restored.model_config == config.model
        assert restored.train_config == config
        assert (restored.epoch, restored.batch_in_epoch, restored.iteration) == (1, 2, 7)
        assert restored.best_psnr == 31.5

    def test_optimizer_moments_are_exact(self, trained):
        """Test that Adam step counts and both moments survive bit-exactly."""
        model, optimizer, config = trained
        restored = decode_checkpoint(encode_checkpoint(capture_checkpoint(model, optimizer, config)))
        rebuilt = restore_model(restored)
        fresh = make_optimizer(rebuilt, lr=1e-3)
        restore_optimizer(restored, rebuilt, fresh)
        for original, loaded in zip(model.parameters(), rebuilt.parameters()):
            a, b = optimizer.state[original], fresh.state[loaded]
            assert float(a["step"]) == float(b["step"]) == 2.0
            assert torch.equal(a["exp_avg"], b["exp_avg"])
            assert torch.equal(a["exp_avg_sq"], b["exp_avg_sq"])

    def test_without_optimizer_state(self, micro_train):
        """Test that a checkpoint without an optimizer decodes with empty state."""
        model = init_model(micro_train.model)
        restored = decode_checkpoint(encode_checkpoint(capture_checkpoint(model, None, micro_train)))
        assert restored.optimizer_state == []

    def test_save_and_load(self, trained, tmp_path):
        """Test that a saved file loads and leaves no temporary file behind."""
        model, optimizer, config = trained
        path = save_checkpoint(capture_checkpoint(model, optimizer, config), tmp_path / "nested" / "last.ckpt")
        assert load_checkpoint(path).format_version == FORMAT_VERSION
        assert not (tmp_path / "nested" / "last.ckpt.tmp").exists()


class TestCorruption:
    """Test rejection of damaged or incompatible checkpoints."""

    @pytest.fixture
    def data(self, trained):
        model, optimizer, config = trained
        return encode_checkpoint(capture_checkpoint(model, optimizer, config))

    def test_truncated(self, data):
        """Test that a truncated file is reported as corrupt."""
        with pytest.raises(CheckpointError, match="corrupt"):
            decode_checkpoint(data[: len(data) // 2])

    def test_flipped_byte(self, data):
        """Test that a single flipped byte fails the digest."""
        damaged = bytearray(data)
        damaged[len(damaged) // 2] ^= 0xFF
        with pytest.raises(CheckpointError, match="corrupt"):
            decode_checkpoint(bytes(damaged))

    def test_bad_magic(self, data):
        """Test that foreign bytes are rejected by the magic check."""
        with pytest.raises(CheckpointError, match="magic"):
            decode_checkpoint(b"NOTACKPT" + data[len(MAGIC):])

    def test_version_mismatch_is_reported_first(self, data):
        """Test that a future version is named even though its digest no longer matches."""
        future = MAGIC + struct.pack("<I", FORMAT_VERSION + 1) + data[len(MAGIC) + 4:]
        with pytest.raises(CheckpointError, match=f"version {FORMAT_VERSION + 1}"):
            decode_checkpoint(future)

    def test_missing_file(self, tmp_path):
        """Test that a missing file is a checkpoint error."""
        with pytest.raises(CheckpointError, match="Cannot read"):
            load_checkpoint(tmp_path / "absent.ckpt")

    def test_shape_manifest_mismatch(self, trained):
        """Test that a config disagreeing with the stored shapes is rejected."""
        model, optimizer, config = trained
        checkpoint = capture_checkpoint(model, optimizer, config)
        checkpoint.model_config = ModelConfig(num_mheb=3, base_channels=8)
        with pytest.raises(CheckpointError, match="shape manifest"):
            restore_model(checkpoint)

    def test_parameter_shape_mismatch(self, trained):
        """Test that a wrongly shaped tensor is rejected."""
        model, optimizer, config = trained
        checkpoint = capture_checkpoint(model, optimizer, config)
        name = next(iter(checkpoint.parameters))
        checkpoint.parameters[name] = np.zeros((1,), dtype=np.float32)
        with pytest.raises(CheckpointError, match="shape mismatch"):
            restore_model(checkpoint)


class TestAtomicWrite:
    """Test temp-file writes and retries."""

    def test_transient_error_is_retried(self, trained, tmp_path):
        """Test that one failed rename is retried and the write lands."""
        model, optimizer, config = trained
        real_replace = os.replace
        failures = [OSError("busy")]

        def flaky_replace(src, dst):
            if failures:
                raise failures.pop()
            real_replace(src, dst)

        with patch("checkpoint.os.replace", side_effect=flaky_replace) as mock_replace:
            save_checkpoint(capture_checkpoint(model, optimizer, config), tmp_path / "last.ckpt")
        assert mock_replace.call_count == 2
        assert load_checkpoint(tmp_path / "last.ckpt").iteration == 0

    def test_persistent_error_is_fatal(self, trained, tmp_path):
        """Test that three failed renames raise CheckpointError."""
        model, optimizer, config = trained
        with patch("checkpoint.os.replace", side_effect=OSError("read-only")) as mock_replace:
            with pytest.raises(CheckpointError, match="Cannot write"):
                save_checkpoint(capture_checkpoint(model, optimizer, config), tmp_path / "last.ckpt")
        assert mock_replace.call_count == 3
