"""
Tests for the training losses and evaluation metrics.

Tests cover:
- L1 and PSNR against scalar-loop oracles
- SSIM against the brute-force per-window reference
- SSIM identity and symmetry
- The reported hybrid-loss identity
- PSNR values, invariance and the zero-error cap
- Evaluation reports
"""

import csv
import math
import os
import sys

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import PreconditionError
from losses import (
    PSNR_CAP_DB,
    SsimParams,
    evaluate_pairs,
    gaussian_window,
    hybrid_loss,
    l1_loss,
    psnr,
    ssim_index,
    ssim_loss,
    ssim_reference,
)


def random_pair(seed, shape=(1, 3, 16, 16)):
    rng = np.random.default_rng(seed)
    return rng.random(shape), rng.random(shape)


def loop_mean_abs(a, b):
    total = 0.0
    for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
        total += abs(x - y)
    return total / a.size


def loop_psnr(a, b):
    total = 0.0
    for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
        total += (x - y) * (x - y)
    return 10.0 * math.log10(1.0 / (total / a.size))


class TestL1:
    """Test the mean absolute error."""

    def test_matches_scalar_loop(self):
        """Test that l1_loss equals an elementwise loop within 1e-12."""
        for seed in range(3):
            a, b = random_pair(seed, shape=(2, 3, 6, 6))
            value = float(l1_loss(torch.from_numpy(a), torch.from_numpy(b)))
            assert abs(value - loop_mean_abs(a, b)) < 1e-12

    def test_uniform_offset(self):
        """Test that ground truth 0 and prediction 0.1 give 0.1."""
        target = torch.zeros(1, 3, 4, 4, dtype=torch.float64)
        assert float(l1_loss(target + 0.1, target)) == pytest.approx(0.1, abs=1e-15)

    def test_identical_is_zero(self):
        """Test that equal images have zero L1."""
        image = torch.rand(1, 3, 8, 8)
        assert float(l1_loss(image, image.clone())) == 0.0

    def test_shape_mismatch(self):
        """Test that differently shaped images are rejected."""
        with pytest.raises(PreconditionError, match="shape mismatch"):
            l1_loss(torch.rand(1, 3, 12, 12), torch.rand(1, 3, 12, 8))


class TestSsim:
    """Test the Gaussian-window SSIM index and loss."""

    def test_matches_reference(self):
        """Test that convolutional SSIM agrees with the per-window loop on 20 random 32x32 pairs."""
        for seed in range(20):
            a, b = random_pair(seed, shape=(1, 3, 32, 32))
            fast = float(ssim_index(torch.from_numpy(a), torch.from_numpy(b)))
            assert abs(fast - ssim_reference(a, b)) < 1e-6

    def test_matches_reference_on_correlated_images(self):
        """Test agreement when the pair is strongly correlated."""
        a, _ = random_pair(7)
        b = np.clip(a + 0.05 * np.random.default_rng(8).standard_normal(a.shape), 0.0, 1.0)
        fast = float(ssim_index(torch.from_numpy(a), torch.from_numpy(b)))
        assert abs(fast - ssim_reference(a, b)) < 1e-6

    def test_self_similarity_is_one(self):
        """Test that ssim(a, a) is 1 within 1e-12."""
        a, _ = random_pair(1)
        ta = torch.from_numpy(a)
        assert abs(float(ssim_index(ta, ta)) - 1.0) < 1e-12

    def test_symmetric(self):
        """Test that ssim(a, b) == ssim(b, a)."""
        a, b = random_pair(2)
        ta, tb = torch.from_numpy(a), torch.from_numpy(b)
        assert float(ssim_index(ta, tb)) == float(ssim_index(tb, ta))

    def test_constant_images(self):
        """Test that equal constants are identical and zero vs one is nearly unrelated."""
        zeros = torch.zeros(1, 3, 12, 12, dtype=torch.float64)
        ones = torch.ones(1, 3, 12, 12, dtype=torch.float64)
        assert float(ssim_index(zeros, zeros)) == pytest.approx(1.0)
        assert float(ssim_index(zeros, ones)) < 1e-3

    def test_loss_range(self):
        """Test that 1 - SSIM stays within [0, 2] on random pairs."""
        for seed in range(10):
            a, b = random_pair(seed)
            value = float(ssim_loss(torch.from_numpy(a), torch.from_numpy(b)))
            assert 0.0 <= value <= 2.0

    def test_image_smaller_than_window(self):
        """Test that a 10x10 image cannot hold an 11x11 window."""
        with pytest.raises(PreconditionError, match="window"):
            ssim_index(torch.rand(1, 3, 10, 10), torch.rand(1, 3, 10, 10))

    def test_window_is_normalized(self):
        """Test that the Gaussian window is 11x11 and sums to 1."""
        window = gaussian_window()
        assert window.shape == (11, 11)
        assert float(window.sum()) == pytest.approx(1.0, abs=1e-12)

    def test_even_window_rejected(self):
        """Test that an even window size is a validation error."""
        with pytest.raises(ValueError):
            SsimParams(window_size=10)

    def test_gradient_flows(self):
        """Test that the SSIM loss has a finite gradient."""
        prediction = torch.rand(1, 3, 12, 12, dtype=torch.float64, requires_grad=True)
        ssim_loss(prediction, torch.rand(1, 3, 12, 12, dtype=torch.float64)).backward()
        assert prediction.grad is not None
        assert bool(torch.isfinite(prediction.grad).all())


class TestHybridLoss:
    """Test the L1 + lambda * (1 - SSIM) objective."""

    def test_reported_total_identity(self):
        """Test that total == l1 + 0.2 * ssim_loss within 1e-9 on 100 random pairs."""
        generator = torch.Generator().manual_seed(0)
        for _ in range(100):
            prediction = torch.rand(1, 3, 12, 12, generator=generator)
            target = torch.rand(1, 3, 12, 12, generator=generator)
            loss = hybrid_loss(prediction, target, lam=0.2)
            assert abs(loss.total - (loss.l1 + 0.2 * loss.ssim_loss)) < 1e-9

    def test_objective_matches_total(self):
        """Test that the differentiable objective equals the reported total."""
        prediction, target = torch.rand(2, 3, 12, 12), torch.rand(2, 3, 12, 12)
        loss = hybrid_loss(prediction, target)
        assert float(loss.objective) == pytest.approx(loss.total, rel=1e-6)

    def test_identical_images_have_zero_loss(self):
        """Test that both components vanish for equal images."""
        image = torch.rand(1, 3, 12, 12, dtype=torch.float64)
        loss = hybrid_loss(image, image.clone())
        assert loss.l1 == 0.0
        assert abs(loss.ssim_loss) < 1e-12

    def test_lambda_zero_is_pure_l1(self):
        """Test that lambda 0 leaves exactly the L1 term."""
        prediction, target = torch.rand(1, 3, 12, 12), torch.rand(1, 3, 12, 12)
        loss = hybrid_loss(prediction, target, lam=0.0)
        assert loss.total == loss.l1

    def test_negative_lambda(self):
        """Test that a negative weight is rejected."""
        with pytest.raises(PreconditionError):
            hybrid_loss(torch.rand(1, 3, 12, 12), torch.rand(1, 3, 12, 12), lam=-0.1)


class TestPsnr:
    """Test PSNR values and the zero-error cap."""

    def test_identical_is_capped(self):
        """Test that zero MSE reports the 100 dB cap."""
        image = torch.rand(1, 3, 8, 8)
        assert psnr(image, image.clone()) == PSNR_CAP_DB

    def test_known_value(self):
        """Test that a uniform 0.1 offset gives MSE 0.01, i.e. 20 dB."""
        target = torch.full((1, 3, 8, 8), 0.5, dtype=torch.float64)
        assert psnr(target + 0.1, target) == pytest.approx(20.0, abs=1e-9)

    def test_matches_scalar_loop(self):
        """Test that psnr equals a loop-computed MSE oracle within 1e-9."""
        for seed in range(3):
            a, b = random_pair(seed, shape=(1, 3, 8, 8))
            assert abs(psnr(torch.from_numpy(a), torch.from_numpy(b)) - loop_psnr(a, b)) < 1e-9

    def test_shift_invariant(self):
        """Test that adding the same constant to both images keeps the PSNR."""
        a, b = random_pair(4, shape=(1, 3, 8, 8))
        ta, tb = 0.5 * torch.from_numpy(a), 0.5 * torch.from_numpy(b)
        assert psnr(ta + 0.25, tb + 0.25) == pytest.approx(psnr(ta, tb), abs=1e-9)

    def test_decreases_with_error(self):
        """Test that a larger error gives a lower PSNR."""
        target = torch.full((1, 3, 8, 8), 0.5)
        assert psnr(target + 0.01, target) > psnr(target + 0.1, target)


class TestEvaluation:
    """Test per-pair and mean evaluation reports."""

    def test_identical_pairs(self):
        """Test that identical pairs score 100 dB and SSIM 1."""
        images = [torch.rand(1, 3, 16, 16, dtype=torch.float64) for _ in range(3)]
        report = evaluate_pairs([(image, image.clone()) for image in images])
        assert report.mean_psnr == PSNR_CAP_DB
        assert report.mean_ssim == pytest.approx(1.0, abs=1e-12)

    def test_duplicated_pairs_keep_the_mean(self):
        """Test that repeating one pair leaves the means unchanged."""
        a, b = (torch.from_numpy(x) for x in random_pair(5))
        single = evaluate_pairs([(a, b)])
        repeated = evaluate_pairs([(a, b)] * 3)
        assert repeated.mean_psnr == pytest.approx(single.mean_psnr, abs=1e-12)
        assert repeated.mean_ssim == pytest.approx(single.mean_ssim, abs=1e-12)

    def test_means_are_arithmetic(self):
        """Test that 20 dB and 40 dB pairs average to 30 dB."""
        target = torch.full((1, 3, 16, 16), 0.5, dtype=torch.float64)
        report = evaluate_pairs([(target + 0.1, target), (target + 0.01, target)], names=["a", "b"])
        assert report.mean_psnr == pytest.approx((20.0 + 40.0) / 2, abs=1e-6)
        assert [row.name for row in report.rows] == ["a", "b"]

    def test_empty(self):
        """Test that an empty pair list is rejected."""
        with pytest.raises(PreconditionError):
            evaluate_pairs([])

    def test_name_count_mismatch(self):
        """Test that names must match the pairs one to one."""
        image = torch.rand(1, 3, 16, 16)
        with pytest.raises(PreconditionError):
            evaluate_pairs([(image, image)], names=["a", "b"])

    def test_csv_has_one_row_per_pair_plus_summary(self, tmp_path):
        """Test the CSV header, per-pair rows and the trailing mean row."""
        images = [torch.rand(1, 3, 16, 16) for _ in range(4)]
        report = evaluate_pairs([(image, image) for image in images])
        path = report.write_csv(tmp_path / "report.csv")
        with path.open() as handle:
            rows = list(csv.reader(handle))
        assert rows[0] == ["filename", "psnr_db", "ssim"]
        assert len(rows) - 1 == len(images) + 1
        assert rows[-1][0] == "mean"

    def test_text_lists_every_pair(self):
        """Test that the text table names each pair and the mean."""
        image = torch.rand(1, 3, 16, 16)
        text = evaluate_pairs([(image, image)], names=["rain-1.png"]).to_text()
        assert "rain-1.png" in text
        assert "mean" in text
        assert not math.isnan(float(text.splitlines()[-1].split()[1]))
