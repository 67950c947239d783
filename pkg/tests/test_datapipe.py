"""
Tests for dataset indexing, patch sampling, augmentation and batching.

Tests cover:
- Pair discovery for both naming schemes
- Image IO
- The bounded image cache and prefetch
- Rainy/clean alignment under sampling and flips
- Patch origins spanning the whole valid range
- Deterministic batch assembly
"""

import csv
import os
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import PreconditionError
from datapipe import (
    DatasetError,
    ImageCache,
    ImageIOError,
    PairIndex,
    augment,
    batches_per_epoch,
    index_dataset,
    load_image,
    make_batches,
    natural_key,
    sample_patch,
    save_image,
    to_uint8,
)
from tests.conftest import write_pairs


def memory_index(count, size=16, seed=0):
    """PairIndex over fake paths backed by an in-memory loader."""
    rng = np.random.default_rng(seed)
    images = {}
    entries = []
    for k in range(count):
        rainy, clean = Path(f"rain-{k}.png"), Path(f"norain-{k}.png")
        images[clean] = rng.random((size, size, 3)).astype(np.float32)
        images[rainy] = np.clip(images[clean] + 0.2, 0.0, 1.0)
        entries.append((rainy, clean))
    return PairIndex(entries), ImageCache(loader=images.__getitem__)


def counting_loader(calls):
    def loader(path):
        calls.append(path)
        return np.zeros((4, 4, 3), dtype=np.float32)

    return loader


class TestIndexing:
    """Test pair discovery."""

    def test_rain_norain_pairs(self, pair_dir):
        """Test that rain-k.png pairs with norain-k.png."""
        index = index_dataset(pair_dir)
        assert len(index) == 4
        for rainy, clean in index.entries:
            assert rainy.name.removeprefix("rain-") == clean.name.removeprefix("norain-")

    def test_natural_order(self, tmp_path):
        """Test that rain-2 sorts before rain-11."""
        directory = write_pairs(tmp_path / "pairs", 11, size=8)
        names = [rainy.name for rainy, _ in index_dataset(directory).entries]
        assert names[:3] == ["rain-1.png", "rain-2.png", "rain-3.png"]
        assert names[-1] == "rain-11.png"

    def test_unpaired_files_are_skipped(self, pair_dir, caplog):
        """Test that a rainy file without a clean partner is logged and skipped."""
        save_image(pair_dir / "rain-99.png", np.zeros((16, 16, 3)))
        index = index_dataset(pair_dir)
        assert len(index) == 4
        assert "rain-99.png" in caplog.text

    def test_no_pairs(self, tmp_path):
        """Test that an empty directory is a dataset error."""
        (tmp_path / "empty").mkdir()
        with pytest.raises(DatasetError, match="no pairs found"):
            index_dataset(tmp_path / "empty")

    def test_missing_directory(self, tmp_path):
        """Test that a missing directory is a dataset error."""
        with pytest.raises(DatasetError, match="does not exist"):
            index_dataset(tmp_path / "absent")

    def test_manifest_scheme(self, tmp_path):
        """Test that manifest rows whose files are missing are dropped."""
        directory = write_pairs(tmp_path / "pairs", 2, size=8)
        with (directory / "manifest.csv").open("w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["index", "rainy_file", "clean_file"])
            writer.writerow([1, "rain-2.png", "norain-2.png"])
            writer.writerow([2, "rain-7.png", "norain-7.png"])
        index = index_dataset(directory, "manifest")
        assert [rainy.name for rainy, _ in index.entries] == ["rain-2.png"]

    def test_manifest_missing(self, pair_dir):
        """Test that the manifest scheme needs manifest.csv."""
        with pytest.raises(DatasetError, match="manifest.csv"):
            index_dataset(pair_dir, "manifest")

    def test_natural_key(self):
        """Test numeric-aware sorting of file names."""
        names = ["rain-10.png", "rain-2.png", "rain-1.png"]
        assert sorted(names, key=natural_key) == ["rain-1.png", "rain-2.png", "rain-10.png"]


class TestImageIO:
    """Test image decoding and encoding."""

    def test_png_round_trip_is_exact_on_the_8bit_grid(self, tmp_path):
        """Test that 8-bit values survive a PNG write and read."""
        image = np.random.default_rng(0).integers(0, 256, (9, 7, 3)) / 255.0
        path = save_image(tmp_path / "img.png", image)
        loaded = load_image(path)
        assert loaded.shape == (9, 7, 3)
        assert loaded.dtype == np.float32
        assert np.array_equal(to_uint8(loaded), to_uint8(image))

    def test_channel_order_is_rgb(self, tmp_path):
        """Test that a red image reads back as red."""
        image = np.zeros((4, 4, 3))
        image[..., 0] = 1.0
        loaded = load_image(save_image(tmp_path / "red.png", image))
        assert loaded[0, 0].tolist() == [1.0, 0.0, 0.0]

    def test_undecodable_file(self, tmp_path):
        """Test that garbage bytes raise ImageIOError."""
        path = tmp_path / "broken.png"
        path.write_bytes(b"not an image")
        with pytest.raises(ImageIOError):
            load_image(path)

    def test_mismatched_pair_dimensions(self, tmp_path):
        """Test that a pair with different sizes is a dataset error."""
        save_image(tmp_path / "rain-1.png", np.zeros((8, 8, 3)))
        save_image(tmp_path / "norain-1.png", np.zeros((8, 12, 3)))
        with pytest.raises(DatasetError, match="dimensions differ"):
            ImageCache().pair(index_dataset(tmp_path).entries[0])


class TestImageCache:
    """Test the bounded decoded-image cache."""

    def test_hit_does_not_reload(self):
        """Test that a cached path is decoded once."""
        calls = []
        cache = ImageCache(loader=counting_loader(calls))
        cache.get(Path("a.png"))
        cache.get(Path("a.png"))
        assert calls == [Path("a.png")]

    def test_capacity_evicts_least_recently_used(self):
        """Test that the cache never exceeds its capacity and drops the oldest path."""
        calls = []
        cache = ImageCache(loader=counting_loader(calls), capacity=2)
        a, b, c = Path("a.png"), Path("b.png"), Path("c.png")
        cache.get(a)
        cache.get(b)
        cache.get(a)
        cache.get(c)
        assert len(cache) == 2
        cache.get(a)
        assert calls == [a, b, c]
        cache.get(b)
        assert calls == [a, b, c, b]

    def test_capacity_below_a_pair(self):
        """Test that a cache that cannot hold one pair is rejected."""
        with pytest.raises(PreconditionError, match="capacity"):
            ImageCache(capacity=1)

    def test_prefetch_fills_cache(self, pair_dir):
        """Test that prefetch decodes every image once and later reads hit the cache."""
        index = index_dataset(pair_dir)
        calls = []

        def loader(path):
            calls.append(path)
            return load_image(path)

        cache = ImageCache(loader=loader)
        assert cache.prefetch(index, workers=2) == 8
        cache.pair(index.entries[0])
        assert len(calls) == 8

    def test_prefetch_stops_at_capacity(self):
        """Test that prefetch decodes no more images than the capacity."""
        index, _ = memory_index(5)
        calls = []
        cache = ImageCache(loader=counting_loader(calls), capacity=4)
        assert cache.prefetch(index) == 4
        assert len(cache) == 4
        assert cache.prefetch(index) == 0

    def test_bounded_cache_still_batches(self):
        """Test that batches stay aligned when the cache holds only one pair."""
        index, full = memory_index(4)
        cache = ImageCache(loader=full.loader, capacity=2)
        for batch in make_batches(index, 2, 8, seed=0, cache=cache):
            assert torch.allclose(batch.rainy, torch.clamp(batch.clean + 0.2, 0.0, 1.0))
        assert len(cache) <= 2


class TestSampling:
    """Test patch sampling and flip augmentation."""

    def test_alignment_and_flip_frequency(self):
        """Test that 10^4 sampled pairs stay aligned and flip about half the time."""
        image = np.random.default_rng(1).random((20, 20, 3))
        rng = np.random.default_rng(2)
        flips = 0
        draws = 10_000
        for _ in range(draws):
            rainy, clean = sample_patch((image, image.copy()), 8, rng)
            before = rainy.copy()
            rainy, clean = augment(rainy, clean, rng)
            assert np.array_equal(rainy, clean)
            flips += not np.array_equal(rainy, before)
        assert 0.45 <= flips / draws <= 0.55

    def test_origins_span_the_valid_range(self):
        """Test that 1000 64x64 crops of a 128x128 image reach origins 0 and 64 on both axes."""
        rows, cols = np.meshgrid(np.arange(128.0), np.arange(128.0), indexing="ij")
        image = np.stack([rows, cols, np.zeros_like(rows)], axis=-1)
        rng = np.random.default_rng(0)
        tops, lefts = [], []
        for _ in range(1000):
            rainy, _ = sample_patch((image, image), 64, rng)
            tops.append(int(rainy[0, 0, 0]))
            lefts.append(int(rainy[0, 0, 1]))
        assert (min(tops), max(tops)) == (0, 64)
        assert (min(lefts), max(lefts)) == (0, 64)

    def test_forced_flip_mirrors_both(self):
        """Test that a forced flip mirrors rainy and clean together."""
        rainy, clean = np.arange(12.0).reshape(2, 2, 3), np.arange(12.0).reshape(2, 2, 3) + 1
        out_rainy, out_clean = augment(rainy, clean, np.random.default_rng(0), force_flip=True)
        assert np.array_equal(out_rainy, rainy[:, ::-1])
        assert np.array_equal(out_clean, clean[:, ::-1])

    def test_patch_larger_than_image(self):
        """Test that a patch larger than the image is rejected."""
        image = np.zeros((8, 8, 3))
        with pytest.raises(PreconditionError):
            sample_patch((image, image), 16, np.random.default_rng(0))

    def test_patch_is_a_crop(self):
        """Test that a full-size patch is the image itself."""
        image = np.random.default_rng(3).random((12, 12, 3))
        rainy, _ = sample_patch((image, image), 12, np.random.default_rng(0))
        assert np.array_equal(rainy, image)


class TestBatches:
    """Test epoch batch assembly."""

    def test_count_and_shapes(self):
        """Test that 5 pairs at batch size 2 give 2 full batches of float32 patches."""
        index, cache = memory_index(5)
        batches = list(make_batches(index, batch_size=2, patch_size=8, seed=0, cache=cache))
        assert len(batches) == batches_per_epoch(5, 2) == 2
        assert batches[0].rainy.shape == (2, 3, 8, 8)
        assert batches[0].clean.dtype == torch.float32

    def test_deterministic_per_epoch(self):
        """Test that (seed, epoch) fixes the batches and another epoch changes them."""
        index, cache = memory_index(4)
        first = list(make_batches(index, 2, 8, seed=3, epoch=1, cache=cache))
        again = list(make_batches(index, 2, 8, seed=3, epoch=1, cache=cache))
        other = list(make_batches(index, 2, 8, seed=3, epoch=2, cache=cache))
        assert all(torch.equal(a.rainy, b.rainy) for a, b in zip(first, again))
        assert not all(torch.equal(a.rainy, b.rainy) for a, b in zip(first, other))

    def test_batch_keeps_pairs_aligned(self):
        """Test that rainy is clean + 0.2 (clipped) in every sampled element."""
        index, cache = memory_index(4)
        for batch in make_batches(index, 2, 8, seed=0, cache=cache):
            assert torch.allclose(batch.rainy, torch.clamp(batch.clean + 0.2, 0.0, 1.0))

    def test_invalid_batch_size(self):
        """Test that batch size 0 is rejected."""
        index, cache = memory_index(2)
        with pytest.raises(PreconditionError):
            list(make_batches(index, 0, 8, seed=0, cache=cache))
