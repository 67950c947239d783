"""
Paired rainy/clean dataset indexing, patch sampling, flip augmentation and
batch assembly. Images are decoded with OpenCV into float32 H x W x 3 RGB
arrays in [0, 1]; batches are B x 3 x h x w torch tensors.
"""

import csv
import logging
import re
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Literal, Optional, Tuple

import cv2
import numpy as np
import torch

from config import MH2FError, PreconditionError

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
MANIFEST_NAME = "manifest.csv"
RAIN_RE = re.compile(r"^rain-(?P<key>.+)\.(?P<ext>[A-Za-z]+)$")
NORAIN_RE = re.compile(r"^norain-(?P<key>.+)\.(?P<ext>[A-Za-z]+)$")

NamingScheme = Literal["rain_norain", "manifest"]


class DatasetError(MH2FError):
    """Dataset layout problem (no pairs, mismatched pair dimensions)."""
    pass


class ImageIOError(MH2FError, OSError):
    """An image could not be decoded or written."""
    pass


# ----- Image IO -----

def load_image(path: Path) -> np.ndarray:
    """Decode an image file into a float32 H x W x 3 RGB array in [0, 1]."""
    data = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if data is None:
        raise ImageIOError(f"Cannot decode image: {path}")
    rgb = cv2.cvtColor(data, cv2.COLOR_BGR2RGB)
    return rgb.astype(np.float32) / 255.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Quantize a [0, 1] float image to uint8 with round-half-to-even."""
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_image(path: Path, image: np.ndarray) -> Path:
    """Encode a [0, 1] float H x W x 3 RGB array as PNG (or by suffix)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    bgr = cv2.cvtColor(to_uint8(image), cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), bgr):
        raise ImageIOError(f"Cannot write image: {path}")
    return path


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """H x W x 3 array -> 1 x 3 x H x W float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).unsqueeze(0).float()


def tensor_to_image(tensor: torch.Tensor) -> np.ndarray:
    """1 x 3 x H x W tensor -> H x W x 3 float array."""
    return tensor.detach().cpu().squeeze(0).numpy().transpose(1, 2, 0)


def list_images(directory: Path) -> List[Path]:
    """Image files in a directory, naturally sorted."""
    directory = Path(directory)
    files = [p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES]
    return sorted(files, key=lambda p: natural_key(p.name))


def natural_key(text: str) -> Tuple:
    """Sort key comparing digit runs numerically ('rain-2' < 'rain-10')."""
    return tuple(
        (0, int(part), part) if part.isdigit() else (1, 0, part)
        for part in re.split(r"(\d+)", text)
        if part
    )


# ----- Index -----

@dataclass
class PairIndex:
    """Ordered (rainy_path, clean_path) pairs."""

    entries: List[Tuple[Path, Path]]
    naming_scheme: str = "rain_norain"

    def __len__(self) -> int:
        return len(self.entries)


def _index_rain_norain(root: Path) -> List[Tuple[Path, Path]]:
    rainy: Dict[str, Path] = {}
    clean: Dict[str, Path] = {}
    for path in root.iterdir():
        if not path.is_file() or path.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        match = NORAIN_RE.match(path.name)
        if match:
            clean[match.group("key")] = path
            continue
        match = RAIN_RE.match(path.name)
        if match:
            rainy[match.group("key")] = path

    entries = []
    for key in sorted(set(rainy) | set(clean), key=natural_key):
        if key not in clean:
            logger.warning(f"Skipping unpaired rainy image {rainy[key]} (no norain-{key}.*)")
            continue
        if key not in rainy:
            logger.warning(f"Skipping unpaired clean image {clean[key]} (no rain-{key}.*)")
            continue
        entries.append((rainy[key], clean[key]))
    return entries


def _index_manifest(root: Path) -> List[Tuple[Path, Path]]:
    manifest = root / MANIFEST_NAME
    if not manifest.is_file():
        raise DatasetError(f"No {MANIFEST_NAME} found in {root}")
    entries = []
    with manifest.open(newline="") as handle:
        for row in csv.DictReader(handle):
            rainy_path = root / row["rainy_file"]
            clean_path = root / row["clean_file"]
            if not rainy_path.is_file() or not clean_path.is_file():
                logger.warning(f"Skipping manifest row {row.get('index')}: missing {rainy_path.name} or {clean_path.name}")
                continue
            entries.append((rainy_path, clean_path))
    return entries


def index_dataset(root: Path, scheme: NamingScheme = "rain_norain") -> PairIndex:
    """
    Pair rainy and clean images under `root`.

    Args:
        root: Dataset directory
        scheme: 'rain_norain' pairs rain-K.* with norain-K.*; 'manifest' reads manifest.csv

    Returns:
        PairIndex in deterministic (natural) key order

    Raises:
        DatasetError: If root is missing or no pairs are found
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"Dataset directory does not exist: {root}")

    if scheme == "rain_norain":
        entries = _index_rain_norain(root)
    elif scheme == "manifest":
        entries = _index_manifest(root)
    else:
        raise DatasetError(f"Unknown naming scheme '{scheme}' (expected 'rain_norain' or 'manifest')")

    if not entries:
        raise DatasetError(f"no pairs found in {root}")

    logger.info(f"Indexed {len(entries)} pairs in {root} ({scheme})")
    return PairIndex(entries=entries, naming_scheme=scheme)


# ----- Image cache -----

@dataclass
class ImageCache:
    """
    Decoded images keyed by path with optional concurrent prefetch.

    `capacity` bounds the number of decoded images held; the least recently
    used image is dropped first. None keeps everything.
    """

    loader: Callable[[Path], np.ndarray] = load_image
    capacity: Optional[int] = None
    _images: "OrderedDict[Path, np.ndarray]" = field(default_factory=OrderedDict)

    def __post_init__(self):
        if self.capacity is not None and self.capacity < 2:
            raise PreconditionError(f"ImageCache capacity must hold a pair (got {self.capacity})")

    def __len__(self) -> int:
        return len(self._images)

    def _store(self, path: Path, image: np.ndarray) -> None:
        self._images[path] = image
        if self.capacity is not None:
            while len(self._images) > self.capacity:
                self._images.popitem(last=False)

    def get(self, path: Path) -> np.ndarray:
        if path in self._images:
            self._images.move_to_end(path)
            return self._images[path]
        image = self.loader(path)
        self._store(path, image)
        return image

    def pair(self, entry: Tuple[Path, Path]) -> Tuple[np.ndarray, np.ndarray]:
        rainy_path, clean_path = entry
        rainy, clean = self.get(rainy_path), self.get(clean_path)
        if rainy.shape != clean.shape:
            raise DatasetError(
                f"Pair dimensions differ: {rainy_path} {rainy.shape} vs {clean_path} {clean.shape}"
            )
        return rainy, clean

    def prefetch(self, index: PairIndex, workers: int = 4) -> int:
        """
        Decode the index's images up to the cache capacity.

        Content does not depend on worker order.

        Returns:
            Number of images decoded
        """
        paths = [p for entry in index.entries for p in entry if p not in self._images]
        if self.capacity is not None:
            paths = paths[: max(0, self.capacity - len(self._images))]
        if not paths:
            return 0
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            for path, image in zip(paths, pool.map(self.loader, paths)):
                self._store(path, image)
        logger.info(f"Prefetched {len(paths)} images ({len(self._images)} cached)")
        return len(paths)


# ----- Sampling and augmentation -----

def sample_patch(
    pair: Tuple[np.ndarray, np.ndarray],
    size: int,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray]:
    """Crop the same size x size window from both images."""
    rainy, clean = pair
    height, width = rainy.shape[:2]
    if rainy.shape[:2] != clean.shape[:2]:
        raise PreconditionError(f"sample_patch: pair shapes differ {rainy.shape} vs {clean.shape}")
    if height < size or width < size:
        raise PreconditionError(f"sample_patch: image {height}x{width} is smaller than patch size {size}")

    top = int(rng.integers(0, height - size + 1))
    left = int(rng.integers(0, width - size + 1))
    window = (slice(top, top + size), slice(left, left + size))
    return rainy[window], clean[window]


def flip_pair(rainy: np.ndarray, clean: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Mirror both patches horizontally."""
    return np.ascontiguousarray(rainy[:, ::-1]), np.ascontiguousarray(clean[:, ::-1])


def augment(
    rainy: np.ndarray,
    clean: np.ndarray,
    rng: np.random.Generator,
    force_flip: Optional[bool] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """With probability 0.5 flip both patches horizontally; never only one."""
    if rainy.shape != clean.shape:
        raise PreconditionError(f"augment: patch shapes differ {rainy.shape} vs {clean.shape}")
    draw = rng.random() < 0.5
    flip = draw if force_flip is None else force_flip
    if flip:
        return flip_pair(rainy, clean)
    return rainy, clean


# ----- Batching -----

@dataclass
class Batch:
    rainy: torch.Tensor
    clean: torch.Tensor


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    """Data RNG for one epoch; a pure function of (seed, epoch)."""
    return np.random.default_rng([seed, epoch])


def batches_per_epoch(num_pairs: int, batch_size: int) -> int:
    return num_pairs // batch_size


def make_batches(
    index: PairIndex,
    batch_size: int,
    patch_size: int,
    seed: int,
    epoch: int = 0,
    cache: Optional[ImageCache] = None,
) -> Iterator[Batch]:
    """
    One epoch of batches: shuffled pass over the pairs, one sampled and augmented
    patch pair per element, last incomplete batch dropped.

    Args:
        index: Training pairs
        batch_size: Elements per batch
        patch_size: Crop side length
        seed: Training seed
        epoch: Epoch number (selects the RNG stream)
        cache: Decoded-image cache shared across epochs

    Yields:
        Batch of B x 3 x patch x patch tensors
    """
    if batch_size < 1:
        raise PreconditionError(f"make_batches: batch_size must be >= 1 (got {batch_size})")
    cache = cache if cache is not None else ImageCache()
    rng = epoch_rng(seed, epoch)
    order = rng.permutation(len(index))

    for start in range(0, batches_per_epoch(len(index), batch_size) * batch_size, batch_size):
        rainy_patches, clean_patches = [], []
        for position in order[start:start + batch_size]:
            rainy, clean = sample_patch(cache.pair(index.entries[position]), patch_size, rng)
            rainy, clean = augment(rainy, clean, rng)
            rainy_patches.append(rainy.transpose(2, 0, 1))
            clean_patches.append(clean.transpose(2, 0, 1))
        yield Batch(
            rainy=torch.from_numpy(np.stack(rainy_patches)).float(),
            clean=torch.from_numpy(np.stack(clean_patches)).float(),
        )
