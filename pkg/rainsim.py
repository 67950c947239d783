"""
Synthetic rain streaks for the additive model O = B + R.

Seed pixels are drawn by thresholding uniform noise, scaled by a jittered
intensity and smeared along the rain direction by a normalized line kernel.
The grayscale rain layer is added to every RGB channel and clipped to [0, 1].
"""

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import cv2
import numpy as np
import torch
import torch.nn.functional as F

from config import MH2FError, PreconditionError, RainParams
from datapipe import MANIFEST_NAME, ImageIOError, list_images, load_image, save_image

logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = [
    "index",
    "clean_file",
    "rainy_file",
    "angle_deg",
    "length_px",
    "density",
    "intensity",
    "seed",
    "intensity_jitter",
    "source_file",
]

# Parameter grids for light and heavy synthetic rain.
RAIN_PRESETS: Dict[str, List[RainParams]] = {
    "light": [
        RainParams(angle_deg=-10.0, length_px=7, density=0.01, intensity=0.6, intensity_jitter=0.2, seed=11),
        RainParams(angle_deg=10.0, length_px=9, density=0.015, intensity=0.7, intensity_jitter=0.2, seed=12),
    ],
    "heavy": [
        RainParams(angle_deg=-25.0, length_px=15, density=0.05, intensity=1.0, intensity_jitter=0.3, seed=21),
        RainParams(angle_deg=0.0, length_px=19, density=0.06, intensity=1.0, intensity_jitter=0.3, seed=22),
        RainParams(angle_deg=25.0, length_px=15, density=0.05, intensity=1.0, intensity_jitter=0.3, seed=23),
    ],
}


class RainSynthesisError(MH2FError):
    """Synthetic dataset generation failed."""
    pass


def make_streak_kernel(angle_deg: float, length_px: int) -> np.ndarray:
    """
    Normalized linear motion-blur kernel.

    A one-pixel line spanning `length_px` samples, centered in an odd-sized
    square kernel and rotated by `angle_deg` from vertical, rasterized with
    cv2.line.
    """
    if length_px < 1:
        raise PreconditionError(f"length_px must be >= 1 (got {length_px})")
    side = length_px if length_px % 2 == 1 else length_px + 1
    center = side // 2
    kernel = np.zeros((side, side), dtype=np.float64)

    theta = math.radians(angle_deg)
    half = (length_px - 1) / 2.0

    def endpoint(t: float) -> Tuple[int, int]:
        # rounded half-up; cv2 points are (x, y) = (col, row)
        return (
            center + int(math.floor(t * math.sin(theta) + 0.5)),
            center + int(math.floor(t * math.cos(theta) + 0.5)),
        )

    cv2.line(kernel, endpoint(-half), endpoint(half), color=1.0, thickness=1, lineType=cv2.LINE_8)
    return kernel / kernel.sum()


def _convolve(layer: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # direct convolution keeps exact zeros away from seeds
    image = torch.from_numpy(layer)[None, None]
    weight = torch.from_numpy(np.ascontiguousarray(kernel[::-1, ::-1]))[None, None]
    pad = kernel.shape[0] // 2
    return F.conv2d(image, weight, padding=pad)[0, 0].numpy()


def synth_rain_layer(height: int, width: int, params: RainParams) -> np.ndarray:
    """
    Single-channel rain layer in [0, 1]; deterministic given params.seed.

    Args:
        height: Layer height in pixels
        width: Layer width in pixels
        params: Rain field description

    Returns:
        float64 array of shape (height, width)
    """
    kernel = make_streak_kernel(params.angle_deg, params.length_px)
    if height < kernel.shape[0] or width < kernel.shape[1]:
        raise PreconditionError(
            f"Rain layer {height}x{width} is smaller than the {kernel.shape[0]}x{kernel.shape[1]} streak kernel"
        )

    rng = np.random.default_rng(params.seed)
    noise = rng.random((height, width))
    jitter = rng.uniform(-1.0, 1.0, size=(height, width))

    seeds = noise > (1.0 - params.density)
    strength = params.intensity * np.clip(1.0 + params.intensity_jitter * jitter, 0.0, None)
    layer = np.where(seeds, strength, 0.0)
    return np.clip(_convolve(layer, kernel), 0.0, 1.0)


def apply_rain(clean: torch.Tensor, params: RainParams) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Add a synthetic rain layer to a B x 3 x H x W clean image.

    Returns:
        (rainy, rain): rainy = clip(clean + rain, 0, 1); rain is H x W
    """
    if clean.dim() != 4 or clean.shape[1] != 3:
        raise PreconditionError(f"apply_rain: expected B x 3 x H x W, got {tuple(clean.shape)}")
    height, width = clean.shape[-2:]
    rain = torch.from_numpy(synth_rain_layer(height, width, params)).to(clean.dtype)
    rainy = torch.clamp(clean + rain[None, None], 0.0, 1.0)
    return rainy, rain


def derive_seed(base_seed: int, image_index: int) -> int:
    """Per-image seed derived from (global seed, image index)."""
    return int(np.random.SeedSequence([base_seed, image_index]).generate_state(1)[0])


@dataclass
class ManifestRow:
    index: int
    clean_file: str
    rainy_file: str
    angle_deg: float
    length_px: int
    density: float
    intensity: float
    seed: int
    intensity_jitter: float
    source_file: str


def _render_pair(
    source: Path,
    image_index: int,
    params: RainParams,
    pair_index: int,
    out_dir: Path,
) -> ManifestRow:
    clean = load_image(source)
    seeded = params.model_copy(update={"seed": derive_seed(params.seed, image_index)})
    rain = synth_rain_layer(clean.shape[0], clean.shape[1], seeded)
    rainy = np.clip(clean.astype(np.float64) + rain[..., None], 0.0, 1.0)

    rainy_name = f"rain-{pair_index}.png"
    clean_name = f"norain-{pair_index}.png"
    save_image(out_dir / rainy_name, rainy)
    save_image(out_dir / clean_name, clean)
    return ManifestRow(
        index=pair_index,
        clean_file=clean_name,
        rainy_file=rainy_name,
        angle_deg=seeded.angle_deg,
        length_px=seeded.length_px,
        density=seeded.density,
        intensity=seeded.intensity,
        seed=seeded.seed,
        intensity_jitter=seeded.intensity_jitter,
        source_file=source.name,
    )


def write_manifest(rows: Sequence[ManifestRow], path: Path) -> Path:
    with Path(path).open("w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=MANIFEST_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(asdict(row))
    return Path(path)


def generate_dataset(
    clean_dir: Path,
    params_grid: Sequence[RainParams],
    out_dir: Path,
    workers: int = 1,
) -> List[ManifestRow]:
    """
    Render rain-K.png / norain-K.png pairs for every clean image x parameter set.

    Pair numbering is image-major starting at 1; each pair's seed is derived from
    the parameter set's seed and the image index, so reruns are byte-identical.

    Args:
        clean_dir: Directory of clean images
        params_grid: Rain parameter sets
        out_dir: Output directory (created if missing)
        workers: Parallel image workers (output is independent of this)

    Returns:
        Manifest rows, also written to out_dir/manifest.csv

    Raises:
        RainSynthesisError: Empty input or parameter grid, unwritable output
        ImageIOError: Unreadable input image
    """
    clean_dir, out_dir = Path(clean_dir), Path(out_dir)
    if not params_grid:
        raise RainSynthesisError("Rain parameter grid is empty")
    if not clean_dir.is_dir():
        raise RainSynthesisError(f"Clean image directory does not exist: {clean_dir}")
    sources = list_images(clean_dir)
    if not sources:
        raise RainSynthesisError(f"No images found in {clean_dir}")
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ImageIOError(f"Cannot create output directory {out_dir}: {e}") from e

    jobs = []
    for image_index, source in enumerate(sources):
        for param_index, params in enumerate(params_grid):
            pair_index = image_index * len(params_grid) + param_index + 1
            jobs.append((source, image_index, params, pair_index, out_dir))

    logger.info(f"Rendering {len(jobs)} pairs from {len(sources)} images x {len(params_grid)} parameter sets")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(lambda job: _render_pair(*job), jobs))
    else:
        rows = [_render_pair(*job) for job in jobs]

    try:
        write_manifest(rows, out_dir / MANIFEST_NAME)
    except OSError as e:
        raise ImageIOError(f"Cannot write manifest in {out_dir}: {e}") from e
    logger.info(f"Wrote {len(rows)} pairs and {MANIFEST_NAME} to {out_dir}")
    return rows
