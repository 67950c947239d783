"""
MH2F-Net architecture: multi-scale hourglass extraction, hierarchical attentive
distillation and residual projected feature fusion.

All tensors use the (batch, channels, height, width) layout. Images live in [0, 1];
feature maps are unbounded.
"""

import logging
import math
from typing import List, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from config import ConfigurationError, ModelConfig, PreconditionError, validate_model_config

logger = logging.getLogger(__name__)

IMAGE_CHANNELS = 3
# Two halvings inside every hourglass block.
SPATIAL_MULTIPLE = 4


def activation() -> nn.Module:
    """Shared nonlinearity; smooth with f(0) = 0."""
    return nn.SiLU()


def _check_channels(x: torch.Tensor, expected: int, block: str) -> None:
    if x.dim() != 4:
        raise PreconditionError(f"{block}: expected a 4-D tensor, got shape {tuple(x.shape)}")
    if x.shape[1] != expected:
        raise ConfigurationError(f"{block}: expected {expected} input channels, got {x.shape[1]}")


def _check_same_shape(block: str, **tensors: torch.Tensor) -> None:
    shapes = {name: tuple(t.shape) for name, t in tensors.items()}
    if len(set(shapes.values())) > 1:
        listing = ", ".join(f"{name}={shape}" for name, shape in shapes.items())
        raise PreconditionError(f"{block}: inputs must share one shape ({listing})")


def validate_image(image: torch.Tensor) -> None:
    """
    Check the image contract: 4-D, 3 channels, finite values in [0, 1],
    height and width >= 8 and divisible by 4.
    """
    if image.dim() != 4 or image.shape[1] != IMAGE_CHANNELS:
        raise PreconditionError(f"Expected a B x 3 x H x W image tensor, got shape {tuple(image.shape)}")
    height, width = image.shape[-2:]
    if height < 8 or width < 8 or height % SPATIAL_MULTIPLE or width % SPATIAL_MULTIPLE:
        raise PreconditionError(
            f"Image height and width must be >= 8 and divisible by {SPATIAL_MULTIPLE} (got {height}x{width})"
        )
    if not torch.isfinite(image).all():
        raise PreconditionError("Image contains non-finite values")
    if image.min() < 0 or image.max() > 1:
        raise PreconditionError(
            f"Image values must lie in [0, 1] (got [{image.min().item():.4f}, {image.max().item():.4f}])"
        )


# ----- Resampling -----

def downsample(x: torch.Tensor, factor: int) -> torch.Tensor:
    """Average-pool by `factor` (window = stride = factor)."""
    if factor not in (2, 4):
        raise PreconditionError(f"downsample factor must be 2 or 4 (got {factor})")
    height, width = x.shape[-2:]
    if height % factor or width % factor:
        raise PreconditionError(
            f"downsample: spatial dims {height}x{width} are not divisible by {factor}"
        )
    return F.avg_pool2d(x, kernel_size=factor, stride=factor)


def nearest_upsample(x: torch.Tensor, factor: int) -> torch.Tensor:
    """Replicate every pixel into a factor x factor block."""
    if factor not in (2, 4):
        raise PreconditionError(f"nearest_upsample factor must be 2 or 4 (got {factor})")
    return x.repeat_interleave(factor, dim=-2).repeat_interleave(factor, dim=-1)


# ----- Blocks -----

class ConvHead(nn.Module):
    """3x3 convolution from the RGB image to the original features L_o."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.conv = nn.Conv2d(IMAGE_CHANNELS, channels, kernel_size=3, padding=1)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        _check_channels(image, IMAGE_CHANNELS, "conv_head")
        return self.conv(image)


class DCRBlock(nn.Module):
    """
    Densely connected residual block.

    Each 3x3 layer sees the block input concatenated with every earlier layer
    output; a 1x1 convolution projects the full concatenation back to the input
    width and is added to the input.
    """

    def __init__(self, channels: int, growth: int, layers: int = 3):
        super().__init__()
        self.channels = channels
        self.layers = nn.ModuleList(
            nn.Conv2d(channels + i * growth, growth, kernel_size=3, padding=1)
            for i in range(layers)
        )
        self.act = activation()
        self.fuse = nn.Conv2d(channels + layers * growth, channels, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_channels(x, self.channels, "dcr")
        features = [x]
        for conv in self.layers:
            features.append(self.act(conv(torch.cat(features, dim=1))))
        return x + self.fuse(torch.cat(features, dim=1))


def _dcr_stream(channels: int, growth: int, layers: int, units: int) -> nn.Sequential:
    return nn.Sequential(*(DCRBlock(channels, growth, layers) for _ in range(units)))


class MHEB(nn.Module):
    """
    Multi-scale hourglass extraction block.

    Three parallel DCR streams run at scales 1, 1/2 and 1/4. Going back up, each
    coarser result is nearest-upsampled, added to the stream one level finer
    (its top-down skip) and merged by a 3x3 convolution.
    """

    def __init__(self, channels: int, growth: int, layers: int = 3, units: int = 2):
        super().__init__()
        self.channels = channels
        self.stream_full = _dcr_stream(channels, growth, layers, units)
        self.stream_half = _dcr_stream(channels, growth, layers, units)
        self.stream_quarter = _dcr_stream(channels, growth, layers, units)
        self.merge_half = nn.Conv2d(channels, channels, kernel_size=3, padding=1)
        self.merge_full = nn.Conv2d(channels, channels, kernel_size=3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_channels(x, self.channels, "mheb")
        height, width = x.shape[-2:]
        if height % SPATIAL_MULTIPLE or width % SPATIAL_MULTIPLE:
            raise PreconditionError(
                f"mheb: spatial dims {height}x{width} are not divisible by {SPATIAL_MULTIPLE}"
            )

        full = self.stream_full(x)
        half = self.stream_half(downsample(x, 2))
        quarter = self.stream_quarter(downsample(x, 4))

        half = self.merge_half(half + nearest_upsample(quarter, 2))
        return self.merge_full(full + nearest_upsample(half, 2))


class StackedHourglassGroup(nn.Module):
    """N MHEBs in sequence; also returns the outputs of the first N-1 blocks."""

    def __init__(self, num_blocks: int, channels: int, growth: int, layers: int = 3, units: int = 2):
        super().__init__()
        if num_blocks < 1:
            raise ConfigurationError(f"Stacked hourglass group needs at least one MHEB (got {num_blocks})")
        self.blocks = nn.ModuleList(
            MHEB(channels, growth, layers, units) for _ in range(num_blocks)
        )

    def forward(self, features: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        hierarchy = []
        for block in self.blocks:
            features = block(features)
            hierarchy.append(features)
        return features, hierarchy[:-1]


class SpatialAttention(nn.Module):
    """Per-pixel gate from the channel-wise average and max maps."""

    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size=kernel_size, padding=kernel_size // 2, bias=False)

    def mask(self, x: torch.Tensor) -> torch.Tensor:
        avg_map = torch.mean(x, dim=1, keepdim=True)
        max_map, _ = torch.max(x, dim=1, keepdim=True)
        return torch.sigmoid(self.conv(torch.cat([avg_map, max_map], dim=1)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.mask(x)


class ChannelAttention(nn.Module):
    """Per-channel gate from global average and max pooling through a shared bottleneck."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        if reduction < 1 or channels % reduction:
            raise ConfigurationError(
                f"channel attention: {channels} channels not divisible by reduction {reduction}"
            )
        self.channels = channels
        self.mlp = nn.Sequential(
            nn.Conv2d(channels, channels // reduction, kernel_size=1, bias=False),
            activation(),
            nn.Conv2d(channels // reduction, channels, kernel_size=1, bias=False),
        )

    def pooled(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        return F.adaptive_avg_pool2d(x, 1), F.adaptive_max_pool2d(x, 1)

    def gates(self, x: torch.Tensor) -> torch.Tensor:
        avg_vec, max_vec = self.pooled(x)
        return torch.sigmoid(self.mlp(avg_vec) + self.mlp(max_vec))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_channels(x, self.channels, "channel_attention")
        return x * self.gates(x)


def _check_hierarchy(hierarchy: Sequence[torch.Tensor], expected: int, block: str) -> None:
    if not hierarchy:
        raise PreconditionError(f"{block}: hierarchy is empty")
    shapes = {tuple(t.shape) for t in hierarchy}
    if len(shapes) > 1:
        raise PreconditionError(f"{block}: hierarchy entries have mixed shapes {sorted(shapes)}")
    if len(hierarchy) != expected:
        raise PreconditionError(f"{block}: expected {expected} hierarchical features, got {len(hierarchy)}")


class HADB(nn.Module):
    """
    Hierarchical attentive distillation block.

    Concatenated hierarchy -> 1x1 bottleneck to C -> channel attention ->
    spatial attention -> 1x1 conv, producing the distilled features L_d.
    """

    def __init__(self, channels: int, num_features: int, reduction: int = 4, spatial_kernel: int = 7):
        super().__init__()
        self.num_features = num_features
        self.head = nn.Conv2d(num_features * channels, channels, kernel_size=1)
        self.channel_attention = ChannelAttention(channels, reduction)
        self.spatial_attention = SpatialAttention(spatial_kernel)
        self.tail = nn.Conv2d(channels, channels, kernel_size=1)

    def forward(self, hierarchy: Sequence[torch.Tensor]) -> torch.Tensor:
        _check_hierarchy(hierarchy, self.num_features, "hadb")
        x = self.head(torch.cat(list(hierarchy), dim=1))
        x = self.spatial_attention(self.channel_attention(x))
        return self.tail(x)


class ConcatDistill(nn.Module):
    """Distillation without attention: 3x3 conv over the concatenated hierarchy."""

    def __init__(self, channels: int, num_features: int):
        super().__init__()
        self.num_features = num_features
        self.conv = nn.Conv2d(num_features * channels, channels, kernel_size=3, padding=1)

    def forward(self, hierarchy: Sequence[torch.Tensor]) -> torch.Tensor:
        _check_hierarchy(hierarchy, self.num_features, "concat_distill")
        return self.conv(torch.cat(list(hierarchy), dim=1))


class RPFFusion(nn.Module):
    """
    Residual projected feature fusion.

        R_ed = L_e - L_d
        F_ed = conv(R_ed) + L_e
        L*   = conv(L_o - conv(F_ed))
    """

    def __init__(self, channels: int):
        super().__init__()
        self.residual_conv = nn.Conv2d(channels, channels, kernel_size=3, padding=1)
        self.project_conv = nn.Conv2d(channels, channels, kernel_size=3, padding=1)
        self.out_conv = nn.Conv2d(channels, channels, kernel_size=3, padding=1)

    @staticmethod
    def residual(extracted: torch.Tensor, distilled: torch.Tensor) -> torch.Tensor:
        return extracted - distilled

    def forward(self, original: torch.Tensor, extracted: torch.Tensor, distilled: torch.Tensor) -> torch.Tensor:
        _check_same_shape("rpf", L_o=original, L_e=extracted, L_d=distilled)
        fused = self.residual_conv(self.residual(extracted, distilled)) + extracted
        return self.out_conv(original - self.project_conv(fused))


class BaselineFusion(nn.Module):
    """Ablation fusion: elementwise add + 3x3 conv, or channel concat + 1x1 conv."""

    def __init__(self, channels: int, mode: str):
        super().__init__()
        if mode == "add":
            self.conv = nn.Conv2d(channels, channels, kernel_size=3, padding=1)
        elif mode == "concat":
            self.conv = nn.Conv2d(3 * channels, channels, kernel_size=1)
        else:
            raise ConfigurationError(f"Unknown baseline fusion mode '{mode}' (expected 'add' or 'concat')")
        self.mode = mode

    def combine(self, original: torch.Tensor, extracted: torch.Tensor, distilled: torch.Tensor) -> torch.Tensor:
        """The pre-convolution combination of the three branches."""
        _check_same_shape(f"fuse_{self.mode}", L_o=original, L_e=extracted, L_d=distilled)
        if self.mode == "add":
            return original + extracted + distilled
        return torch.cat([original, extracted, distilled], dim=1)

    def forward(self, original: torch.Tensor, extracted: torch.Tensor, distilled: torch.Tensor) -> torch.Tensor:
        return self.conv(self.combine(original, extracted, distilled))


class MH2FNet(nn.Module):
    """
    Full network: conv head -> stacked hourglass group -> distillation ->
    fusion -> 3x3 output conv. Predicts the derained image directly.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        validate_model_config(config)
        self.config = config
        channels = config.base_channels
        num_features = config.num_mheb - 1

        self.head = ConvHead(channels)
        self.shg = StackedHourglassGroup(
            config.num_mheb,
            channels,
            config.growth,
            layers=config.dcr_layers,
            units=config.dcr_units_per_stream,
        )
        if config.use_hadb:
            self.distill = HADB(channels, num_features, config.attention_reduction, config.spatial_kernel)
        else:
            self.distill = ConcatDistill(channels, num_features)
        if config.fusion_mode == "rpf":
            self.fusion = RPFFusion(channels)
        else:
            self.fusion = BaselineFusion(channels, config.fusion_mode)
        self.tail = nn.Conv2d(channels, IMAGE_CHANNELS, kernel_size=3, padding=1)

    def forward(self, rainy: torch.Tensor) -> torch.Tensor:
        original = self.head(rainy)
        extracted, hierarchy = self.shg(original)
        distilled = self.distill(hierarchy)
        return self.tail(self.fusion(original, extracted, distilled))


# ----- Parameters -----

@torch.no_grad()
def init_parameters(model: nn.Module, seed: int) -> nn.Module:
    """
    Fan-in scaled uniform initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
    drawn from a dedicated generator in module registration order.
    """
    generator = torch.Generator().manual_seed(seed)
    initialized = set()
    for module in model.modules():
        if not isinstance(module, nn.Conv2d):
            continue
        fan_in = module.weight[0].numel()
        bound = 1.0 / math.sqrt(fan_in)
        for param in (module.weight, module.bias):
            if param is None:
                continue
            values = torch.empty(param.shape, dtype=torch.float64).uniform_(-bound, bound, generator=generator)
            param.copy_(values.to(param.dtype))
            initialized.add(id(param))

    missing = [name for name, p in model.named_parameters() if id(p) not in initialized]
    if missing:
        raise ConfigurationError(f"No initializer for parameters: {', '.join(missing)}")
    return model


def param_shapes(config: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Named parameter shapes; a pure function of the config."""
    model = MH2FNet(config)
    return [(name, tuple(p.shape)) for name, p in model.named_parameters()]


def param_count(config: ModelConfig) -> int:
    """Total number of scalar parameters for a config."""
    return sum(math.prod(shape) for _, shape in param_shapes(config))


# ----- Forward entry points -----

def mh2f_forward(rainy: torch.Tensor, model: MH2FNet) -> torch.Tensor:
    """Validated forward pass (unclamped; used in the loss path)."""
    validate_image(rainy)
    return model(rainy)


@torch.no_grad()
def derain(model: MH2FNet, rainy: torch.Tensor) -> torch.Tensor:
    """Inference: validated forward pass clamped to [0, 1]."""
    was_training = model.training
    model.eval()
    try:
        return mh2f_forward(rainy, model).clamp(0.0, 1.0)
    finally:
        model.train(was_training)


def pad_to_multiple(image: torch.Tensor, multiple: int = SPATIAL_MULTIPLE) -> Tuple[torch.Tensor, Tuple[int, int]]:
    """Reflection-pad bottom/right up to the next multiple (and at least 8 px)."""
    height, width = image.shape[-2:]
    target_h = max(8, math.ceil(height / multiple) * multiple)
    target_w = max(8, math.ceil(width / multiple) * multiple)
    pad_h, pad_w = target_h - height, target_w - width
    if pad_h == 0 and pad_w == 0:
        return image, (height, width)
    # reflect padding needs pad < dim
    mode = "reflect" if pad_h < height and pad_w < width else "replicate"
    return F.pad(image, (0, pad_w, 0, pad_h), mode=mode), (height, width)


def derain_padded(model: MH2FNet, rainy: torch.Tensor) -> torch.Tensor:
    """Derain an image of any size: pad to a multiple of 4, process, crop back."""
    padded, (height, width) = pad_to_multiple(rainy)
    return derain(model, padded)[..., :height, :width]
