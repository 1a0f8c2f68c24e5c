"""Channel (squeeze-and-excitation) and channel+spatial (CBAM) attention blocks."""

from __future__ import annotations

import numpy as np

from tranet import numcore as nc
from tranet.numcore import Module, Tensor
from tranet.numcore.init import he_uniform, xavier_uniform

SPATIAL_COMBINE = ("add", "concat")


def _bottleneck(rng, channels: int, reduction: int, owner: str):
    if reduction < 1 or channels % reduction:
        raise ValueError(f"{owner}: channels {channels} not divisible by reduction ratio {reduction}")
    hidden = channels // reduction
    return xavier_uniform(rng, (hidden, channels)), xavier_uniform(rng, (channels, hidden))


def _excite(z: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    # z is (N, C); bias-free two-layer bottleneck, no final activation
    return nc.fully_connected(nc.relu(nc.fully_connected(z, w1)), w2)


class SEBlock(Module):
    """Squeeze-and-excitation channel gating.

    ``s = sigmoid(W2 relu(W1 z))`` with ``z`` the per-channel spatial mean; the
    output is ``s * u`` (plus ``u`` when ``residual``).
    """

    namespace = "att"

    def __init__(self, channels: int, reduction: int, rng: np.random.Generator, residual: bool = False):
        self.channels = channels
        self.reduction = reduction
        self.residual = residual
        self.w1, self.w2 = _bottleneck(rng, channels, reduction, "SEBlock")

    def excitation(self, u: Tensor) -> Tensor:
        n, c = u.shape[:2]
        if c != self.channels:
            raise nc.ShapeError(f"SEBlock: input has {c} channels, block expects {self.channels}")
        z = nc.reshape(nc.global_avg_pool(u), (n, c))
        return nc.reshape(nc.sigmoid(_excite(z, self.w1, self.w2)), (n, c, 1, 1))

    def forward(self, u: Tensor) -> Tensor:
        return se_forward(self, u)


def se_forward(block: SEBlock, u: Tensor) -> Tensor:
    out = nc.mul(block.excitation(u), u)
    return nc.add(out, u) if block.residual else out


class CBAMBlock(Module):
    """Channel attention followed by spatial attention, each toggleable.

    Channel weights pass both the average- and max-pooled descriptors through
    one shared bottleneck and add the results before the sigmoid.  Spatial
    weights squeeze channels by mean and by max; with ``spatial_combine="add"``
    one shared ``k x k`` convolution is applied to each map and the outputs are
    summed, with ``"concat"`` the two maps are stacked and convolved together.
    """

    namespace = "att"

    def __init__(
        self,
        channels: int,
        rng: np.random.Generator,
        reduction: int = 4,
        kernel_size: int = 7,
        spatial_combine: str = "add",
        enable_channel: bool = True,
        enable_spatial: bool = True,
        residual: bool = False,
    ):
        if spatial_combine not in SPATIAL_COMBINE:
            raise ValueError(f"spatial_combine must be one of {SPATIAL_COMBINE}, got {spatial_combine!r}")
        if kernel_size % 2 == 0:
            raise ValueError("spatial kernel size must be odd to preserve H x W")
        if not (enable_channel or enable_spatial or residual):
            raise ValueError("CBAMBlock with both attentions disabled and no residual has no output path")
        self.channels = channels
        self.reduction = reduction
        self.kernel_size = kernel_size
        self.spatial_combine = spatial_combine
        self.enable_channel = enable_channel
        self.enable_spatial = enable_spatial
        self.residual = residual
        self.w1, self.w2 = _bottleneck(rng, channels, reduction, "CBAMBlock")
        in_maps = 1 if spatial_combine == "add" else 2
        self.spatial_weight = he_uniform(rng, (1, in_maps, kernel_size, kernel_size))

    def forward(self, f: Tensor) -> Tensor:
        return cbam_forward(self, f)


def cbam_channel(block: CBAMBlock, f: Tensor) -> Tensor:
    """Channel weights of shape (N, C, 1, 1)."""
    n, c = f.shape[:2]
    if c != block.channels:
        raise nc.ShapeError(f"CBAMBlock: input has {c} channels, block expects {block.channels}")
    avg = _excite(nc.reshape(nc.global_avg_pool(f), (n, c)), block.w1, block.w2)
    mx = _excite(nc.reshape(nc.global_max_pool(f), (n, c)), block.w1, block.w2)
    return nc.reshape(nc.sigmoid(nc.add(avg, mx)), (n, c, 1, 1))


def cbam_spatial(block: CBAMBlock, f: Tensor) -> Tensor:
    """Spatial weights of shape (N, 1, H, W)."""
    pad = block.kernel_size // 2
    avg, mx = nc.channel_mean(f), nc.channel_max(f)
    if block.spatial_combine == "add":
        pre = nc.add(
            nc.conv2d(avg, block.spatial_weight, padding=pad),
            nc.conv2d(mx, block.spatial_weight, padding=pad),
        )
    else:
        pre = nc.conv2d(nc.concat_channels([avg, mx]), block.spatial_weight, padding=pad)
    return nc.sigmoid(pre)


def cbam_forward(block: CBAMBlock, f: Tensor) -> Tensor:
    if not (block.enable_channel or block.enable_spatial):
        return f  # skip path only
    g = nc.mul(cbam_channel(block, f), f) if block.enable_channel else f
    h = nc.mul(cbam_spatial(block, g), g) if block.enable_spatial else g
    return nc.add(h, f) if block.residual else h
