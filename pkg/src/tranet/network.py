"""TRA-Net assembly: SE-ResNet encoder, SE decoder with skips, hard-mask split, three CBAM branches."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from tranet import numcore as nc
from tranet.attention import SPATIAL_COMBINE, CBAMBlock, SEBlock
from tranet.numcore import Module, Tensor
from tranet.numcore.init import he_uniform, substream, xavier_uniform, zeros
from tranet.region import AUGrouping, Region, mask_batch

STAGES = ("stem", "stage2", "stage3", "stage4", "stage5", "decoder", "upper", "middle", "lower")
BRANCHES = ("upper", "middle", "lower")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    input_size: int = 64
    in_channels: int = 3
    stem_channels: int = 8
    stem_kernel: int = 7
    stem_stride: int = 2
    stem_pool: bool = True
    # (num_units, channels, stride) for encoder stages 2..5
    blocks: list = field(default_factory=lambda: [[1, 8, 1], [1, 16, 2], [1, 32, 2], [1, 64, 2]])
    unit: str = "basic"
    reduction_ratio: int = 4
    decoder_channels: list | None = None
    branch_channels: int = 16
    cbam_residual: bool = False
    spatial_combine: str = "add"
    spatial_kernel: int = 7
    enable_channel_att: bool = True
    enable_spatial_att: bool = True
    enable_hard_mask: bool = True
    enable_cbam: bool = True
    tail_residual: bool = True
    fc_hidden: int = 64
    norm: str = "group"  # "group" or "none"
    norm_groups: int = 4
    heads: dict = field(default_factory=lambda: {"upper": [1, 2, 4], "middle": [6, 9], "lower": [12, 25, 26]})

    @property
    def grouping(self) -> AUGrouping:
        return AUGrouping(tuple(self.heads["upper"]), tuple(self.heads["middle"]), tuple(self.heads["lower"]))

    @property
    def stage_channels(self) -> list[int]:
        return [int(b[1]) for b in self.blocks]

    @property
    def decoder_widths(self) -> list[int]:
        if self.decoder_channels is not None:
            return [int(c) for c in self.decoder_channels]
        return self.stage_channels[::-1][:3]

    @property
    def norm_width(self) -> int:
        """Group count handed to each conv, 0 when normalization is off."""
        return self.norm_groups if self.norm == "group" else 0

    @property
    def decoded_size(self) -> int:
        return self.input_size // 8

    def stage_strides(self) -> list[int]:
        """Cumulative downsampling factor at the output of stem and stages 2..5."""
        acc = self.stem_stride * (2 if self.stem_pool else 1)
        out = [acc]
        for b in self.blocks:
            acc *= int(b[2])
            out.append(acc)
        return out

    def violations(self) -> list[str]:
        errs = []
        if len(self.blocks) != 4:
            errs.append(f"blocks must describe 4 encoder stages, got {len(self.blocks)}")
            return errs
        if self.unit not in ("basic", "bottleneck"):
            errs.append(f"unit must be 'basic' or 'bottleneck', got {self.unit!r}")
        strides = self.stage_strides()
        if self.input_size % strides[-1]:
            errs.append(f"encoder stride product {strides[-1]} does not divide input_size {self.input_size}")
        if strides[2] != 8:
            errs.append(f"stage3 must sit at stride 8 so the decoder ends at input/8 (got stride {strides[2]})")
        if int(self.blocks[2][2]) != 2 or int(self.blocks[3][2]) != 2:
            errs.append("stages 4 and 5 must each downsample by 2 to mirror the 2x decoder upsampling")
        if self.decoded_size % 4:
            errs.append(f"decoded size {self.decoded_size} must be divisible by 4 for the hard masks")
        if len(self.decoder_widths) != 3:
            errs.append("decoder_channels must list 3 widths (for stages 5, 4, 3)")
        r = self.reduction_ratio
        widths = self.stage_channels + self.decoder_widths
        for c in widths:
            if c % r:
                errs.append(f"channel width {c} not divisible by reduction_ratio {r}")
        if self.unit == "bottleneck":
            for c in self.stage_channels:
                if c % 4:
                    errs.append(f"bottleneck width {c} not divisible by 4")
        if self.enable_cbam:
            for c in (self.decoder_widths[-1], self.branch_channels):
                if c % r:
                    errs.append(f"CBAM width {c} not divisible by reduction_ratio {r}")
            if not (self.enable_channel_att or self.enable_spatial_att or self.cbam_residual):
                errs.append("CBAM enabled with both attentions off and no residual")
        if self.norm not in ("group", "none"):
            errs.append(f"norm must be 'group' or 'none', got {self.norm!r}")
        if self.norm_groups < 1:
            errs.append("norm_groups must be >= 1")
        if self.spatial_combine not in SPATIAL_COMBINE:
            errs.append(f"spatial_combine must be one of {SPATIAL_COMBINE}")
        tail_out = self.decoded_size // 4
        if tail_out < 1:
            errs.append(f"decoded size {self.decoded_size} too small for two 2x2 max pools")
        try:
            self.grouping
        except (ValueError, KeyError) as exc:
            errs.append(f"heads: {exc}")
        return errs

    def validate(self) -> None:
        errs = self.violations()
        if errs:
            raise ConfigError("invalid model config: " + "; ".join(errs))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def preset(name: str) -> ModelConfig:
    """Shipped configs: ``toy`` (64 px desk scale) and ``paper224`` (SENet-50 stage shape)."""
    try:
        text = resources.files("tranet.presets").joinpath(f"{name}.json").read_text()
    except FileNotFoundError:
        raise ConfigError(f"unknown preset {name!r}; available: toy, paper224") from None
    return ModelConfig.from_dict(json.loads(text))


def resolve_config(spec: str | Path) -> ModelConfig:
    """A preset name or a path to a JSON config."""
    path = Path(spec)
    if path.suffix == ".json" or path.exists():
        return ModelConfig.load(path)
    return preset(str(spec))


# ---------------------------------------------------------------------------
# layers


class GroupNorm(Module):
    def __init__(self, channels, groups):
        self.groups = math.gcd(int(groups), channels)
        self.gamma = nc.Parameter(np.ones(channels))
        self.beta = zeros((channels,))

    def forward(self, x):
        return nc.group_norm(x, self.gamma, self.beta, self.groups)


class Conv(Module):
    """Convolution, followed by group normalization when ``norm_groups`` is set (the bias is then dropped)."""

    def __init__(self, cin, cout, k, rng, stride=1, padding=None, norm_groups=0):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = he_uniform(rng, (cout, cin, k, k))
        self.bias = None if norm_groups else zeros((cout,))
        self.norm = GroupNorm(cout, norm_groups) if norm_groups else None

    def forward(self, x):
        y = nc.conv2d(x, self.weight, self.bias, self.stride, self.padding)
        return self.norm(y) if self.norm is not None else y


class Dense(Module):
    def __init__(self, din, dout, rng):
        self.weight = xavier_uniform(rng, (dout, din))
        self.bias = zeros((dout,))

    def forward(self, x):
        return nc.fully_connected(x, self.weight, self.bias)


class ResidualUnit(Module):
    """SE-ResNet unit: conv stack, channel gating, projection shortcut when shapes change."""

    def __init__(self, cin, cout, stride, cfg: ModelConfig, rng):
        g = cfg.norm_width
        if cfg.unit == "basic":
            self.convs = [Conv(cin, cout, 3, rng, stride, norm_groups=g), Conv(cout, cout, 3, rng, norm_groups=g)]
        else:
            mid = cout // 4
            self.convs = [
                Conv(cin, mid, 1, rng, norm_groups=g),
                Conv(mid, mid, 3, rng, stride, norm_groups=g),
                Conv(mid, cout, 1, rng, norm_groups=g),
            ]
        self.se = SEBlock(cout, cfg.reduction_ratio, rng)
        self.shortcut = Conv(cin, cout, 1, rng, stride, padding=0, norm_groups=g) if (cin != cout or stride != 1) else None

    def forward(self, x):
        h = x
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.convs) - 1:
                h = nc.relu(h)
        h = self.se(h)
        skip = self.shortcut(x) if self.shortcut is not None else x
        return nc.relu(nc.add(h, skip))


class Stage(Module):
    def __init__(self, cin, units, cout, stride, cfg, rng):
        self.units = [ResidualUnit(cin if i == 0 else cout, cout, stride if i == 0 else 1, cfg, rng) for i in range(units)]

    def forward(self, x):
        for u in self.units:
            x = u(x)
        return x


class Stem(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.pool = cfg.stem_pool
        self.conv = Conv(cfg.in_channels, cfg.stem_channels, cfg.stem_kernel, rng, cfg.stem_stride, norm_groups=cfg.norm_width)

    def forward(self, x):
        x = nc.relu(self.conv(x))
        return nc.max_pool2d(x, 2) if self.pool else x


class DecoderBlock(Module):
    """Optional 2x nearest upsampling, one 3x3 conv, SE, then additive skip."""

    def __init__(self, cin, cout, skip_channels, upsample, cfg, rng):
        self.upsample = upsample
        self.conv = Conv(cin, cout, 3, rng, norm_groups=cfg.norm_width)
        self.se = SEBlock(cout, cfg.reduction_ratio, rng)
        self.skip_proj = (
            Conv(skip_channels, cout, 1, rng, padding=0, norm_groups=cfg.norm_width)
            if skip_channels not in (None, cout)
            else None
        )
        self.has_skip = skip_channels is not None

    def forward(self, x, skip=None):
        if self.upsample:
            x = nc.upsample_nearest2x(x)
        x = self.se(nc.relu(self.conv(x)))
        if self.has_skip:
            x = nc.add(x, self.skip_proj(skip) if self.skip_proj is not None else skip)
        return x


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        c = cfg.stage_channels
        d = cfg.decoder_widths
        self.blocks = [
            DecoderBlock(c[3], d[0], None, False, cfg, rng),
            DecoderBlock(d[0], d[1], c[2], True, cfg, rng),
            DecoderBlock(d[1], d[2], c[1], True, cfg, rng),
        ]

    def forward(self, s3, s4, s5):
        x = self.blocks[0](s5)
        x = self.blocks[1](x, s4)
        return self.blocks[2](x, s3)


class Tail(Module):
    """Two 3x3 convs (optionally residual) followed by 2x2 max pool, or by global average pool at the end."""

    def __init__(self, cin, cout, rng, residual, last, norm_groups=0):
        self.last = last
        self.residual = residual and not last
        self.conv_a = Conv(cin, cout, 3, rng, norm_groups=norm_groups)
        self.conv_b = Conv(cout, cout, 3, rng, norm_groups=norm_groups)
        self.proj = Conv(cin, cout, 1, rng, padding=0, norm_groups=norm_groups) if self.residual and cin != cout else None

    def forward(self, x):
        h = self.conv_b(nc.relu(self.conv_a(x)))
        if self.residual:
            h = nc.add(h, self.proj(x) if self.proj is not None else x)
        h = nc.relu(h)
        return nc.global_avg_pool(h) if self.last else nc.max_pool2d(h, 2)


class Branch(Module):
    def __init__(self, cin, n_out, cfg: ModelConfig, rng):
        w = cfg.branch_channels
        self.cbams = []
        if cfg.enable_cbam:
            self.cbams = [
                CBAMBlock(
                    c,
                    rng,
                    reduction=cfg.reduction_ratio,
                    kernel_size=cfg.spatial_kernel,
                    spatial_combine=cfg.spatial_combine,
                    enable_channel=cfg.enable_channel_att,
                    enable_spatial=cfg.enable_spatial_att,
                    residual=cfg.cbam_residual,
                )
                for c in (cin, w, w)
            ]
        self.tails = [
            Tail(cin, w, rng, cfg.tail_residual, last=False, norm_groups=cfg.norm_width),
            Tail(w, w, rng, cfg.tail_residual, last=False, norm_groups=cfg.norm_width),
            Tail(w, w, rng, cfg.tail_residual, last=True, norm_groups=cfg.norm_width),
        ]
        self.fc1 = Dense(w, cfg.fc_hidden, rng)
        self.fc2 = Dense(cfg.fc_hidden, n_out, rng)

    def features(self, x):
        for i, tail in enumerate(self.tails):
            if self.cbams:
                x = self.cbams[i](x)
            x = tail(x)
        return nc.flatten(x)

    def head(self, feat):
        return self.fc2(nc.relu(self.fc1(feat)))

    def forward(self, x):
        return self.head(self.features(x))


@dataclass
class ForwardTrace:
    stage_shapes: dict = field(default_factory=dict)
    decoded: Tensor | None = None
    branch_inputs: dict = field(default_factory=dict)
    branch_features: dict = field(default_factory=dict)
    logits: dict = field(default_factory=dict)


class TRANet(Module):
    def __init__(self, cfg: ModelConfig, seed: int):
        cfg.validate()
        self.cfg = cfg
        rng = substream(seed, "init")
        self.stem = Stem(cfg, rng)
        cin = cfg.stem_channels
        self.stage2, self.stage3, self.stage4, self.stage5 = [None] * 4
        for name, (units, cout, stride) in zip(("stage2", "stage3", "stage4", "stage5"), cfg.blocks):
            setattr(self, name, Stage(cin, int(units), int(cout), int(stride), cfg, rng))
            cin = int(cout)
        self.decoder = Decoder(cfg, rng)
        groups = cfg.grouping.branches()
        dec_out = cfg.decoder_widths[-1]
        self.upper = Branch(dec_out, len(groups["upper"]), cfg, rng)
        self.middle = Branch(dec_out, len(groups["middle"]), cfg, rng)
        self.lower = Branch(dec_out, len(groups["lower"]), cfg, rng)

    def _children(self):
        for name, value in super()._children():
            if name != "cfg":
                yield name, value

    def stage_parameters(self, stage: str) -> list:
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}; valid: {', '.join(STAGES)}")
        return getattr(self, stage).parameters()

    def stage_named_parameters(self, stage: str) -> list:
        """``(state-dict name, parameter)`` pairs belonging to one stage."""
        ids = {id(p) for p in self.stage_parameters(stage)}
        return [(n, p) for n, p in self.named_parameters() if id(p) in ids]

    def encode_decode(self, x: Tensor, trace: ForwardTrace | None = None) -> Tensor:
        h = self.stem(x)
        outs = {}
        for name in ("stage2", "stage3", "stage4", "stage5"):
            h = getattr(self, name)(h)
            outs[name] = h
        decoded = self.decoder(outs["stage3"], outs["stage4"], outs["stage5"])
        if trace is not None:
            trace.stage_shapes.update({k: v.shape for k, v in outs.items()})
            trace.stage_shapes["decoded"] = decoded.shape
            trace.decoded = decoded
        return decoded

    def branch_inputs(self, decoded: Tensor, center_rows) -> dict[str, Tensor]:
        n, _, h, w = decoded.shape
        rows = [int(r) for r in np.broadcast_to(np.asarray(center_rows), (n,))]
        for r in rows:
            if not 0 < r < h:
                raise ValueError(f"center row {r} outside (0, {h}) at decoded resolution")
        if not self.cfg.enable_hard_mask:
            return {b: decoded for b in BRANCHES}
        return {
            region.value: nc.mul(decoded, nc.constant(mask_batch(region, h, w, rows))) for region in Region
        }

    def branches_forward(self, decoded: Tensor, center_rows, trace: ForwardTrace | None = None):
        inputs = self.branch_inputs(decoded, center_rows)
        logits = []
        for name in BRANCHES:
            branch = getattr(self, name)
            feat = branch.features(inputs[name])
            out = branch.head(feat)
            logits.append(out)
            if trace is not None:
                trace.branch_inputs[name] = inputs[name]
                trace.branch_features[name] = feat
                trace.logits[name] = out
        return logits

    def forward(self, x: Tensor, center_rows):
        return forward(self, x, center_rows)


def build_model(cfg: ModelConfig, seed: int) -> TRANet:
    return TRANet(cfg, seed)


def forward(model: TRANet, batch: Tensor, center_rows):
    """Return ``(upper_logits, middle_logits, lower_logits, trace)``."""
    size = model.cfg.input_size
    if batch.ndim != 4 or batch.shape[1] != model.cfg.in_channels or batch.shape[2:] != (size, size):
        raise nc.ShapeError(f"batch shape {batch.shape} does not match (N, {model.cfg.in_channels}, {size}, {size})")
    trace = ForwardTrace()
    trace.stage_shapes["input"] = batch.shape
    decoded = model.encode_decode(batch, trace)
    up, mid, low = model.branches_forward(decoded, center_rows, trace)
    return up, mid, low, trace


def freeze(model: TRANet, stages) -> None:
    """Stop gradients and updates for every parameter in the named stages."""
    stages = set(stages)
    bad = stages - set(STAGES)
    if bad:
        raise ValueError(f"unknown stage(s) {sorted(bad)}; valid: {', '.join(STAGES)}")
    for stage in stages:
        for p in model.stage_parameters(stage):
            p.requires_grad = False
            p.grad = None


def save_model(model: TRANet, path) -> None:
    nc.save_weights(path, model.state_dict())


def load_weights(model: TRANet, path, strict: bool = True) -> None:
    model.load_state_dict(nc.load_weights(path), strict=strict)


def content_hash(state: dict) -> str:
    import hashlib

    return hashlib.sha256(nc.serialize.dumps(state)).hexdigest()


def stride_product(cfg: ModelConfig) -> int:
    return math.prod([cfg.stem_stride, 2 if cfg.stem_pool else 1] + [int(b[2]) for b in cfg.blocks])
