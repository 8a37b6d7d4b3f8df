"""
The tuning-fork network: one dilated residual encoder whose features feed
two ASPP decoders of identical architecture, one producing building-mask
logits and one producing edge-mask logits at the input's spatial size.

With heads=1 only the building decoder exists; that is the single-decoder
DeepLabV3+-with-focal-loss baseline.
"""
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from app import tensor_core as tc
from app.config import ASPP_RATES
from app.errors import CheckpointMismatch, InvalidArgument
from app.log import LOG
from app.tensor_core import ConvSpec, Tensor
from app.utils import config_hash


@dataclass(frozen=True)
class TFNetConfig:
    input_channels: int = 3
    stem_channels: int = 16
    stem_stride: int = 2
    stage_channels: Tuple[int, ...] = (16, 32, 64)
    stage_strides: Tuple[int, ...] = (2, 2, 1)
    stage_dilations: Tuple[int, ...] = (1, 1, 2)
    aspp_rates: Tuple[int, ...] = ASPP_RATES
    decoder_channels: int = 16
    low_level_channels: int = 8
    output_stride: int = 8
    heads: int = 2
    desk_scale: bool = True

    def __post_init__(self):
        # json round trips hand us lists
        for name in ("stage_channels", "stage_strides", "stage_dilations", "aspp_rates"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    def validate(self):
        n = len(self.stage_channels)
        if n == 0 or len(self.stage_strides) != n or len(self.stage_dilations) != n:
            raise InvalidArgument("stage channels, strides and dilations must have one entry per stage")
        if not self.aspp_rates:
            raise InvalidArgument("at least one ASPP rate is needed")

        positives = [
            self.input_channels,
            self.stem_channels,
            self.stem_stride,
            self.decoder_channels,
            self.low_level_channels,
            self.output_stride,
            *self.stage_channels,
            *self.stage_strides,
            *self.stage_dilations,
            *self.aspp_rates,
        ]
        if min(positives) < 1:
            raise InvalidArgument("channels, strides, dilations and rates must be positive")

        total_stride = self.stem_stride * int(np.prod(self.stage_strides))
        if total_stride != self.output_stride:
            raise InvalidArgument(
                f"strides multiply to {total_stride}, output_stride is {self.output_stride}"
            )
        if self.heads not in (1, 2):
            raise InvalidArgument(f"heads must be 1 or 2, got {self.heads}")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TFNetConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgument(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        return config_hash(self.to_dict())

    @classmethod
    def desk(cls, **overrides) -> "TFNetConfig":
        return cls(**overrides)

    @classmethod
    def tiny(cls, **overrides) -> "TFNetConfig":
        """for gradient checks and smoke runs: <= 8 channels per stage"""
        values = dict(
            stem_channels=4,
            stem_stride=2,
            stage_channels=(4, 8, 8),
            stage_strides=(1, 2, 1),
            stage_dilations=(1, 1, 2),
            aspp_rates=(1, 2),
            decoder_channels=4,
            low_level_channels=2,
            output_stride=4,
        )
        values.update(overrides)
        return cls(**values)

    @classmethod
    def full(cls, **overrides) -> "TFNetConfig":
        """DeepLabV3+ widths and rates, not trainable at desk scale"""
        values = dict(
            stem_channels=64,
            stem_stride=4,
            stage_channels=(256, 512, 1024, 2048),
            stage_strides=(1, 2, 2, 1),
            stage_dilations=(1, 1, 1, 2),
            aspp_rates=(1, 6, 12, 18),
            decoder_channels=256,
            low_level_channels=48,
            output_stride=16,
            desk_scale=False,
        )
        values.update(overrides)
        return cls(**values)


@dataclass
class ResidualBlock:
    conv1: ConvSpec
    conv2: ConvSpec
    shortcut: Optional[ConvSpec] = None

    def convs(self) -> List[Tuple[str, ConvSpec]]:
        ret = [("conv1", self.conv1), ("conv2", self.conv2)]
        if self.shortcut is not None:
            ret.append(("shortcut", self.shortcut))
        return ret


@dataclass
class EncoderParams:
    stem: ConvSpec
    blocks: List[ResidualBlock]

    def convs(self) -> List[Tuple[str, ConvSpec]]:
        ret = [("stem", self.stem)]
        for i, block in enumerate(self.blocks):
            ret += [(f"stage{i + 1}.{name}", conv) for name, conv in block.convs()]
        return ret


@dataclass
class DecoderParams:
    aspp: List[ConvSpec]
    pool: ConvSpec
    project: ConvSpec
    low_level: ConvSpec
    refine: ConvSpec
    classifier: ConvSpec
    # deep features -> low-level resolution, low-level -> input resolution
    upsample_deep: int = 1
    upsample_out: int = 1

    def convs(self) -> List[Tuple[str, ConvSpec]]:
        ret = [(f"aspp{i}", conv) for i, conv in enumerate(self.aspp)]
        ret += [
            ("pool", self.pool),
            ("project", self.project),
            ("low_level", self.low_level),
            ("refine", self.refine),
            ("classifier", self.classifier),
        ]
        return ret


@dataclass
class TFNetParams:
    config: TFNetConfig
    encoder: EncoderParams
    decoders: List[DecoderParams] = field(default_factory=list)

    def named_convs(self) -> List[Tuple[str, ConvSpec]]:
        ret = [(f"encoder.{name}", conv) for name, conv in self.encoder.convs()]
        for i, decoder in enumerate(self.decoders):
            ret += [(f"decoder{i}.{name}", conv) for name, conv in decoder.convs()]
        return ret

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        ret = []
        for name, conv in self.named_convs():
            ret.append((f"{name}.weight", conv.weight))
            ret.append((f"{name}.bias", conv.bias))
        return ret

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def encoder_parameters(self) -> List[Tensor]:
        return [t for name, t in self.named_parameters() if name.startswith("encoder.")]


def _build_encoder(config: TFNetConfig, rng: np.random.Generator) -> EncoderParams:
    stem = ConvSpec.he_init(
        rng, config.input_channels, config.stem_channels, 3, stride=config.stem_stride, name="stem"
    )
    blocks = []
    cin = config.stem_channels
    for i, (cout, stride, dilation) in enumerate(
        zip(config.stage_channels, config.stage_strides, config.stage_dilations)
    ):
        name = f"stage{i + 1}"
        conv1 = ConvSpec.he_init(rng, cin, cout, 3, stride=stride, dilation=dilation, name=name)
        conv2 = ConvSpec.he_init(rng, cout, cout, 3, dilation=dilation, name=name)
        shortcut = None
        if stride != 1 or cin != cout:
            shortcut = ConvSpec.he_init(rng, cin, cout, 1, stride=stride, name=name)
        blocks.append(ResidualBlock(conv1, conv2, shortcut))
        cin = cout

    return EncoderParams(stem, blocks)


def _build_decoder(config: TFNetConfig, rng: np.random.Generator, name: str) -> DecoderParams:
    deep_channels = config.stage_channels[-1]
    width = config.decoder_channels

    aspp = []
    for rate in config.aspp_rates:
        # rate 1 is the 1x1 branch of DeepLabV3+
        kernel = 1 if rate == 1 else 3
        aspp.append(
            ConvSpec.he_init(rng, deep_channels, width, kernel, dilation=rate, name=f"{name}.aspp")
        )

    branches = len(aspp) + 1
    return DecoderParams(
        aspp=aspp,
        pool=ConvSpec.he_init(rng, deep_channels, width, 1, name=f"{name}.pool"),
        project=ConvSpec.he_init(rng, branches * width, width, 1, name=f"{name}.project"),
        low_level=ConvSpec.he_init(
            rng, config.stem_channels, config.low_level_channels, 1, name=f"{name}.low_level"
        ),
        refine=ConvSpec.he_init(
            rng, width + config.low_level_channels, width, 3, name=f"{name}.refine"
        ),
        classifier=ConvSpec.he_init(rng, width, 1, 1, name=f"{name}.classifier"),
        upsample_deep=config.output_stride // config.stem_stride,
        upsample_out=config.stem_stride,
    )


def build(config: TFNetConfig, seed: int) -> TFNetParams:
    """Deterministic initialization: encoder first, then each decoder from
    the same generator, so decoders share architecture but not weights"""
    config.validate()
    rng = np.random.default_rng(seed)
    encoder = _build_encoder(config, rng)
    decoders = [_build_decoder(config, rng, f"decoder{i}") for i in range(config.heads)]

    params = TFNetParams(config, encoder, decoders)
    for name, t in params.named_parameters():
        t.name = name

    LOG.d("built model with %s parameters, seed %s", params.parameter_count(), seed)
    return params


def copy_decoder(params: TFNetParams, src: int = 0, dst: int = 1):
    """Overwrite decoder dst with decoder src's weights"""
    for (_, a), (_, b) in zip(params.decoders[src].convs(), params.decoders[dst].convs()):
        b.weight.data[...] = a.weight.data
        b.bias.data[...] = a.bias.data


def _residual_forward(block: ResidualBlock, x: Tensor) -> Tensor:
    h = tc.relu(tc.conv2d(x, block.conv1))
    h = tc.conv2d(h, block.conv2)
    shortcut = x if block.shortcut is None else tc.conv2d(x, block.shortcut)
    return tc.relu(tc.add(h, shortcut))


def encoder_forward(params: TFNetParams, x: Tensor) -> Tuple[Tensor, Tensor]:
    """Returns (deep features at H/output_stride, low-level tap after the stem)"""
    config = params.config
    if x.data.ndim != 4 or x.shape[1] != config.input_channels:
        raise InvalidArgument(
            f"expected (B, {config.input_channels}, H, W) input, got shape {x.shape}"
        )
    _, _, h, w = x.shape
    if h % config.output_stride or w % config.output_stride:
        raise InvalidArgument(
            f"input {h}x{w} is not divisible by output_stride {config.output_stride}"
        )

    tc.op_counts["encoder_forward"] += 1
    low = tc.relu(tc.conv2d(x, params.encoder.stem))
    deep = low
    for block in params.encoder.blocks:
        deep = _residual_forward(block, deep)

    return deep, low


def aspp_decoder_forward(
    decoder: DecoderParams,
    deep: Tensor,
    low: Tensor,
    drop_branch: Optional[int] = None,
) -> Tensor:
    """Parallel dilated branches and a global-pool branch, concatenated,
    projected, fused with the low-level tap, refined and upsampled to input
    size. drop_branch zeroes one branch (index len(aspp) is the pool branch)."""
    _, _, dh, dw = deep.shape
    if low.shape[2:] != (dh * decoder.upsample_deep, dw * decoder.upsample_deep):
        raise InvalidArgument(
            f"low-level features {low.shape} do not match deep features {deep.shape}"
            f" upsampled by {decoder.upsample_deep}"
        )

    branches = [tc.relu(tc.conv2d(deep, conv)) for conv in decoder.aspp]
    pooled = tc.relu(tc.conv2d(tc.global_avg_pool(deep), decoder.pool))
    branches.append(tc.expand_spatial(pooled, dh, dw))

    if drop_branch is not None:
        branches[drop_branch] = Tensor(np.zeros(branches[drop_branch].shape))

    h = tc.relu(tc.conv2d(tc.concat_channels(branches), decoder.project))
    h = tc.bilinear_upsample(h, decoder.upsample_deep)
    low_reduced = tc.relu(tc.conv2d(low, decoder.low_level))
    h = tc.relu(tc.conv2d(tc.concat_channels([h, low_reduced]), decoder.refine))
    logits = tc.conv2d(h, decoder.classifier)
    return tc.bilinear_upsample(logits, decoder.upsample_out)


def tfnet_forward(params: TFNetParams, x: Tensor) -> Tuple[Tensor, Optional[Tensor]]:
    """(building_logits, edge_logits); edge_logits is None for the
    single-decoder baseline"""
    deep, low = encoder_forward(params, x)
    building_logits = aspp_decoder_forward(params.decoders[0], deep, low)
    edge_logits = None
    if len(params.decoders) > 1:
        edge_logits = aspp_decoder_forward(params.decoders[1], deep, low)
    return building_logits, edge_logits


def save_model(params: TFNetParams, path: str, extra: dict = None):
    extra = dict(extra or {})
    extra["config"] = params.config.to_dict()
    extra["config_hash"] = params.config.hash()
    tc.save_checkpoint(params.named_parameters(), path, extra)


def load_model(path: str, config: TFNetConfig = None) -> Tuple[TFNetParams, dict]:
    """Loads a checkpoint written by save_model. When config is given the
    checkpoint must have been written for it."""
    arrays, extra = tc.load_checkpoint(path)
    stored = TFNetConfig.from_dict(extra["config"])
    if extra.get("config_hash") != stored.hash():
        raise CheckpointMismatch(f"checkpoint {path} config hash does not match its config")
    if config is not None and config.hash() != stored.hash():
        raise CheckpointMismatch(f"checkpoint {path} was written for another model config")

    params = build(stored, seed=0)
    for name, t in params.named_parameters():
        if name not in arrays:
            raise CheckpointMismatch(f"checkpoint {path} has no tensor {name}")
        if arrays[name].shape != t.shape:
            raise CheckpointMismatch(f"tensor {name} shape {arrays[name].shape} != {t.shape}")
        t.data[...] = arrays[name]

    return params, extra
