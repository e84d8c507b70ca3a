"""Bottleneck residual blocks and the U-Net segmentation backbone.

The encoder alternates grid subsampling with residual blocks whose middle
layer is one of the point operators; the decoder upsamples with plain point
convolution evaluated at the finer cloud's positions (the query needs no
feature of its own), fuses skip features by concatenation, and ends in a
per-point classifier. Neighborhoods and subsample maps are built once per
cloud in a reusable plan.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .geometry import Neighborhood, PointCloud, SubsampleMap, grid_subsample, knn
from .pcf import (
    ConfigurationError,
    Linear,
    PcfParams,
    ScoreBlock,
    attention_baseline_forward,
    compute_scores,
    pcf_forward,
    pointconv_forward,
)
from .tensor import (
    Tensor,
    concat_last,
    gather_rows,
    max_over_neighbors,
    mean_over_rows,
    mean_pool,
    pointwise,
    pow_const,
)

Array = np.ndarray

SHORTCUTS = ("identity", "linear", "maxpool_linear")

CHECKPOINT_MAGIC = b"PCFW"
CHECKPOINT_VERSION = 1


class DegenerateInputError(ValueError):
    """A level's subsampling left too few points to continue."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or carries the wrong version."""


@dataclass
class FeatureNorm:
    """Per-feature normalization with learnable gain/shift.

    Training forwards standardize by the current rows' statistics with exact
    gradients through both moments; running buffers track those statistics
    for evaluation. Stop-gradient running-stat variants were measurably
    unstable here: the statistics drift with the weights while the gradient
    assumes them fixed, and training collapses after convergence.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: Array
    running_var: Array
    momentum: float = 0.1
    eps: float = 1e-5

    @staticmethod
    def create(width: int) -> "FeatureNorm":
        return FeatureNorm(
            gamma=Tensor(np.ones(width), requires_grad=True),
            beta=Tensor(np.zeros(width), requires_grad=True),
            running_mean=np.zeros(width),
            running_var=np.ones(width))

    def stats(self, x: Tensor, training: bool) -> tuple[Tensor, Tensor]:
        """(mean, inv_std) of ``x`` as graph tensors; eval uses the buffers."""
        if training:
            mean = mean_over_rows(x)
            centered = x - mean
            var = mean_over_rows(centered * centered)
            self.running_mean = ((1 - self.momentum) * self.running_mean
                                 + self.momentum * mean.data)
            self.running_var = ((1 - self.momentum) * self.running_var
                                + self.momentum * var.data)
            return mean, pow_const(var + Tensor(self.eps), -0.5)
        return (Tensor(self.running_mean.copy()),
                Tensor(1.0 / np.sqrt(self.running_var + self.eps)))

    def apply(self, x: Tensor, stats: tuple[Tensor, Tensor]) -> Tensor:
        mean, inv_std = stats
        return (x - mean) * inv_std * self.gamma + self.beta

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return self.apply(x, self.stats(x, training))

    def parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.gamma", self.gamma), (f"{prefix}.beta", self.beta)]

    def buffers(self, prefix: str) -> list[tuple[str, Array]]:
        return [(f"{prefix}.running_mean", self.running_mean),
                (f"{prefix}.running_var", self.running_var)]

    def set_buffer(self, name: str, value: Array) -> None:
        setattr(self, name, value.copy())


@dataclass
class BlockSpec:
    """Shape contract of one bottleneck residual block."""

    in_channels: int
    out_channels: int
    bottleneck_ratio: float = 0.25
    operator: str = "pcf_subtractive"
    shortcut: str = "identity"

    def __post_init__(self) -> None:
        if self.shortcut not in SHORTCUTS:
            raise ConfigurationError(f"unknown shortcut {self.shortcut!r}")
        if self.shortcut == "identity" and self.in_channels != self.out_channels:
            raise ConfigurationError(
                f"identity shortcut needs matching widths, got "
                f"{self.in_channels} -> {self.out_channels}")

    @property
    def bottleneck(self) -> int:
        return max(1, int(round(self.out_channels * self.bottleneck_ratio)))


@dataclass
class BlockParams:
    """Trainable state of one residual block."""

    spec: BlockSpec
    lin1: Linear
    norm1: FeatureNorm
    pcf: PcfParams
    norm2: FeatureNorm
    lin2: Linear
    norm3: FeatureNorm
    shortcut_lin: Linear | None = None
    shortcut_norm: FeatureNorm | None = None

    @staticmethod
    def create(rng: np.random.Generator, spec: BlockSpec, *, heads: int, c_mid: int,
               activation: str, psi_hidden_layers: int, d_qk: int | None,
               disable_conv: bool, disable_reweight: bool) -> "BlockParams":
        b = spec.bottleneck
        if b % heads != 0:
            raise ConfigurationError(
                f"heads={heads} does not divide bottleneck width {b}")
        pcf = PcfParams.create(
            rng, b, b, variant=spec.operator, heads=heads, c_mid=c_mid,
            activation=activation, psi_hidden_layers=psi_hidden_layers, d_qk=d_qk,
            disable_conv=disable_conv, disable_reweight=disable_reweight)
        shortcut_lin = shortcut_norm = None
        if spec.shortcut != "identity":
            shortcut_lin = Linear.create(rng, spec.in_channels, spec.out_channels)
            shortcut_norm = FeatureNorm.create(spec.out_channels)
        return BlockParams(
            spec=spec,
            lin1=Linear.create(rng, spec.in_channels, b),
            norm1=FeatureNorm.create(b),
            pcf=pcf,
            norm2=FeatureNorm.create(b),
            lin2=Linear.create(rng, b, spec.out_channels),
            norm3=FeatureNorm.create(spec.out_channels),
            shortcut_lin=shortcut_lin,
            shortcut_norm=shortcut_norm)

    def parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = self.lin1.parameters(f"{prefix}.lin1")
        out += self.norm1.parameters(f"{prefix}.norm1")
        out += self.pcf.parameters(f"{prefix}.pcf")
        out += self.norm2.parameters(f"{prefix}.norm2")
        out += self.lin2.parameters(f"{prefix}.lin2")
        out += self.norm3.parameters(f"{prefix}.norm3")
        if self.shortcut_lin is not None:
            out += self.shortcut_lin.parameters(f"{prefix}.shortcut")
            out += self.shortcut_norm.parameters(f"{prefix}.shortcut_norm")
        return out

    def norms(self, prefix: str) -> list[tuple[str, FeatureNorm]]:
        out = [(f"{prefix}.norm1", self.norm1), (f"{prefix}.norm2", self.norm2),
               (f"{prefix}.norm3", self.norm3)]
        if self.shortcut_norm is not None:
            out.append((f"{prefix}.shortcut_norm", self.shortcut_norm))
        return out


def _maybe_norm(x: Tensor, norm: FeatureNorm, use_norm: bool, training: bool,
                stats: tuple[Tensor, Tensor] | None = None) -> Tensor:
    if not use_norm:
        return x
    if stats is None:
        stats = norm.stats(x, training)
    return norm.apply(x, stats)


def _operator_forward(src_feats: Tensor, centers: Tensor, nbr: Neighborhood,
                      params: PcfParams, capture: list | None) -> Tensor:
    if params.variant == "pointconv":
        if capture is not None:
            capture.append(None)
        return pointconv_forward(src_feats, nbr, params)
    if params.variant == "attention_baseline":
        if capture is not None:
            capture.append(None)
        return attention_baseline_forward(src_feats, nbr, params, center_feats=centers)
    nbr_feats = gather_rows(src_feats, nbr.indices)
    scores = compute_scores(centers, nbr_feats, params)
    if capture is not None:
        capture.append(scores)
    return pcf_forward(src_feats, nbr, params, center_feats=centers, scores=scores,
                       nbr_feats=nbr_feats)


def downsample_shortcut(fine_feats: Tensor, pooling_nbr: Neighborhood,
                        lin: Linear) -> Tensor:
    """Per-channel max over each coarse point's fine neighborhood, then linear."""
    pooled = max_over_neighbors(gather_rows(fine_feats, pooling_nbr.indices))
    return lin(pooled)


def residual_block(cloud_feats: Tensor, nbr: Neighborhood, spec: BlockSpec,
                   params: BlockParams, *, sub_map: SubsampleMap | None = None,
                   use_norm: bool = False, post_relu: bool = True,
                   training: bool = False, capture: list | None = None) -> Tensor:
    """shortcut(input) + lin2(operator(lin1(input))), then optional relu.

    With a ``maxpool_linear`` shortcut the block changes cardinality: ``nbr``
    maps coarse queries to fine sources and ``sub_map`` supplies the pooled
    center features for the score function.
    """
    down = spec.shortcut == "maxpool_linear"
    if down and sub_map is None:
        raise ConfigurationError("cardinality-changing block needs a subsample map")
    if not down and nbr.n_query != cloud_feats.shape[0]:
        raise ConfigurationError(
            f"{spec.shortcut!r} shortcut cannot change cardinality "
            f"({cloud_feats.shape[0]} -> {nbr.n_query} points)")

    fine_b = params.lin1(cloud_feats)
    stats1 = params.norm1.stats(fine_b, training) if use_norm else None
    fine_b = pointwise(_maybe_norm(fine_b, params.norm1, use_norm, training, stats1), "relu")

    if down:
        centers_raw = mean_pool(cloud_feats, sub_map.inverse, len(sub_map.parent))
        centers = params.lin1(centers_raw)
        # reuse the fine statistics so centers live in the same representation
        centers = pointwise(_maybe_norm(centers, params.norm1, use_norm, training, stats1),
                            "relu")
    else:
        centers = fine_b

    conv = _operator_forward(fine_b, centers, nbr, params.pcf, capture)
    conv = pointwise(_maybe_norm(conv, params.norm2, use_norm, training), "relu")
    residual = _maybe_norm(params.lin2(conv), params.norm3, use_norm, training)

    if spec.shortcut == "identity":
        shortcut = cloud_feats
    elif spec.shortcut == "linear":
        shortcut = _maybe_norm(params.shortcut_lin(cloud_feats), params.shortcut_norm,
                               use_norm, training)
    else:
        shortcut = downsample_shortcut(cloud_feats, nbr, params.shortcut_lin)
        shortcut = _maybe_norm(shortcut, params.shortcut_norm, use_norm, training)

    out = residual + shortcut
    return pointwise(out, "relu") if post_relu else out


def pointconv_deconv(coarse_feats: Tensor, up_nbr: Neighborhood,
                     params: PcfParams) -> Tensor:
    """Plain point convolution evaluated at finer query positions."""
    return pointconv_forward(coarse_feats, up_nbr, params)


@dataclass
class NetConfig:
    """Declarative description of the segmentation U-Net."""

    feature_width: int
    num_classes: int
    levels: int = 5
    base_width: int = 64
    base_grid: float = 0.05
    blocks_per_level: tuple[int, ...] | None = None
    k: int = 16
    variant: str = "pcf_subtractive"
    heads: int = 8
    c_mid: int = 16
    activation: str = "sigmoid"
    psi_hidden_layers: int = 2
    bottleneck_ratio: float = 0.25
    post_relu: bool = True
    norm: bool = True
    d_qk: int | None = None
    disable_conv: bool = False
    disable_reweight: bool = False

    def __post_init__(self) -> None:
        if self.levels < 2:
            raise ConfigurationError(f"need at least 2 levels, got {self.levels}")
        if self.blocks_per_level is None:
            self.blocks_per_level = tuple(([1, 2, 2, 2, 2] * 4)[:self.levels])
        else:
            self.blocks_per_level = tuple(int(b) for b in self.blocks_per_level)
        if len(self.blocks_per_level) != self.levels:
            raise ConfigurationError(
                f"blocks_per_level has {len(self.blocks_per_level)} entries "
                f"for {self.levels} levels")
        if any(b < 1 for b in self.blocks_per_level):
            raise ConfigurationError("every level needs at least one block")
        if self.base_grid <= 0:
            raise ConfigurationError(f"base_grid must be positive, got {self.base_grid}")

    @property
    def level_widths(self) -> list[int]:
        return [self.base_width * 2 ** i for i in range(self.levels)]

    @property
    def grid_sizes(self) -> list[float]:
        return [self.base_grid * 2 ** i for i in range(self.levels)]


@dataclass
class UnetPlan:
    """Per-cloud geometry reused across forward passes: clouds, maps, neighborhoods."""

    clouds: list[PointCloud]
    sub_maps: list[SubsampleMap]
    down_nbrs: list[Neighborhood]
    self_nbrs: list[Neighborhood]
    up_nbrs: list[Neighborhood]


def build_plan(cloud: PointCloud, config: NetConfig) -> UnetPlan:
    """Subsample every level and build all neighborhoods once.

    The neighborhood size is clamped to the source cloud where a coarse level
    holds fewer than k points.
    """
    clouds = [cloud]
    sub_maps: list[SubsampleMap] = []
    down_nbrs: list[Neighborhood] = []
    self_nbrs: list[Neighborhood] = []
    up_nbrs: list[Neighborhood] = []
    for i, grid in enumerate(config.grid_sizes):
        coarse, sub = grid_subsample(clouds[i], grid)
        if coarse.n < 1:
            raise DegenerateInputError(f"level {i} subsampled to zero points")
        fine = clouds[i]
        clouds.append(coarse)
        sub_maps.append(sub)
        down_nbrs.append(knn(fine, coarse, min(config.k, fine.n)))
        self_nbrs.append(knn(coarse, coarse, min(config.k, coarse.n)))
        up_nbrs.append(knn(coarse, fine, min(config.k, coarse.n)))
    return UnetPlan(clouds, sub_maps, down_nbrs, self_nbrs, up_nbrs)


@dataclass
class UNetParams:
    """All trainable tensors and normalization buffers of the backbone."""

    config: NetConfig
    embed: Linear
    embed_norm: FeatureNorm
    enc_blocks: list[list[BlockParams]]
    dec_deconv: list[PcfParams]
    dec_fuse: list[Linear]
    dec_norm: list[FeatureNorm]
    classifier: Linear

    @staticmethod
    def create(config: NetConfig, rng: np.random.Generator) -> "UNetParams":
        widths = config.level_widths
        kw = dict(heads=config.heads, c_mid=config.c_mid, activation=config.activation,
                  psi_hidden_layers=config.psi_hidden_layers, d_qk=config.d_qk,
                  disable_conv=config.disable_conv, disable_reweight=config.disable_reweight)
        enc_blocks: list[list[BlockParams]] = []
        for i in range(config.levels):
            in_w = widths[i - 1] if i > 0 else widths[0]
            level = [BlockParams.create(
                rng, BlockSpec(in_w, widths[i], config.bottleneck_ratio,
                               config.variant, "maxpool_linear"), **kw)]
            for _ in range(config.blocks_per_level[i] - 1):
                level.append(BlockParams.create(
                    rng, BlockSpec(widths[i], widths[i], config.bottleneck_ratio,
                                   config.variant, "identity"), **kw))
            enc_blocks.append(level)
        dec_deconv = []
        dec_fuse = []
        dec_norm = []
        for i in range(config.levels):
            dec_w = widths[i - 1] if i > 0 else widths[0]
            dec_deconv.append(PcfParams.create(
                rng, widths[i], dec_w, variant="pointconv", heads=1, c_mid=config.c_mid))
            dec_fuse.append(Linear.create(rng, 2 * dec_w, dec_w))
            dec_norm.append(FeatureNorm.create(dec_w))
        return UNetParams(
            config=config,
            embed=Linear.create(rng, config.feature_width, widths[0]),
            embed_norm=FeatureNorm.create(widths[0]),
            enc_blocks=enc_blocks,
            dec_deconv=dec_deconv,
            dec_fuse=dec_fuse,
            dec_norm=dec_norm,
            classifier=Linear.create(rng, widths[0], config.num_classes))

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = self.embed.parameters("embed")
        out += self.embed_norm.parameters("embed_norm")
        for i, level in enumerate(self.enc_blocks):
            for j, block in enumerate(level):
                out += block.parameters(f"enc{i}.block{j}")
        for i in range(self.config.levels):
            out += self.dec_deconv[i].parameters(f"dec{i}.deconv")
            out += self.dec_fuse[i].parameters(f"dec{i}.fuse")
            out += self.dec_norm[i].parameters(f"dec{i}.norm")
        out += self.classifier.parameters("classifier")
        return out

    def trainable(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def named_norms(self) -> list[tuple[str, FeatureNorm]]:
        out = [("embed_norm", self.embed_norm)]
        for i, level in enumerate(self.enc_blocks):
            for j, block in enumerate(level):
                out += block.norms(f"enc{i}.block{j}")
        for i in range(self.config.levels):
            out.append((f"dec{i}.norm", self.dec_norm[i]))
        return out

    def named_buffers(self) -> list[tuple[str, Array]]:
        out = []
        for prefix, norm in self.named_norms():
            out += norm.buffers(prefix)
        return out

    def zero_grad(self) -> None:
        for t in self.trainable():
            t.zero_grad()

    def pcf_layer_names(self) -> list[str]:
        """Forward-order names of the encoder operator layers (capture order)."""
        return [f"enc{i}.block{j}" for i, level in enumerate(self.enc_blocks)
                for j in range(len(level))]


def encoder_layer_clouds(config: NetConfig, plan: UnetPlan) -> list[PointCloud]:
    """Query cloud of each encoder operator layer, in capture order."""
    out = []
    for i in range(config.levels):
        for _ in range(config.blocks_per_level[i]):
            out.append(plan.clouds[i + 1])
    return out


def unet_forward(cloud: PointCloud, config: NetConfig, params: UNetParams,
                 plan: UnetPlan | None = None, *, training: bool = False,
                 capture: list[ScoreBlock | None] | None = None) -> Tensor:
    """Per-point class logits; output rows equal input rows exactly."""
    if cloud.feature_width != config.feature_width:
        raise ConfigurationError(
            f"cloud has {cloud.feature_width} feature channels, "
            f"config expects {config.feature_width}")
    if plan is None:
        plan = build_plan(cloud, config)
    use_norm = config.norm

    feats = params.embed(Tensor(cloud.features))
    feats = pointwise(_maybe_norm(feats, params.embed_norm, use_norm, training), "relu")

    skips = [feats]
    for i in range(config.levels):
        level = params.enc_blocks[i]
        feats = residual_block(
            feats, plan.down_nbrs[i], level[0].spec, level[0],
            sub_map=plan.sub_maps[i], use_norm=use_norm,
            post_relu=config.post_relu, training=training, capture=capture)
        for block in level[1:]:
            feats = residual_block(
                feats, plan.self_nbrs[i], block.spec, block, use_norm=use_norm,
                post_relu=config.post_relu, training=training, capture=capture)
        if i < config.levels - 1:
            skips.append(feats)

    for i in reversed(range(config.levels)):
        up = pointconv_deconv(feats, plan.up_nbrs[i], params.dec_deconv[i])
        fused = params.dec_fuse[i](concat_last(up, skips[i]))
        feats = pointwise(_maybe_norm(fused, params.dec_norm[i], use_norm, training), "relu")

    return params.classifier(feats)


# -- checkpoint serialization ---------------------------------------------------

_CONFIG_VARIANTS = ("pointconv", "pcf_subtractive", "pcf_qkv", "attention_baseline")
_CONFIG_ACTIVATIONS = ("sigmoid", "softmax", "relu", "constant_one")


def _config_entries(config: NetConfig) -> list[tuple[str, Array]]:
    scalars = {
        "feature_width": config.feature_width,
        "num_classes": config.num_classes,
        "levels": config.levels,
        "base_width": config.base_width,
        "base_grid": config.base_grid,
        "k": config.k,
        "variant": _CONFIG_VARIANTS.index(config.variant),
        "heads": config.heads,
        "c_mid": config.c_mid,
        "activation": _CONFIG_ACTIVATIONS.index(config.activation),
        "psi_hidden_layers": config.psi_hidden_layers,
        "bottleneck_ratio": config.bottleneck_ratio,
        "post_relu": int(config.post_relu),
        "norm": int(config.norm),
        "d_qk": -1 if config.d_qk is None else config.d_qk,
        "disable_conv": int(config.disable_conv),
        "disable_reweight": int(config.disable_reweight),
    }
    out = [(f"__config__.{k}", np.asarray(float(v))) for k, v in scalars.items()]
    out.append(("__config__.blocks_per_level",
                np.asarray(config.blocks_per_level, dtype=np.float64)))
    return out


def _config_from_entries(entries: dict[str, Array]) -> NetConfig:
    def scalar(name):
        return float(entries[f"__config__.{name}"].reshape(-1)[0])

    d_qk = int(scalar("d_qk"))
    return NetConfig(
        feature_width=int(scalar("feature_width")),
        num_classes=int(scalar("num_classes")),
        levels=int(scalar("levels")),
        base_width=int(scalar("base_width")),
        base_grid=scalar("base_grid"),
        blocks_per_level=tuple(int(b) for b in entries["__config__.blocks_per_level"]),
        k=int(scalar("k")),
        variant=_CONFIG_VARIANTS[int(scalar("variant"))],
        heads=int(scalar("heads")),
        c_mid=int(scalar("c_mid")),
        activation=_CONFIG_ACTIVATIONS[int(scalar("activation"))],
        psi_hidden_layers=int(scalar("psi_hidden_layers")),
        bottleneck_ratio=scalar("bottleneck_ratio"),
        post_relu=bool(scalar("post_relu")),
        norm=bool(scalar("norm")),
        d_qk=None if d_qk < 0 else d_qk,
        disable_conv=bool(scalar("disable_conv")),
        disable_reweight=bool(scalar("disable_reweight")))


def save_checkpoint(path: str, config: NetConfig, params: UNetParams) -> None:
    """Write magic, version, manifest (name, shape, offset), then f64 buffers."""
    entries = _config_entries(config)
    entries += [(name, t.data) for name, t in params.named_parameters()]
    entries += params.named_buffers()
    manifest = bytearray()
    blob = bytearray()
    for name, arr in entries:
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        manifest += struct.pack("<H", len(raw)) + raw
        manifest += struct.pack("<B", arr.ndim)
        manifest += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
        manifest += struct.pack("<Q", len(blob))
        blob += arr.astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(entries)))
        fh.write(manifest)
        fh.write(blob)


def read_checkpoint(path: str) -> dict[str, Array]:
    """Parse a checkpoint into a name -> array mapping."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})")
    pos = 12
    meta = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos) if ndim else ()
        pos += 4 * ndim
        (offset,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        meta.append((name, shape, offset))
    blob = data[pos:]
    out = {}
    for name, shape, offset in meta:
        n = int(np.prod(shape)) if shape else 1
        end = offset + 8 * n
        if end > len(blob):
            raise CheckpointError(
                f"truncated checkpoint: entry {name!r} needs bytes up to {pos + end}")
        arr = np.frombuffer(blob[offset:end], dtype="<f8").reshape(shape)
        out[name] = arr.astype(np.float64)
    return out


def load_checkpoint(path: str) -> tuple[NetConfig, UNetParams]:
    """Rebuild the network a checkpoint describes and load its state."""
    entries = read_checkpoint(path)
    config = _config_from_entries(entries)
    params = UNetParams.create(config, np.random.default_rng(0))
    for name, t in params.named_parameters():
        if name not in entries:
            raise CheckpointError(f"checkpoint is missing parameter {name!r}")
        if entries[name].shape != t.data.shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: file {entries[name].shape}, "
                f"model {t.data.shape}")
        t.data = entries[name].copy()
    for prefix, norm in params.named_norms():
        for stat in ("running_mean", "running_var"):
            key = f"{prefix}.{stat}"
            if key not in entries:
                raise CheckpointError(f"checkpoint is missing buffer {key!r}")
            norm.set_buffer(stat, entries[key])
    return config, params
