"""Generator and discriminator networks.

Parameters live in flat ``dict[str, Tensor]`` trees keyed by dotted names
(``"trunk.0.mixer.2.token_fc1.w"``). Forward functions are pure in their
parameter trees; the only mutable state is batch-norm running statistics,
which are returned to the caller rather than written in place.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

Params = dict[str, Tensor]

RESIDUAL_SCALE = 0.2
LN_EPS = 1e-5
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class MixerConfig:
    patch_h: int = 4
    patch_w: int = 4
    # None means "derive from the feature map": token_hidden = 2 * tokens,
    # embed_dim = patch_h * patch_w * channels, channel_hidden = 2 * embed_dim
    token_hidden: int | None = None
    channel_hidden: int | None = None
    embed_dim: int | None = None

    def resolve(self, channels: int, h: int, w: int) -> tuple[int, int, int, int]:
        """Return ``(tokens, embed_dim, token_hidden, channel_hidden)`` for a map."""
        if h % self.patch_h or w % self.patch_w:
            raise ConfigError(
                f"feature map {h}x{w} is not divisible by patch {self.patch_h}x{self.patch_w}")
        tokens = (h // self.patch_h) * (w // self.patch_w)
        embed = self.embed_dim or self.patch_h * self.patch_w * channels
        return (tokens, embed, self.token_hidden or 2 * tokens,
                self.channel_hidden or 2 * embed)


@dataclass(frozen=True)
class GeneratorConfig:
    input_h: int = 64
    input_w: int = 16
    num_rmrdb: int = 1
    base_channels: int = 16
    upsample_stages: int = 2
    downsample_stages: int = 2
    down_kernel: tuple[int, int] = (5, 5)
    down_stride: tuple[int, int] = (2, 1)
    residual_scale: float = RESIDUAL_SCALE
    mixer: MixerConfig = MixerConfig()

    def __post_init__(self):
        for name in ("input_h", "input_w", "num_rmrdb", "base_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.upsample_stages != self.downsample_stages:
            raise ConfigError("upsample_stages must equal downsample_stages so that the first "
                              "axis keeps its extent")
        self.mixer.resolve(self.base_channels, self.input_h, self.input_w)

    @property
    def scale(self) -> int:
        return 2 ** self.upsample_stages

    def output_shape(self) -> tuple[int, int, int]:
        return (1, self.input_h, self.input_w * self.scale)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> GeneratorConfig:
        d = dict(d)
        d["mixer"] = MixerConfig(**d.get("mixer", {}))
        for k in ("down_kernel", "down_stride"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def full_size_generator_config(num_rmrdb: int = 1, base_channels: int = 64) -> GeneratorConfig:
    """256x64 inputs, 8x8 patches."""
    return GeneratorConfig(input_h=256, input_w=64, num_rmrdb=num_rmrdb,
                           base_channels=base_channels, mixer=MixerConfig(8, 8))


def desk_generator_config(num_rmrdb: int = 1, base_channels: int = 16,
                          input_h: int = 64, input_w: int = 16) -> GeneratorConfig:
    return GeneratorConfig(input_h=input_h, input_w=input_w, num_rmrdb=num_rmrdb,
                           base_channels=base_channels, mixer=MixerConfig(4, 4))


@dataclass(frozen=True)
class DiscriminatorConfig:
    base_channels: int = 64
    min_size: int = 16

    def channels(self) -> list[tuple[int, int, int]]:
        """``(c_in, c_out, stride)`` for the eight body convolutions."""
        b = self.base_channels
        widths = [b, b, 2 * b, 2 * b, 4 * b, 4 * b, 8 * b, 8 * b]
        layers = [(1, widths[0], 1)]
        for i in range(1, 8):
            layers.append((widths[i - 1], widths[i], 2 if i % 2 else 1))
        return layers


# ---------------------------------------------------------------------------
# parameter construction
# ---------------------------------------------------------------------------

def _he(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    std = np.sqrt(2.0 / fan_in)
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), tracked=True)


def _zeros(shape, dtype, tracked=True) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), tracked=tracked)


def _ones(shape, dtype, tracked=True) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), tracked=tracked)


def _add_conv(p: Params, name, rng, cin, cout, k, dtype, bias=True):
    kh, kw = (k, k) if isinstance(k, int) else k
    p[f"{name}.w"] = _he(rng, (cout, cin, kh, kw), cin * kh * kw, dtype)
    if bias:
        p[f"{name}.b"] = _zeros((cout,), dtype)


def _add_linear(p: Params, name, rng, fin, fout, dtype):
    p[f"{name}.w"] = _he(rng, (fin, fout), fin, dtype)
    p[f"{name}.b"] = _zeros((fout,), dtype)


def _add_ln(p: Params, name, dim, dtype):
    p[f"{name}.g"] = _ones((dim,), dtype)
    p[f"{name}.b"] = _zeros((dim,), dtype)


def init_mixer(rng, prefix: str, channels: int, h: int, w: int, cfg: MixerConfig,
               dtype=np.float64) -> Params:
    tokens, embed, th, ch = cfg.resolve(channels, h, w)
    patch = cfg.patch_h * cfg.patch_w * channels
    p: Params = {}
    _add_linear(p, f"{prefix}.proj_in", rng, patch, embed, dtype)
    _add_ln(p, f"{prefix}.token_norm", embed, dtype)
    _add_linear(p, f"{prefix}.token_fc1", rng, tokens, th, dtype)
    _add_linear(p, f"{prefix}.token_fc2", rng, th, tokens, dtype)
    _add_ln(p, f"{prefix}.channel_norm", embed, dtype)
    _add_linear(p, f"{prefix}.channel_fc1", rng, embed, ch, dtype)
    _add_linear(p, f"{prefix}.channel_fc2", rng, ch, embed, dtype)
    _add_ln(p, f"{prefix}.out_norm", embed, dtype)
    _add_linear(p, f"{prefix}.proj_out", rng, embed, patch, dtype)
    return p


def init_rmrdb(rng, prefix: str, channels: int, h: int, w: int, cfg: MixerConfig,
               dtype=np.float64) -> Params:
    p: Params = {}
    for i in range(3):
        p.update(init_mixer(rng, f"{prefix}.mixer.{i}", channels, h, w, cfg, dtype))
    return p


def init_generator(cfg: GeneratorConfig, rng: np.random.Generator, dtype=np.float64) -> Params:
    c = cfg.base_channels
    p: Params = {}
    _add_conv(p, "stem", rng, 1, c, 3, dtype)
    for i in range(cfg.num_rmrdb):
        p.update(init_rmrdb(rng, f"trunk.{i}", c, cfg.input_h, cfg.input_w, cfg.mixer, dtype))
    _add_conv(p, "trunk_conv", rng, c, c, 3, dtype)
    for i in range(cfg.upsample_stages):
        _add_conv(p, f"up.{i}", rng, c, c, 3, dtype)
    _add_conv(p, "hr_conv", rng, c, c, 3, dtype)
    for i in range(cfg.downsample_stages):
        _add_conv(p, f"down.{i}", rng, c, c, cfg.down_kernel, dtype)
    _add_conv(p, "out_conv", rng, c, 1, 3, dtype)
    return p


def init_discriminator(cfg: DiscriminatorConfig, rng: np.random.Generator,
                       dtype=np.float64) -> Params:
    p: Params = {}
    for i, (cin, cout, _) in enumerate(cfg.channels()):
        _add_conv(p, f"body.{i}", rng, cin, cout, 3, dtype, bias=(i == 0))
        if i > 0:
            p[f"body.{i}.bn.g"] = _ones((cout,), dtype)
            p[f"body.{i}.bn.b"] = _zeros((cout,), dtype)
            p[f"body.{i}.bn.running_mean"] = _zeros((cout,), dtype, tracked=False)
            p[f"body.{i}.bn.running_var"] = _ones((cout,), dtype, tracked=False)
    _add_conv(p, "head", rng, cfg.channels()[-1][1], 1, 3, dtype)
    return p


def count_params(params: Mapping[str, Tensor]) -> int:
    """Number of trainable scalars (tracked tensors only)."""
    return sum(t.size for t in params.values() if t.tracked)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ConfigError(f"expected (C,H,W) or (N,C,H,W) input, got shape {x.shape}")
    return x, False


def _linear(x: Tensor, p: Params, name: str) -> Tensor:
    return T.matmul(x, p[f"{name}.w"]) + p[f"{name}.b"]


def _ln(x: Tensor, p: Params, name: str) -> Tensor:
    return T.layer_norm(x, p[f"{name}.g"], p[f"{name}.b"], LN_EPS)


def _conv(x: Tensor, p: Params, name: str, stride=(1, 1), pad=None) -> Tensor:
    w = p[f"{name}.w"]
    if pad is None:
        pad = (w.shape[2] // 2, w.shape[3] // 2)
    return T.conv2d(x, w, stride, pad, p.get(f"{name}.b"))


def mlp_mixer_block(x: Tensor, params: Params, cfg: MixerConfig, prefix: str = "") -> Tensor:
    """Patch-token mixer with a residual from block input to block output.

    Tokens are non-overlapping ``patch_h x patch_w`` patches flattened with
    their channels, projected linearly, passed through one token-mixing and
    one channel-mixing MLP (each pre-normed, GELU, with its own skip), layer
    normalized, projected back and folded into the input layout.
    """
    pre = f"{prefix}." if prefix else ""
    x, unbatched = _batched(x)
    n, c, h, w = x.shape
    cfg.resolve(c, h, w)
    ph, pw = cfg.patch_h, cfg.patch_w
    hp, wp = h // ph, w // pw

    tok = T.reshape(x, (n, c, hp, ph, wp, pw))
    tok = T.transpose(tok, (0, 2, 4, 3, 5, 1))
    tok = T.reshape(tok, (n, hp * wp, ph * pw * c))

    z = _linear(tok, params, pre + "proj_in")
    y = T.transpose(_ln(z, params, pre + "token_norm"), (0, 2, 1))
    y = _linear(T.gelu(_linear(y, params, pre + "token_fc1")), params, pre + "token_fc2")
    z = z + T.transpose(y, (0, 2, 1))
    y = _ln(z, params, pre + "channel_norm")
    y = _linear(T.gelu(_linear(y, params, pre + "channel_fc1")), params, pre + "channel_fc2")
    z = _ln(z + y, params, pre + "out_norm")
    o = _linear(z, params, pre + "proj_out")

    o = T.reshape(o, (n, hp, wp, ph, pw, c))
    o = T.transpose(o, (0, 5, 1, 3, 2, 4))
    o = T.reshape(o, (n, c, h, w))
    out = x + o
    return T.reshape(out, out.shape[1:]) if unbatched else out


def rmrdb(x: Tensor, params: Params, cfg: MixerConfig, prefix: str = "",
          beta: float = RESIDUAL_SCALE) -> Tensor:
    """Three mixer blocks in series wrapped by a scaled outer residual."""
    pre = f"{prefix}." if prefix else ""
    y = x
    for i in range(3):
        y = mlp_mixer_block(y, params, cfg, f"{pre}mixer.{i}")
    return x + y * beta


def upsample_2x(x: Tensor, params: Params, name: str) -> Tensor:
    """Nearest-neighbour 2x enlargement, 3x3 conv, leaky ReLU."""
    return T.leaky_relu(_conv(T.upsample_nearest2x(x), params, name))


def selective_downsample(x: Tensor, params: Params, name: str,
                         stride=(2, 1), pad=(2, 2)) -> Tensor:
    """Strided conv + leaky ReLU halving the first spatial axis only."""
    h = x.shape[-2]
    if h % 2:
        raise ConfigError(f"selective downsampling needs an even first axis, got {h}")
    return T.leaky_relu(_conv(x, params, name, stride, pad))


def rmrdb_chain(feat: Tensor, params: Params, cfg: GeneratorConfig) -> Tensor:
    y = feat
    for i in range(cfg.num_rmrdb):
        y = rmrdb(y, params, cfg.mixer, f"trunk.{i}", cfg.residual_scale)
    return y


def generator_forward(lr: Tensor, params: Params, cfg: GeneratorConfig) -> Tensor:
    """Map ``(1, H, W)`` (or ``(N, 1, H, W)``) to the 4x slice-upscaled image.

    The second image axis is the slice direction.
    """
    x, unbatched = _batched(lr)
    if x.shape[1] != 1:
        raise ConfigError(f"stage input: expected 1 channel, got {x.shape[1]}")
    h, w = x.shape[2:]
    if (h, w) != (cfg.input_h, cfg.input_w):
        raise ConfigError(f"stage input: generator built for {cfg.input_h}x{cfg.input_w}, "
                          f"got {h}x{w}")
    feat = _conv(x, params, "stem")
    trunk = _conv(rmrdb_chain(feat, params, cfg), params, "trunk_conv")
    y = feat + trunk
    for i in range(cfg.upsample_stages):
        y = upsample_2x(y, params, f"up.{i}")
    y = T.leaky_relu(_conv(y, params, "hr_conv"))
    kh, kw = cfg.down_kernel
    for i in range(cfg.downsample_stages):
        if y.shape[2] % 2:
            raise ConfigError(f"stage down.{i}: odd first axis {y.shape[2]}")
        y = selective_downsample(y, params, f"down.{i}", cfg.down_stride, (kh // 2, kw // 2))
    y = _conv(y, params, "out_conv")
    return T.reshape(y, y.shape[1:]) if unbatched else y


def batch_norm(x: Tensor, params: Params, name: str, training: bool,
               stats_out: dict[str, np.ndarray] | None = None) -> Tensor:
    """Per-channel normalization of ``(N, C, H, W)``.

    In training mode batch statistics are used and updated running
    statistics are written to ``stats_out`` (if given) instead of mutating
    ``params``.
    """
    g = T.reshape(params[f"{name}.g"], (1, -1, 1, 1))
    b = T.reshape(params[f"{name}.b"], (1, -1, 1, 1))
    rm = params[f"{name}.running_mean"]
    rv = params[f"{name}.running_var"]
    if training:
        mu = T.reduce(x, "mean", (0, 2, 3), keepdims=True)
        xc = x - mu
        var = T.reduce(xc * xc, "mean", (0, 2, 3), keepdims=True)
        if stats_out is not None:
            count = x.size // x.shape[1]
            unbiased = var.data.reshape(-1) * count / max(count - 1, 1)
            stats_out[f"{name}.running_mean"] = (
                (1 - BN_MOMENTUM) * rm.data + BN_MOMENTUM * mu.data.reshape(-1)).astype(rm.dtype)
            stats_out[f"{name}.running_var"] = (
                (1 - BN_MOMENTUM) * rv.data + BN_MOMENTUM * unbiased).astype(rv.dtype)
        xhat = xc / T.sqrt(var + BN_EPS)
    else:
        mu = Tensor(rm.data.reshape(1, -1, 1, 1))
        inv = Tensor((1.0 / np.sqrt(rv.data + BN_EPS)).reshape(1, -1, 1, 1))
        xhat = (x - mu) * inv
    return xhat * g + b


def discriminator_forward(img: Tensor, params: Params, cfg: DiscriminatorConfig,
                          training: bool = False,
                          stats_out: dict[str, np.ndarray] | None = None) -> tuple[Tensor, Tensor]:
    """Return ``(logit_map, logits)``; ``logits`` has one raw score per image.

    No sigmoid is applied; the relativistic loss owns it.
    """
    x, _ = _batched(img)
    h, w = x.shape[2:]
    if h < cfg.min_size or w < cfg.min_size:
        raise ConfigError(f"discriminator input {h}x{w} is below the {cfg.min_size}px minimum")
    for i, (_, _, s) in enumerate(cfg.channels()):
        x = _conv(x, params, f"body.{i}", (s, s), (1, 1))
        if i > 0:
            x = batch_norm(x, params, f"body.{i}.bn", training, stats_out)
        x = T.leaky_relu(x)
    fmap = _conv(x, params, "head")
    logits = T.reduce(fmap, "mean", (1, 2, 3))
    return fmap, logits
