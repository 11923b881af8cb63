"""MLP-Mixer: patch stem, Mixer blocks, pre-head norm, average pool, linear head.

Parameters live in a flat ``dict[str, np.ndarray]`` keyed by canonical names
(see :func:`param_shapes`). Activations are ``(batch, tokens, channels)``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from . import tensor as T
from .tensor import Tensor

VARIANTS = ("standard", "untied_token", "grouped", "grouped_views")
LN_EPS = 1e-6

MixerParams = Dict[str, np.ndarray]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MixerConfig:
    num_blocks: int
    patch: int
    hidden_c: int
    mlp_d_s: int
    mlp_d_c: int
    image: tuple = (224, 224, 3)
    num_classes: int = 1000
    variant: str = "standard"
    groups: int = 1
    drop_rate: float = 0.0
    stoch_depth: float = 0.0
    # >1 only for models produced by resolution expansion; tokens are then fed
    # as expand_factor**2 raster-ordered sub-grids (see surgery.block_split_order)
    expand_factor: int = 1

    def __post_init__(self):
        object.__setattr__(self, "image", tuple(int(v) for v in self.image))
        h, w, ch = self.image
        p = self.patch
        if p < 1 or h % p or w % p:
            raise ConfigError(f"image {h}x{w} is not divisible into {p}x{p} patches")
        if min(h, w, ch, self.hidden_c, self.mlp_d_s, self.mlp_d_c, self.num_classes) < 1:
            raise ConfigError(f"all extents must be positive: {self}")
        if self.num_blocks < 0:
            raise ConfigError("num_blocks must be >= 0")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.variant in ("grouped", "grouped_views") and (self.groups < 1 or self.hidden_c % self.groups):
            raise ConfigError(f"hidden_c={self.hidden_c} is not divisible by groups={self.groups}")
        if not (0.0 <= self.drop_rate < 1.0 and 0.0 <= self.stoch_depth < 1.0):
            raise ConfigError("drop_rate and stoch_depth must lie in [0, 1)")
        k = self.expand_factor
        if k < 1 or (h // p) % k or (w // p) % k:
            raise ConfigError(f"expand_factor={k} does not split the {h // p}x{w // p} patch grid")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image[0] // self.patch, self.image[1] // self.patch

    @property
    def seq_len(self) -> int:
        return sequence_length(self)

    @property
    def patch_dim(self) -> int:
        return self.image[2] * self.patch * self.patch

    def replace(self, **changes) -> "MixerConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["image"] = list(self.image)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MixerConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


def _named(blocks, patch, c, d_c, d_s, res=224):
    return MixerConfig(num_blocks=blocks, patch=patch, hidden_c=c, mlp_d_s=d_s, mlp_d_c=d_c,
                       image=(res, res, 3), num_classes=1000)


NAMED_CONFIGS: dict[str, MixerConfig] = {
    "S/32": _named(8, 32, 512, 2048, 256),
    "S/16": _named(8, 16, 512, 2048, 256),
    "B/32": _named(12, 32, 768, 3072, 384),
    "B/16": _named(12, 16, 768, 3072, 384),
    "L/32": _named(24, 32, 1024, 4096, 512),
    "L/16": _named(24, 16, 1024, 4096, 512),
    "H/14": _named(32, 14, 1280, 5120, 640),
    "toy": MixerConfig(num_blocks=1, patch=4, hidden_c=8, mlp_d_s=16, mlp_d_c=32,
                       image=(8, 8, 3), num_classes=10),
    "tiny-cifar": MixerConfig(num_blocks=4, patch=4, hidden_c=128, mlp_d_s=64, mlp_d_c=512,
                              image=(32, 32, 3), num_classes=10),
}


def get_config(name_or_path: str) -> MixerConfig:
    """Named config (``B/16``, ``toy``, ...) or a JSON file of config fields."""
    if name_or_path in NAMED_CONFIGS:
        return NAMED_CONFIGS[name_or_path]
    if name_or_path.endswith(".json"):
        with open(name_or_path) as f:
            return MixerConfig.from_dict(json.load(f))
    raise ConfigError(f"unknown config {name_or_path!r}; valid names: {', '.join(NAMED_CONFIGS)}")


def sequence_length(config: MixerConfig) -> int:
    h, w, _ = config.image
    p = config.patch
    if h % p or w % p:
        raise ConfigError(f"image {h}x{w} is not divisible into {p}x{p} patches")
    return (h * w) // (p * p)


# ---------------------------------------------------------------------------
# parameters

def token_mlp_shapes(config: MixerConfig) -> dict[str, tuple]:
    s, c, d_s, g = config.seq_len, config.hidden_c, config.mlp_d_s, config.groups
    if config.variant == "untied_token":
        return {"w1": (c, d_s, s), "b1": (c, d_s), "w2": (c, s, d_s), "b2": (c, s)}
    n = s * g if config.variant in ("grouped", "grouped_views") else s
    return {"w1": (d_s, n), "b1": (d_s,), "w2": (n, d_s), "b2": (n,)}


def param_shapes(config: MixerConfig) -> dict[str, tuple]:
    """Canonical parameter names and shapes, in checkpoint order."""
    c, d_c, k = config.hidden_c, config.mlp_d_c, config.num_classes
    shapes = {"stem_w": (config.patch_dim, c), "stem_b": (c,)}
    token = token_mlp_shapes(config)
    for i in range(config.num_blocks):
        pre = f"block{i}."
        shapes[pre + "ln1_gamma"] = (c,)
        shapes[pre + "ln1_beta"] = (c,)
        if config.variant == "grouped_views":
            shapes[pre + "views_w"] = (c, c)
            shapes[pre + "views_b"] = (c,)
        for name, shp in token.items():
            shapes[pre + name] = shp
        shapes[pre + "ln2_gamma"] = (c,)
        shapes[pre + "ln2_beta"] = (c,)
        shapes[pre + "w3"] = (d_c, c)
        shapes[pre + "b3"] = (d_c,)
        shapes[pre + "w4"] = (c, d_c)
        shapes[pre + "b4"] = (c,)
    shapes["prehead_gamma"] = (c,)
    shapes["prehead_beta"] = (c,)
    shapes["head_w"] = (c, k)
    shapes["head_b"] = (k,)
    return shapes


HEAD_NAMES = ("head_w", "head_b")

# std of a unit normal truncated to [-2, 2]; dividing by it makes the realized std 1/sqrt(fan_in)
_TRUNC2_STD = 0.8796256610342398


def _fan_in(name: str, shape: tuple) -> int:
    if name.endswith(("w1", "w2", "w3", "w4")):
        return shape[-1]  # stored as (out, in)
    return shape[0]  # stem_w, views_w, head_w are (in, out)


def _truncated_normal(rng: np.random.Generator, shape: tuple, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * (std / _TRUNC2_STD)


def init_params(config: MixerConfig, seed: int = 0, dtype=np.float32) -> MixerParams:
    """Truncated-normal kernels (cut at 2 std, realized std 1/sqrt(fan_in)), zero
    biases, unit LayerNorm scales and a zero classifier head."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("gamma"):
            arr = np.ones(shape)
        elif name == "head_w" or not name.endswith(("_w", "w1", "w2", "w3", "w4")):
            arr = np.zeros(shape)
        else:
            arr = _truncated_normal(rng, shape, 1.0 / np.sqrt(_fan_in(name, shape)))
        params[name] = arr.astype(dtype)
    return params


def randomized_params(config: MixerConfig, seed: int = 0, dtype=np.float64,
                      spread: float = 0.5) -> MixerParams:
    """Init, then perturb every tensor (including norms, biases and the head).

    Fresh params have a zero head, which makes logits constant; checks of
    gradients or weight transforms need every tensor to matter.
    """
    params = init_params(config, seed, dtype=np.float64)
    rng = np.random.default_rng([seed, 1])
    for name, arr in params.items():
        noise = rng.standard_normal(arr.shape)
        if name == "head_w":
            arr = noise / np.sqrt(config.hidden_c)
        elif name.endswith("gamma"):
            arr = arr + 0.2 * noise
        else:
            arr = arr + spread * noise * (np.std(arr) if np.std(arr) > 0 else 0.2)
        params[name] = arr.astype(dtype)
    return params


def param_count(config: MixerConfig) -> int:
    """Number of scalars in every parameter except the classifier head."""
    c, d_c, p = config.hidden_c, config.mlp_d_c, config.patch_dim
    token = sum(int(np.prod(s)) for s in token_mlp_shapes(config).values())
    views = c * c + c if config.variant == "grouped_views" else 0
    per_block = 4 * c + token + views + 2 * c * d_c + d_c + c
    return p * c + c + config.num_blocks * per_block + 2 * c


def flops_per_image(config: MixerConfig) -> int:
    """Forward multiply-accumulates per image (matmuls only; biases/norms excluded)."""
    s, c, d_s, d_c = config.seq_len, config.hidden_c, config.mlp_d_s, config.mlp_d_c
    return config.patch_dim * s * c + config.num_blocks * block_macs(config) + c * config.num_classes


def block_macs(config: MixerConfig) -> int:
    s, c, d_s, d_c, g = config.seq_len, config.hidden_c, config.mlp_d_s, config.mlp_d_c, config.groups
    if config.variant in ("grouped", "grouped_views"):
        token = 2 * (c // g) * (s * g) * d_s
    else:
        token = 2 * c * s * d_s
    views = s * c * c if config.variant == "grouped_views" else 0
    return token + views + 2 * s * c * d_c


# ---------------------------------------------------------------------------
# forward

def patchify(images: np.ndarray, config: MixerConfig) -> np.ndarray:
    """``(B, H, W, ch)`` -> ``(B, S, P*P*ch)``; each patch flattened row-major over (py, px, ch).

    Tokens follow raster order over the patch grid, or block-split order for
    expanded models.
    """
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    h, w, ch = config.image
    if images.shape[1:] != (h, w, ch):
        raise T.ShapeError(f"image shape {images.shape[1:]} does not match config {config.image}")
    p = config.patch
    gh, gw = config.grid
    b = images.shape[0]
    x = images.reshape(b, gh, p, gw, p, ch).transpose(0, 1, 3, 2, 4, 5).reshape(b, gh * gw, p * p * ch)
    if config.expand_factor > 1:
        from .surgery import block_split_order
        k = config.expand_factor
        x = x[:, block_split_order(k, (gh // k, gw // k))]
    return x


def bind(params: MixerParams, requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}


def _dropout(x: Tensor, rate: float, rng) -> Tensor:
    if rate <= 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    return T.mul_const(x, keep / (1.0 - rate))


def _drop_path(x: Tensor, rate: float, rng) -> Tensor:
    if rate <= 0.0:
        return x
    keep = rng.random((x.shape[0],) + (1,) * (x.data.ndim - 1)) >= rate
    return T.mul_const(x, keep / (1.0 - rate))


def branch_drop_rates(config: MixerConfig) -> list[float]:
    """Drop probability per residual branch, linear from 0 (first MLP) to s (last MLP)."""
    n = 2 * config.num_blocks
    if n == 0:
        return []
    if n == 1:
        return [0.0]
    return [config.stoch_depth * i / (n - 1) for i in range(n)]


def _token_mix(y: Tensor, p: dict, pre: str, config: MixerConfig, train: bool, rng) -> Tensor:
    """Token-mixing MLP on layer-normed ``y`` (B, S, C); returns (B, S, C)."""
    b, s, c = y.shape
    rate = config.drop_rate if train else 0.0
    variant = config.variant
    if variant == "untied_token":
        cols = T.transpose(y, (2, 0, 1))  # (C, B, S)
        h = T.bmm(cols, T.transpose(p[pre + "w1"], (0, 2, 1)))
        h = T.add_bias(h, T.reshape(p[pre + "b1"], (c, 1, config.mlp_d_s)))
        h = _dropout(T.gelu(h), rate, rng)
        o = T.bmm(h, T.transpose(p[pre + "w2"], (0, 2, 1)))
        o = T.add_bias(o, T.reshape(p[pre + "b2"], (c, 1, s)))
        return T.transpose(_dropout(o, rate, rng), (1, 2, 0))
    g = config.groups if variant in ("grouped", "grouped_views") else 1
    if variant == "grouped_views":
        # G trainable views R^C -> R^{C/G}, stored side by side as one C x C map
        y = T.add_bias(T.matmul(y, p[pre + "views_w"]), p[pre + "views_b"])
        cols = T.transpose(T.reshape(y, (b, s, g, c // g)), (0, 3, 2, 1))
    elif g > 1:
        # G neighbouring columns concatenated: column j, row g*S+s <- X[s, j*G+g]
        cols = T.transpose(T.reshape(y, (b, s, c // g, g)), (0, 2, 3, 1))
    else:
        cols = T.transpose(y, (0, 2, 1))
    cols = T.reshape(cols, (b, c // g, g * s))
    h = _dropout(T.gelu(T.add_bias(T.matmul(cols, T.transpose(p[pre + "w1"])), p[pre + "b1"])), rate, rng)
    o = _dropout(T.add_bias(T.matmul(h, T.transpose(p[pre + "w2"])), p[pre + "b2"]), rate, rng)
    if variant == "grouped_views":
        return T.reshape(T.transpose(T.reshape(o, (b, c // g, g, s)), (0, 3, 2, 1)), (b, s, c))
    if g > 1:
        return T.reshape(T.transpose(T.reshape(o, (b, c // g, g, s)), (0, 3, 1, 2)), (b, s, c))
    return T.transpose(o, (0, 2, 1))


def _channel_mix(y: Tensor, p: dict, pre: str, config: MixerConfig, train: bool, rng) -> Tensor:
    rate = config.drop_rate if train else 0.0
    h = T.gelu(T.add_bias(T.matmul(y, T.transpose(p[pre + "w3"])), p[pre + "b3"]))
    h = _dropout(h, rate, rng)
    o = T.add_bias(T.matmul(h, T.transpose(p[pre + "w4"])), p[pre + "b4"])
    return _dropout(o, rate, rng)


def mixer_block(x: Tensor, p: dict[str, Tensor], index: int, config: MixerConfig,
                mode: str = "eval", rng=None) -> Tensor:
    """One Mixer layer on ``x`` of shape (B, S, C): token mixing then channel mixing,
    each a pre-norm residual branch."""
    train = mode == "train"
    if train and rng is None:
        rng = np.random.default_rng()
    pre = f"block{index}."
    rates = branch_drop_rates(config) if train else []
    y = _token_mix(T.layernorm(x, p[pre + "ln1_gamma"], p[pre + "ln1_beta"], LN_EPS), p, pre, config, train, rng)
    if rates:
        y = _drop_path(y, rates[2 * index], rng)
    u = T.add(x, y)
    y = _channel_mix(T.layernorm(u, p[pre + "ln2_gamma"], p[pre + "ln2_beta"], LN_EPS), p, pre, config, train, rng)
    if rates:
        y = _drop_path(y, rates[2 * index + 1], rng)
    return T.add(u, y)


def embed(images, p: dict[str, Tensor], config: MixerConfig) -> Tensor:
    patches = patchify(images, config).astype(p["stem_w"].dtype, copy=False)
    return T.add_bias(T.matmul(Tensor(patches), p["stem_w"]), p["stem_b"])


def encode(images, p: dict[str, Tensor], config: MixerConfig, mode: str = "eval", rng=None) -> Tensor:
    """Per-token features after the pre-head LayerNorm, shape (B, S, C)."""
    x = embed(images, p, config)
    for i in range(config.num_blocks):
        x = mixer_block(x, p, i, config, mode, rng)
    return T.layernorm(x, p["prehead_gamma"], p["prehead_beta"], LN_EPS)


def apply(images, p: dict[str, Tensor], config: MixerConfig, mode: str = "eval", rng=None) -> Tensor:
    pooled = T.mean(encode(images, p, config, mode, rng), axis=1)
    return T.add_bias(T.matmul(pooled, p["head_w"]), p["head_b"])


def forward(images, params: MixerParams, config: MixerConfig, mode: str = "eval", rng=None) -> np.ndarray:
    """Logits ``(B, K)`` for a batch of normalized images ``(B, H, W, ch)``."""
    return apply(images, bind(params), config, mode, rng).data


def token_features(images, params: MixerParams, config: MixerConfig) -> np.ndarray:
    return encode(images, bind(params), config).data


def pooled_features(images, params: MixerParams, config: MixerConfig) -> np.ndarray:
    return token_features(images, params, config).mean(axis=1)
