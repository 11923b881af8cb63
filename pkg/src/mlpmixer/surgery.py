"""Weight-space transforms for the Mixer.

``permute_weights`` builds the parameters that make a model fed with
patch-shuffled / pixel-shuffled images compute exactly what the original model
computes on the original images. ``expand_for_resolution`` widens the
token-mixing MLPs with block-diagonal copies so a model accepts K*K times more
tokens and treats each K x K part of the enlarged image independently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ConfigError, MixerConfig, MixerParams


class UnsupportedVariant(ValueError):
    pass


@dataclass(frozen=True)
class PermSpec:
    token_perm: np.ndarray  # new token t holds old token token_perm[t]
    pixel_perm: np.ndarray  # new in-patch index q holds old index pixel_perm[q]
    global_perm: np.ndarray | None = None  # over the flattened H*W*ch image

    def __post_init__(self):
        for name in ("token_perm", "pixel_perm", "global_perm"):
            perm = getattr(self, name)
            if perm is None:
                continue
            perm = np.asarray(perm, dtype=np.int64)
            if not np.array_equal(np.sort(perm), np.arange(perm.size)):
                raise ValueError(f"{name} is not a permutation of 0..{perm.size - 1}")
            object.__setattr__(self, name, perm)

    @classmethod
    def identity(cls, config: MixerConfig) -> "PermSpec":
        return cls(np.arange(config.seq_len), np.arange(config.patch_dim))

    def inverse(self) -> "PermSpec":
        inv = lambda p: None if p is None else np.argsort(p)
        return PermSpec(inv(self.token_perm), inv(self.pixel_perm), inv(self.global_perm))

    def compose(self, other: "PermSpec") -> "PermSpec":
        """Spec equivalent to applying ``other`` first, then ``self``."""
        glob = None
        if self.global_perm is not None or other.global_perm is not None:
            n = (self.global_perm if self.global_perm is not None else other.global_perm).size
            a = other.global_perm if other.global_perm is not None else np.arange(n)
            b = self.global_perm if self.global_perm is not None else np.arange(n)
            glob = a[b]
        return PermSpec(other.token_perm[self.token_perm], other.pixel_perm[self.pixel_perm], glob)


@dataclass(frozen=True)
class ExpandSpec:
    k: int
    base_grid: tuple[int, int]

    @property
    def order_map(self) -> np.ndarray:
        return block_split_order(self.k, self.base_grid)


def _check_geometry(images: np.ndarray, spec: PermSpec, config: MixerConfig) -> None:
    h, w, ch = config.image
    if images.shape[-3:] != (h, w, ch):
        raise ValueError(f"image shape {images.shape[-3:]} does not match {config.image}")
    if spec.token_perm.size != config.seq_len or spec.pixel_perm.size != config.patch_dim:
        raise ValueError(
            f"spec sizes ({spec.token_perm.size}, {spec.pixel_perm.size}) do not match "
            f"S={config.seq_len}, patch dim={config.patch_dim}")
    if spec.global_perm is not None and spec.global_perm.size != h * w * ch:
        raise ValueError(f"global_perm has {spec.global_perm.size} entries, image has {h * w * ch}")


def permute_input(images, spec: PermSpec, config: MixerConfig) -> np.ndarray:
    """Apply the patch pipeline (token order + shared in-patch pixel order) and then,
    if present, the global pixel permutation. Works on one image or a batch."""
    images = np.asarray(images)
    _check_geometry(images, spec, config)
    single = images.ndim == 3
    x = images[None] if single else images
    b = x.shape[0]
    h, w, ch = config.image
    p = config.patch
    gh, gw = config.grid
    patches = x.reshape(b, gh, p, gw, p, ch).transpose(0, 1, 3, 2, 4, 5).reshape(b, gh * gw, p * p * ch)
    patches = patches[:, spec.token_perm][:, :, spec.pixel_perm]
    out = patches.reshape(b, gh, gw, p, p, ch).transpose(0, 1, 3, 2, 4, 5).reshape(b, h, w, ch)
    if spec.global_perm is not None:
        out = out.reshape(b, -1)[:, spec.global_perm].reshape(b, h, w, ch)
    return out[0] if single else out


def permute_weights(params: MixerParams, spec: PermSpec, config: MixerConfig) -> MixerParams:
    """Parameters ``q`` with ``forward(permute_input(x), q) == forward(x, params)``.

    With token permutation matrix P (P[t, token_perm[t]] = 1): w1 -> w1 P^T,
    w2 -> P w2, b2 -> P b2; stem rows follow the pixel permutation. Everything
    else is unchanged.
    """
    if config.variant != "standard" or config.expand_factor != 1:
        raise UnsupportedVariant(f"permute_weights supports the standard variant only, got {config.variant!r}")
    if spec.global_perm is not None:
        raise UnsupportedVariant("no weight transform exists for a global pixel permutation")
    if spec.token_perm.size != config.seq_len or spec.pixel_perm.size != config.patch_dim:
        raise ValueError("spec sizes do not match config")
    tp, pp = spec.token_perm, spec.pixel_perm
    out = dict(params)
    out["stem_w"] = params["stem_w"][pp]
    for i in range(config.num_blocks):
        pre = f"block{i}."
        out[pre + "w1"] = params[pre + "w1"][:, tp]
        out[pre + "w2"] = params[pre + "w2"][tp]
        out[pre + "b2"] = params[pre + "b2"][tp]
    return out


def block_split_order(k: int, base_grid: tuple[int, int]) -> np.ndarray:
    """Index map from raster order over a (k*gh) x (k*gw) patch grid to the
    concatenation of k*k raster-ordered sub-grids (parts themselves in raster
    order). ``out = seq[order]``."""
    if k < 1:
        raise ConfigError(f"expansion factor must be >= 1, got {k}")
    gh, gw = base_grid
    rows, cols = k * gh, k * gw
    r, c = np.divmod(np.arange(rows * cols), cols)
    part = (r // gh) * k + (c // gw)
    within = (r % gh) * gw + (c % gw)
    order = np.empty(rows * cols, dtype=np.int64)
    order[part * gh * gw + within] = np.arange(rows * cols)
    return order


def reorder_tokens_block_split(seq: np.ndarray, k: int, base_grid: tuple[int, int]) -> np.ndarray:
    """Reorder a raster-ordered token sequence ``(..., S', C)`` into block-split order."""
    seq = np.asarray(seq)
    gh, gw = base_grid
    if seq.shape[-2] != k * k * gh * gw:
        raise ValueError(f"sequence length {seq.shape[-2]} != k^2 * S = {k * k * gh * gw}")
    return seq[..., block_split_order(k, base_grid), :]


def expand_for_resolution(params: MixerParams, config: MixerConfig, k: int) -> tuple[MixerParams, MixerConfig]:
    """Block-diagonal token-MLP expansion for a K-times larger input resolution."""
    if k < 1:
        raise ConfigError(f"expansion factor must be >= 1, got {k}")
    if config.variant != "standard":
        raise UnsupportedVariant(f"expansion supports the standard variant only, got {config.variant!r}")
    if k == 1:
        return dict(params), config
    if config.expand_factor != 1:
        raise UnsupportedVariant("expanding an already expanded model is not supported")
    h, w, ch = config.image
    new_config = config.replace(image=(k * h, k * w, ch), mlp_d_s=k * k * config.mlp_d_s, expand_factor=k)
    eye = np.eye(k * k, dtype=params["stem_w"].dtype)
    out = dict(params)
    for i in range(config.num_blocks):
        pre = f"block{i}."
        out[pre + "w1"] = np.kron(eye, params[pre + "w1"])
        out[pre + "w2"] = np.kron(eye, params[pre + "w2"])
        out[pre + "b1"] = np.tile(params[pre + "b1"], k * k)
        out[pre + "b2"] = np.tile(params[pre + "b2"], k * k)
    return out, new_config


def expansion_param_delta(config: MixerConfig, k: int) -> int:
    """Closed-form growth of the parameter count under expansion by ``k``.

    w1 and w2 are stored dense, so each grows from S*D_S to k^4*S*D_S entries
    (the off-diagonal blocks are zeros but still parameters); b1, b2 grow k^2-fold.
    """
    s, d_s = config.seq_len, config.mlp_d_s
    return config.num_blocks * ((k ** 4 - 1) * 2 * s * d_s + (k ** 2 - 1) * (d_s + s))


def mosaic(image: np.ndarray, k: int) -> np.ndarray:
    """Tile one ``(H, W, ch)`` image into a ``(kH, kW, ch)`` k x k mosaic."""
    return np.tile(image, (k, k, 1))
