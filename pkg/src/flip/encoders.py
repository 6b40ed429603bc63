"""Image and text transformer encoders with sparse visible-token encoding.

The image tower is a pre-norm ViT that runs only on the visible patches:
raw patches are gathered by the mask before the linear patch embedding,
so every projection, attention and MLP in the tower works on the short
v-length sequence. Positional embeddings are indexed by the original
patch position, which also means no interpolation is needed when the
same weights later run on full-length sequences.

The text tower is a non-autoregressive transformer over fixed-length
token sequences. Padding tokens are hidden from attention keys and from
pooling, so an embedding depends only on the valid tokens and their
positions; visible padding is inert. Both towers end with a final
layer norm and average pooling (no class token).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import truncnorm

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError
from .masking import PatchMask, TextMask, full_mask, per_sample_rng, TAG_INIT
from .tokenizer import TokenizedBatch, default_vocab

ATTN_MASK_VALUE = -1e9
INIT_STD = 0.02
MLP_RATIO = 4


@dataclass(frozen=True)
class ImageTowerConfig:
    layers: int
    width: int
    heads: int
    patch_size: int
    image_size: int

    @property
    def num_patches(self) -> int:
        side = self.image_size // self.patch_size
        return side * side

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3


@dataclass(frozen=True)
class TextTowerConfig:
    layers: int
    width: int
    heads: int
    seq_len: int = 32
    vocab_size: int = 0


@dataclass(frozen=True)
class EncoderConfig:
    image: ImageTowerConfig
    text: TextTowerConfig
    embed_dim: int

    def __post_init__(self):
        if self.image.image_size % self.image.patch_size != 0:
            raise ConfigError(
                f"image size {self.image.image_size} not divisible by patch size {self.image.patch_size}"
            )
        for name, tower in (("image", self.image), ("text", self.text)):
            if tower.width % tower.heads != 0:
                raise ConfigError(
                    f"{name} width {tower.width} not divisible by heads {tower.heads}"
                )


def preset(name: str) -> EncoderConfig:
    """Named encoder geometries.

    "B-like" / "L-like" / "H-like" mirror the standard CLIP-style ViT
    pairings (e.g. L: image 24x1024x16 at patch 16, text 12x768x12,
    embedding 768). "tiny" and "small" are desk-scale geometries for
    32x32 inputs.
    """
    desk_vocab = len(default_vocab())
    table = {
        "tiny": EncoderConfig(
            image=ImageTowerConfig(4, 64, 4, 8, 32),
            text=TextTowerConfig(2, 64, 4, 32, desk_vocab),
            embed_dim=64,
        ),
        "small": EncoderConfig(
            image=ImageTowerConfig(6, 96, 6, 8, 32),
            text=TextTowerConfig(3, 96, 6, 32, desk_vocab),
            embed_dim=96,
        ),
        "B-like": EncoderConfig(
            image=ImageTowerConfig(12, 768, 12, 16, 224),
            text=TextTowerConfig(12, 512, 8, 32, 49408),
            embed_dim=512,
        ),
        "L-like": EncoderConfig(
            image=ImageTowerConfig(24, 1024, 16, 16, 224),
            text=TextTowerConfig(12, 768, 12, 32, 49408),
            embed_dim=768,
        ),
        "H-like": EncoderConfig(
            image=ImageTowerConfig(32, 1280, 16, 14, 224),
            text=TextTowerConfig(24, 1024, 16, 32, 49408),
            embed_dim=1024,
        ),
    }
    if name not in table:
        raise ConfigError(f"unknown preset {name!r}, expected one of {sorted(table)}")
    return table[name]


PRESET_NAMES = ("tiny", "small", "B-like", "L-like", "H-like")


# ---------------------------------------------------------------------------
# patch grid


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """[B,H,W,C] images to [B, N, P*P*C] rows in raster order of the grid."""
    if images.ndim != 4:
        raise ConfigError(f"expected [B,H,W,C] images, got shape {images.shape}")
    b, h, w, c = images.shape
    p = patch_size
    if h % p or w % p:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = images.reshape(b, gh, p, gw, p, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)  # [B, gh, gw, p, p, c]
    return x.reshape(b, gh * gw, p * p * c)


def unpatchify(patches: np.ndarray, patch_size: int, image_size: int) -> np.ndarray:
    """Inverse of patchify."""
    b, n, d = patches.shape
    p = patch_size
    g = image_size // p
    c = d // (p * p)
    x = patches.reshape(b, g, g, p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, image_size, image_size, c)


# ---------------------------------------------------------------------------
# parameters


def _trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    return truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng)


def _tower_block_params(params, prefix, width, rng):
    d = width
    hidden = MLP_RATIO * d
    params[f"{prefix}/ln1/g"] = ad.parameter(np.ones(d))
    params[f"{prefix}/ln1/b"] = ad.parameter(np.zeros(d))
    for proj in ("q", "k", "v"):
        params[f"{prefix}/{proj}/w"] = ad.parameter(_trunc_normal(rng, (d, d)))
        params[f"{prefix}/{proj}/b"] = ad.parameter(np.zeros(d))
    params[f"{prefix}/attn_out/w"] = ad.parameter(_trunc_normal(rng, (d, d)))
    params[f"{prefix}/attn_out/b"] = ad.parameter(np.zeros(d))
    params[f"{prefix}/ln2/g"] = ad.parameter(np.ones(d))
    params[f"{prefix}/ln2/b"] = ad.parameter(np.zeros(d))
    params[f"{prefix}/mlp1/w"] = ad.parameter(_trunc_normal(rng, (d, hidden)))
    params[f"{prefix}/mlp1/b"] = ad.parameter(np.zeros(hidden))
    params[f"{prefix}/mlp2/w"] = ad.parameter(_trunc_normal(rng, (hidden, d)))
    params[f"{prefix}/mlp2/b"] = ad.parameter(np.zeros(d))


def init_params(
    config: EncoderConfig, seed: int = 0, with_decoder: bool = False,
    decoder_layers: int = 2,
) -> dict[str, Tensor]:
    """Fresh parameter set: truncated-normal (0.02) projections, zero biases,
    unit gains, learnable temperature at log(1/0.07)."""
    rng = per_sample_rng(seed, TAG_INIT, 0, 0)
    img, txt = config.image, config.text
    params: dict[str, Tensor] = {}

    params["img/patch_embed/w"] = ad.parameter(_trunc_normal(rng, (img.patch_dim, img.width)))
    params["img/patch_embed/b"] = ad.parameter(np.zeros(img.width))
    params["img/pos"] = ad.parameter(_trunc_normal(rng, (img.num_patches, img.width)))
    for i in range(img.layers):
        _tower_block_params(params, f"img/blk{i}", img.width, rng)
    params["img/ln_f/g"] = ad.parameter(np.ones(img.width))
    params["img/ln_f/b"] = ad.parameter(np.zeros(img.width))

    params["txt/tok_emb"] = ad.parameter(_trunc_normal(rng, (txt.vocab_size, txt.width)))
    params["txt/pos"] = ad.parameter(_trunc_normal(rng, (txt.seq_len, txt.width)))
    for i in range(txt.layers):
        _tower_block_params(params, f"txt/blk{i}", txt.width, rng)
    params["txt/ln_f/g"] = ad.parameter(np.ones(txt.width))
    params["txt/ln_f/b"] = ad.parameter(np.zeros(txt.width))

    params["proj/img/w"] = ad.parameter(_trunc_normal(rng, (img.width, config.embed_dim)))
    params["proj/txt/w"] = ad.parameter(_trunc_normal(rng, (txt.width, config.embed_dim)))
    params["logit_scale"] = ad.parameter(np.full(1, math.log(1.0 / 0.07)))

    if with_decoder:
        dd = img.width // 2
        if dd % img.heads != 0:
            raise ConfigError(f"decoder width {dd} not divisible by heads {img.heads}")
        params["dec/embed/w"] = ad.parameter(_trunc_normal(rng, (img.width, dd)))
        params["dec/embed/b"] = ad.parameter(np.zeros(dd))
        params["dec/mask_token"] = ad.parameter(_trunc_normal(rng, (1, dd)))
        params["dec/pos"] = ad.parameter(_trunc_normal(rng, (img.num_patches, dd)))
        for i in range(decoder_layers):
            _tower_block_params(params, f"dec/blk{i}", dd, rng)
        params["dec/ln_f/g"] = ad.parameter(np.ones(dd))
        params["dec/ln_f/b"] = ad.parameter(np.zeros(dd))
        params["dec/out/w"] = ad.parameter(_trunc_normal(rng, (dd, img.patch_dim)))
        params["dec/out/b"] = ad.parameter(np.zeros(img.patch_dim))
    return params


# ---------------------------------------------------------------------------
# forward passes


def transformer_block(
    x: Tensor, params: dict, prefix: str, heads: int, attn_bias: Tensor | None = None
) -> Tensor:
    """Pre-norm block: x + attn(ln(x)); x + mlp(ln(x)). No dropout."""
    b, t, d = x.shape
    dh = d // heads
    p = params

    h = ad.layer_norm(x, p[f"{prefix}/ln1/g"], p[f"{prefix}/ln1/b"])
    h2 = ad.reshape(h, (b * t, d))

    def project(name):
        rows = ad.add(ad.matmul(h2, p[f"{prefix}/{name}/w"]), p[f"{prefix}/{name}/b"])
        return ad.transpose(ad.reshape(rows, (b, t, heads, dh)), (0, 2, 1, 3))

    q, k, v = project("q"), project("k"), project("v")
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if attn_bias is not None:
        scores = ad.add(scores, attn_bias)
    attn = ad.softmax_rows(scores)
    ctx = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (b * t, d))
    ctx = ad.add(ad.matmul(ctx, p[f"{prefix}/attn_out/w"]), p[f"{prefix}/attn_out/b"])
    x = ad.add(x, ad.reshape(ctx, (b, t, d)))

    h = ad.layer_norm(x, p[f"{prefix}/ln2/g"], p[f"{prefix}/ln2/b"])
    h2 = ad.reshape(h, (b * t, d))
    m = ad.gelu(ad.add(ad.matmul(h2, p[f"{prefix}/mlp1/w"]), p[f"{prefix}/mlp1/b"]))
    m = ad.add(ad.matmul(m, p[f"{prefix}/mlp2/w"]), p[f"{prefix}/mlp2/b"])
    return ad.add(x, ad.reshape(m, (b, t, d)))


def _check_mask(mask: PatchMask, n: int, what: str):
    if mask.n_total != n or (mask.visible.size and mask.visible.max() >= n):
        raise DimensionError(
            f"{what} mask covers {mask.n_total} positions, encoder expects {n}"
        )


def encode_image(
    patches: np.ndarray,
    mask: PatchMask | None,
    params: dict,
    config: EncoderConfig,
    return_tokens: bool = False,
):
    """Pooled image features from the visible patches only.

    The mask selects raw patches before the patch embedding, positional
    embeddings are looked up by original patch index, and the tower runs
    on the v-length sequence. ``mask=None`` (or a ratio-0 mask, whose
    sorted visible set is the identity) is the dense path: same code,
    full gather width.
    """
    img = config.image
    b, n, pd = patches.shape
    if n != img.num_patches or pd != img.patch_dim:
        raise DimensionError(
            f"patches {patches.shape[1:]} do not match config (N={img.num_patches}, dim={img.patch_dim})"
        )
    if mask is None:
        mask = full_mask(n, b)
    _check_mask(mask, n, "patch")
    v = mask.n_visible

    raw = patches[np.arange(b)[:, None], mask.visible]  # [B, v, pd], constant input
    x = ad.add(
        ad.matmul(Tensor(raw.reshape(b * v, pd)), params["img/patch_embed/w"]),
        params["img/patch_embed/b"],
    )
    pos = ad.take_rows(params["img/pos"], mask.visible.ravel())
    x = ad.reshape(ad.add(x, pos), (b, v, img.width))
    for i in range(img.layers):
        x = transformer_block(x, params, f"img/blk{i}", img.heads)
    x = ad.layer_norm(x, params["img/ln_f/g"], params["img/ln_f/b"])
    pooled = ad.mean_over_axis(x, axis=1)
    if return_tokens:
        return pooled, x
    return pooled


def encode_text(
    batch: TokenizedBatch,
    mask: TextMask | None,
    params: dict,
    config: EncoderConfig,
) -> Tensor:
    """Pooled text features over visible non-padding tokens.

    Visible padding tokens are masked out of attention keys, so they
    cannot influence any other position; pooling likewise skips them. A
    sample whose visible tokens are all padding falls back to attending
    and pooling over everything visible.
    """
    txt = config.text
    b, length = batch.token_ids.shape
    if length != txt.seq_len:
        raise DimensionError(f"sequence length {length} != configured {txt.seq_len}")
    if mask is None:
        fm = full_mask(length, b)
        mask = TextMask(ratio=0.0, visible=fm.visible, hidden=fm.hidden,
                        n_total=length, policy="none")
    _check_mask(mask, length, "token")
    v = mask.n_visible

    vis_ids = batch.token_ids[np.arange(b)[:, None], mask.visible]  # [B, v]
    tok = ad.take_rows(params["txt/tok_emb"], vis_ids.ravel())
    pos = ad.take_rows(params["txt/pos"], mask.visible.ravel())
    x = ad.reshape(ad.add(tok, pos), (b, v, txt.width))

    is_valid = mask.visible < batch.valid_lengths[:, None]  # [B, v]
    any_valid = is_valid.any(axis=1)
    key_ok = np.where(any_valid[:, None], is_valid, True)
    bias = Tensor(np.where(key_ok, 0.0, ATTN_MASK_VALUE)[:, None, None, :])

    for i in range(txt.layers):
        x = transformer_block(x, params, f"txt/blk{i}", txt.heads, attn_bias=bias)
    x = ad.layer_norm(x, params["txt/ln_f/g"], params["txt/ln_f/b"])

    counts = key_ok.sum(axis=1, keepdims=True)
    weights = (key_ok / counts)[:, None, :]  # [B, 1, v]
    pooled = ad.matmul(Tensor(weights), x)
    return ad.reshape(pooled, (b, txt.width))
