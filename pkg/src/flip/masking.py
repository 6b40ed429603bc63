"""Patch and token masks: which positions an encoder actually sees.

A mask stores, per sample, the sorted visible indices and the sorted
hidden complement. Visible counts use round((1 - ratio) * n) with
ties-to-even, which lands exactly on the usual ratios for 16 and 196
patches. Sampling is seedable and per-sample independent; trainers use
counter-based seeds (global seed, stage tag, epoch, sample index) so
evaluation order and parallelism never change the draw.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tokenizer import TokenizedBatch

# stage tags for counter-based seeding
TAG_PATCH_MASK = 1
TAG_TEXT_MASK = 2
TAG_INIT = 3
TAG_SHUFFLE = 4
TAG_DATA = 5
TAG_EVAL = 6

POLICIES = ("none", "random", "prioritized")


def per_sample_rng(global_seed: int, tag: int, epoch: int, index: int) -> np.random.Generator:
    """Generator derived from a counter, stable across platforms and order."""
    return np.random.default_rng(np.random.SeedSequence([global_seed, tag, epoch, index]))


def visible_count(n: int, ratio: float) -> int:
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"mask ratio must be in [0, 1), got {ratio}")
    v = round((1.0 - ratio) * n)
    if v == 0 and n > 0:
        raise ConfigError(f"ratio {ratio} leaves no visible positions out of {n}")
    return v


@dataclass
class PatchMask:
    """Per-sample visible/hidden index sets over n_total positions."""

    ratio: float
    visible: np.ndarray  # int64 [B, v], sorted per row
    hidden: np.ndarray  # int64 [B, n_total - v], sorted per row
    n_total: int

    @property
    def batch_size(self) -> int:
        return self.visible.shape[0]

    @property
    def n_visible(self) -> int:
        return self.visible.shape[1]


@dataclass
class TextMask(PatchMask):
    policy: str = "none"


def _split_visible(n: int, v: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    return np.sort(perm[:v]), np.sort(perm[v:])


def full_mask(n: int, batch_size: int = 1) -> PatchMask:
    idx = np.tile(np.arange(n, dtype=np.int64), (batch_size, 1))
    empty = np.empty((batch_size, 0), dtype=np.int64)
    return PatchMask(ratio=0.0, visible=idx, hidden=empty, n_total=n)


def sample_patch_mask(
    n: int, ratio: float, rng: np.random.Generator, batch_size: int = 1
) -> PatchMask:
    """Uniform per-sample mask: keep round((1-ratio)*n) positions visible."""
    v = visible_count(n, ratio)
    vis = np.empty((batch_size, v), dtype=np.int64)
    hid = np.empty((batch_size, n - v), dtype=np.int64)
    for b in range(batch_size):
        vis[b], hid[b] = _split_visible(n, v, rng)
    return PatchMask(ratio=ratio, visible=vis, hidden=hid, n_total=n)


def patch_masks_for_samples(
    n: int, ratio: float, global_seed: int, epoch: int, sample_indices
) -> PatchMask:
    """Counter-seeded batch mask: one independent draw per dataset index."""
    sample_indices = np.asarray(sample_indices, dtype=np.int64)
    v = visible_count(n, ratio)
    vis = np.empty((len(sample_indices), v), dtype=np.int64)
    hid = np.empty((len(sample_indices), n - v), dtype=np.int64)
    for b, idx in enumerate(sample_indices):
        rng = per_sample_rng(global_seed, TAG_PATCH_MASK, epoch, int(idx))
        vis[b], hid[b] = _split_visible(n, v, rng)
    return PatchMask(ratio=ratio, visible=vis, hidden=hid, n_total=n)


def _prioritized_row(length, valid_len, mask_count, rng):
    pads = np.arange(valid_len, length)
    if mask_count <= pads.size:
        masked = rng.choice(pads, size=mask_count, replace=False)
    else:
        extra = rng.choice(np.arange(valid_len), size=mask_count - pads.size, replace=False)
        masked = np.concatenate([pads, extra])
    masked = np.sort(masked)
    vis = np.setdiff1d(np.arange(length), masked, assume_unique=True)
    return vis, masked


def sample_text_mask(
    batch: TokenizedBatch,
    ratio: float,
    policy: str,
    rng: np.random.Generator | None = None,
) -> TextMask:
    """Token mask over a tokenized batch.

    ``random`` draws uniformly over all positions. ``prioritized`` masks
    padding positions first and only then draws from valid tokens, so no
    valid token is removed while an unmasked padding token remains.
    Masked tokens are removed from the sequence entirely, not replaced
    by a mask token.
    """
    if policy not in POLICIES:
        raise ConfigError(f"unknown text mask policy {policy!r}, expected one of {POLICIES}")
    length = batch.seq_len
    if policy == "none":
        m = full_mask(length, batch.batch_size)
        return TextMask(ratio=0.0, visible=m.visible, hidden=m.hidden,
                        n_total=length, policy=policy)
    if rng is None:
        raise ConfigError(f"policy {policy!r} needs an rng")
    v = visible_count(length, ratio)
    vis = np.empty((batch.batch_size, v), dtype=np.int64)
    hid = np.empty((batch.batch_size, length - v), dtype=np.int64)
    for b in range(batch.batch_size):
        if policy == "random":
            vis[b], hid[b] = _split_visible(length, v, rng)
        else:
            vis[b], hid[b] = _prioritized_row(length, int(batch.valid_lengths[b]),
                                              length - v, rng)
    return TextMask(ratio=ratio, visible=vis, hidden=hid, n_total=length, policy=policy)


def text_masks_for_samples(
    batch: TokenizedBatch,
    ratio: float,
    policy: str,
    global_seed: int,
    epoch: int,
    sample_indices,
) -> TextMask:
    """Counter-seeded variant of sample_text_mask (one draw per dataset index)."""
    if policy == "none":
        return sample_text_mask(batch, ratio, policy)
    length = batch.seq_len
    v = visible_count(length, ratio)
    vis = np.empty((batch.batch_size, v), dtype=np.int64)
    hid = np.empty((batch.batch_size, length - v), dtype=np.int64)
    for b, idx in enumerate(np.asarray(sample_indices, dtype=np.int64)):
        rng = per_sample_rng(global_seed, TAG_TEXT_MASK, epoch, int(idx))
        if policy == "random":
            vis[b], hid[b] = _split_visible(length, v, rng)
        else:
            vis[b], hid[b] = _prioritized_row(length, int(batch.valid_lengths[b]),
                                              length - v, rng)
    return TextMask(ratio=ratio, visible=vis, hidden=hid, n_total=length, policy=policy)


def complementary_views(
    n: int, ratio: float, rng: np.random.Generator, batch_size: int = 1
) -> list[PatchMask]:
    """Disjoint equal-size visible sets that together cover all n positions.

    Needs 1/(1-ratio) to be an integer k dividing n (k views): ratio 0.5
    gives 2 views, 0.75 gives 4.
    """
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"mask ratio must be in [0, 1), got {ratio}")
    k_float = 1.0 / (1.0 - ratio)
    k = round(k_float)
    if abs(k_float - k) > 1e-9:
        raise ConfigError(f"ratio {ratio} does not yield an integer view count (1/(1-r)={k_float:.4f})")
    if n % k != 0:
        raise ConfigError(f"{k} views do not evenly partition {n} positions")
    m = n // k
    views = [np.empty((batch_size, m), dtype=np.int64) for _ in range(k)]
    for b in range(batch_size):
        perm = rng.permutation(n)
        for j in range(k):
            views[j][b] = np.sort(perm[j * m : (j + 1) * m])
    out = []
    for j in range(k):
        hid = np.stack(
            [np.setdiff1d(np.arange(n), views[j][b], assume_unique=True)
             for b in range(batch_size)]
        )
        out.append(PatchMask(ratio=ratio, visible=views[j], hidden=hid, n_total=n))
    return out
