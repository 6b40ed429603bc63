"""Zero-shot classification, retrieval, linear probing, and the three
inference modes (full view, single masked view, complementary-view
ensemble).

Class embeddings average the normalized embeddings of each prompt
template filled with the class name, then re-normalize. Retrieval ranks
by cosine similarity with stable index order on ties. The linear probe
trains a plain multinomial logistic regression on frozen full-view
features with a cosine-decayed learning rate and no weight decay.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import CLASS_NAMES, Dataset
from .encoders import EncoderConfig, encode_image, encode_text, patchify
from .errors import ConfigError
from .masking import TAG_EVAL, complementary_views, per_sample_rng, sample_patch_mask
from .objective import project_and_normalize
from .tokenizer import Vocab, default_vocab, tokenize_batch

EVAL_BATCH = 128

DESK_TEMPLATES = (
    "a photo of a {}.",
    "an image of a {}.",
    "a picture of a {}.",
    "a drawing of a {}.",
    "a {}.",
    "the {}.",
    "a photo of the {}.",
)


@dataclass
class PromptSet:
    """Prompt templates (one "{}" placeholder each) over a class list."""

    templates: tuple[str, ...]
    classes: tuple[str, ...]

    def __post_init__(self):
        for t in self.templates:
            if t.count("{}") != 1:
                raise ConfigError(f"template needs exactly one placeholder: {t!r}")
        if not self.templates or not self.classes:
            raise ConfigError("prompt set needs at least one template and one class")


def desk_prompts(classes=CLASS_NAMES) -> PromptSet:
    """The 7 templates used for the synthetic shapes domain.

    Runs on real data should import the published prompt set of the
    target benchmark instead.
    """
    return PromptSet(templates=DESK_TEMPLATES, classes=tuple(classes))


@dataclass
class EvalReport:
    metric: str
    value: float
    mode: str  # full | masked | ensemble
    config: str  # short hash of the evaluation setup

    def to_json(self) -> str:
        return json.dumps(
            {"metric": self.metric, "value": self.value, "mode": self.mode,
             "config": self.config}
        )


def config_hash(*parts) -> str:
    text = "|".join(str(p) for p in parts)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


# ---------------------------------------------------------------------------
# embedding extraction (no autodiff tape)


def embed_images(
    params, config: EncoderConfig, images: np.ndarray, mask=None, batch=EVAL_BATCH
) -> np.ndarray:
    """Normalized image embeddings, in row order, computed in chunks."""
    if images.dtype == np.uint8:
        images = images.astype(np.float32) / 255.0
    out = []
    for lo in range(0, images.shape[0], batch):
        chunk = patchify(images[lo : lo + batch], config.image.patch_size)
        m = None
        if mask is not None:
            m = _slice_mask(mask, lo, lo + chunk.shape[0])
        pooled = encode_image(chunk, m, params, config)
        emb = project_and_normalize(pooled, params["proj/img/w"])
        out.append(emb.data)
    return np.concatenate(out, axis=0)


def _slice_mask(mask, lo, hi):
    from .masking import PatchMask

    return PatchMask(ratio=mask.ratio, visible=mask.visible[lo:hi],
                     hidden=mask.hidden[lo:hi], n_total=mask.n_total)


def embed_texts(
    params, config: EncoderConfig, captions, vocab: Optional[Vocab] = None,
    batch=EVAL_BATCH,
) -> np.ndarray:
    """Normalized text embeddings with no masking."""
    vocab = vocab or default_vocab()
    out = []
    for lo in range(0, len(captions), batch):
        tokens = tokenize_batch(captions[lo : lo + batch], vocab, config.text.seq_len)
        pooled = encode_text(tokens, None, params, config)
        emb = project_and_normalize(pooled, params["proj/txt/w"])
        out.append(emb.data)
    return np.concatenate(out, axis=0)


def _renormalize(x: np.ndarray) -> np.ndarray:
    return x / (np.linalg.norm(x, axis=1, keepdims=True) + 1e-8)


def class_embeddings(
    classes, prompts: PromptSet, params, config: EncoderConfig,
    vocab: Optional[Vocab] = None,
) -> np.ndarray:
    """One embedding per class: mean of its filled-template embeddings,
    re-normalized."""
    if not len(classes):
        raise ConfigError("no classes given")
    captions = [t.format(c) for c in classes for t in prompts.templates]
    emb = embed_texts(params, config, captions, vocab)
    per_class = emb.reshape(len(classes), len(prompts.templates), -1).mean(axis=1)
    return _renormalize(per_class)


# ---------------------------------------------------------------------------
# metrics


def zero_shot_classify(image_emb: np.ndarray, class_emb: np.ndarray) -> np.ndarray:
    """Nearest class embedding by cosine similarity; ties go to the
    lowest class index."""
    return np.argmax(image_emb @ class_emb.T, axis=1)


def accuracy(predicted: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predicted == labels))


def recall_at_k(
    query_emb: np.ndarray, gallery_emb: np.ndarray, ground_truth, k: int
) -> float:
    """Fraction of queries whose true match ranks in the top k by cosine
    similarity (descending; ties broken by gallery index)."""
    if k > gallery_emb.shape[0]:
        raise ConfigError(f"k={k} exceeds gallery size {gallery_emb.shape[0]}")
    sims = query_emb @ gallery_emb.T
    order = np.argsort(-sims, axis=1, kind="stable")
    gt = np.asarray(ground_truth).reshape(-1, 1)
    return float(np.mean((order[:, :k] == gt).any(axis=1)))


@dataclass
class ProbeConfig:
    lr: float = 2.0
    epochs: int = 300
    batch_size: int = 512
    train_fraction: float = 0.8
    seed: int = 0


def linear_probe(
    features: np.ndarray, labels: np.ndarray, probe: ProbeConfig = ProbeConfig()
) -> tuple[tuple[np.ndarray, np.ndarray], float]:
    """Multinomial logistic regression on frozen features.

    Plain mini-batch gradient descent with cosine-decayed lr and no
    weight decay; returns ((weights, bias), held-out accuracy).
    """
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    if classes.size < 2:
        raise ConfigError("linear probe needs at least two classes")
    k = int(classes.max()) + 1
    n, d = features.shape
    rng = np.random.default_rng(probe.seed)
    order = rng.permutation(n)
    n_train = int(probe.train_fraction * n)
    if n_train == 0 or n_train == n:
        raise ConfigError(f"degenerate train fraction {probe.train_fraction}")
    tr, te = order[:n_train], order[n_train:]

    w = np.zeros((d, k), dtype=np.float64)
    b = np.zeros(k, dtype=np.float64)
    x_tr, y_tr = features[tr].astype(np.float64), labels[tr]
    onehot = np.eye(k)[y_tr]
    steps_per_epoch = max(1, n_train // probe.batch_size)
    total = probe.epochs * steps_per_epoch
    t = 0
    for epoch in range(probe.epochs):
        perm = rng.permutation(n_train)
        for s in range(steps_per_epoch):
            idx = perm[s * probe.batch_size : (s + 1) * probe.batch_size]
            if idx.size == 0:
                continue
            logits = x_tr[idx] @ w + b
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            g = (p - onehot[idx]) / idx.size
            lr = probe.lr * 0.5 * (1.0 + np.cos(np.pi * t / total))
            w -= lr * (x_tr[idx].T @ g)
            b -= lr * g.sum(axis=0)
            t += 1
    pred = np.argmax(features[te].astype(np.float64) @ w + b, axis=1)
    return (w, b), float(np.mean(pred == labels[te]))


# ---------------------------------------------------------------------------
# inference modes


def zero_shot_accuracy(
    params, config: EncoderConfig, dataset: Dataset, prompts: PromptSet,
    image_emb: Optional[np.ndarray] = None, vocab: Optional[Vocab] = None,
) -> float:
    class_emb = class_embeddings(prompts.classes, prompts, params, config, vocab)
    if image_emb is None:
        image_emb = embed_images(params, config, dataset.images)
    return accuracy(zero_shot_classify(image_emb, class_emb), dataset.labels)


def eval_inference_modes(
    params,
    config: EncoderConfig,
    dataset: Dataset,
    ratio: float,
    prompts: Optional[PromptSet] = None,
    vocab: Optional[Vocab] = None,
    seed: int = 0,
) -> list[EvalReport]:
    """Zero-shot accuracy under full, masked, and ensemble inference.

    Full view encodes intact images; masked draws one random mask per
    image; ensemble encodes the complementary views of a per-image
    partition and averages the normalized embeddings, re-normalizing
    the mean.
    """
    prompts = prompts or desk_prompts()
    n = len(dataset)
    n_patches = config.image.num_patches
    class_emb = class_embeddings(prompts.classes, prompts, params, config, vocab)
    labels = dataset.labels
    cfg_hash = config_hash(config, ratio, seed, "modes")

    def report(mode, emb):
        value = accuracy(zero_shot_classify(emb, class_emb), labels)
        return EvalReport(metric="zero_shot_acc", value=value, mode=mode, config=cfg_hash)

    full = report("full", embed_images(params, config, dataset.images))

    rng = per_sample_rng(seed, TAG_EVAL, 0, 0)
    one_mask = sample_patch_mask(n_patches, ratio, rng, batch_size=n)
    masked = report("masked", embed_images(params, config, dataset.images, mask=one_mask))

    views = complementary_views(n_patches, ratio, rng, batch_size=n)
    acc = np.zeros((n, class_emb.shape[1]))
    for vm in views:
        acc += _renormalize(embed_images(params, config, dataset.images, mask=vm))
    ensemble = report("ensemble", _renormalize(acc / len(views)))
    return [full, masked, ensemble]
