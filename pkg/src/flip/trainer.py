"""Optimization loop: AdamW with decoupled weight decay, linear-scaled
learning rate (base_lr * batch / 256) with linear warmup and cosine
decay to zero, masked contrastive pre-training, and a short unmasked
tuning stage at mask ratio 0.

All randomness is counter-based (seed, stage tag, epoch, sample index),
so a fixed seed reproduces bit-identical state and a checkpoint resume
continues the exact same trajectory.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import _join_u48, _split_u48, load_tensors, save_tensors
from .data import Dataset, read_dataset
from .encoders import (
    EncoderConfig,
    ImageTowerConfig,
    PRESET_NAMES,
    TextTowerConfig,
    encode_image,
    encode_text,
    init_params,
    patchify,
    preset,
)
from .errors import ConfigError, DataFormatError, DimensionError
from .flops import count_flops
from .masking import (
    TAG_SHUFFLE,
    full_mask,
    patch_masks_for_samples,
    per_sample_rng,
    text_masks_for_samples,
)
from .objective import (
    EmbeddingBatch,
    LOG_MAX_LOGIT_SCALE,
    LossBundle,
    info_nce,
    project_and_normalize,
    reconstruction_loss,
)
from .tokenizer import Vocab, default_vocab, tokenize_batch

logger = logging.getLogger(__name__)

ADAM_EPS = 1e-8
TUNE_LR_FACTOR = 0.01  # unmasked tuning runs at base_lr / 100
TUNE_SAMPLES_FRACTION = 0.05
TUNE_WARMUP_FRACTION = 0.2


@dataclass
class TrainConfig:
    preset: str = "tiny"
    base_lr: float = 6e-3  # per-256 reference; the linear rule scales it
    batch_size: int = 64
    weight_decay: float = 0.2
    betas: tuple[float, float] = (0.9, 0.95)
    warmup_samples: int = 6_400
    total_samples: int = 192_000
    mask_ratio: float = 0.5
    text_mask_policy: str = "prioritized"
    text_mask_ratio: float = 0.5
    rec_weight: float = 0.0
    seed: int = 0
    train_data: str = ""
    eval_data: str = ""
    eval_every_samples: int = 0  # 0: only the final point

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.total_samples < self.warmup_samples:
            raise ConfigError(
                f"total_samples {self.total_samples} < warmup_samples {self.warmup_samples}"
            )

    @property
    def total_steps(self) -> int:
        return self.total_samples // self.batch_size


def effective_lr(config: TrainConfig) -> float:
    """Linear scaling rule: lr = base_lr * batch_size / 256."""
    if config.batch_size <= 0:
        raise ConfigError("batch_size must be positive")
    return config.base_lr * config.batch_size / 256.0


def lr_at(samples_seen: int, config: TrainConfig) -> float:
    """Linear warmup to the effective lr, then cosine decay to 0."""
    if not 0 <= samples_seen <= config.total_samples:
        raise ConfigError(
            f"samples_seen {samples_seen} outside [0, {config.total_samples}]"
        )
    peak = effective_lr(config)
    if samples_seen <= config.warmup_samples:
        if config.warmup_samples == 0:
            return peak
        return peak * samples_seen / config.warmup_samples
    span = config.total_samples - config.warmup_samples
    progress = (samples_seen - config.warmup_samples) / span
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# config file (UTF-8 "key = value" lines)


def save_config(config: TrainConfig, path) -> None:
    lines = []
    for f_ in dataclasses.fields(config):
        value = getattr(config, f_.name)
        if f_.name == "betas":
            value = f"{value[0]},{value[1]}"
        lines.append(f"{f_.name} = {value}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_config(path) -> TrainConfig:
    fields = {f_.name: f_ for f_ in dataclasses.fields(TrainConfig)}
    kwargs = {}
    for lineno, line in enumerate(Path(path).read_text("utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in fields:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        ftype = fields[key].type
        if key == "betas":
            parts = value.replace("(", "").replace(")", "").split(",")
            kwargs[key] = (float(parts[0]), float(parts[1]))
        elif ftype == "int":
            kwargs[key] = int(value)
        elif ftype == "float":
            kwargs[key] = float(value)
        else:
            kwargs[key] = value
    return TrainConfig(**kwargs)


# ---------------------------------------------------------------------------
# state


@dataclass
class TrainState:
    config: TrainConfig
    encoder_config: EncoderConfig
    params: dict[str, Tensor]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    step: int = 0
    adam_t: int = 0  # steps since the moments were (re)initialized
    samples_seen: int = 0
    aborted_steps: int = 0


def init_train_state(config: TrainConfig) -> TrainState:
    enc_cfg = preset(config.preset)
    params = init_params(enc_cfg, seed=config.seed, with_decoder=config.rec_weight > 0)
    return TrainState(
        config=config,
        encoder_config=enc_cfg,
        params=params,
        adam_m={k: np.zeros_like(p.data) for k, p in params.items()},
        adam_v={k: np.zeros_like(p.data) for k, p in params.items()},
    )


def reset_moments(state: TrainState) -> None:
    for k, p in state.params.items():
        state.adam_m[k] = np.zeros_like(p.data)
        state.adam_v[k] = np.zeros_like(p.data)
    state.adam_t = 0


def adamw_step(state: TrainState, grads: dict[str, np.ndarray], lr: float) -> bool:
    """Bias-corrected Adam update with decoupled weight decay.

    Decay multiplies parameters by (1 - lr*wd) separately from the
    gradient step; the logit scale is exempt. A non-finite gradient
    aborts the whole step (no update) and is reported, not raised.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            state.aborted_steps += 1
            logger.error("non-finite gradient in %s at step %d; step aborted", name, state.step)
            return False
    beta1, beta2 = state.config.betas
    wd = state.config.weight_decay
    t = state.adam_t + 1
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, g in grads.items():
        m = state.adam_m[name]
        v = state.adam_v[name]
        m += (1.0 - beta1) * (g - m)
        v += (1.0 - beta2) * (g * g - v)
        p = state.params[name].data
        if wd and name != "logit_scale":
            p -= lr * wd * p
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
    state.adam_t = t
    return True


def clamp_logit_scale(state: TrainState) -> None:
    np.minimum(state.params["logit_scale"].data, LOG_MAX_LOGIT_SCALE,
               out=state.params["logit_scale"].data)


def train_step(
    state: TrainState,
    images: np.ndarray,
    captions: list[str],
    *,
    epoch: int = 0,
    sample_indices=None,
    lr: Optional[float] = None,
    mask_ratio: Optional[float] = None,
    vocab: Optional[Vocab] = None,
) -> LossBundle:
    """One optimization step: mask, encode both towers, project, InfoNCE
    (+ optional reconstruction), backward, AdamW, clamp the logit scale.

    Mutates ``state`` in place and returns the losses.
    """
    cfg = state.config
    enc_cfg = state.encoder_config
    b = images.shape[0]
    if len(captions) != b:
        raise DimensionError(f"batch mismatch: {b} images vs {len(captions)} captions")
    if sample_indices is None:
        sample_indices = np.arange(b) + state.step * b
    if mask_ratio is None:
        mask_ratio = cfg.mask_ratio
    if lr is None:
        lr = lr_at(min(state.samples_seen + b, cfg.total_samples), cfg)

    if images.dtype == np.uint8:
        images = images.astype(np.float32) / 255.0
    patches = patchify(images, enc_cfg.image.patch_size)
    tokens = tokenize_batch(captions, vocab or default_vocab(), enc_cfg.text.seq_len)

    if mask_ratio > 0:
        pmask = patch_masks_for_samples(
            enc_cfg.image.num_patches, mask_ratio, cfg.seed, epoch, sample_indices
        )
    else:
        pmask = None
    tmask = text_masks_for_samples(
        tokens, cfg.text_mask_ratio, cfg.text_mask_policy, cfg.seed, epoch, sample_indices
    )

    for p in state.params.values():
        p.zero_grad()
    with ad.Graph() as graph:
        img_out = encode_image(patches, pmask, state.params, enc_cfg,
                               return_tokens=cfg.rec_weight > 0)
        if cfg.rec_weight > 0:
            pooled, visible_tokens = img_out
        else:
            pooled, visible_tokens = img_out, None
        txt_pooled = encode_text(tokens, tmask, state.params, enc_cfg)
        emb = EmbeddingBatch(
            image_emb=project_and_normalize(pooled, state.params["proj/img/w"]),
            text_emb=project_and_normalize(txt_pooled, state.params["proj/txt/w"]),
            logit_scale=state.params["logit_scale"],
        )
        contrastive = info_nce(emb)
        rec = None
        if cfg.rec_weight > 0:
            rec_mask = pmask if pmask is not None else full_mask(
                enc_cfg.image.num_patches, b
            )
            rec = reconstruction_loss(state.params, visible_tokens, rec_mask, patches, enc_cfg)
            total = ad.add(contrastive, ad.scale(rec, cfg.rec_weight))
        else:
            total = contrastive
        graph.backward(total)

    grads = {k: p.grad for k, p in state.params.items()}
    adamw_step(state, grads, lr)
    clamp_logit_scale(state)
    state.step += 1
    state.samples_seen += b
    return LossBundle(
        contrastive=float(contrastive.data),
        reconstruction=float(rec.data) if rec is not None else None,
        total=float(total.data),
        rec_weight=cfg.rec_weight,
    )


# ---------------------------------------------------------------------------
# run loops


def _epoch_indices(n: int, seed: int, epoch: int) -> np.ndarray:
    return per_sample_rng(seed, TAG_SHUFFLE, epoch, 0).permutation(n)


def run_phase(
    state: TrainState,
    dataset: Dataset,
    schedule: TrainConfig,
    n_steps: int,
    *,
    mask_ratio: float,
    schedule_origin: int = 0,
    vocab: Optional[Vocab] = None,
    on_step: Optional[Callable[[TrainState, LossBundle], None]] = None,
) -> TrainState:
    """Drive train_step for n_steps with the given lr schedule and mask.

    The schedule is positioned at samples_seen relative to
    ``schedule_origin`` (0 for pre-training, the tune start for the
    unmasked stage), so a checkpoint resume lands on the exact same
    learning rates. Epochs and batch slots derive from state.step, which
    likewise replays the same shuffles.
    """
    n = len(dataset)
    b = state.config.batch_size
    if n < b:
        raise ConfigError(f"dataset of {n} samples is smaller than batch {b}")
    vocab = vocab or default_vocab()
    per_epoch = n // b
    perm_epoch, perm = -1, None
    for _ in range(n_steps):
        epoch, slot = divmod(state.step, per_epoch)
        if epoch != perm_epoch:
            perm = _epoch_indices(n, state.config.seed, epoch)
            perm_epoch = epoch
        idx = perm[slot * b : (slot + 1) * b]
        phase_samples = min(state.samples_seen - schedule_origin + b, schedule.total_samples)
        bundle = train_step(
            state,
            dataset.images[idx],
            [dataset.captions[i] for i in idx],
            epoch=epoch,
            sample_indices=idx,
            lr=lr_at(phase_samples, schedule),
            mask_ratio=mask_ratio,
            vocab=vocab,
        )
        if on_step is not None:
            on_step(state, bundle)
    return state


def pretrain(
    state: TrainState,
    dataset: Dataset,
    *,
    vocab: Optional[Vocab] = None,
    on_step=None,
    n_steps: Optional[int] = None,
) -> TrainState:
    cfg = state.config
    remaining = cfg.total_steps - state.step
    steps = remaining if n_steps is None else min(n_steps, remaining)
    return run_phase(
        state, dataset, cfg, steps, mask_ratio=cfg.mask_ratio, vocab=vocab, on_step=on_step
    )


def unmasked_tune(
    state: TrainState,
    dataset: Dataset,
    *,
    tune_samples: Optional[int] = None,
    base_lr: Optional[float] = None,
    vocab: Optional[Vocab] = None,
    on_step=None,
) -> TrainState:
    """Continue pre-training at mask ratio 0 to close the masking gap.

    Defaults: 5% of the pre-training samples, base lr lowered 100x (the
    4e-6 -> 4e-8 proportion), warmup shortened to 20% of the tuning
    span. Optimizer moments restart fresh for the new stage.
    """
    cfg = state.config
    if tune_samples is None:
        tune_samples = int(TUNE_SAMPLES_FRACTION * cfg.total_samples)
    if tune_samples == 0:
        return state
    if base_lr is None:
        base_lr = cfg.base_lr * TUNE_LR_FACTOR
    steps = max(1, tune_samples // cfg.batch_size)
    schedule = replace(
        cfg,
        base_lr=base_lr,
        warmup_samples=int(TUNE_WARMUP_FRACTION * tune_samples),
        total_samples=tune_samples,
    )
    reset_moments(state)
    return run_phase(
        state, dataset, schedule, steps, mask_ratio=0.0,
        schedule_origin=state.samples_seen, vocab=vocab, on_step=on_step,
    )


# ---------------------------------------------------------------------------
# checkpoint glue


def save_state(path, state: TrainState) -> None:
    img, txt = state.encoder_config.image, state.encoder_config.text
    tensors: dict[str, np.ndarray] = {}
    tensors["meta/geometry"] = np.asarray(
        [img.layers, img.width, img.heads, img.patch_size, img.image_size,
         txt.layers, txt.width, txt.heads, txt.seq_len, txt.vocab_size,
         state.encoder_config.embed_dim],
        dtype=np.float32,
    )
    counters = []
    for value in (state.step, state.adam_t, state.samples_seen,
                  state.aborted_steps, state.config.seed):
        counters.extend(_split_u48(value))
    tensors["meta/counters"] = np.asarray(counters, dtype=np.float32)
    for name, p in state.params.items():
        tensors[f"param/{name}"] = p.data
        tensors[f"m/{name}"] = state.adam_m[name]
        tensors[f"v/{name}"] = state.adam_v[name]
    save_tensors(path, tensors)


def _geometry_config(geom: np.ndarray) -> EncoderConfig:
    vals = [int(round(float(x))) for x in geom]
    return EncoderConfig(
        image=ImageTowerConfig(*vals[0:5]),
        text=TextTowerConfig(*vals[5:10]),
        embed_dim=vals[10],
    )


def load_state(path, config: Optional[TrainConfig] = None) -> TrainState:
    tensors = load_tensors(path)
    try:
        enc_cfg = _geometry_config(tensors["meta/geometry"])
        counters = tensors["meta/counters"]
        step, adam_t, samples_seen, aborted, seed = (
            _join_u48(counters[2 * i], counters[2 * i + 1]) for i in range(5)
        )
    except KeyError as e:
        raise DataFormatError(f"{path}: missing checkpoint entry {e}") from e
    if config is None:
        name = next(
            (n for n in PRESET_NAMES if preset(n) == enc_cfg), "tiny"
        )
        config = TrainConfig(preset=name, seed=seed)
    params: dict[str, Tensor] = {}
    adam_m: dict[str, np.ndarray] = {}
    adam_v: dict[str, np.ndarray] = {}
    for key, arr in tensors.items():
        if key.startswith("param/"):
            name = key[len("param/") :]
            params[name] = ad.parameter(arr)
            adam_m[name] = tensors[f"m/{name}"].astype(np.float32)
            adam_v[name] = tensors[f"v/{name}"].astype(np.float32)
    if not params:
        raise DataFormatError(f"{path}: checkpoint holds no parameters")
    return TrainState(
        config=config,
        encoder_config=enc_cfg,
        params=params,
        adam_m=adam_m,
        adam_v=adam_v,
        step=step,
        adam_t=adam_t,
        samples_seen=samples_seen,
        aborted_steps=aborted,
    )


def load_encoder(path) -> tuple[dict[str, Tensor], EncoderConfig]:
    """Parameters and geometry only, for evaluation."""
    state = load_state(path)
    return state.params, state.encoder_config


# ---------------------------------------------------------------------------
# run directories and the scaling harness


CURVE_HEADER = "samples,metric,value"


def run_pretraining(config: TrainConfig, out_dir, *, log_every: int = 50) -> TrainState:
    """Full pre-training run writing a self-contained run directory:
    config.txt, flops.json, curve.csv (periodic zero-shot accuracy),
    timing.csv, and final.ckpt.
    """
    from .evaluation import desk_prompts, zero_shot_accuracy

    if not config.train_data:
        raise ConfigError("config.train_data is required")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_set = read_dataset(config.train_data)
    eval_set = read_dataset(config.eval_data) if config.eval_data else None

    state = init_train_state(config)
    save_config(config, out / "config.txt")
    (out / "flops.json").write_text(
        count_flops(state.encoder_config, config.mask_ratio, config.text_mask_ratio
                    if config.text_mask_policy != "none" else 0.0).to_json()
    )

    prompts = desk_prompts()
    curve_rows: list[tuple[int, str, float]] = []
    timing_rows: list[tuple[int, float]] = []
    t_start = time.monotonic()

    def eval_point():
        if eval_set is None:
            return
        value = zero_shot_accuracy(state.params, state.encoder_config, eval_set, prompts)
        curve_rows.append((state.samples_seen, "zero_shot_acc", value))
        timing_rows.append((state.samples_seen, time.monotonic() - t_start))
        logger.info("samples %d: zero-shot %.4f", state.samples_seen, value)

    next_eval = config.eval_every_samples or config.total_samples

    def on_step(st, bundle):
        nonlocal next_eval
        if st.step % log_every == 0:
            logger.info("step %d loss %.4f", st.step, bundle.total)
        if st.samples_seen >= next_eval:
            eval_point()
            next_eval += config.eval_every_samples or config.total_samples

    pretrain(state, train_set, on_step=on_step)
    if not curve_rows or curve_rows[-1][0] != state.samples_seen:
        eval_point()

    _write_csv(out / "curve.csv", CURVE_HEADER, curve_rows)
    _write_csv(out / "timing.csv", "samples,seconds", timing_rows)
    save_state(out / "final.ckpt", state)
    return state


def _write_csv(path, header, rows):
    lines = [header] + [",".join(str(v) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


SCALING_AXES = ("model", "data", "schedule")
_BIGGER = {"tiny": "small", "B-like": "L-like", "L-like": "H-like"}


def scaled_config(base: TrainConfig, axis: str, workdir) -> TrainConfig:
    """The controlled variant for one scaling axis.

    model: next preset up, same data and schedule. data: twice the
    unique training data at the same total samples (regenerated next to
    the original). schedule: twice the total samples.
    """
    if axis not in SCALING_AXES:
        raise ConfigError(f"unknown scaling axis {axis!r}, expected one of {SCALING_AXES}")
    if axis == "model":
        if base.preset not in _BIGGER:
            raise ConfigError(f"no larger preset registered above {base.preset!r}")
        return replace(base, preset=_BIGGER[base.preset])
    if axis == "schedule":
        return replace(base, total_samples=2 * base.total_samples)
    from .data import generate_dataset

    base_set = read_dataset(base.train_data)
    bigger = Path(workdir) / "train_2x.flipds"
    if not bigger.exists():
        generate_dataset(2 * len(base_set), base.seed + 1, bigger)
    return replace(base, train_data=str(bigger))


def run_scaling_axis(base: TrainConfig, axis: str, workdir) -> list[tuple[int, str, float]]:
    """Train the scaled variant of ``base`` and emit its accuracy curve.

    Writes a run directory under ``workdir/<axis>`` and returns the
    curve rows (samples_seen, metric, value).
    """
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    config = scaled_config(base, axis, workdir)
    out = workdir / axis
    run_pretraining(config, out)
    rows = []
    for line in (out / "curve.csv").read_text().splitlines()[1:]:
        samples, metric, value = line.split(",")
        rows.append((int(samples), metric, float(value)))
    return rows
