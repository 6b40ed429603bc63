"""Desk-scale masked contrastive language-image pre-training workbench.

Sparse ViT encoding of visible patches, symmetric temperature-scaled
InfoNCE, unmasked tuning, and the evaluation / FLOP-accounting tooling
to study masking trade-offs on synthetic data.
"""

from . import autodiff
from .data import CLASS_NAMES, Dataset, generate_dataset, read_dataset, write_dataset
from .encoders import EncoderConfig, encode_image, encode_text, init_params, patchify, preset
from .evaluation import (
    EvalReport,
    PromptSet,
    class_embeddings,
    desk_prompts,
    eval_inference_modes,
    linear_probe,
    recall_at_k,
    zero_shot_classify,
)
from .flops import FlopReport, count_flops
from .masking import PatchMask, TextMask, complementary_views, sample_patch_mask, sample_text_mask
from .objective import EmbeddingBatch, LossBundle, info_nce, project_and_normalize, similarity_logits
from .tokenizer import TokenizedBatch, Vocab, load_vocab, tokenize, tokenize_batch
from .trainer import (
    TrainConfig,
    TrainState,
    adamw_step,
    effective_lr,
    init_train_state,
    load_state,
    lr_at,
    run_pretraining,
    run_scaling_axis,
    save_state,
    train_step,
    unmasked_tune,
)

__version__ = "0.1.0"
