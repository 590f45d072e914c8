"""Audio-visual speech recognition with audio-only masked pre-training.

Pre-train a Conformer encoder on audio with random-projection quantized
targets, then fine-tune it with a fresh video front-end and an RNN-T decoder.
"""

from .data import Corpus, CorpusSpec, generate_corpus
from .evaluation import WerReport, edit_distance, evaluate, select_checkpoint, wer
from .model import FavaModel, ModalityDecision, ModelConfig, count_parameters
from .trainer import (
    TrainConfig,
    adapt_audio_to_av,
    init_stage2_from_stage1,
    load_model,
    run_finetune,
    run_pretrain,
)

__version__ = "0.1.0"

__all__ = [
    "Corpus",
    "CorpusSpec",
    "FavaModel",
    "ModalityDecision",
    "ModelConfig",
    "TrainConfig",
    "WerReport",
    "adapt_audio_to_av",
    "count_parameters",
    "edit_distance",
    "evaluate",
    "generate_corpus",
    "init_stage2_from_stage1",
    "load_model",
    "run_finetune",
    "run_pretrain",
    "select_checkpoint",
    "wer",
]
