"""Incomplete-multimodal transformer for treatment response prediction and
survival analysis at desk scale: per-modality tokenizers, class-token
placeholders for missing modalities, alternating unimodal/cross-modal
attention, power-set knowledge distillation with an EMA teacher, and a full
train/evaluate/explain harness over CSV datasets."""

__version__ = "0.1.0"

from .autodiff import Param, Tensor, grad_check
from .model import ModelConfig, build_model, forward, predict_survival
from .tokenize import CaseRecord, ResponseLabel, SurvivalLabel, TokenSet

__all__ = ["Param", "Tensor", "grad_check", "ModelConfig", "build_model",
           "forward", "predict_survival", "CaseRecord", "ResponseLabel",
           "SurvivalLabel", "TokenSet", "__version__"]
