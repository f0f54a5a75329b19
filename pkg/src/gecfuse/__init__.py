"""Grammatical error correction with masked-LM fusion, on a hand-written numpy autodiff core."""

from .decoding import NBest, beam_search, rerank, score_sequence
from .evaluation import EvalReport, exact_match, f_beta, gleu_score, m2_style_score, per_type_breakdown
from .gec_model import FusedGecModel, IntegrationMode, build_gec_model, init_from_mlm, train_gec
from .mlm import MlmModel, continue_mlm_training, finetune_ged, init_mlm, pretrain_mlm
from .tensor import ContractError, Tensor
from .transformer import TransformerConfig

__version__ = "0.1.0"

__all__ = [
    "NBest", "beam_search", "rerank", "score_sequence",
    "EvalReport", "exact_match", "f_beta", "gleu_score", "m2_style_score", "per_type_breakdown",
    "FusedGecModel", "IntegrationMode", "build_gec_model", "init_from_mlm", "train_gec",
    "MlmModel", "continue_mlm_training", "finetune_ged", "init_mlm", "pretrain_mlm",
    "ContractError", "Tensor", "TransformerConfig",
]
