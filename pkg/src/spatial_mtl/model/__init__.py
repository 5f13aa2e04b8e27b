from .network import (
    PAD, SPECIAL_TOKENS, VARIANTS, ModelConfig, ModelOutput, SpatialViLT, Targets, Tokenizer,
    compute_total_loss, patchify, tokenize,
)
from .training import (
    ArrayDataset, Checkpoint, DivergenceError, TrainResult, accuracy, coordinate_stats,
    evaluate_logits, predict, prepare_arrays, train,
)

__all__ = [
    "PAD", "SPECIAL_TOKENS", "VARIANTS", "ArrayDataset", "Checkpoint", "DivergenceError",
    "ModelConfig", "ModelOutput", "SpatialViLT", "Targets", "TrainResult", "Tokenizer", "accuracy",
    "compute_total_loss", "coordinate_stats", "evaluate_logits", "patchify", "predict",
    "prepare_arrays", "tokenize", "train",
]
