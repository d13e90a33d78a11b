"""Networks, composite loss, training loop, prediction and checkpoints."""

from vbcls.model.checkpoint import Checkpoint, load_checkpoint, read_checkpoint, save_checkpoint
from vbcls.model.losses import (
    Batch,
    LossBreakdown,
    LossTerms,
    LossWeights,
    compute_losses,
    forward_terms,
)
from vbcls.model.networks import (
    Dims,
    ModelParams,
    classify,
    decode,
    encode,
    group_of,
    init_params,
    label_prior,
)
from vbcls.model.predict import LabelPriorPredictor, VBCLSPredictor, base_probs, predict
from vbcls.model.training import EpochRecord, TrainConfig, source_priors, train

__all__ = [
    "Batch", "Checkpoint", "Dims", "EpochRecord", "LabelPriorPredictor", "LossBreakdown",
    "LossTerms", "LossWeights", "ModelParams", "TrainConfig", "VBCLSPredictor", "base_probs",
    "classify", "compute_losses", "decode", "encode", "forward_terms", "group_of",
    "init_params", "label_prior", "load_checkpoint", "predict", "read_checkpoint",
    "save_checkpoint", "source_priors", "train",
]
