"""DFSMN-SAN acoustic models with persistent-memory attention, trained with CTC."""

from .ctc import CtcTarget, ctc_brute_force, ctc_loss, edit_distance, greedy_decode
from .datapipe import SequenceBatch, SyntheticTaskSpec, generate_corpus
from .model import Model, ModelConfig, build_dfsmn_san, build_pure, load_weights, param_count, save_weights

__all__ = [
    "CtcTarget",
    "Model",
    "ModelConfig",
    "SequenceBatch",
    "SyntheticTaskSpec",
    "build_dfsmn_san",
    "build_pure",
    "ctc_brute_force",
    "ctc_loss",
    "edit_distance",
    "generate_corpus",
    "greedy_decode",
    "load_weights",
    "param_count",
    "save_weights",
]
