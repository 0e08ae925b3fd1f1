"""Seq2seq training and decoding with beam search optimization."""

from .model import ModelConfig, Seq2SeqModel
from .training import TrainConfig, bso_forward, bso_backward, margin_loss, xent_loss

__all__ = [
    "ModelConfig",
    "Seq2SeqModel",
    "TrainConfig",
    "bso_forward",
    "bso_backward",
    "margin_loss",
    "xent_loss",
]
