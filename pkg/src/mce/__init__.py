"""Shapley-guided learning incentives and subset/completion losses for
multi-modal training with imbalanced missing modalities."""

__version__ = "0.1.0"
