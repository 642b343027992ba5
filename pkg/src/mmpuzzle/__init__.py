"""Multimodal jigsaw pretraining with a Sinkhorn permutation solver.

Pipeline: synthesize or load aligned multi-modality volumes, cut them into
shuffled multimodal patch puzzles, train a compact solver network that
regresses the shuffling permutation through a differentiable Sinkhorn layer,
then transplant the learned encoder into downstream segmentation or
regression heads. Everything runs on CPU at desk scale and is deterministic
under a fixed seed.
"""

__version__ = "0.1.0"

from .rng import Rng

__all__ = ["Rng", "__version__"]
