"""Synthetic scenes, mock proposals, training, evaluation, experiments."""
