"""Learned tradeoff weights for multi-objective continued pretraining via three-level optimization."""
