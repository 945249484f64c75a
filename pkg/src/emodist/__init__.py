"""Soft-label speech emotion recognition toolkit.

Trains and evaluates a small downstream head over precomputed encoder
embeddings, with distribution (soft-label) targets, imbalance-aware
augmentation, inverse-frequency target re-weighting, minority-aware model
selection, and probability-averaging ensembles.
"""

__version__ = "0.1.0"
