"""Weakly supervised segmentation with a robust trust region.

Grid-TR alternates a Potts CRF solve (alpha-expansion over a Boykov-Kolmogorov
max-flow) near the network output with robust-loss SGD towards the resulting
hard labeling; PCE-GD and Grid-GD are the gradient-descent baselines.
"""

__version__ = "0.1.0"
