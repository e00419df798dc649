"""Deviation-robust navigation workbench.

Builds perturbable navigation worlds, derives detour-aware reference
trajectories for deleted edges, trains compact instruction-following agents
with progressive perturbed-trajectory augmentation and contrastive
objectives, and evaluates them under perturbation-free and perturbation-based
protocols.
"""

__version__ = "0.1.0"
