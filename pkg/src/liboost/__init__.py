"""Desk-scale laboratory for translation-robust adversarial perturbations.

Train small classifiers, craft L-inf perturbations whose effect survives
integer pixel shifts, and measure how that robustness relates to transfer
across victim models.
"""

from . import attacks, cli, data, evalsuite, sampling, tensor, translate, zoo

__all__ = [
    "attacks",
    "cli",
    "data",
    "evalsuite",
    "sampling",
    "tensor",
    "translate",
    "zoo",
]
