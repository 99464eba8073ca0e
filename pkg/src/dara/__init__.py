"""Dynamics-aware reward augmentation for offline RL under dynamics shift.

Pipeline: collect paired source/target offline datasets, train the domain
classifier pair, rewrite source rewards by the clipped log dynamics ratio,
train offline agents on the mixed data, and evaluate in the target
environment. The env catalog is desk-scale with exact dynamic-programming
oracles, so every moving part is testable against ground truth.
"""

__version__ = "0.1.0"
