"""
ADROIT: task-aware pool-based active learning

A beta-VAE with supervised and self-supervised proxy heads, distilled from the
target learner and trained adversarially against a labeled/unlabeled state
discriminator, whose scores drive sample acquisition.
"""

__version__ = "0.1.0"
