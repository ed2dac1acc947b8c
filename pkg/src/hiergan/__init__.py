"""Hierarchy-conditioned generative modeling at desk scale.

The package trains class-hierarchy embeddings, conditions a small two-stage
GAN on them, constrains the generator with a frozen hierarchical classifier,
and scores the results with classifier-feature analogs of the usual
generative metrics. Everything runs on numpy float64 with explicit seeds.
"""

__version__ = "0.1.0"
