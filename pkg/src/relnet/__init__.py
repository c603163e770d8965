"""Relation-network laboratory.

Single and stacked relation layers over sentence objects, a bAbI text
pipeline, a synthetic micro-task generator, and a seeded training harness,
all running on a small float64 reverse-mode autodiff engine.
"""

__version__ = "0.1.0"
