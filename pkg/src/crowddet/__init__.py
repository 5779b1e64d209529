"""Crowd pedestrian set-prediction toolkit: box geometry, assignment, a toy
sparse-attention decoder, supervision routing, metrics and data tooling."""

__version__ = "0.1.0"
