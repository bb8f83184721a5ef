"""Correspondence refinement for self-supervised landmark features.

The pipeline splits patch tokens by CLS-attention similarity, clusters the
inattentive remainder by density peaks, substitutes members with their
cluster centers, and trains a light per-token projector under a
locality-constrained repellence loss. Evaluation covers dense landmark
matching and limited-annotation detection, all on a deterministic
synthetic backbone stub.
"""

__version__ = "0.1.0"
