"""Density-peak clustering of inattentive tokens and center substitution.

Centers are the top score = density * separation tokens; every other
clustered token is then represented by its nearest center, and the main
feature grid can substitute member rows with their center's row.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .partition import TokenPartition
from .tensorio import FeatureGrid


@dataclass
class ClusterAssignment:
    """Clustering state over a fixed-order token subset.

    `centers` and `member_center` hold positions into `token_indices`
    (local indexing); `token_indices` maps back to grid token ids.
    """

    token_indices: np.ndarray
    rho: np.ndarray
    delta: np.ndarray
    score: np.ndarray
    centers: np.ndarray
    member_center: np.ndarray

    @property
    def center_tokens(self) -> np.ndarray:
        """Grid token ids of the selected centers, ascending."""
        return self.token_indices[self.centers]

    @property
    def member_center_tokens(self) -> np.ndarray:
        """Grid token id of the assigned center, per clustered token."""
        return self.token_indices[self.member_center]


def _pairwise_sq_dists(features: np.ndarray) -> np.ndarray:
    diff = features[:, None, :] - features[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def density(features: np.ndarray, verbatim: bool = False) -> np.ndarray:
    """Per-token density from pairwise squared feature distances.

    Default is rho_i = sum_{j != i} exp(-||t_i - t_j||^2), so tight packs
    score high. `verbatim` instead exponentiates the plain distance sum,
    which grows with isolation; it is kept for comparison only.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 1:
        raise ValueError(f"expected (M, d) features with M >= 1, got {features.shape}")
    if not np.isfinite(features).all():
        raise ValueError("non-finite features")
    sq = _pairwise_sq_dists(features)
    if verbatim:
        return np.exp(sq.sum(axis=1))
    return np.exp(-sq).sum(axis=1) - 1.0  # drop the self term exp(0)


def peak_distance(features: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Distance to the nearest strictly-denser token.

    The densest token instead gets its distance to the farthest token.
    Density ties are broken by treating the lower index as denser; a lone
    token gets 0.
    """
    features = np.asarray(features, dtype=np.float64)
    rho = np.asarray(rho, dtype=np.float64)
    m = features.shape[0]
    if m == 0:
        raise ValueError("no tokens")
    if rho.shape != (m,):
        raise ValueError(f"rho shape {rho.shape} does not match {m} tokens")
    dist = np.sqrt(_pairwise_sq_dists(features))
    idx = np.arange(m)
    denser = (rho[None, :] > rho[:, None]) | (
        (rho[None, :] == rho[:, None]) & (idx[None, :] < idx[:, None])
    )
    delta = np.where(denser, dist, np.inf).min(axis=1)
    top = ~denser.any(axis=1)  # the effectively-densest token; for M=1 this yields 0
    delta[top] = dist[top].max(axis=1)
    return delta


def select_centers(rho: np.ndarray, delta: np.ndarray, kc: int) -> np.ndarray:
    """Indices of the min(kc, M) largest rho*delta scores, ascending; ties by lower index."""
    rho = np.asarray(rho, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if kc < 1:
        raise ValueError(f"cluster count must be >= 1, got {kc}")
    if rho.shape != delta.shape or rho.ndim != 1:
        raise ValueError("rho and delta must be equal-length vectors")
    score = rho * delta
    order = np.argsort(-score, kind="stable")
    return np.sort(order[: min(kc, rho.shape[0])])


def assign_members(
    features: np.ndarray,
    centers: np.ndarray,
    rho: np.ndarray | None = None,
    delta: np.ndarray | None = None,
    token_indices: np.ndarray | None = None,
) -> ClusterAssignment:
    """Assign every token to its nearest center in feature space.

    Ties go to the center with the lower token index; centers always map
    to themselves. rho/delta are recomputed when not supplied.
    """
    features = np.asarray(features, dtype=np.float64)
    centers = np.unique(np.asarray(centers, dtype=np.intp))  # ascending, for the tie rule
    if centers.size == 0:
        raise ValueError("centers must be non-empty")
    m = features.shape[0]
    if centers[0] < 0 or centers[-1] >= m:
        raise ValueError("center index out of range")
    if rho is None:
        rho = density(features)
    if delta is None:
        delta = peak_distance(features, rho)
    if token_indices is None:
        token_indices = np.arange(m)
    diff = features[:, None, :] - features[centers][None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    member_center = centers[np.argmin(d2, axis=1)]  # argmin ties -> first, centers ascending
    member_center[centers] = centers
    return ClusterAssignment(
        token_indices=np.asarray(token_indices),
        rho=np.asarray(rho, dtype=np.float64),
        delta=np.asarray(delta, dtype=np.float64),
        score=np.asarray(rho, dtype=np.float64) * np.asarray(delta, dtype=np.float64),
        centers=centers,
        member_center=member_center,
    )


def cluster_tokens(
    features: np.ndarray,
    kc: int,
    verbatim: bool = False,
    token_indices: np.ndarray | None = None,
) -> ClusterAssignment:
    """Full pipeline: density -> separation -> center selection -> membership."""
    rho = density(features, verbatim=verbatim)
    delta = peak_distance(features, rho)
    centers = select_centers(rho, delta, kc)
    return assign_members(features, centers, rho=rho, delta=delta, token_indices=token_indices)


def approximate_inattentive(
    grid: FeatureGrid, partition: TokenPartition, assignment: ClusterAssignment
) -> FeatureGrid:
    """Replace each inattentive token's main-grid feature with its center's.

    Attentive rows and geometry are untouched; `assignment` must cover
    exactly the partition's inattentive set.
    """
    if not np.array_equal(np.sort(assignment.token_indices), partition.inattentive):
        raise ValueError("assignment does not cover exactly the inattentive token set")
    out = grid.features.copy()
    out[assignment.token_indices] = grid.features[assignment.member_center_tokens]
    return FeatureGrid(grid.grid_h, grid.grid_w, grid.patch, out)
