"""Locality-constrained repellence loss over projected token features.

Pairs of tokens that are far apart on the patch grid are pushed toward low
correspondence probability; the push strength depends on whether each
token of the pair is attentive. The loss is a plain double sum of
log-distance * repellence-weight * correspondence with no normalization,
and the analytic gradient is checked against finite differences in the
tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class RepellenceConfig:
    """Pair-type weights and softmax temperature for the repellence loss.

    `cosine` switches the correspondence logits between cosine similarity
    (features L2-normalized first, the default) and raw dot products.
    """

    r_att_att: float = 5.0
    r_att_inatt: float = 5.0
    r_inatt_inatt: float = 2.0
    tau: float = 0.07
    cosine: bool = True

    def validate(self) -> None:
        if self.tau <= 0.0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if min(self.r_att_att, self.r_att_inatt, self.r_inatt_inatt) < 0.0:
            raise ValueError("repellence weights must be non-negative")


@dataclass
class LossBreakdown:
    """Loss total, its exact split by pair type, and the matrices behind it."""

    total: float
    att_att: float
    att_inatt: float
    inatt_inatt: float
    locality: np.ndarray
    correspondence: np.ndarray


def token_coords(grid_h: int, grid_w: int) -> np.ndarray:
    """(N, 2) array of (row, col) cell coordinates in row-major token order."""
    if grid_h < 1 or grid_w < 1:
        raise ValueError(f"bad grid {grid_h}x{grid_w}")
    rows, cols = np.divmod(np.arange(grid_h * grid_w), grid_w)
    return np.stack([rows, cols], axis=1).astype(np.float64)


def locality_matrix(positions: np.ndarray) -> np.ndarray:
    """F[i, j] = log(||pos_i - pos_j|| + 1) in patch-grid units; zero diagonal."""
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 2 or positions.shape[1] != 2:
        raise ValueError(f"expected (N, 2) positions, got {positions.shape}")
    diff = positions[:, None, :] - positions[None, :, :]
    return np.log1p(np.sqrt(np.einsum("ijk,ijk->ij", diff, diff)))


def repellence_matrix(labels: np.ndarray, cfg: RepellenceConfig) -> np.ndarray:
    """Pairwise weight by type: both-attentive, mixed, or both-inattentive.

    `labels` is a boolean vector, True for attentive tokens.
    """
    cfg.validate()
    labels = np.asarray(labels, dtype=bool)
    if labels.ndim != 1:
        raise ValueError(f"expected boolean label vector, got shape {labels.shape}")
    aa, _, ii = _pair_masks(labels)
    out = np.full((labels.size, labels.size), float(cfg.r_att_inatt))
    out[aa] = cfg.r_att_att
    out[ii] = cfg.r_inatt_inatt
    return out


def correspondence_matrix(
    projected: np.ndarray, tau: float = 0.07, cosine: bool = True
) -> np.ndarray:
    """Row-stochastic P[i, j] = softmax_j(<phi_i, phi_j> / tau), self pair included.

    With `cosine` the features are L2-normalized first so logits lie in
    [-1/tau, 1/tau].
    """
    if tau <= 0.0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = _unit_rows(projected) if cosine else _finite_rows(projected)
    logits = (z @ z.T) / tau
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def _finite_rows(projected: np.ndarray) -> np.ndarray:
    phi = np.asarray(projected, dtype=np.float64)
    if phi.ndim != 2:
        raise ValueError(f"expected (N, d) features, got shape {phi.shape}")
    if not np.isfinite(phi).all():
        raise ValueError("non-finite feature values")
    return phi


def _unit_rows(projected: np.ndarray) -> np.ndarray:
    phi = _finite_rows(projected)
    norms = np.linalg.norm(phi, axis=1, keepdims=True)
    if (norms == 0.0).any():
        raise ValueError("cannot normalize zero-norm feature rows")
    return phi / norms


def _pair_masks(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    labels = np.asarray(labels, dtype=bool)
    aa = labels[:, None] & labels[None, :]
    ii = ~labels[:, None] & ~labels[None, :]
    return aa, ~aa & ~ii, ii


def lcr_loss(
    correspondence: np.ndarray,
    locality: np.ndarray,
    repellence: np.ndarray,
    labels: np.ndarray,
) -> LossBreakdown:
    """Sum over all ordered pairs of locality * repellence * correspondence.

    No averaging anywhere, so the value scales with N^2. The diagonal
    contributes nothing because the locality matrix has a zero diagonal.
    `labels` only routes each term into the per-type partials, which
    partition the total.
    """
    n = np.asarray(labels).shape[0]
    for name, m in (("correspondence", correspondence), ("locality", locality), ("repellence", repellence)):
        if np.asarray(m).shape != (n, n):
            raise ValueError(f"{name} matrix shape {np.asarray(m).shape} != ({n}, {n})")
    terms = np.asarray(locality) * np.asarray(repellence) * np.asarray(correspondence)
    aa, ai, ii = _pair_masks(labels)
    return LossBreakdown(
        total=float(terms.sum()),
        att_att=float(terms[aa].sum()),
        att_inatt=float(terms[ai].sum()),
        inatt_inatt=float(terms[ii].sum()),
        locality=np.asarray(locality),
        correspondence=np.asarray(correspondence),
    )


def evaluate_loss(
    projected: np.ndarray,
    positions: np.ndarray,
    labels: np.ndarray,
    cfg: RepellenceConfig,
) -> LossBreakdown:
    """Build all three matrices from raw inputs and reduce to a LossBreakdown."""
    phi = np.asarray(projected, dtype=np.float64)
    if np.asarray(positions).shape[0] != phi.shape[0] or np.asarray(labels).shape[0] != phi.shape[0]:
        raise ValueError("projected, positions and labels disagree on token count")
    corr = correspondence_matrix(phi, tau=cfg.tau, cosine=cfg.cosine)
    return lcr_loss(corr, locality_matrix(positions), repellence_matrix(labels, cfg), labels)


def pair_weight(positions: np.ndarray, labels: np.ndarray, cfg: RepellenceConfig) -> np.ndarray:
    """Constant per-image factor of the loss: locality times repellence."""
    return locality_matrix(positions) * repellence_matrix(labels, cfg)


def loss_and_gradient(
    projected: np.ndarray,
    weight: np.ndarray,
    tau: float = 0.07,
    cosine: bool = True,
) -> tuple[float, np.ndarray]:
    """Loss total and analytic d(loss)/d(projected) for a fixed pair weight.

    With W the pair weight and P the correspondence matrix, each softmax
    row gives dL/dS = G where G[i, j] = P[i, j] * (W[i, j] - sum_k W[i, k]
    P[i, k]); the symmetric logits S = Z Z^T / tau then give dL/dZ =
    (G + G^T) Z / tau, and the cosine path projects out the component
    radial to each feature row. The gradient is checked against central
    finite differences in the tests.
    """
    phi = _finite_rows(projected)
    weight = np.asarray(weight, dtype=np.float64)
    corr = correspondence_matrix(phi, tau=tau, cosine=cosine)
    row_loss = (weight * corr).sum(axis=1, keepdims=True)
    total = float(row_loss.sum())
    g = corr * (weight - row_loss)
    if not cosine:
        return total, (g + g.T) @ phi / tau
    norms = np.linalg.norm(phi, axis=1, keepdims=True)
    z = phi / norms
    gz = (g + g.T) @ z / tau
    return total, (gz - (gz * z).sum(axis=1, keepdims=True) * z) / norms


def lcr_gradient(
    projected: np.ndarray,
    positions: np.ndarray,
    labels: np.ndarray,
    cfg: RepellenceConfig,
) -> np.ndarray:
    """Analytic d(loss)/d(projected), matching `evaluate_loss` term for term."""
    cfg.validate()
    weight = pair_weight(positions, labels, cfg)
    return loss_and_gradient(projected, weight, tau=cfg.tau, cosine=cfg.cosine)[1]
