"""Per-token affine projector and its gradient-descent training loop.

The backbone is frozen, so each image's partition, clustering and
substitution are computed once and reused every step; only the projector
weight and bias move. The corpus gradient is the mean of per-image
gradients obtained by chaining the repellence-loss gradient through the
affine map.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dpc import approximate_inattentive, cluster_tokens
from .lcr import RepellenceConfig, loss_and_gradient, pair_weight, token_coords
from .partition import cls_similarity, split_tokens
from .synth import BackboneOutput
from .tensorio import FeatureGrid, read_tensor, write_tensor

_INIT_TAG = 31


class DivergenceError(RuntimeError):
    """Training hit a non-finite loss; `step` is where it happened."""

    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


@dataclass
class Projector:
    """Affine per-token map: token (d,) -> weight.T @ token + bias (out_dim,)."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self) -> None:
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ValueError(
                f"inconsistent parameter shapes {self.weight.shape} / {self.bias.shape}"
            )
        if self.weight.shape[1] < 2:
            raise ValueError("output dimension must be >= 2")
        if not (np.isfinite(self.weight).all() and np.isfinite(self.bias).all()):
            raise ValueError("non-finite projector parameters")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class TrainConfig:
    """Projector optimization settings plus the per-image pipeline knobs."""

    lr: float = 1e-3
    steps: int = 200
    seed: int = 0
    eta: float = 0.25
    kc: int = 4
    repel: RepellenceConfig = field(default_factory=RepellenceConfig)
    optimizer: str = "gd"
    momentum: float = 0.9
    rho_verbatim: bool = False

    def validate(self) -> None:
        if self.lr <= 0.0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.steps < 0:
            raise ValueError(f"step count must be >= 0, got {self.steps}")
        if self.optimizer not in ("gd", "momentum"):
            raise ValueError(f"optimizer must be 'gd' or 'momentum', got {self.optimizer!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum coefficient must be in [0, 1), got {self.momentum}")
        self.repel.validate()


@dataclass
class TrainTrace:
    """Mean per-image loss at each step, wall time, and a parameter digest."""

    losses: list[float]
    wall_seconds: float
    checksum: str


def init_projector(in_dim: int, out_dim: int, seed: int) -> Projector:
    """Uniform(-1/sqrt(d), 1/sqrt(d)) weights, zero bias."""
    if in_dim < 1:
        raise ValueError("input dimension must be >= 1")
    rng = np.random.default_rng([_INIT_TAG, seed])
    bound = 1.0 / np.sqrt(in_dim)
    return Projector(
        weight=rng.uniform(-bound, bound, size=(in_dim, out_dim)),
        bias=np.zeros(out_dim),
    )


def project(p: Projector, grid: FeatureGrid) -> FeatureGrid:
    """Apply the affine map to every token; geometry is preserved."""
    if grid.channels != p.in_dim:
        raise ValueError(f"grid has {grid.channels} channels, projector expects {p.in_dim}")
    return FeatureGrid(grid.grid_h, grid.grid_w, grid.patch, grid.features @ p.weight + p.bias)


def prepare_image(output: BackboneOutput, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Everything about one image that does not depend on projector weights.

    Returns the substituted token matrix (inattentive rows replaced by
    their cluster centers) and the fixed pairwise loss weight.
    """
    part = split_tokens(cls_similarity(output.q_cls, output.keys), cfg.eta)
    assignment = cluster_tokens(
        output.aux.features[part.inattentive],
        cfg.kc,
        verbatim=cfg.rho_verbatim,
        token_indices=part.inattentive,
    )
    substituted = approximate_inattentive(output.main, part, assignment)
    labels = np.zeros(substituted.n_tokens, dtype=bool)
    labels[part.attentive] = True
    positions = token_coords(substituted.grid_h, substituted.grid_w)
    return substituted.features, pair_weight(positions, labels, cfg.repel)


def projector_checksum(p: Projector) -> str:
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(p.weight).tobytes())
    digest.update(np.ascontiguousarray(p.bias).tobytes())
    return digest.hexdigest()


def train_projector(
    corpus: list[BackboneOutput], cfg: TrainConfig, out_dim: int = 64
) -> tuple[Projector, TrainTrace]:
    """Minimize the mean per-image repellence loss over a frozen corpus."""
    cfg.validate()
    if not corpus:
        raise ValueError("corpus is empty")
    start = time.perf_counter()
    prepared = [prepare_image(out, cfg) for out in corpus]
    proj = init_projector(corpus[0].main.channels, out_dim, cfg.seed)
    w, b = proj.weight, proj.bias
    vel_w = np.zeros_like(w)
    vel_b = np.zeros_like(b)
    losses: list[float] = []
    for step in range(cfg.steps):
        grad_w = np.zeros_like(w)
        grad_b = np.zeros_like(b)
        total = 0.0
        for feats, weight in prepared:
            loss, g_phi = loss_and_gradient(
                feats @ w + b, weight, tau=cfg.repel.tau, cosine=cfg.repel.cosine
            )
            grad_w += feats.T @ g_phi
            grad_b += g_phi.sum(axis=0)
            total += loss
        mean_loss = total / len(prepared)
        if not np.isfinite(mean_loss):
            raise DivergenceError(step)
        losses.append(mean_loss)
        grad_w /= len(prepared)
        grad_b /= len(prepared)
        if cfg.optimizer == "momentum":
            vel_w = cfg.momentum * vel_w + grad_w
            vel_b = cfg.momentum * vel_b + grad_b
            w -= cfg.lr * vel_w
            b -= cfg.lr * vel_b
        else:
            w -= cfg.lr * grad_w
            b -= cfg.lr * grad_b
    proj = Projector(w, b)
    trace = TrainTrace(
        losses=losses,
        wall_seconds=time.perf_counter() - start,
        checksum=projector_checksum(proj),
    )
    return proj, trace


def save_checkpoint(directory: str | Path, p: Projector, seed: int, steps: int) -> str:
    """Write weight/bias tensors plus a metadata file; returns the checksum."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_tensor(directory / "weight.scet", p.weight)
    write_tensor(directory / "bias.scet", p.bias)
    digest = projector_checksum(p)
    meta = {
        "in_dim": p.in_dim,
        "out_dim": p.out_dim,
        "seed": seed,
        "steps": steps,
        "sha256": digest,
    }
    (directory / "meta.txt").write_text("".join(f"{k}={v}\n" for k, v in meta.items()))
    return digest


def load_checkpoint(directory: str | Path) -> Projector:
    directory = Path(directory)
    return Projector(
        weight=read_tensor(directory / "weight.scet"),
        bias=read_tensor(directory / "bias.scet"),
    )
