"""Downstream protocols: landmark matching, heatmap-regression detection,
and clustering quality.

Matching compares dense cosine-similarity argmaxes at image resolution.
Detection runs a 3x3 conv over concatenated first/second-stage channels,
decodes each heatmap with a soft-argmax, and maps the decoded coordinates
through a small per-landmark linear head; its backward pass is derived by
hand and verified against a dense oracle in the tests.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .projector import DivergenceError, Projector, TrainConfig, TrainTrace, project
from .synth import BackboneOutput, EvalPair
from .tensorio import DenseFeatureMap, FeatureGrid, bilinear_upsample

# a finite stand-in for -inf: exp((MASKED - x)/T) underflows to exactly 0,
# so masked pixels carry zero probability and one-hot decoding is exact
MASKED = -1e30


@dataclass
class MatchRecord:
    """One landmark matched in one pair."""

    pair_id: int
    landmark_id: int
    kind: str
    pred_x: float
    pred_y: float
    gt_x: float
    gt_y: float
    err_px: float


@dataclass
class MatchResult:
    records: list[MatchRecord]
    same_mean: float
    diff_mean: float


def similarity_map(
    ref_map: DenseFeatureMap, test_map: DenseFeatureMap, query_px: tuple[float, float]
) -> np.ndarray:
    """(H, W) cosine similarity of the query pixel's feature to every test pixel.

    Zero-norm test pixels score -1 (the cosine floor); a zero-norm query
    raises.
    """
    if ref_map.channels != test_map.channels:
        raise ValueError("feature maps disagree on channel count")
    qx = int(np.clip(round(query_px[0]), 0, ref_map.width - 1))
    qy = int(np.clip(round(query_px[1]), 0, ref_map.height - 1))
    q = ref_map.values[qy, qx]
    qn = np.linalg.norm(q)
    if qn == 0.0:
        raise ValueError(f"zero-norm feature at query pixel ({qx}, {qy})")
    flat = test_map.values.reshape(-1, test_map.channels)
    norms = np.linalg.norm(flat, axis=1)
    sims = (flat @ q) / (qn * np.where(norms == 0.0, 1.0, norms))
    sims[norms == 0.0] = -1.0
    return sims.reshape(test_map.height, test_map.width)


def match_landmark(
    ref_map: DenseFeatureMap,
    test_map: DenseFeatureMap,
    query_px: tuple[float, float],
    test_mask: np.ndarray | None = None,
) -> tuple[int, int]:
    """Pixel in `test_map` most cosine-similar to the query pixel's feature.

    Ties resolve in scanline order (first row, then column). `test_mask`
    marks excluded test pixels (True = dropped).
    """
    sims = similarity_map(ref_map, test_map, query_px)
    if test_mask is not None:
        if test_mask.shape != sims.shape:
            raise ValueError("mask shape does not match the test map")
        sims = np.where(test_mask, -np.inf, sims)
    best = int(np.argmax(sims))
    return best % test_map.width, best // test_map.width


def mean_pixel_error(preds: np.ndarray, gts: np.ndarray) -> float:
    """Mean Euclidean distance in pixels over (n, 2) predictions."""
    preds = np.asarray(preds, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    if preds.shape != gts.shape or preds.ndim != 2 or preds.shape[0] == 0:
        raise ValueError(f"bad prediction/target shapes {preds.shape} / {gts.shape}")
    return float(np.linalg.norm(preds - gts, axis=1).mean())


def match_pair(
    pair: EvalPair,
    featurize,
    pair_id: int = 0,
    test_mask: np.ndarray | None = None,
) -> list[MatchRecord]:
    """Match every landmark of one pair; `featurize` maps an output to a dense map."""
    ref_map = featurize(pair.ref)
    test_map = featurize(pair.test)
    kind = "same" if pair.same_identity else "different"
    records = []
    for lid in range(pair.ref_landmarks.shape[0]):
        px, py = match_landmark(ref_map, test_map, tuple(pair.ref_landmarks[lid]), test_mask)
        gx, gy = pair.test_landmarks[lid]
        records.append(
            MatchRecord(
                pair_id=pair_id,
                landmark_id=lid,
                kind=kind,
                pred_x=float(px),
                pred_y=float(py),
                gt_x=float(gx),
                gt_y=float(gy),
                err_px=float(np.hypot(px - gx, py - gy)),
            )
        )
    return records


def summarize_matches(records: list[MatchRecord]) -> MatchResult:
    same = [r.err_px for r in records if r.kind == "same"]
    diff = [r.err_px for r in records if r.kind == "different"]
    return MatchResult(
        records=records,
        same_mean=float(np.mean(same)) if same else float("nan"),
        diff_mean=float(np.mean(diff)) if diff else float("nan"),
    )


def upsample_features(grid: FeatureGrid) -> DenseFeatureMap:
    """Dense per-pixel map at the grid's native image resolution."""
    return bilinear_upsample(grid, grid.image_h, grid.image_w)


def raw_featurizer():
    """Dense map of the first-stage tokens."""
    return lambda out: upsample_features(out.main)


def projected_featurizer(p: Projector):
    """Dense map of the second-stage (projected) tokens."""
    return lambda out: upsample_features(project(p, out.main))


def soft_argmax(heatmap: np.ndarray, temperature: float = 0.1) -> tuple[float, float]:
    """Coordinate expectation under softmax(heatmap / temperature).

    Returns (x, y) in array index units. Cells at or below the MASKED
    sentinel relative to the peak get exactly zero probability, so a map
    with one finite value decodes to that cell's coordinates exactly.
    """
    heatmap = np.asarray(heatmap, dtype=np.float64)
    if heatmap.ndim != 2:
        raise ValueError(f"expected (H, W) heatmap, got {heatmap.shape}")
    if temperature <= 0.0:
        raise ValueError("temperature must be positive")
    p = _softmax2d(heatmap[None, :, :] / temperature)[0]
    ys, xs = np.mgrid[0 : heatmap.shape[0], 0 : heatmap.shape[1]]
    return float((p * xs).sum()), float((p * ys).sum())


def _softmax2d(batch: np.ndarray) -> np.ndarray:
    flat = batch.reshape(batch.shape[0], -1)
    flat = flat - flat.max(axis=1, keepdims=True)
    e = np.exp(flat)
    return (e / e.sum(axis=1, keepdims=True)).reshape(batch.shape)


@dataclass
class RegressorParams:
    """Conv-to-heatmaps detector with a per-landmark coordinate head.

    `conv` is (n_landmarks * heatmaps, in_channels, 3, 3); `head_w` is
    (n_landmarks, 2 * heatmaps, 2) applied to the concatenated (x, y)
    decodings of that landmark's heatmaps.
    """

    conv: np.ndarray
    conv_bias: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray
    heatmaps: int
    temperature: float = 0.1

    def __post_init__(self) -> None:
        self.conv = np.asarray(self.conv, dtype=np.float64)
        self.conv_bias = np.asarray(self.conv_bias, dtype=np.float64)
        self.head_w = np.asarray(self.head_w, dtype=np.float64)
        self.head_b = np.asarray(self.head_b, dtype=np.float64)
        if self.heatmaps < 1:
            raise ValueError("need at least one heatmap per landmark")
        n_lm = self.head_w.shape[0]
        if self.conv.shape[0] != n_lm * self.heatmaps or self.conv.shape[2:] != (3, 3):
            raise ValueError(f"bad conv shape {self.conv.shape}")
        if self.conv_bias.shape != (self.conv.shape[0],):
            raise ValueError("conv bias length mismatch")
        if self.head_w.shape[1:] != (2 * self.heatmaps, 2) or self.head_b.shape != (n_lm, 2):
            raise ValueError(f"bad head shapes {self.head_w.shape} / {self.head_b.shape}")
        for arr in (self.conv, self.conv_bias, self.head_w, self.head_b):
            if not np.isfinite(arr).all():
                raise ValueError("non-finite regressor parameters")

    @property
    def n_landmarks(self) -> int:
        return self.head_w.shape[0]

    @property
    def in_channels(self) -> int:
        return self.conv.shape[1]


def init_regressor(
    n_landmarks: int,
    in_channels: int,
    heatmaps: int,
    seed: int,
    temperature: float = 0.1,
    center: tuple[float, float] = (0.0, 0.0),
) -> RegressorParams:
    """Small uniform conv/head weights; head bias starts at `center`.

    The head sees heatmap decodings with `center` subtracted, so starting
    the bias there makes the initial prediction the image center.
    """
    rng = np.random.default_rng([37, seed])
    k = 1.0 / np.sqrt(in_channels * 9)
    h = 1.0 / np.sqrt(2 * heatmaps)
    return RegressorParams(
        conv=rng.uniform(-k, k, size=(n_landmarks * heatmaps, in_channels, 3, 3)),
        conv_bias=np.zeros(n_landmarks * heatmaps),
        head_w=rng.uniform(-h, h, size=(n_landmarks, 2 * heatmaps, 2)),
        head_b=np.tile(np.asarray(center, dtype=np.float64), (n_landmarks, 1)),
        heatmaps=heatmaps,
        temperature=temperature,
    )


def _conv3x3(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """(H, W, C) -> (O, H, W), zero padding, stride 1."""
    padded = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(0, 1))
    # win: (H, W, C, 3, 3); kernel: (O, C, 3, 3)
    return np.einsum("hwcuv,ocuv->ohw", win, kernel, optimize=True) + bias[:, None, None]


def _stack_inputs(stage1: FeatureGrid, stage2: FeatureGrid) -> np.ndarray:
    if (stage1.grid_h, stage1.grid_w, stage1.patch) != (
        stage2.grid_h,
        stage2.grid_w,
        stage2.patch,
    ):
        raise ValueError("stage grids disagree on geometry")
    both = np.concatenate([stage1.features, stage2.features], axis=1)
    return both.reshape(stage1.grid_h, stage1.grid_w, both.shape[1])


def _forward(params: RegressorParams, x: np.ndarray, patch: int):
    """All intermediates: heatmaps, per-map probabilities, coords, predictions."""
    heat = _conv3x3(x, params.conv, params.conv_bias)
    probs = _softmax2d(heat / params.temperature)
    gh, gw = heat.shape[1:]
    ys, xs = np.mgrid[0:gh, 0:gw]
    # decoded at patch centers, as a fraction of the image size with the
    # center at the origin; the head bias carries the absolute pixel offset.
    # Fractional units keep the head's inputs O(1) so the conv block, not
    # the head, absorbs most of the fit.
    xs_n = ((xs + 0.5) * patch - 0.5) / (gw * patch) - 0.5
    ys_n = ((ys + 0.5) * patch - 0.5) / (gh * patch) - 0.5
    cx = (probs * xs_n).sum(axis=(1, 2))
    cy = (probs * ys_n).sum(axis=(1, 2))
    coords = np.stack([cx, cy], axis=1).reshape(params.n_landmarks, 2 * params.heatmaps)
    preds = np.einsum("li,lio->lo", coords, params.head_w) + params.head_b
    return heat, probs, (xs_n, ys_n), coords, preds


def regressor_forward(
    params: RegressorParams, stage1: FeatureGrid, stage2: FeatureGrid
) -> np.ndarray:
    """Predicted (x, y) pixel coordinates for every landmark, shape (L, 2)."""
    x = _stack_inputs(stage1, stage2)
    if x.shape[2] != params.in_channels:
        raise ValueError(
            f"{x.shape[2]} input channels, regressor expects {params.in_channels}"
        )
    return _forward(params, x, stage1.patch)[4]


def regressor_checksum(params: RegressorParams) -> str:
    digest = hashlib.sha256()
    for arr in (params.conv, params.conv_bias, params.head_w, params.head_b):
        digest.update(np.ascontiguousarray(arr).tobytes())
    return digest.hexdigest()


def train_regressor(
    samples: list[tuple[BackboneOutput, np.ndarray]],
    proj: Projector,
    cfg: TrainConfig,
    heatmaps: int = 50,
    temperature: float = 0.1,
) -> tuple[RegressorParams, TrainTrace]:
    """Fit the detector by gradient descent on mean squared pixel error.

    Backbone and projector stay frozen; only conv and head parameters move.
    """
    cfg.validate()
    if not samples:
        raise ValueError("no training samples")
    start = time.perf_counter()
    inputs = [_stack_inputs(out.main, project(proj, out.main)) for out, _ in samples]
    targets = [np.asarray(lm, dtype=np.float64) for _, lm in samples]
    n_lm = targets[0].shape[0]
    grid = samples[0][0].main
    patch = grid.patch
    params = init_regressor(
        n_lm,
        inputs[0].shape[2],
        heatmaps=heatmaps,
        seed=cfg.seed,
        temperature=temperature,
        center=(grid.image_w / 2.0, grid.image_h / 2.0),
    )
    losses: list[float] = []
    vel = None
    for step in range(cfg.steps):
        grads = None
        total = 0.0
        for x, t in zip(inputs, targets):
            loss, g = _loss_and_grads(params, x, t, patch)
            total += loss
            grads = g if grads is None else [a + b for a, b in zip(grads, g)]
        mean_loss = total / len(samples)
        if not np.isfinite(mean_loss):
            raise DivergenceError(step)
        losses.append(mean_loss)
        grads = [g / len(samples) for g in grads]
        if cfg.optimizer == "momentum":
            vel = grads if vel is None else [cfg.momentum * v + g for v, g in zip(vel, grads)]
            update = vel
        else:
            update = grads
        params = RegressorParams(
            conv=params.conv - cfg.lr * update[0],
            conv_bias=params.conv_bias - cfg.lr * update[1],
            head_w=params.head_w - cfg.lr * update[2],
            head_b=params.head_b - cfg.lr * update[3],
            heatmaps=params.heatmaps,
            temperature=params.temperature,
        )
    trace = TrainTrace(
        losses=losses,
        wall_seconds=time.perf_counter() - start,
        checksum=regressor_checksum(params),
    )
    return params, trace


def _loss_and_grads(params: RegressorParams, x: np.ndarray, target: np.ndarray, patch: int):
    heat, probs, (xs_n, ys_n), coords, preds = _forward(params, x, patch)
    resid = preds - target
    loss = float((resid**2).mean())
    d_preds = 2.0 * resid / resid.size
    d_head_w = np.einsum("li,lo->lio", coords, d_preds)
    d_head_b = d_preds
    d_coords = np.einsum("lio,lo->li", params.head_w, d_preds).reshape(-1, 2)
    # soft-argmax backward: dE[x]/dh = p * (x - E[x]) / T per heatmap
    cx = coords.reshape(-1, 2)[:, 0][:, None, None]
    cy = coords.reshape(-1, 2)[:, 1][:, None, None]
    d_heat = (
        probs
        * (
            d_coords[:, 0][:, None, None] * (xs_n[None] - cx)
            + d_coords[:, 1][:, None, None] * (ys_n[None] - cy)
        )
        / params.temperature
    )
    padded = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(0, 1))
    d_conv = np.einsum("ohw,hwcuv->ocuv", d_heat, win, optimize=True)
    d_conv_bias = d_heat.sum(axis=(1, 2))
    return loss, [d_conv, d_conv_bias, d_head_w, d_head_b]


@dataclass
class DetectionMetrics:
    """Landmark errors as percent of each sample's inter-ocular distance."""

    per_sample_pct: np.ndarray
    per_landmark_pct: np.ndarray
    mean_pct: float


def inter_ocular_error(
    preds: np.ndarray, gts: np.ndarray, left_eye: int, right_eye: int
) -> DetectionMetrics:
    """Per-landmark mean of ||pred - gt|| / eye distance, times 100.

    `preds` and `gts` are (samples, landmarks, 2); the eye indices select
    the normalizing ground-truth pair per sample.
    """
    preds = np.asarray(preds, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    if preds.shape != gts.shape or preds.ndim != 3:
        raise ValueError(f"bad shapes {preds.shape} / {gts.shape}")
    n_lm = gts.shape[1]
    if not (0 <= left_eye < n_lm and 0 <= right_eye < n_lm) or left_eye == right_eye:
        raise ValueError("bad eye landmark indices")
    iod = np.linalg.norm(gts[:, left_eye] - gts[:, right_eye], axis=1)
    if (iod == 0.0).any():
        raise ValueError("coincident eye ground truths")
    err = np.linalg.norm(preds - gts, axis=2) / iod[:, None] * 100.0
    return DetectionMetrics(
        per_sample_pct=err, per_landmark_pct=err.mean(axis=0), mean_pct=float(err.mean())
    )


def silhouette_coefficient(embeddings: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette score; singleton clusters contribute 0."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    m = embeddings.shape[0]
    if labels.shape != (m,):
        raise ValueError("labels length mismatch")
    uniq = np.unique(labels)
    if uniq.size < 2:
        raise ValueError("need at least two clusters")
    diff = embeddings[:, None, :] - embeddings[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    scores = np.zeros(m)
    for i in range(m):
        own = labels == labels[i]
        if own.sum() == 1:
            continue  # singleton: defined as 0
        a = dist[i, own].sum() / (own.sum() - 1)
        b = min(dist[i, labels == c].mean() for c in uniq if c != labels[i])
        scores[i] = (b - a) / max(a, b)
    return float(scores.mean())


def drop_mask(scores: np.ndarray, drop_rate: float, grid_h: int, grid_w: int, patch: int) -> np.ndarray:
    """Pixel mask excluding the lowest-scoring drop_rate * N token cells."""
    if not 0.0 <= drop_rate < 1.0:
        raise ValueError("drop rate must be in [0, 1)")
    n = scores.shape[0]
    k = min(int(np.floor(drop_rate * n + 0.5)), n - 1)
    cell_mask = np.zeros(n, dtype=bool)
    if k > 0:
        order = np.argsort(-scores, kind="stable")
        cell_mask[order[n - k :]] = True
    return np.kron(cell_mask.reshape(grid_h, grid_w), np.ones((patch, patch), dtype=bool))


def write_pgm(path: str | Path, values: np.ndarray) -> None:
    """8-bit binary PGM of a 2-D array, min-max normalized (flat maps to 0)."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"expected a 2-D array, got {values.shape}")
    lo, hi = values.min(), values.max()
    scaled = np.zeros_like(values) if hi == lo else (values - lo) / (hi - lo)
    pixels = np.round(scaled * 255.0).astype(np.uint8)
    header = f"P5\n{values.shape[1]} {values.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + pixels.tobytes())
