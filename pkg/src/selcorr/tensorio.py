"""Binary tensor persistence and the spatial feature-grid containers.

Everything downstream works on float64 in memory; float32 is allowed on
disk and round-trips bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_MAGIC = b"SCET"
_VERSION = 1
# on-disk scalar types; all little-endian
_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

# fixed prefix: magic(4) + version u32 + dtype u16 + rank u16 = 12 bytes,
# followed by rank u64 dims, then raw scalars
_HEADER = struct.Struct("<4sIHH")


class ScetError(ValueError):
    """Malformed or inconsistent tensor file."""


def write_tensor(path: str | Path, arr: np.ndarray) -> None:
    """Write a float32/float64 array of rank >= 1 to `path` in SCET layout."""
    arr = np.asarray(arr)
    if arr.dtype not in _DTYPE_TO_CODE:
        raise ScetError(f"unsupported dtype {arr.dtype}; expected float32 or float64")
    if arr.ndim < 1:
        raise ScetError("rank-0 tensors are not supported")
    if any(d < 1 for d in arr.shape):
        raise ScetError(f"all dims must be >= 1, got {arr.shape}")
    code = _DTYPE_TO_CODE[arr.dtype]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, code, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(np.ascontiguousarray(arr).astype(_CODE_TO_DTYPE[code], copy=False).tobytes())


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a tensor written by `write_tensor`; dtype and bits are preserved."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise ScetError(f"{path}: truncated header ({len(head)} bytes)")
        magic, version, code, rank = _HEADER.unpack(head)
        if magic != _MAGIC:
            raise ScetError(f"{path}: bad magic {magic!r}")
        if version != _VERSION:
            raise ScetError(f"{path}: unsupported format version {version}")
        if code not in _CODE_TO_DTYPE:
            raise ScetError(f"{path}: unknown dtype code {code}")
        if rank < 1:
            raise ScetError(f"{path}: rank must be >= 1, got {rank}")
        dim_bytes = fh.read(8 * rank)
        if len(dim_bytes) < 8 * rank:
            raise ScetError(f"{path}: truncated dims")
        dims = struct.unpack(f"<{rank}Q", dim_bytes)
        if any(d < 1 for d in dims):
            raise ScetError(f"{path}: all dims must be >= 1, got {dims}")
        dtype = _CODE_TO_DTYPE[code]
        expected = int(np.prod(dims)) * dtype.itemsize
        payload = fh.read(expected)
        if len(payload) < expected:
            raise ScetError(
                f"{path}: truncated payload (expected {expected} bytes, got {len(payload)})"
            )
        if fh.read(1):
            raise ScetError(f"{path}: payload length mismatch (trailing bytes)")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    # native byte order, writable copy
    return arr.astype(dtype.newbyteorder("="), copy=True)


@dataclass
class FeatureGrid:
    """Per-patch token features on an H_p x W_p grid of `patch`-pixel cells.

    `features` is (H_p*W_p, d) float64, row-major over grid rows: token i
    sits at cell (i // W_p, i % W_p). Image size is grid size times patch.
    """

    grid_h: int
    grid_w: int
    patch: int
    features: np.ndarray

    def __post_init__(self) -> None:
        if self.grid_h < 1 or self.grid_w < 1 or self.patch < 1:
            raise ValueError("grid dims and patch size must be positive")
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] != self.grid_h * self.grid_w:
            raise ValueError(
                f"expected ({self.grid_h * self.grid_w}, d) features, got {self.features.shape}"
            )

    @property
    def n_tokens(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    @property
    def image_h(self) -> int:
        return self.grid_h * self.patch

    @property
    def image_w(self) -> int:
        return self.grid_w * self.patch

    def token_cell(self, index: int) -> tuple[int, int]:
        return index // self.grid_w, index % self.grid_w


@dataclass
class DenseFeatureMap:
    """Per-pixel features, `values` shaped (H, W, d) float64."""

    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError(f"expected (H, W, d) values, got {self.values.shape}")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


def assemble_feature_grid(
    tokens: np.ndarray, grid_h: int, grid_w: int, patch: int
) -> FeatureGrid:
    """Wrap an (N, d) token matrix as a FeatureGrid; N must equal grid_h*grid_w."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be (N, d), got shape {tokens.shape}")
    if tokens.shape[0] != grid_h * grid_w:
        raise ValueError(
            f"token count {tokens.shape[0]} does not match {grid_h}x{grid_w} grid"
        )
    return FeatureGrid(grid_h, grid_w, patch, tokens.copy())


def bilinear_upsample(grid: FeatureGrid, target_h: int, target_w: int) -> DenseFeatureMap:
    """Upsample a feature grid to per-pixel resolution.

    Each cell's value is anchored at its cell-center pixel; in between the
    interpolation is linear per axis, and pixels outside the convex hull of
    centers clamp to the nearest edge value.
    """
    if target_h < grid.grid_h or target_w < grid.grid_w:
        raise ValueError("target dims must be >= grid dims")
    vals = grid.features.reshape(grid.grid_h, grid.grid_w, grid.channels)
    out = np.empty((target_h, target_w, grid.channels))
    gy = _grid_coords(target_h, grid.grid_h)
    gx = _grid_coords(target_w, grid.grid_w)
    y0 = np.clip(np.floor(gy).astype(np.intp), 0, max(grid.grid_h - 2, 0))
    x0 = np.clip(np.floor(gx).astype(np.intp), 0, max(grid.grid_w - 2, 0))
    y1 = np.minimum(y0 + 1, grid.grid_h - 1)
    x1 = np.minimum(x0 + 1, grid.grid_w - 1)
    wy = (gy - y0)[:, None, None]
    wx = (gx - x0)[None, :, None]
    out = (
        vals[np.ix_(y0, x0)] * (1.0 - wy) * (1.0 - wx)
        + vals[np.ix_(y0, x1)] * (1.0 - wy) * wx
        + vals[np.ix_(y1, x0)] * wy * (1.0 - wx)
        + vals[np.ix_(y1, x1)] * wy * wx
    )
    return DenseFeatureMap(out)


def _grid_coords(target: int, cells: int) -> np.ndarray:
    # pixel centers mapped into grid-cell coordinates, clamped to the hull
    scale = target / cells
    coords = (np.arange(target) + 0.5) / scale - 0.5
    return np.clip(coords, 0.0, cells - 1.0)


def read_manifest(path: str | Path) -> list[Path]:
    """List of sample directories, one per non-empty line, relative to the manifest."""
    path = Path(path)
    base = path.parent
    dirs = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if line:
            dirs.append(base / line)
    return dirs


def write_manifest(path: str | Path, names: list[str]) -> None:
    Path(path).write_text("".join(name + "\n" for name in names))
