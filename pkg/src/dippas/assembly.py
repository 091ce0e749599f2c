"""Block-wise assembly of the final anonymized image from a snapshot pool.

For every block position and colour channel, the pool's tiles are ranked by
their signed NCC with the matching fingerprint tile (negative correlations
first, then nonnegative ones, each by increasing magnitude) and the best ``L``
tiles are averaged pixel by pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fingerprint import NCC_EPS, Fingerprint


@dataclass(frozen=True)
class AssemblyConfig:
    block_size: int
    average_count: int

    def __post_init__(self):
        if self.block_size < 1:
            raise ValueError(f"block size must be positive, got {self.block_size}")
        if self.average_count < 1:
            raise ValueError(f"average count must be >= 1, got {self.average_count}")


@dataclass(frozen=True)
class BlockPosition:
    index: int
    row: int
    col: int
    channel: int


@dataclass(frozen=True)
class BlockGrid:
    block_size: int
    height: int
    width: int
    channels: int

    @property
    def rows(self) -> int:
        return self.height // self.block_size

    @property
    def cols(self) -> int:
        return self.width // self.block_size

    def __len__(self):
        return self.rows * self.cols * self.channels

    @property
    def positions(self) -> list[BlockPosition]:
        out = []
        for c in range(self.channels):
            for r in range(self.rows):
                for q in range(self.cols):
                    out.append(BlockPosition(len(out), r * self.block_size,
                                             q * self.block_size, c))
        return out


def _grid_for(shape, block_size: int) -> BlockGrid:
    if len(shape) == 2:
        shape = (*shape, 1)
    h, w, c = shape
    if block_size < 1 or h % block_size or w % block_size:
        raise ValueError(f"block size {block_size} does not divide image {h}x{w}")
    return BlockGrid(block_size, h, w, c)


def partition_blocks(array, block_size: int) -> tuple[BlockGrid, np.ndarray]:
    """Split an ``H x W x C`` array into non-overlapping ``B x B`` single-channel tiles.

    Tiles are ordered channel-outer, then row-major over block positions, and
    returned as an ``N_b x B x B`` array.
    """
    array = np.asarray(array)
    if array.ndim == 2:
        array = array[..., None]
    grid = _grid_for(array.shape, block_size)
    b = block_size
    # (C, rows, B, cols, B) -> (C, rows, cols, B, B)
    tiles = array.transpose(2, 0, 1).reshape(grid.channels, grid.rows, b, grid.cols, b)
    tiles = tiles.transpose(0, 1, 3, 2, 4).reshape(len(grid), b, b)
    return grid, tiles


def merge_blocks(grid: BlockGrid, tiles: np.ndarray) -> np.ndarray:
    """Inverse of :func:`partition_blocks`."""
    b = grid.block_size
    arr = tiles.reshape(grid.channels, grid.rows, grid.cols, b, b).transpose(0, 1, 3, 2, 4)
    return arr.reshape(grid.channels, grid.height, grid.width).transpose(1, 2, 0)


def block_ncc(tiles: np.ndarray, ref_tiles: np.ndarray) -> np.ndarray:
    """Per-tile Pearson NCC; tiles with no variance score 0."""
    a = tiles.reshape(len(tiles), -1).astype(np.float64)
    b = ref_tiles.reshape(len(ref_tiles), -1).astype(np.float64)
    a = a - a.mean(axis=1, keepdims=True)
    b = b - b.mean(axis=1, keepdims=True)
    na = np.sqrt(np.sum(a * a, axis=1))
    nb = np.sqrt(np.sum(b * b, axis=1))
    ok = (na >= NCC_EPS) & (nb >= NCC_EPS)
    out = np.zeros(len(a))
    out[ok] = np.sum(a[ok] * b[ok], axis=1) / (na[ok] * nb[ok])
    return out


def rank_block_candidates(nccs) -> np.ndarray:
    """Order candidate indices: negative NCCs by increasing magnitude, then the rest.

    Indices are 0-based. Ties keep input order, which is iteration order for
    a snapshot pool.
    """
    nccs = np.asarray(nccs, dtype=np.float64)
    if nccs.ndim != 1 or len(nccs) == 0:
        raise ValueError("need a nonempty 1-D list of NCC values")
    if not np.all(np.isfinite(nccs)):
        raise ValueError("NCC values must be finite")
    group = (nccs >= 0).astype(int)
    return np.lexsort((np.arange(len(nccs)), np.abs(nccs), group))


def snapshot_block_nccs(pool, p: Fingerprint, block_size: int) -> np.ndarray:
    """``M x N_b`` matrix of NCCs between every snapshot tile and the fingerprint tile."""
    _, p_tiles = partition_blocks(p.pattern, block_size)
    rows = []
    for image in pool.images():
        if image.shape != p.pattern.shape:
            raise ValueError(f"snapshot {image.shape} does not match fingerprint {p.pattern.shape}")
        rows.append(block_ncc(partition_blocks(image, block_size)[1], p_tiles))
    return np.array(rows)


def assemble(pool, p: Fingerprint, config: AssemblyConfig, nccs: np.ndarray | None = None):
    """Build the anonymized image from the best ``L`` tiles at each block position.

    ``nccs`` may carry a precomputed :func:`snapshot_block_nccs` matrix so that
    several ``L`` values can share one scoring pass.
    """
    m = len(pool)
    if m == 0:
        raise ValueError("cannot assemble an empty snapshot pool")
    grid = _grid_for(p.pattern.shape, config.block_size)
    if nccs is None:
        nccs = snapshot_block_nccs(pool, p, config.block_size)
    if nccs.shape != (m, len(grid)):
        raise ValueError(f"ncc matrix {nccs.shape} does not match pool/grid {(m, len(grid))}")

    keep = min(config.average_count, m)
    selected = np.zeros((m, len(grid)), dtype=bool)
    for b in range(len(grid)):
        selected[rank_block_candidates(nccs[:, b])[:keep], b] = True

    acc = np.zeros((len(grid), config.block_size, config.block_size))
    for i, image in enumerate(pool.images()):
        if selected[i].any():
            tiles = partition_blocks(image, config.block_size)[1]
            acc[selected[i]] += tiles[selected[i]]
    return merge_blocks(grid, acc / keep)
