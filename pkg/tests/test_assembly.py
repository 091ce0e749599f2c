import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dippas.assembly import (AssemblyConfig, BlockGrid, assemble, block_ncc, merge_blocks,
                             partition_blocks, rank_block_candidates, snapshot_block_nccs)
from dippas.engine import SnapshotPool
from dippas.fingerprint import Fingerprint, ncc
from oracles import loop_pearson


def make_pool(images, capacity=256, spill_dir=None):
    pool = SnapshotPool(capacity, spill_dir)
    for i, img in enumerate(images):
        pool.add(i + 1, img, 40.0)
    return pool


def random_images(m, shape=(8, 8, 3), seed=0):
    rng = np.random.default_rng(seed)
    return [rng.uniform(size=shape).astype(np.float32) for _ in range(m)]


def test_ranking_worked_example():
    order = rank_block_candidates([-0.1, 0.05, -0.02, 0.3])
    assert (order + 1).tolist() == [3, 1, 2, 4]


def test_ranking_ties_keep_input_order():
    assert rank_block_candidates([0.1, -0.2, 0.1, -0.2, 0.0]).tolist() == [1, 3, 4, 0, 2]


def test_ranking_rejects_bad_input():
    for bad in ([], [[0.1]], [np.nan]):
        with pytest.raises(ValueError):
            rank_block_candidates(bad)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1, 1, allow_nan=False), min_size=1, max_size=30))
def test_ranking_is_permutation_with_negatives_first(values):
    order = rank_block_candidates(values)
    assert sorted(order.tolist()) == list(range(len(values)))
    ranked = np.asarray(values)[order]
    neg = ranked < 0
    # all negatives precede all nonnegatives
    assert not np.any(neg[1:] & ~neg[:-1])
    for group in (ranked[neg], ranked[~neg]):
        assert np.all(np.diff(np.abs(group)) >= 0)


@pytest.mark.parametrize("shape,b", [((8, 8, 3), 4), ((6, 9, 1), 3), ((8, 8), 8)])
def test_partition_merge_round_trip(shape, b):
    x = np.random.default_rng(0).normal(size=shape)
    grid, tiles = partition_blocks(x, b)
    assert tiles.shape == (len(grid), b, b)
    merged = merge_blocks(grid, tiles)
    np.testing.assert_array_equal(merged, x if x.ndim == 3 else x[..., None])


def test_partition_order_and_positions():
    x = np.arange(4 * 4 * 2, dtype=float).reshape(4, 4, 2)
    grid, tiles = partition_blocks(x, 2)
    for pos, tile in zip(grid.positions, tiles):
        np.testing.assert_array_equal(
            tile, x[pos.row:pos.row + 2, pos.col:pos.col + 2, pos.channel])
    assert [p.channel for p in grid.positions] == [0] * 4 + [1] * 4
    assert grid == BlockGrid(2, 4, 4, 2) and grid.rows == grid.cols == 2


def test_partition_rejects_indivisible():
    with pytest.raises(ValueError):
        partition_blocks(np.zeros((10, 8, 1)), 4)


def test_block_ncc_matches_loop_and_zero_for_flat_tiles():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(5, 4, 4)), rng.normal(size=(5, 4, 4))
    a[2] = 1.0
    got = block_ncc(a, b)
    for i in range(5):
        expected = 0.0 if i == 2 else loop_pearson(a[i], b[i])
        assert got[i] == pytest.approx(expected, abs=1e-12)


def test_single_snapshot_is_returned_bitwise():
    img = random_images(1)[0]
    p = Fingerprint(np.random.default_rng(1).normal(size=img.shape), 0)
    out = assemble(make_pool([img]), p, AssemblyConfig(4, 3))
    np.testing.assert_array_equal(out, img.astype(np.float64))


@pytest.mark.parametrize("m,l", [(3, 3), (3, 10), (5, 7)])
def test_large_l_gives_plain_mean(m, l):
    imgs = random_images(m, seed=m)
    p = Fingerprint(np.random.default_rng(2).normal(size=imgs[0].shape), 0)
    out = assemble(make_pool(imgs), p, AssemblyConfig(4, l))
    np.testing.assert_allclose(out, np.mean(np.array(imgs, np.float64), axis=0), atol=1e-12)


def loop_assemble(images, p, b, l):
    """Per block and channel: rank by signed NCC with the fingerprint tile, average the top L."""
    h, w, c = images[0].shape
    out = np.zeros((h, w, c))
    for ch in range(c):
        for r in range(0, h, b):
            for q in range(0, w, b):
                ref = p[r:r + b, q:q + b, ch]
                scores = []
                for idx, img in enumerate(images):
                    tile = img[r:r + b, q:q + b, ch].astype(np.float64)
                    scores.append((loop_pearson(tile, ref), idx))
                negatives = sorted([s for s in scores if s[0] < 0], key=lambda s: (abs(s[0]), s[1]))
                others = sorted([s for s in scores if s[0] >= 0], key=lambda s: (s[0], s[1]))
                chosen = [idx for _, idx in (negatives + others)[:l]]
                out[r:r + b, q:q + b, ch] = np.mean(
                    [images[i][r:r + b, q:q + b, ch] for i in chosen], axis=0)
    return out


def test_assemble_matches_loop_oracle(tmp_path):
    imgs = random_images(6, shape=(8, 12, 3), seed=9)
    p = np.random.default_rng(4).normal(size=(8, 12, 3))
    out = assemble(make_pool(imgs, capacity=2, spill_dir=tmp_path), Fingerprint(p, 0),
                   AssemblyConfig(4, 2))
    np.testing.assert_allclose(out, loop_assemble(imgs, p, 4, 2), atol=1e-12)


def test_assemble_prefers_negatively_correlated_tiles():
    rng = np.random.default_rng(5)
    p = rng.normal(size=(8, 8, 1))
    base = np.full((8, 8, 1), 0.5)
    anti = (base - 0.01 * p).astype(np.float32)
    pro = (base + 0.01 * p).astype(np.float32)
    out = assemble(make_pool([pro, anti, pro]), Fingerprint(p, 0), AssemblyConfig(4, 1))
    np.testing.assert_array_equal(out, anti.astype(np.float64))
    assert ncc(out, p) < 0


def test_assemble_is_deterministic_and_shares_ncc_matrix():
    imgs = random_images(4, seed=2)
    p = Fingerprint(np.random.default_rng(6).normal(size=imgs[0].shape), 0)
    pool = make_pool(imgs)
    nccs = snapshot_block_nccs(pool, p, 4)
    assert nccs.shape == (4, 12)
    a = assemble(pool, p, AssemblyConfig(4, 2))
    b = assemble(pool, p, AssemblyConfig(4, 2), nccs)
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        assemble(pool, p, AssemblyConfig(4, 2), nccs[:2])


def test_assemble_errors():
    p = Fingerprint(np.zeros((8, 8, 3)), 0)
    with pytest.raises(ValueError):
        assemble(SnapshotPool(), p, AssemblyConfig(4, 1))
    with pytest.raises(ValueError):
        assemble(make_pool(random_images(1)), p, AssemblyConfig(3, 1))
    with pytest.raises(ValueError):
        AssemblyConfig(0, 1)
    with pytest.raises(ValueError):
        AssemblyConfig(4, 0)
