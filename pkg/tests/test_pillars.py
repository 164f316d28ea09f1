import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rcfuse.densify import augment_points
from rcfuse.errors import DimensionMismatch, DuplicatePillarCoord, InvariantViolation
from rcfuse.pillars import (TJ4D, TJ4D_GRID, VOD, VOD_GRID, BevGridSpec, BevTensor, ChannelMap, PillarTensor,
                            apply_channel_map, augment_radar_points, concat_bev, fisher_yates_select, pillarize,
                            scatter_max)

G = BevGridSpec((0.0, 4.0), (-2.0, 2.0), (-1.0, 1.0), (1.0, 1.0))


def test_grid_shapes():
    assert (TJ4D_GRID.W, TJ4D_GRID.H) == (432, 496)
    assert (VOD_GRID.W, VOD_GRID.H) == (320, 320)
    with pytest.raises(ValueError):
        BevGridSpec((1.0, 1.0), (0, 1), (0, 1))


def test_cell_index_half_open():
    row, col = G.cell_index(np.array([0.0, 3.999]), np.array([-2.0, 1.999]))
    assert col.tolist() == [0, 3] and row.tolist() == [0, 3]
    assert G.in_range(np.array([[4.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0], [0.0, -2.0, -1.0]])).tolist() == \
        [False, False, False, True]


def test_tj4d_augmentation_examples():
    pts = np.array([[1.0, 0.0, 0.0, 0.5, -1.0], [3.0, 4.0, 0.0, 0.0, 0.0], [-1.0, 0.0, 0.0, 0.0, 0.0],
                    [70.0, 0.0, 0.0, 0.0, 0.0]])
    out = augment_radar_points(pts, TJ4D, TJ4D_GRID)
    assert out.shape == (2, 13)
    assert out[0, 5:8].tolist() == [1.0, 0.0, 0.0]
    assert out[0, 3:5].tolist() == [0.5, -1.0]
    assert out[1, 5] == pytest.approx(5.0, abs=1e-12)
    assert out[1, 6] == pytest.approx(math.atan2(4, 3), abs=1e-12)
    assert abs(out[1, 6] - 0.927295) < 1e-6
    assert out[1, 7] == 0.0


def test_tj4d_elevation_and_origin():
    out = augment_radar_points(np.array([[3.0, 0.0, 4.0, 0, 0], [0.0, 0.0, 0.0, 0, 0]]), TJ4D,
                               BevGridSpec((0.0, 5.0), (-1, 1), (-1, 5), (1.0, 1.0)))
    assert out[0, 7] == pytest.approx(math.asin(0.8))
    assert out[1, 5] == 0.0 and out[1, 7] == 0.0


def test_vod_augmentation_keeps_fields():
    pts = np.array([[10.0, 1.0, 0.5, 3.0, -2.0, 1.5]])
    out = augment_radar_points(pts, VOD, VOD_GRID)
    assert out.shape == (1, 11)
    assert out[0, :6].tolist() == pts[0].tolist()


def test_pillarize_padding():
    pts = augment_points([[0.1, 0.1, 0.0], [0.2, 0.3, 0.1], [0.9, 0.9, -0.1]], G)
    t = pillarize(pts, G, 4)
    assert t.features.shape == (8, 1, 4) and t.features.dtype == np.float32
    assert t.counts.tolist() == [3]
    assert not np.any(t.features[:, 0, 3])


def test_pillarize_empty():
    t = pillarize(np.zeros((0, 8)), G, 4)
    assert t.n_pillars == 0
    assert not np.any(scatter_max(t, G).data)


def test_pillar_order_and_counts():
    rng = np.random.default_rng(0)
    xyz = rng.uniform([0, -2, -1], [4, 2, 1], (300, 3))
    t = pillarize(augment_points(xyz, G), G, 1000)
    lin = t.coords[:, 0] * G.W + t.coords[:, 1]
    assert np.all(np.diff(lin) > 0)
    assert t.counts.sum() == 300


def test_overflow_sampling_is_seeded():
    xyz = np.column_stack([np.linspace(0.01, 0.99, 50), np.full(50, 0.5), np.zeros(50)])
    pts = augment_points(xyz, G)
    a = pillarize(pts, G, 8, seed=1)
    b = pillarize(pts, G, 8, seed=1)
    c = pillarize(pts, G, 8, seed=2)
    assert a.features.tobytes() == b.features.tobytes()
    assert a.features.tobytes() != c.features.tobytes()
    # selected points keep their input order and are distinct
    x = a.features[0, 0]
    assert np.all(np.diff(x) > 0)


def test_fisher_yates_distinct():
    rng = np.random.default_rng(3)
    for n in (1, 5, 40):
        for k in range(1, n + 1):
            idx = fisher_yates_select(n, k, rng)
            assert len(set(idx.tolist())) == k and idx.min() >= 0 and idx.max() < n


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 16), st.sampled_from([1, 2, 4, 8]))
def test_thread_count_never_changes_output(seed, n_r, threads):
    rng = np.random.default_rng(seed)
    xyz = rng.uniform([0, -2, -1], [4, 2, 1], (int(rng.integers(1, 2000)), 3))
    pts = augment_points(xyz, G)
    a = pillarize(pts, G, n_r, seed=seed, threads=1)
    b = pillarize(pts, G, n_r, seed=seed, threads=threads)
    assert a.features.tobytes() == b.features.tobytes()
    assert a.counts.tobytes() == b.counts.tobytes() and a.coords.tobytes() == b.coords.tobytes()


def test_channel_map_examples():
    pts = augment_points([[0.1, 0.1, 0.0], [0.3, 0.5, 0.2]], G)
    t = pillarize(pts, G, 4)
    assert apply_channel_map(t, ChannelMap.identity(8)).features.tobytes() == t.features.tobytes()
    assert apply_channel_map(t, None) is t
    zero = apply_channel_map(t, ChannelMap(np.zeros((3, 8)), np.zeros(3)))
    assert zero.features.shape == (3, 1, 4) and not np.any(zero.features)
    avg = apply_channel_map(t, ChannelMap(np.full((1, 8), 1 / 8), [0.0]))
    expect = pts.astype(np.float32).mean(axis=1)
    assert np.allclose(avg.features[0, 0, :2], expect, atol=1e-6)
    assert not np.any(avg.features[0, 0, 2:])
    with pytest.raises(DimensionMismatch):
        apply_channel_map(t, ChannelMap.identity(5))


def test_scatter_examples():
    feats = np.zeros((2, 2, 2), np.float32)
    feats[:, 0, 0] = [1.0, 2.0]
    feats[:, 1, :] = [[-1.0, -3.0], [-5.0, -4.0]]
    t = PillarTensor(feats, np.array([1, 2], np.int32), np.array([[0, 1], [3, 2]], np.int32))
    bev = scatter_max(t, G).data
    assert bev[:, 0, 1].tolist() == [1.0, 2.0]
    assert bev[:, 3, 2].tolist() == [-1.0, -4.0]
    assert np.count_nonzero(bev) == 4


def test_scatter_padding_excluded_from_max():
    feats = np.zeros((1, 1, 4), np.float32)
    feats[0, 0, 0] = -1.0
    t = PillarTensor(feats, np.array([1], np.int32), np.array([[0, 0]], np.int32))
    assert scatter_max(t, G).data[0, 0, 0] == -1.0


def test_scatter_invariants():
    f = np.ones((1, 2, 2), np.float32)
    with pytest.raises(DuplicatePillarCoord):
        scatter_max(PillarTensor(f, np.array([1, 1]), np.array([[0, 0], [0, 0]])), G)
    with pytest.raises(InvariantViolation):
        scatter_max(PillarTensor(f, np.array([1, 1]), np.array([[0, 0], [9, 0]])), G)
    with pytest.raises(InvariantViolation):
        scatter_max(PillarTensor(f, np.array([0, 1]), np.array([[0, 0], [1, 0]])), G)


def test_concat_bev():
    a = BevTensor(np.ones((2, G.H, G.W)), G)
    b = BevTensor(np.zeros((3, G.H, G.W)), G)
    assert concat_bev(a, b).data.shape == (5, 4, 4)
    with pytest.raises(DimensionMismatch):
        BevTensor(np.zeros((1, 3, 4)), G)
