import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relayformer.errors import ContractError, ShapeError
from relayformer.numerics import Tensor
from relayformer.numerics.gradcheck import gradcheck
from relayformer.tiling import (
    compute_unit_grid,
    partition_clip,
    reassemble_features,
    reassemble_units,
)


def oracle_count(h, w, p):
    rows = 0
    while rows * p < h:
        rows += 1
    cols = 0
    while cols * p < w:
        cols += 1
    return rows * cols


def test_grid_reference_example():
    g = compute_unit_grid(1024, 1024, 512, 1)
    assert (g.rows, g.cols, g.units_per_frame, g.pad_bottom, g.pad_right) == (2, 2, 4, 0, 0)


def test_grid_exact_fit():
    g = compute_unit_grid(512, 512, 512, 1)
    assert (g.units_per_frame, g.pad_bottom, g.pad_right) == (1, 0, 0)


def test_grid_ceil_forced():
    g = compute_unit_grid(520, 512, 512, 1)
    assert (g.rows, g.cols, g.units_per_frame, g.pad_bottom) == (2, 1, 2, 504)


def test_grid_total_units_with_clip():
    g = compute_unit_grid(100, 130, 64, 4)
    assert g.total_units == g.units_per_frame * 4 == 2 * 3 * 4


@pytest.mark.parametrize("args", [(0, 5, 4, 1), (5, -1, 4, 1), (5, 5, 0, 1), (5, 5, 4, 0)])
def test_grid_rejects_nonpositive(args):
    with pytest.raises(ContractError):
        compute_unit_grid(*args)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 2000), st.integers(1, 2000), st.integers(1, 600))
def test_grid_invariants_and_count(h, w, p):
    g = compute_unit_grid(h, w, p)
    assert g.rows * p >= h and (g.rows - 1) * p < h
    assert g.cols * p >= w and (g.cols - 1) * p < w
    assert g.pad_bottom == g.rows * p - h and g.pad_right == g.cols * p - w
    assert g.units_per_frame == oracle_count(h, w, p)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 300), st.integers(1, 300), st.integers(1, 300), st.integers(1, 40))
def test_unit_count_monotone(h, w, dh, p):
    base = compute_unit_grid(h, w, p).units_per_frame
    assert compute_unit_grid(h + dh, w, p).units_per_frame >= base
    assert compute_unit_grid(h, w + dh, p).units_per_frame >= base


def test_coords_are_t_major_row_major():
    g = compute_unit_grid(20, 30, 10, 2)
    coords = g.coords()
    assert coords.shape == (12, 3)
    for i, (t, r, c) in enumerate(coords):
        assert g.unit_coords(i) == (t, r, c)
        assert g.unit_index(t, r, c) == i
    assert coords[:4].tolist() == [[0, 0, 0], [0, 0, 1], [0, 0, 2], [0, 1, 0]]


def test_partition_checkerboard_units_constant():
    p = 4
    g = compute_unit_grid(8, 8, p)
    img = np.zeros((1, 8, 8, 1))
    for r in range(2):
        for c in range(2):
            img[0, r * p:(r + 1) * p, c * p:(c + 1) * p] = (r + c) % 2 + 10 * (2 * r + c)
    units = partition_clip(img, g)
    for i in range(4):
        assert np.all(units[i] == units[i].flat[0])
        r, c = divmod(i, 2)
        assert units[i].flat[0] == (r + c) % 2 + 10 * i


def test_partition_exact_fit_round_trip(rng):
    g = compute_unit_grid(16, 24, 8, 2)
    x = rng.integers(0, 255, size=(2, 16, 24, 3)).astype(np.uint8)
    units = partition_clip(x, g)
    assert units.shape == (12, 8, 8, 3)
    assert np.array_equal(reassemble_units(units, g), x)


def test_partition_round_trip_with_padding(rng):
    g = compute_unit_grid(520, 512, 512)
    x = rng.random((1, 520, 512, 3)).astype(np.float32)
    units = partition_clip(x, g, pad_value=0.0)
    # padded canvas oracle, built pixel-block by block
    canvas = np.zeros((1, 1024, 512, 3), np.float32)
    for i in range(g.total_units):
        _, r, c = g.unit_coords(i)
        canvas[0, r * 512:(r + 1) * 512, c * 512:(c + 1) * 512] = units[i]
    assert np.array_equal(canvas[:, :520], x)
    assert np.all(canvas[:, 520:] == 0.0)
    assert np.array_equal(reassemble_units(units, g), x)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 24), st.integers(1, 24), st.integers(1, 2), st.integers(0, 2**31))
def test_round_trip_property(p, h_mult, w_mult, t, seed):
    h = max(1, min(h_mult, 4 * p))
    w = max(1, min(w_mult, 4 * p))
    g = compute_unit_grid(h, w, p, t)
    x = np.random.default_rng(seed).random((t, h, w, 2))
    assert np.array_equal(reassemble_units(partition_clip(x, g, pad_value=-1.0), g), x)


def test_partition_shape_mismatch():
    g = compute_unit_grid(8, 8, 4)
    with pytest.raises(ShapeError):
        partition_clip(np.zeros((1, 8, 9, 1)), g)


def test_partition_tensor_matches_numpy_and_grads(rng):
    g = compute_unit_grid(5, 7, 4, 2)
    x = rng.normal(size=(2, 5, 7, 3))
    out = partition_clip(Tensor(x), g)
    assert np.array_equal(out.data, partition_clip(x, g))
    xt = Tensor(x, requires_grad=True)
    w = Tensor(rng.normal(size=out.shape))
    assert max(gradcheck(lambda: (partition_clip(xt, g) * w).sum(), [xt]).values()) < 1e-6


def test_reassemble_single_unit_is_crop(rng):
    g = compute_unit_grid(50, 40, 64)
    f = rng.normal(size=(1, 4, 4, 3))
    out = reassemble_features(f, g)
    assert out.shape == (1, 4, 3, 3)
    assert np.array_equal(out, f[:, :4, :3])


def test_reassemble_blockwise_constant():
    g = compute_unit_grid(64, 96, 32, 2)
    n_f = 2
    f = np.zeros((g.total_units, n_f, n_f, 1))
    for i in range(g.total_units):
        f[i] = i
    out = reassemble_features(f, g)
    assert out.shape == (2, 4, 6, 1)
    for t in range(2):
        for y in range(4):
            for x in range(6):
                assert out[t, y, x, 0] == g.unit_index(t, y // n_f, x // n_f)


def test_reassemble_index_map_oracle(rng):
    g = compute_unit_grid(100, 120, 64)
    n_f, d = 4, 3
    cell = 16
    f = rng.normal(size=(4, n_f, n_f, d))
    out = reassemble_features(f, g)
    assert out.shape == (1, 7, 8, d)
    for y in range(7):
        for x in range(8):
            unit = g.unit_index(0, y // n_f, x // n_f)
            np.testing.assert_array_equal(out[0, y, x], f[unit, y % n_f, x % n_f])
    assert out.shape[1] == -(-100 // cell) and out.shape[2] == -(-120 // cell)


def test_reassemble_rejects_inconsistent():
    g = compute_unit_grid(64, 64, 32)
    with pytest.raises(ShapeError):
        reassemble_features(np.zeros((3, 2, 2, 1)), g)
    with pytest.raises(ShapeError):
        reassemble_features(np.zeros((4, 3, 3, 1)), g)
