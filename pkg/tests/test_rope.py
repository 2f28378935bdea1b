import numpy as np
import pytest

from relayformer.errors import ConfigError, ShapeError
from relayformer.numerics import Tensor
from relayformer.numerics.gradcheck import gradcheck
from relayformer.rope import (
    RopeConfig,
    TokenPosition,
    apply_rotary,
    default_axis_split,
    frequencies,
    relay_positions,
    rope_4d_apply,
    rope_rotate_1d,
)
from relayformer.tiling import compute_unit_grid


def f64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def test_axis_split_defaults():
    assert default_axis_split(16) == (4, 4, 4, 4)
    assert default_axis_split(8) == (2, 2, 2, 2)
    assert default_axis_split(12) == (6, 2, 2, 2)
    assert default_axis_split(4) == (4, 0, 0, 0)


def test_config_validation():
    with pytest.raises(ConfigError):
        RopeConfig(head_dim=7)
    with pytest.raises(ConfigError):
        RopeConfig(head_dim=8, axis_split=(2, 2, 2, 4))
    with pytest.raises(ConfigError):
        RopeConfig(head_dim=8, axis_split=(3, 1, 2, 2))


def test_frequencies_strictly_decreasing():
    th = frequencies(16)
    assert th[0] == 1.0
    assert np.all(np.diff(th) < 0)
    with pytest.raises(ShapeError):
        frequencies(5)


def test_rotate_pos_zero_is_identity(rng):
    v = f64(rng.normal(size=(3, 8)))
    assert np.array_equal(rope_rotate_1d(v, 0).data, v.data)


def test_rotate_matches_explicit_rotation(rng):
    v = rng.normal(size=6)
    pos = 5
    out = rope_rotate_1d(f64(v), pos).data
    for j in range(3):
        ang = pos * 10000.0 ** (-2 * j / 6)
        c, s = np.cos(ang), np.sin(ang)
        rot = np.array([[c, -s], [s, c]])
        np.testing.assert_allclose(out[2 * j:2 * j + 2], rot @ v[2 * j:2 * j + 2], atol=1e-14)


def test_rotate_odd_dim_rejected():
    with pytest.raises(ShapeError):
        rope_rotate_1d(f64(np.ones(5)), 3)


def test_rotate_is_isometry(rng):
    for _ in range(20):
        v = rng.normal(size=(4, 10))
        out = rope_rotate_1d(f64(v), rng.integers(0, 1000)).data
        np.testing.assert_allclose(np.linalg.norm(out, axis=-1), np.linalg.norm(v, axis=-1), atol=1e-6)


def test_rotate_relative_shift_invariance(rng):
    for _ in range(100):
        q, k = rng.normal(size=8), rng.normal(size=8)
        p1, p2 = rng.integers(0, 64, size=2)
        s = rng.integers(0, 17)
        a = rope_rotate_1d(f64(q), p1).data @ rope_rotate_1d(f64(k), p2).data
        b = rope_rotate_1d(f64(q), p1 + s).data @ rope_rotate_1d(f64(k), p2 + s).data
        assert abs(a - b) < 1e-6


def test_apply_rotary_gradcheck(rng):
    x = f64(rng.normal(size=(2, 5, 8)), grad=True)
    ang = rng.normal(size=(5, 4))
    w = f64(rng.normal(size=(2, 5, 8)))
    assert max(gradcheck(lambda: (apply_rotary(x, ang) * w).sum(), [x]).values()) < 1e-8


def test_4d_zero_positions_identity(rng):
    cfg = RopeConfig(16)
    x = f64(rng.normal(size=(6, 16)))
    pos = [TokenPosition(0, 0, 0, 0)] * 6
    assert np.array_equal(rope_4d_apply(x, pos, cfg).data, x.data)


def test_4d_only_t_slice_differs(rng):
    cfg = RopeConfig(16)
    v = rng.normal(size=16)
    x = f64(np.stack([v, v]))
    out = rope_4d_apply(x, [TokenPosition(1, 2, 3, 0), TokenPosition(1, 2, 3, 5)], cfg).data
    d_tok, d_x, d_y, d_t = cfg.axis_split
    lead = d_tok + d_x + d_y
    np.testing.assert_array_equal(out[0, :lead], out[1, :lead])
    assert np.all(out[0, lead:] != out[1, lead:])


def test_4d_count_mismatch(rng):
    with pytest.raises(ShapeError):
        rope_4d_apply(f64(np.ones((3, 8))), [TokenPosition(0, 0, 0, 0)] * 2, RopeConfig(8))


def test_4d_isometry(rng):
    cfg = RopeConfig(16)
    x = rng.normal(size=(40, 16))
    pos = rng.integers(0, 50, size=(40, 4))
    out = rope_4d_apply(f64(x), pos, cfg).data
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), np.linalg.norm(x, axis=1), atol=1e-6)


@pytest.mark.parametrize("axis", range(4))
def test_4d_per_axis_shift_invariance(rng, axis):
    cfg = RopeConfig(16)
    for _ in range(25):
        q, k = rng.normal(size=(1, 16)), rng.normal(size=(1, 16))
        pq, pk = rng.integers(0, 8, size=(2, 1, 4))
        shift = np.zeros(4, dtype=int)
        shift[axis] = rng.integers(0, 17)
        a = rope_4d_apply(f64(q), pq, cfg).data @ rope_4d_apply(f64(k), pk, cfg).data.T
        b = rope_4d_apply(f64(q), pq + shift, cfg).data @ rope_4d_apply(f64(k), pk + shift, cfg).data.T
        assert abs(a - b).max() < 1e-6


def test_relay_positions_layout():
    g = compute_unit_grid(64, 96, 32, 2)
    pos = relay_positions(g, 2)
    assert pos.shape == (g.total_units * 2, 4)
    # unit 4 is t=0,row=1,col=1
    assert pos[8].tolist() == [0, 1, 1, 0]
    assert pos[9].tolist() == [1, 1, 1, 0]
    assert pos[-1].tolist() == [1, 2, 1, 1]
