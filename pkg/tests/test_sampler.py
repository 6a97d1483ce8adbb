import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from birf.sampler import DEFAULT_STEP, OccupancyGrid, march_ray, march_rays, ray_box, rebuild_occupancy, update_occupancy


def occ_grid(res=16, fill=True, **kw):
    o = OccupancyGrid(res, **kw)
    o.occupied[:] = fill
    return o


def test_ema_rule_example():
    o = OccupancyGrid(2, decay=0.95, warmup_iters=0)
    o.occ_values[:] = 0.5
    sigma = -math.log(1 - 0.2) * 2  # alpha = 1 - exp(-sigma / res) = 0.2
    update_occupancy(o, lambda x: np.full(len(x), sigma), 0, np.random.default_rng(0))
    np.testing.assert_allclose(o.occ_values, 0.475, rtol=1e-6)
    o.occ_values[:] = 0.1
    update_occupancy(o, lambda x: np.full(len(x), sigma), 16, np.random.default_rng(0))
    np.testing.assert_allclose(o.occ_values, 0.2, rtol=1e-5)


def test_zero_density_clears_bits_after_warmup():
    o = OccupancyGrid(4, warmup_iters=32)
    o.occ_values[:] = 0.5
    zero = lambda x: np.zeros(len(x))
    it = 0
    while it < 32:
        update_occupancy(o, zero, it, np.random.default_rng(it))
        assert o.occupied.all()
        it += 16
    for _ in range(100):
        update_occupancy(o, zero, it, np.random.default_rng(it))
        it += 16
    assert o.occ_values.max() < o.threshold
    assert not o.occupied.any()


def test_huge_density_sets_all_bits():
    o = OccupancyGrid(4, warmup_iters=0)
    o.occupied[:] = False
    update_occupancy(o, lambda x: np.full(len(x), 1e6), 0, np.random.default_rng(0))
    assert o.occupied.all()


def test_update_only_on_schedule():
    o = OccupancyGrid(4)
    calls = []
    fn = lambda x: calls.append(1) or np.zeros(len(x))
    assert not update_occupancy(o, fn, 5, np.random.default_rng(0))
    assert update_occupancy(o, fn, 32, np.random.default_rng(0))
    assert len(calls) == 1


def test_decay_one_zero_alpha_is_noop():
    o = OccupancyGrid(4, decay=1.0)
    o.occ_values[:] = np.random.default_rng(0).random(64).astype(np.float32)
    before = o.occ_values.copy()
    update_occupancy(o, lambda x: np.zeros(len(x)), 0, np.random.default_rng(0))
    np.testing.assert_array_equal(o.occ_values, before)


def test_rebuild_is_seeded():
    fn = lambda x: 50.0 * (np.linalg.norm(x - 0.5, axis=1) < 0.3)
    a, b = OccupancyGrid(8), OccupancyGrid(8)
    rebuild_occupancy(a, fn, seed=3)
    rebuild_occupancy(b, fn, seed=3)
    np.testing.assert_array_equal(a.occupied, b.occupied)
    assert 0.0 < a.occupied_fraction < 1.0


def test_empty_bitfield_gives_no_samples():
    assert march_ray(occ_grid(fill=False), [0.5, 0.5, -1.0], [0, 0, 1]) == []


def test_axis_aligned_unit_chord_count():
    s = march_ray(occ_grid(), [0.3, 0.6, -1.0], [0, 0, 1])
    assert len(s) == math.ceil(1 / DEFAULT_STEP) == 592
    assert s[0].t_start == pytest.approx(1.0)
    assert s[-1].t_end == pytest.approx(2.0)


def test_diagonal_chord_count():
    d = np.ones(3) / math.sqrt(3)
    s = march_ray(occ_grid(), -0.5 * d * math.sqrt(3), d)
    assert len(s) == 1024


def test_missing_ray_and_zero_direction():
    assert march_ray(occ_grid(), [2.0, 2.0, 2.0], [1, 0, 0]) == []
    with pytest.raises(ValueError):
        march_ray(occ_grid(), [0.5, 0.5, 0.5], [0, 0, 0])


def test_near_far_clip():
    s = march_ray(occ_grid(), [0.5, 0.5, -1.0], [0, 0, 1], 0.1, near=1.2, far=1.5)
    assert s[0].t_start == pytest.approx(1.2) and s[-1].t_end == pytest.approx(1.5)


def test_ray_box_axis_parallel_outside():
    t0, t1 = ray_box(np.array([[2.0, 0.5, 0.5]]), np.array([[0.0, 0.0, 1.0]]))
    assert not t1[0] > t0[0]


@given(st.integers(0, 2**31))
def test_samples_ordered_and_in_occupied_cells(seed):
    rng = np.random.default_rng(seed)
    occ = occ_grid(8)
    occ.occupied[:] = rng.random(512) < 0.5
    d = rng.normal(size=(5, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = 0.5 - 1.5 * d + rng.normal(0, 0.2, (5, 3))
    b = march_rays(occ, o, d, 0.02)
    for r in range(5):
        ts = b.t_start[b.ray_idx == r]
        assert (np.diff(ts) > 0).all()
    assert occ.occupied[occ.cell_index(b.positions)].all()
    # clearing more bits never adds samples
    occ2 = occ_grid(8)
    occ2.occupied[:] = occ.occupied & (rng.random(512) < 0.5)
    b2 = march_rays(occ2, o, d, 0.02)
    assert (np.bincount(b2.ray_idx, minlength=5) <= np.bincount(b.ray_idx, minlength=5)).all()
