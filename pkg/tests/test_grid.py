"""Grid preprocessing against a literal step-by-step reference.

The reference implementation below evaluates the quantizer, occupancy,
latest-frame selection, and carry-forward recursion with plain Python
loops, exactly as defined, and is kept independent of the vectorized
package code it checks.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowcast.errors import ConfigError, DataError
from flowcast.grid import GridSpec, embed_grid, grid_stack, locf_fill, quantize
from flowcast.series import Volume


def ref_quantize(t, g1, delta, K):
    raw = 1 + math.floor((t - g1) / delta + 0.5)
    return min(max(raw, 1), K)


def ref_embed_and_fill(frames, g1, delta, K):
    """Reference: returns (slot arrays, occupancy, filled arrays)."""
    q = [ref_quantize(t, g1, delta, K) for _, t in frames]
    occupancy = []
    slots = []
    shape = frames[0][0].shape
    for k in range(1, K + 1):
        hits = [i for i in range(len(frames)) if q[i] == k]
        occupancy.append(1 if hits else 0)
        if hits:
            best = hits[0]
            for i in hits[1:]:
                if frames[i][1] >= frames[best][1]:  # later index wins ties
                    best = i
            slots.append(np.asarray(frames[best][0].voxels, dtype=np.float64))
        else:
            slots.append(np.zeros(shape, dtype=np.float64))
    k0 = occupancy.index(1)
    filled = []
    current = slots[k0]
    for k in range(K):
        if occupancy[k]:
            current = slots[k]
        filled.append(current)
    return slots, occupancy, filled


def vols(values, shape=(2, 2, 2)):
    return [Volume(np.full(shape, v, dtype=np.float32)) for v in values]


class TestQuantize:
    def test_half_up_example(self):
        # (1.4 - 0)/1 + 0.5 = 1.9, floor -> 1, slot 2
        assert quantize(1.4, GridSpec(0.0, 1.0, 4)) == 2

    def test_origin_maps_to_first_slot(self):
        assert quantize(0.0, GridSpec(0.0, 1.0, 4)) == 1
        assert quantize(2.5, GridSpec(2.5, 0.3, 7)) == 1

    def test_clip_upper(self):
        assert quantize(10.0, GridSpec(0.0, 1.0, 4)) == 4

    def test_clip_lower(self):
        assert quantize(-10.0, GridSpec(0.0, 1.0, 4)) == 1

    def test_non_finite_rejected(self):
        with pytest.raises(DataError):
            quantize(float("nan"), GridSpec(0.0, 1.0, 4))

    @settings(max_examples=200, deadline=None)
    @given(
        st.floats(-50, 50),
        st.floats(-50, 50),
        st.floats(-5, 5),
        st.floats(0.05, 3),
        st.integers(1, 12),
    )
    def test_monotone_in_t(self, t_a, t_b, g1, delta, K):
        grid = GridSpec(g1, delta, K)
        lo, hi = sorted((t_a, t_b))
        assert quantize(lo, grid) <= quantize(hi, grid)


class TestEmbed:
    def test_exact_alignment_is_identity(self):
        grid = GridSpec(0.0, 1.0, 4)
        frames = list(zip(vols([1, 2, 3, 4]), [0.0, 1.0, 2.0, 3.0]))
        g = embed_grid(frames, grid)
        assert g.occupancy == (True, True, True, True)
        for k in range(4):
            assert np.array_equal(g.slots[k].voxels, frames[k][0].voxels)
            assert g.source_index[k] == k

    def test_collision_keeps_latest(self):
        grid = GridSpec(0.0, 1.0, 3)
        frames = list(zip(vols([5, 6]), [0.0, 0.1]))
        g = embed_grid(frames, grid)
        assert g.occupancy == (True, False, False)
        assert g.source_index[0] == 1  # the t=0.1 frame is latest in slot 1
        assert np.array_equal(g.slots[0].voxels, frames[1][0].voxels)

    def test_out_of_range_clips_to_last_slot(self):
        grid = GridSpec(0.0, 1.0, 3)
        frames = [(vols([9])[0], 5.0)]
        g = embed_grid(frames, grid)
        assert g.occupancy == (False, False, True)
        assert np.array_equal(g.slots[2].voxels, frames[0][0].voxels)
        assert np.array_equal(g.slots[0].voxels, np.zeros((2, 2, 2)))

    def test_tie_break_takes_later_index(self):
        grid = GridSpec(0.0, 1.0, 2)
        frames = [(vols([1])[0], 0.5), (vols([2])[0], 0.5)]
        g = embed_grid(frames, grid)
        occupied = [k for k in range(2) if g.occupancy[k]]
        assert len(occupied) == 1
        assert g.source_index[occupied[0]] == 1


class TestLocf:
    def test_fill_pattern(self):
        grid = GridSpec(0.0, 1.0, 4)
        a, b = vols([3, 7])
        frames = [(a, 1.0), (b, 3.0)]  # slots 2 and 4
        filled = locf_fill(embed_grid(frames, grid))
        expected = [a, a, a, b]  # slot 1 back-filled from first observation
        for got, want in zip(filled, expected):
            assert np.array_equal(got.voxels, want.voxels)

    def test_fully_occupied_is_identity(self):
        grid = GridSpec(0.0, 1.0, 3)
        frames = list(zip(vols([1, 2, 3]), [0.0, 1.0, 2.0]))
        filled = locf_fill(embed_grid(frames, grid))
        for got, (want, _) in zip(filled, frames):
            assert np.array_equal(got.voxels, want.voxels)

    def test_back_fill_from_late_first_observation(self):
        grid = GridSpec(0.0, 1.0, 3)
        c = vols([4])[0]
        filled = locf_fill(embed_grid([(c, 2.0)], grid))
        for got in filled:
            assert np.array_equal(got.voxels, c.voxels)

    def test_never_zero_when_occupied(self, rng):
        grid = GridSpec(0.0, 1.0, 6)
        frames = [(Volume(rng.uniform(0.1, 1.0, (2, 2, 2)).astype(np.float32)), 2.2)]
        for got in locf_fill(embed_grid(frames, grid)):
            assert np.abs(got.voxels).max() > 0


@settings(max_examples=300, deadline=None)
@given(
    st.integers(1, 8),
    st.integers(1, 8),
    st.floats(-2, 2),
    st.floats(0.1, 2),
    st.integers(0, 2**31 - 1),
    st.booleans(),
)
def test_matches_reference_implementation(T, K, g1, delta, seed, with_ties):
    rng = np.random.default_rng(seed)
    times = np.round(rng.uniform(g1 - 1, g1 + delta * (K + 1), size=T), 3)
    if with_ties and T > 1:
        times[-1] = times[0]
    frames = [
        (Volume(rng.random((2, 2, 2), dtype=np.float32)), float(t)) for t in times
    ]
    grid = GridSpec(g1, delta, K)

    _, ref_occ, ref_filled = ref_embed_and_fill(frames, g1, delta, K)
    g = embed_grid(frames, grid)
    assert list(g.occupancy) == [bool(o) for o in ref_occ]
    got = grid_stack(frames, grid)
    want = np.stack(ref_filled)
    assert np.array_equal(got.astype(np.float64), want)


def test_grid_spec_validation():
    with pytest.raises(ConfigError):
        GridSpec(0.0, 0.0, 4)
    with pytest.raises(ConfigError):
        GridSpec(0.0, 1.0, 0)


def test_embed_empty_rejected():
    with pytest.raises(DataError):
        embed_grid([], GridSpec(0.0, 1.0, 2))
