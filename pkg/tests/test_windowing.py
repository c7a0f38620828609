import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from helpers import brute_force_regions_same
from vfit import windowing as win


def test_cube_partition_counts():
    g = win.partition_cubes(torch.randn(1, 4, 8, 8), 4)
    assert g.data.shape == (4, 64, 1)
    g = win.partition_cubes(torch.randn(2, 2, 4, 4), 4)
    assert g.data.shape == (1, 32, 2)


def test_window_partition_counts():
    g = win.partition_windows(torch.randn(1, 4, 8, 8), 4)
    assert g.data.shape == (16, 16, 1)
    # window as large as the frame: one group per frame
    g = win.partition_windows(torch.randn(3, 5, 8, 8), 8)
    assert g.data.shape == (5, 64, 3)


def test_temporal_partition_counts():
    x = torch.randn(3, 4, 2, 2)
    g = win.partition_temporal(x)
    assert g.data.shape == (4, 4, 3)
    # group for pixel (y=1, x=0) holds that pixel's features in time order
    assert torch.equal(g.data[2], x[:, :, 1, 0].T)


def test_temporal_partition_single_frame():
    g = win.partition_temporal(torch.randn(2, 1, 4, 4))
    assert g.data.shape == (16, 1, 2)


def test_cube_contents_are_contiguous():
    x = torch.arange(2 * 8 * 8, dtype=torch.float64).view(1, 2, 8, 8)
    g = win.partition_cubes(x, 4)
    # second cube is rows 0..3, columns 4..7 for both frames
    expect = x[0, :, 0:4, 4:8].reshape(-1)
    assert torch.equal(g.data[1, :, 0], expect)


def test_divisibility_error_names_axis():
    with pytest.raises(win.DivisibilityError, match="width"):
        win.partition_windows(torch.randn(1, 2, 8, 6), 4)
    with pytest.raises(win.DivisibilityError, match="height"):
        win.partition_cubes(torch.randn(1, 2, 6, 8), 4)


@settings(max_examples=40, deadline=None)
@given(B=st.integers(1, 2), C=st.integers(1, 3), T=st.integers(1, 4),
       nh=st.integers(1, 3), nw=st.integers(1, 3), M=st.integers(1, 4),
       kind=st.sampled_from(["cube", "window", "temporal"]))
def test_round_trip_and_conservation(B, C, T, nh, nw, M, kind):
    x = torch.randn(B, C, T, nh * M, nw * M)
    if kind == "cube":
        g = win.partition_cubes(x, M)
    elif kind == "window":
        g = win.partition_windows(x, M)
    else:
        g = win.partition_temporal(x)
    assert g.num_groups * g.group_size == B * T * nh * M * nw * M
    assert torch.equal(win.merge(g), x)


def test_cyclic_shift_identity_and_inverse():
    x = torch.randn(2, 3, 5, 7)
    assert torch.equal(win.cyclic_shift(x, 0, 0), x)
    assert torch.equal(win.cyclic_shift(win.cyclic_shift(x, 2, -3), -2, 3), x)


def test_cyclic_shift_one_hot():
    x = torch.zeros(1, 1, 4, 4)
    x[0, 0, 0, 0] = 1
    y = win.cyclic_shift(x, -2, -2)
    assert y[0, 0, 2, 2] == 1 and y.sum() == 1


def test_partition_after_shift_matches_index_grid():
    H = W = 8
    M, s = 4, 2
    idx = torch.arange(H * W, dtype=torch.float64).view(1, 1, H, W)
    g = win.partition_windows(win.cyclic_shift(idx, -s, -s), M)
    # token j of window 0 must come from original position ((r+s)%H, (c+s)%W)
    for j in range(M * M):
        r, c = divmod(j, M)
        assert g.data[0, j, 0] == ((r + s) % H) * W + (c + s) % W


def test_mask_zero_shift():
    assert torch.count_nonzero(win.shift_mask(8, 8, 4, 0)) == 0


def test_mask_bottom_right_has_four_regions():
    m = win.shift_mask(8, 8, 4, 2)
    last = m[-1] == 0
    # number of distinct rows of the equivalence relation = number of regions
    regions = {tuple(r.tolist()) for r in last}
    assert len(regions) == 4
    assert all(torch.all(torch.diagonal(mm) == 0) for mm in m)


def test_mask_invalid_shift():
    with pytest.raises(ValueError):
        win.shift_mask(8, 8, 4, 4)


@pytest.mark.parametrize("H", [8, 12, 16])
@pytest.mark.parametrize("W", [8, 12, 16])
def test_mask_matches_brute_force(H, W):
    M, s = 4, 2
    ours = (win.shift_mask(H, W, M, s) == 0).numpy()
    assert np.array_equal(ours, brute_force_regions_same(H, W, M, s))


def test_cube_mask_repeats_window_mask_over_time():
    T = 3
    wm = win.shift_mask(8, 8, 4, 2, "window")
    cm = win.shift_mask(8, 8, 4, 2, "cube", T)
    assert cm.shape == (4, T * 16, T * 16)
    assert torch.equal(cm, wm.repeat(1, T, T))
