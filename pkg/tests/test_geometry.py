import itertools

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from nifdiff.geometry import make_coord_grid, partition_windows, query_geometry, reverse_windows


def test_single_pixel_grid():
    g = make_coord_grid(1, 1)
    assert g.coords.tolist() == [[[0.0, 0.0]]]
    assert g.cells.tolist() == [[[2.0, 2.0]]]


def test_four_by_four_grid():
    g = make_coord_grid(4, 4)
    assert g.coords[:, 0, 0].tolist() == [-0.75, -0.25, 0.25, 0.75]
    assert g.coords[0, :, 1].tolist() == [-0.75, -0.25, 0.25, 0.75]
    assert torch.equal(g.cells, torch.full((4, 4, 2), 0.5))


def test_two_by_three_grid():
    g = make_coord_grid(2, 3, dtype=torch.float64)
    assert g.coords[:, 0, 0].tolist() == [-0.5, 0.5]
    assert torch.allclose(g.coords[0, :, 1], torch.tensor([-2 / 3, 0.0, 2 / 3], dtype=torch.float64), atol=1e-15)
    assert torch.allclose(g.cells[0, 0], torch.tensor([1.0, 2 / 3], dtype=torch.float64))


def test_axis_order_is_vertical_then_horizontal():
    g = make_coord_grid(2, 4)
    # first component varies along rows, second along columns
    assert g.coords[0, 0, 0] == g.coords[0, 3, 0]
    assert g.coords[0, 0, 1] == g.coords[1, 0, 1]
    assert g.coords.shape == (2, 4, 2)


@pytest.mark.parametrize("h,w", [(0, 3), (3, 0), (-1, 2), (2.5, 2)])
def test_rejects_bad_dims(h, w):
    with pytest.raises(ValueError, match="positive"):
        make_coord_grid(h, w)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 64), st.integers(1, 64))
def test_grid_is_centered_and_evenly_spaced(h, w):
    g = make_coord_grid(h, w, dtype=torch.float64)
    assert abs(float(g.coords[:, 0, 0].sum())) < 1e-6
    assert abs(float(g.coords[0, :, 1].sum())) < 1e-6
    if h > 1:
        assert torch.allclose(g.coords[1:, 0, 0] - g.coords[:-1, 0, 0], g.cells[1:, 0, 0], atol=1e-12)
    if w > 1:
        assert torch.allclose(g.coords[0, 1:, 1] - g.coords[0, :-1, 1], g.cells[0, 1:, 1], atol=1e-12)


def test_query_geometry_identity_grid():
    geo = query_geometry(make_coord_grid(2, 2), 2, 2)
    assert torch.equal(geo.delta_q, torch.zeros(2, 2, 2))
    assert torch.equal(geo.delta_c, torch.full((2, 2, 2), 2.0))


def test_query_geometry_upsampled_grid_quarter_offsets():
    geo = query_geometry(make_coord_grid(4, 4), 2, 2)
    assert torch.equal(geo.delta_q.abs(), torch.full((4, 4, 2), 0.25))
    assert geo.nearest_index[:, 0, 0].tolist() == [0, 0, 1, 1]


def test_query_geometry_single_cell():
    geo = query_geometry(make_coord_grid(1, 1), 1, 1)
    assert geo.nearest_index.tolist() == [[[0, 0]]]
    assert geo.delta_q.tolist() == [[[0.0, 0.0]]]


def test_ties_go_to_lower_index():
    # a 1-pixel query grid sits at 0, exactly between the two centers of a 2-cell latent
    geo = query_geometry(make_coord_grid(1, 1), 2, 2)
    assert geo.nearest_index.tolist() == [[[0, 0]]]
    assert geo.delta_q.tolist() == [[[0.5, 0.5]]]


def test_query_geometry_rejects_out_of_range_coordinates():
    g = make_coord_grid(2, 2)
    bad = type(g)(g.coords * 3.0, g.cells, 2, 2)
    with pytest.raises(ValueError):
        query_geometry(bad, 2, 2)


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 20), st.integers(1, 20))
def test_delta_q_within_half_cell_and_nearest(hq, wq, hl, wl):
    grid = make_coord_grid(hq, wq, dtype=torch.float64)
    geo = query_geometry(grid, hl, wl)
    again = query_geometry(grid, hl, wl)
    assert torch.equal(geo.delta_q, again.delta_q) and torch.equal(geo.nearest_index, again.nearest_index)
    assert (geo.delta_q[..., 0].abs() <= 1 / hl + 1e-12).all()
    assert (geo.delta_q[..., 1].abs() <= 1 / wl + 1e-12).all()
    assert (geo.delta_c > 0).all()
    # brute force nearest center (L-inf), lower index on ties
    for axis, n in ((0, hl), (1, wl)):
        centers = (2 * torch.arange(n, dtype=torch.float64) + 1) / n - 1
        d = (grid.coords[..., axis, None] - centers).abs()
        best = d.min(-1, keepdim=True).values
        first = (d <= best + 1e-12).long().argmax(-1)
        assert torch.equal(geo.nearest_index[..., axis], first)


def real_window_oracle(h, w, window, shift):
    """O(N^2) membership oracle over the shifted, padded grid.

    Two tokens of one shifted window may attend iff both are real tokens and they
    are laid out in the shifted window exactly as in the original image (neither
    axis wraps between them), i.e. they belong to the same real contiguous region.
    A token always sees itself.
    """
    hp = -(-h // window) * window
    wp = -(-w // window) * window
    masks = []
    for wy in range(hp // window):
        for wx in range(wp // window):
            cells = [(wy * window + a, wx * window + b) for a in range(window) for b in range(window)]
            n = len(cells)
            m = torch.zeros(n, n)
            for i, (ri, ci) in enumerate(cells):
                oi = ((ri + shift) % hp, (ci + shift) % wp)
                for j, (rj, cj) in enumerate(cells):
                    oj = ((rj + shift) % hp, (cj + shift) % wp)
                    real = oi[0] < h and oi[1] < w and oj[0] < h and oj[1] < w
                    contiguous = (oj[0] - oi[0] == rj - ri) and (oj[1] - oi[1] == cj - ci)
                    if not (i == j or (real and contiguous)):
                        m[i, j] = float("-inf")
            masks.append(m)
    return torch.stack(masks)


def test_single_window_no_shift_is_all_pass():
    windows, mask, _ = partition_windows(torch.randn(8, 8, 3), 8, 0)
    assert windows.shape == (1, 64, 3)
    assert torch.equal(mask, torch.zeros(1, 64, 64))


def test_window4_shift2_matches_oracle():
    _, mask, _ = partition_windows(torch.zeros(8, 8, 1), 4, 2)
    assert torch.equal(mask, real_window_oracle(8, 8, 4, 2))


@pytest.mark.parametrize("window", [2, 4, 8])
def test_shifted_mask_matches_oracle_all_small_grids(window):
    for h, w in itertools.product(range(1, 17), repeat=2):
        if max(h, w) < window // 2:
            continue
        for shift in (0, window // 2):
            _, mask, _ = partition_windows(torch.zeros(h, w, 1), window, shift)
            assert torch.equal(mask, real_window_oracle(h, w, window, shift)), (h, w, window, shift)


def test_every_mask_row_sees_itself():
    _, mask, _ = partition_windows(torch.zeros(5, 7, 1), 4, 2)
    assert (torch.diagonal(mask, dim1=-2, dim2=-1) == 0).all()


def test_partition_round_trip_shift4():
    x = torch.randn(2, 8, 8, 5)
    windows, _, layout = partition_windows(x, 8, 4)
    assert torch.equal(reverse_windows(windows, layout), x)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 20), st.integers(1, 20), st.sampled_from([2, 4, 8]), st.data())
def test_round_trip_any_shift(h, w, window, data):
    shift = data.draw(st.integers(0, window - 1))
    x = torch.randn(h, w, 3)
    windows, _, layout = partition_windows(x, window, shift)
    assert torch.equal(reverse_windows(windows, layout), x)


def test_partition_rejects_bad_shift():
    with pytest.raises(ValueError):
        partition_windows(torch.zeros(8, 8, 1), 4, 4)
    with pytest.raises(ValueError):
        partition_windows(torch.zeros(8, 8, 1), 4, -1)
