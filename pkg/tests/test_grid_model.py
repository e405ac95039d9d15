import numpy as np
import pytest

from gridopt import grid_model as gm
from gridopt import powerflow as pf

from conftest import RING_3BUS, TWO_BUS


def test_parse_case9_counts(case9):
    assert (case9.n_b, case9.n_l, case9.n_g) == (9, 9, 3)
    assert case9.base_mva == 100.0
    assert case9.buses[0].kind == gm.REF


def test_parse_case118_counts(case118):
    assert (case118.n_b, case118.n_l, case118.n_g) == (118, 186, 54)
    # canonical totals in MW / MVAr
    assert sum(b.pd for b in case118.buses) * 100 == pytest.approx(4242.0)
    assert sum(b.qd for b in case118.buses) * 100 == pytest.approx(1438.0)


def test_parse_pegase1354_if_available():
    path = gm.bundled_case_path("case1354pegase")
    if not path.exists():
        pytest.skip("case1354pegase.m not bundled (data not redistributable "
                    "here); drop the MATPOWER file into gridopt/cases to run")
    grid = gm.load_case(path)
    assert (grid.n_b, grid.n_l, grid.n_g) == (1354, 1991, 260)


def test_parse_two_bus_fixture(two_bus):
    assert (two_bus.n_b, two_bus.n_l, two_bus.n_g) == (2, 1, 1)
    assert two_bus.buses[1].pd == pytest.approx(0.1)  # per-unit conversion


def test_parse_missing_gencost():
    text = TWO_BUS[: TWO_BUS.index("mpc.gencost")]
    with pytest.raises(gm.UnsupportedCost):
        gm.parse_matpower(text)


def test_parse_piecewise_cost_rejected():
    text = TWO_BUS.replace("2 0 0 3 0.02 10 0;", "1 0 0 2 0 0 10 100;")
    with pytest.raises(gm.UnsupportedCost):
        gm.parse_matpower(text)


def test_parse_cubic_cost_rejected():
    text = TWO_BUS.replace("2 0 0 3 0.02 10 0;", "2 0 0 4 0.1 0.02 10 0;")
    with pytest.raises(gm.UnsupportedCost):
        gm.parse_matpower(text)


def test_parse_ragged_row():
    text = TWO_BUS.replace("1 2 0 0.1 0 250 250 250 0 0 1 -360 360;",
                           "1 2 0 0.1;")
    with pytest.raises(gm.MalformedFile):
        gm.parse_matpower(text)


def test_parse_no_ref_bus():
    text = TWO_BUS.replace("1 3 0  0", "1 2 0  0")
    with pytest.raises(gm.ValidationError):
        gm.parse_matpower(text)


def test_parse_dangling_gen_bus():
    text = TWO_BUS.replace("1 10 0 300 -300", "7 10 0 300 -300")
    with pytest.raises(gm.ValidationError):
        gm.parse_matpower(text)


def test_roundtrip_serialize(case9, two_bus, ring3):
    for grid in (case9, two_bus, ring3):
        again = gm.parse_matpower(gm.serialize_matpower(grid), name=grid.name)
        assert again == grid


def test_roundtrip_case118(case118):
    again = gm.parse_matpower(gm.serialize_matpower(case118), name="case118")
    assert again == case118


def test_admittance_two_bus(two_bus):
    Y = gm.build_admittance(two_bus)
    y = 1.0 / 0.1j
    expect = np.array([[y, -y], [-y, y]])
    assert np.allclose(Y.ybus.toarray(), expect, atol=1e-14)


def test_admittance_out_of_service(two_bus):
    from dataclasses import replace
    branches = (replace(two_bus.branches[0], status=0),)
    grid = replace(two_bus, branches=branches)
    Y = gm.build_admittance(grid)
    assert np.abs(Y.ybus.toarray()).max() == 0.0


def _dense_ybus(grid):
    """Independent loop-based pi-model assembly."""
    nb = grid.n_b
    idx = grid.bus_index()
    yb = np.zeros((nb, nb), dtype=complex)
    for br in grid.branches:
        if not br.status:
            continue
        f, t = idx[br.from_bus], idx[br.to_bus]
        ys = 1.0 / (br.r + 1j * br.x)
        bc = 1j * br.b / 2.0
        tap = (br.tap if br.tap else 1.0) * np.exp(1j * br.shift)
        yb[f, f] += (ys + bc) / (tap * np.conj(tap))
        yb[f, t] += -ys / np.conj(tap)
        yb[t, f] += -ys / tap
        yb[t, t] += ys + bc
    for i, b in enumerate(grid.buses):
        yb[i, i] += b.gs + 1j * b.bs
    return yb


@pytest.mark.parametrize("case", ["case9", "case118"])
def test_admittance_identity(case, request):
    grid = request.getfixturevalue(case)
    Y = gm.build_admittance(grid)
    recon = (Y.cf.T @ Y.yf + Y.ct.T @ Y.yt).toarray()
    shunts = np.diag([b.gs + 1j * b.bs for b in grid.buses])
    assert np.abs(Y.ybus.toarray() - (recon + shunts)).max() <= 1e-12
    assert np.abs(Y.ybus.toarray() - _dense_ybus(grid)).max() <= 1e-12


def test_apply_contingency_ring(ring3):
    for k in range(ring3.n_l):
        post = gm.apply_contingency(ring3, gm.Contingency(k))
        assert post.branches[k].status == 0
        assert sum(br.status for br in post.branches) == ring3.n_l - 1


def test_apply_contingency_islanding(two_bus):
    with pytest.raises(gm.IslandingError):
        gm.apply_contingency(two_bus, gm.Contingency(0))


def _union_find_connected(grid):
    parent = list(range(grid.n_b))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    idx = grid.bus_index()
    for br in grid.branches:
        if br.status:
            ra, rb = find(idx[br.from_bus]), find(idx[br.to_bus])
            parent[ra] = rb
    return len({find(i) for i in range(grid.n_b)}) == 1


def test_apply_contingency_case118_branch8(case118):
    # MATPOWER branch row 8 (1-based) is the 8-5 transformer, index 7 here
    post = gm.apply_contingency(case118, gm.Contingency(7))
    assert sum(br.status for br in post.branches) == 185
    assert _union_find_connected(post)


def test_apply_contingency_touches_only_status(ring3):
    post = gm.apply_contingency(ring3, gm.Contingency(1))
    assert post.buses == ring3.buses
    assert post.generators == ring3.generators
    for k, (a, b) in enumerate(zip(ring3.branches, post.branches)):
        if k == 1:
            from dataclasses import replace
            assert b == replace(a, status=0)
        else:
            assert a == b


def test_screen_excludes_islanding(two_bus, ring3):
    kept = gm.screen_contingencies(two_bus, [gm.Contingency(0)])
    assert kept == []
    # lightly loaded parallel line of the ring survives; PF oracle converges
    kept = gm.screen_contingencies(ring3, [gm.Contingency(3)])
    assert [c.outaged_branch for c in kept] == [3]
    post = gm.apply_contingency(ring3, gm.Contingency(3))
    sol = pf.newton_pf(post, gm.build_admittance(post), tol=1e-10)
    assert sol.max_mismatch <= 1e-10


def test_screen_zero_tolerance_boundary(ring3):
    from dataclasses import replace
    gens = (replace(ring3.generators[0], qmin=-1e-4, qmax=1e-4),
            ring3.generators[1])
    tight = replace(ring3, generators=gens)
    kept = gm.screen_contingencies(tight, [gm.Contingency(3)], q_viol_tol=0.0)
    assert kept == []


def test_screen_subset_and_order(ring3):
    cands = [gm.Contingency(k) for k in (3, 0, 1, 2)]
    kept = gm.screen_contingencies(ring3, cands)
    ids = [c.outaged_branch for c in kept]
    assert set(ids) <= {3, 0, 1, 2}
    assert ids == [i for i in (3, 0, 1, 2) if i in ids]  # order preserved


def test_screen_labels_default(ring3):
    kept = gm.screen_contingencies(ring3, [gm.Contingency(2)])
    assert kept[0].label == "L2"
