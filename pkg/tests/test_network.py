import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _builders import case_text
from temarket.config import bundled
from temarket.network import (Branch, Bus, BusKind, DuplicateBusId, MalformedCase, Network, NotRadial,
                              ZeroImpedanceBranch, build_admittance, emit_case, parse_case, read_case,
                              validate_radial)


@pytest.fixture(scope="module")
def case33():
    return read_case(bundled("case33.txt"))


def test_standard_feeder_has_33_buses_and_32_branches(case33):
    assert case33.n_bus == 33
    assert len(case33.branches) == 32
    assert validate_radial(case33) == []
    assert case33.buses[0].kind is BusKind.SLACK
    assert case33.load_kw().sum() == pytest.approx(3715.0)
    assert case33.load_kvar().sum() == pytest.approx(2300.0)


def test_impedances_are_converted_to_per_unit(case33):
    z_base = 12.66**2 / 10.0
    br = case33.branches[0]
    assert (br.from_bus, br.to_bus) == (1, 2)
    assert br.r == pytest.approx(0.0922 / z_base)
    assert br.x == pytest.approx(0.0470 / z_base)


def test_minimal_two_bus_case():
    net = parse_case(case_text([(1, "slack", 0, 0), (2, "consumer", 50, 10)], [(1, 2, 0.1, 0.1)]))
    assert net.n_bus == 2 and len(net.branches) == 1


def test_triangle_is_rejected_as_not_radial():
    text = case_text([(1, "slack", 0, 0), (2, "consumer", 1, 0), (3, "consumer", 1, 0)],
                     [(1, 2, 0.1, 0.1), (2, 3, 0.1, 0.1), (3, 1, 0.1, 0.1)])
    with pytest.raises(NotRadial):
        parse_case(text)


def test_duplicate_bus_and_malformed_rows():
    with pytest.raises(DuplicateBusId):
        parse_case(case_text([(1, "slack", 0, 0), (1, "consumer", 1, 0)], [(1, 2, 0.1, 0.1)]))
    with pytest.raises(MalformedCase):
        parse_case("BASE 10 12.66\nBUS id kind Pd_kW Qd_kvar microgrid\nBUS 1 slack 0\n")
    with pytest.raises(MalformedCase):
        parse_case(case_text([(1, "slack", 0, 0)], []).replace("BASE 10.0 12.66\n", ""))
    with pytest.raises(MalformedCase):
        parse_case(case_text([(1, "slack", 0, 0), (2, "consumer", "abc", 0)], [(1, 2, 0.1, 0.1)]))


def test_bus_invariants():
    with pytest.raises(MalformedCase):
        Bus(2, BusKind.SLACK)
    with pytest.raises(MalformedCase):
        Bus(3, BusKind.CONSUMER, device_refs=("pv",))
    with pytest.raises(MalformedCase):
        Bus(3, BusKind.CONSUMER, base_load_P=-1.0)


def test_zero_impedance_branch_is_rejected():
    with pytest.raises(ZeroImpedanceBranch):
        Branch(1, 2, 0.0, 0.0)
    with pytest.raises(ZeroImpedanceBranch):
        parse_case(case_text([(1, "slack", 0, 0), (2, "consumer", 1, 0)], [(1, 2, 0, 0)]))


@pytest.mark.parametrize("r, x, g, b", [(1.0, 0.0, 1.0, 0.0), (0.0, 1.0, 0.0, -1.0)])
def test_admittance_of_pure_branches(r, x, g, b):
    net = Network((Bus(1, BusKind.SLACK), Bus(2, BusKind.CONSUMER)), (Branch(1, 2, r, x),))
    assert build_admittance(net).pair(1, 2) == pytest.approx((g, b))


def test_admittance_matches_complex_inversion(case33):
    adm = build_admittance(case33)
    br = case33.branches[0]
    y = 1.0 / complex(br.r, br.x)
    g, b = adm.pair(1, 2)
    assert (g, b) == pytest.approx((y.real, y.imag), rel=1e-14)
    assert g * g + b * b == pytest.approx(1.0 / (br.r**2 + br.x**2), rel=1e-12)


def test_bus_admittance_matrix_structure(case33):
    adm = build_admittance(case33)
    for M in (adm.G, adm.B):
        dense = M.toarray()
        assert np.allclose(dense, dense.T)
        off = dense - np.diag(np.diag(dense))
        assert np.allclose(np.diag(dense), -off.sum(axis=1))


def test_disconnected_bus_is_reported():
    net = Network((Bus(1, BusKind.SLACK), Bus(2, BusKind.CONSUMER), Bus(3, BusKind.CONSUMER),
                   Bus(4, BusKind.CONSUMER)), (Branch(1, 2, 0.1, 0.1), Branch(2, 3, 0.1, 0.1)))
    findings = validate_radial(net)
    assert "bus 4 unreachable" in findings


def test_extra_branch_is_reported_as_cycle(case33):
    net = Network(case33.buses, case33.branches + (Branch(18, 33, 0.01, 0.01),))
    assert "cycle" in validate_radial(net)


@st.composite
def random_trees(draw):
    n = draw(st.integers(2, 12))
    parents = [draw(st.integers(1, k - 1)) for k in range(2, n + 1)]
    kinds = draw(st.lists(st.sampled_from(["consumer", "producer", "prosumer"]), min_size=n - 1, max_size=n - 1))
    loads = draw(st.lists(st.floats(0, 500, allow_nan=False), min_size=n - 1, max_size=n - 1))
    imp = draw(st.lists(st.tuples(st.floats(0.01, 2.0), st.floats(0.0, 2.0)), min_size=n - 1, max_size=n - 1))
    buses = [(1, "slack", 0, 0)] + [(k, kinds[k - 2], loads[k - 2], 0.5 * loads[k - 2]) for k in range(2, n + 1)]
    branches = [(parents[k - 2], k, *imp[k - 2]) for k in range(2, n + 1)]
    return case_text(buses, branches)


@settings(max_examples=60, deadline=None)
@given(random_trees())
def test_any_tree_parses_and_round_trips(text):
    net = parse_case(text)
    assert validate_radial(net) == []
    assert len(net.branches) == net.n_bus - 1
    again = parse_case(emit_case(net))
    assert again == net


@settings(max_examples=60, deadline=None)
@given(random_trees())
def test_admittance_rows_sum_to_zero(text):
    adm = build_admittance(parse_case(text))
    assert np.allclose(np.asarray(adm.G.sum(axis=1)).ravel(), 0.0, atol=1e-9 * abs(adm.G).max())
    assert np.allclose(np.asarray(adm.B.sum(axis=1)).ravel(), 0.0, atol=1e-9 * abs(adm.B).max())
    for (i, j), gb in adm.pairs.items():
        assert adm.pair(j, i) == gb
