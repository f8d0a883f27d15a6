import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linprog

from cctmpc.geometry import (
    AngleSpacingError,
    ConfigurationViolated,
    ConfiguredPolytope,
    EmptyPolytope,
    NotEntirelySimple,
    Template,
    UnboundedTemplate,
    build_template_2d,
    check_entirely_simple,
    cone_dominates,
    cones_equal,
    conic_matrix,
    enumerate_vertex_configuration,
    face_nonempty,
    hull_membership,
    polytope_vertices,
    reduce_conic_rows,
    regular_polygon_angles,
    support_parameter,
    vertex_maps,
    vertices_of,
)

from oracles import brute_force_vertices, hand_box_conic_rows

BOX_Y = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
FIG_Y = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [-1, 2, 2], [-1, 0, 0], [0, -1, 0], [0, 0, -1]],
                 dtype=float)
FIG_Y_DEGENERATE = np.array([1, 1, 1, 3, 1, 1, 1], dtype=float)
FIG_Y_SIMPLE = np.array([1, 1, 1, 2.5, 1, 1, 1])


def box() -> Template:
    return Template(BOX_Y, np.ones(4))


def highs_max(c, E, bound=1.0):
    """``max c'y s.t. E y <= 0, |y|_inf <= bound`` with HiGHS."""
    res = linprog(-np.asarray(c), A_ub=E, b_ub=np.zeros(E.shape[0]),
                  bounds=[(-bound, bound)] * E.shape[1], method="highs")
    assert res.status == 0
    return -res.fun


# ---------------------------------------------------------------------------
# Template and faces


def test_template_rejects_zero_row_and_size_mismatch():
    with pytest.raises(ValueError):
        Template([[1.0, 0.0], [0.0, 0.0]], [1.0, 1.0])
    with pytest.raises(ValueError):
        Template(BOX_Y, np.ones(3))


def test_unbounded_template_detected():
    t = Template([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]], np.ones(3))
    with pytest.raises(UnboundedTemplate):
        t.check_bounded()
    with pytest.raises(UnboundedTemplate):
        enumerate_vertex_configuration(t)


def test_empty_template_detected():
    t = Template(BOX_Y, [1.0, 1.0, -2.0, 1.0])
    with pytest.raises(EmptyPolytope):
        t.check_bounded()


def test_face_of_box_corner_nonempty():
    assert face_nonempty(box(), np.ones(4), (0, 1))


def test_opposite_facets_of_box_do_not_meet():
    assert not face_nonempty(box(), np.ones(4), (0, 2))


def test_empty_index_set_tests_nonemptiness():
    assert face_nonempty(box(), np.ones(4), ())
    assert not face_nonempty(box(), [1.0, 1.0, -2.0, 1.0], ())


def test_four_facets_meet_in_degenerate_seed():
    t = Template(FIG_Y, FIG_Y_DEGENERATE)
    assert face_nonempty(t, t.sigma, (0, 1, 2, 3))
    assert not face_nonempty(t, FIG_Y_SIMPLE, (0, 1, 2, 3))


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(0.0, 5.0), min_size=7, max_size=7))
def test_nonnegative_parameters_give_nonempty_sets(y):
    # The origin satisfies Y x <= y whenever y >= 0.
    assert face_nonempty(Template(FIG_Y, np.ones(7)), np.array(y), ())


# ---------------------------------------------------------------------------
# Vertex enumeration and simplicity


def test_box_vertex_sets():
    vc = enumerate_vertex_configuration(box())
    assert vc.mbar == 4
    assert {frozenset(s) for s in vc.vertex_sets} == {
        frozenset(s) for s in [(0, 1), (1, 2), (2, 3), (3, 0)]}


def test_vertex_maps_solve_active_rows():
    vc = enumerate_vertex_configuration(box())
    for s, V in zip(vc.vertex_sets, vc.maps):
        expected = np.zeros((2, 4))
        expected[:, list(s)] = np.linalg.inv(BOX_Y[list(s)])
        np.testing.assert_allclose(V, expected, atol=1e-15)


def test_simple_figure_template_has_ten_vertices():
    vc = enumerate_vertex_configuration(Template(FIG_Y, FIG_Y_SIMPLE))
    assert vc.mbar == 10
    assert len(brute_force_vertices(FIG_Y, FIG_Y_SIMPLE)) == 10


def test_degenerate_figure_template_raises_with_witness():
    with pytest.raises(NotEntirelySimple) as info:
        enumerate_vertex_configuration(Template(FIG_Y, FIG_Y_DEGENERATE))
    assert tuple(info.value.rows) == (0, 1, 2, 3)
    np.testing.assert_allclose(info.value.vertex, [1.0, 1.0, 1.0], atol=1e-12)


def test_simplicity_report():
    rep = check_entirely_simple(Template(FIG_Y, FIG_Y_DEGENERATE))
    assert not rep.passed
    assert (0, 1, 2, 3) in rep.offending
    assert check_entirely_simple(Template(FIG_Y, FIG_Y_SIMPLE)).passed
    assert check_entirely_simple(box()).passed


def test_perturbation_restores_simplicity():
    vc = enumerate_vertex_configuration(Template(FIG_Y, FIG_Y_DEGENERATE), perturb=True)
    assert vc.info["perturbations"] >= 1
    assert np.all(vc.sigma >= FIG_Y_DEGENERATE)
    assert np.all(vc.sigma - FIG_Y_DEGENERATE <= 1e-6 * 3)
    assert check_entirely_simple(Template(FIG_Y, vc.sigma)).passed


def test_enumeration_matches_brute_force_on_random_polygons():
    rng = np.random.default_rng(3)
    for _ in range(5):
        phi = np.sort(rng.uniform(0, 2 * np.pi, 9))
        Y = np.column_stack([np.cos(phi), np.sin(phi)])
        y = rng.uniform(0.5, 1.5, 9)
        t = Template(Y, y)
        try:
            t.check_bounded()
        except UnboundedTemplate:
            continue
        vc = enumerate_vertex_configuration(t)
        found = vc.vertices(y)
        oracle = brute_force_vertices(Y, y)
        assert len(found) == len(oracle)
        for v in oracle:
            assert np.min(np.abs(found - v).max(axis=1)) < 1e-9


# ---------------------------------------------------------------------------
# Conic matrix and reduction


def test_box_conic_block_by_hand():
    maps = vertex_maps(BOX_Y, [(0, 1)])
    np.testing.assert_array_equal(maps[0], [[1, 0, 0, 0], [0, 1, 0, 0]])
    E = conic_matrix(BOX_Y, maps)
    # Y V_1 - I: rows for facets 3 and 4 read -y1 - y3 <= 0 and -y2 - y4 <= 0.
    np.testing.assert_allclose(E, [[0, 0, 0, 0], [0, 0, 0, 0], [-1, 0, -1, 0], [0, -1, 0, -1]])


def test_conic_matrix_nonpositive_at_seed():
    for t in (box(), Template(FIG_Y, FIG_Y_SIMPLE)):
        vc = enumerate_vertex_configuration(t)
        assert vc.E_raw.shape == (vc.mbar * t.m, t.m)
        assert np.all(vc.E_raw @ t.sigma <= 1e-12)


def test_box_reduction_keeps_two_rows():
    vc = enumerate_vertex_configuration(box())
    assert vc.E.shape == (2, 4)
    assert cones_equal(vc.E, hand_box_conic_rows())
    # Dense-grid oracle: membership agrees everywhere on a grid of parameters.
    grid = np.array(list(itertools.product(np.linspace(-2, 2, 9), repeat=4)))
    hand = np.all(grid @ hand_box_conic_rows().T <= 1e-12, axis=1)
    ours = np.all(grid @ vc.E.T <= 1e-12, axis=1)
    np.testing.assert_array_equal(hand, ours)


def test_reduction_soundness_with_independent_lp():
    vc = enumerate_vertex_configuration(Template(FIG_Y, FIG_Y_SIMPLE))
    kept = set(vc.info["kept_rows"])
    for r in range(vc.E_raw.shape[0]):
        if r in kept:
            continue
        assert highs_max(vc.E_raw[r], vc.E) <= 1e-8
    # And the kept rows are not redundant: each bounds the cone.
    assert cone_dominates(vc.E, vc.E_raw) and cone_dominates(vc.E_raw, vc.E)


def test_reduce_drops_duplicates_and_zero_rows():
    E = np.array([[1.0, -1.0], [2.0, -2.0], [0.0, 0.0], [-1.0, 0.0]])
    red, kept = reduce_conic_rows(E)
    assert red.shape[0] == 2
    assert cones_equal(red, E)


# ---------------------------------------------------------------------------
# Planar closed form


def test_square_closed_form():
    t, vc = build_template_2d(regular_polygon_angles(4))
    # Delta_i = -1 and Sigma_i = 0, so every row reads -(y_k + y_{k+2}) <= 0.
    np.testing.assert_allclose(np.abs(vc.E).sum(axis=1), 2.0, atol=1e-15)
    assert cones_equal(vc.E, hand_box_conic_rows())


def test_hexagon_closed_form_entries():
    _, vc = build_template_2d(regular_polygon_angles(6))
    s = np.sin(np.pi / 3)
    for k in range(6):
        assert vc.E[k, k] == pytest.approx(-s, abs=1e-15)
        assert vc.E[k, (k + 1) % 6] == pytest.approx(np.sin(2 * np.pi / 3), abs=1e-15)
        assert vc.E[k, (k + 2) % 6] == pytest.approx(-s, abs=1e-15)
    assert np.count_nonzero(vc.E) <= 18


@pytest.mark.parametrize("m", range(4, 13))
def test_closed_form_matches_generic_pipeline(m):
    t, vc = build_template_2d(regular_polygon_angles(m))
    generic = enumerate_vertex_configuration(t)
    assert generic.mbar == m
    assert cones_equal(vc.E, generic.E)


def test_irregular_closed_form_matches_generic_pipeline():
    phi = np.array([0.0, 0.7, 1.9, 2.5, 3.6, 4.4, 5.5])
    t, vc = build_template_2d(phi)
    assert cones_equal(vc.E, enumerate_vertex_configuration(t).E)


@pytest.mark.parametrize("phi", [
    [0.0, 1.0],                              # too few
    [0.0, 2.0, 1.0, 4.0],                    # not increasing
    [0.0, 0.5, 1.0, 1.5],                    # spans less than pi
    [0.0, 0.2, 3.5, 4.0],                    # gap of pi or more
    [-0.1, 1.0, 3.0, 5.0],                   # outside [0, 2pi)
])
def test_bad_angle_spacing_rejected(phi):
    with pytest.raises(AngleSpacingError):
        build_template_2d(phi)


# ---------------------------------------------------------------------------
# Vertices, hulls and support parameters


def test_vertices_at_seed_and_apex():
    t, vc = build_template_2d(regular_polygon_angles(8))
    cp = ConfiguredPolytope(t, vc, t.sigma)
    V = vertices_of(cp)
    assert V.shape == (8, 2)
    np.testing.assert_allclose(np.linalg.norm(V, axis=1), 1 / np.cos(np.pi / 8), rtol=1e-14)
    np.testing.assert_array_equal(vertices_of(ConfiguredPolytope(t, vc, np.zeros(8))), 0.0)


def test_configured_polytope_rejects_parameters_outside_cone():
    t, vc = build_template_2d(regular_polygon_angles(8))
    y = np.ones(8)
    y[0] = 5.0   # facet 0 no longer touches the polygon
    with pytest.raises(ConfigurationViolated):
        ConfiguredPolytope(t, vc, y)


def test_random_cone_parameters_have_brute_force_vertices_among_maps():
    t, vc = build_template_2d(regular_polygon_angles(8))
    rng = np.random.default_rng(0)
    count = 0
    while count < 30:
        y = t.sigma * rng.uniform(0.5, 1.5) + rng.normal(0, 0.15, 8)
        if not vc.in_cone(y):
            continue
        count += 1
        V = vc.vertices(y)
        for v in brute_force_vertices(t.Y, y):
            assert np.min(np.abs(V - v).max(axis=1)) < 1e-9


def test_hull_membership_basics():
    V = np.array([[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]])
    assert hull_membership(V.mean(axis=0), V)
    assert hull_membership(V[2], V)
    assert not hull_membership([3.0, 0.0], V)


def test_support_parameter_of_square():
    V = np.array([[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]])
    np.testing.assert_allclose(support_parameter(BOX_Y, V), np.ones(4))


def test_support_parameter_of_point():
    p = np.array([0.3, -0.7])
    y = support_parameter(BOX_Y, p[None])
    np.testing.assert_allclose(y, BOX_Y @ p)
    assert np.all(BOX_Y @ p <= y + 1e-15)


def test_support_parameter_of_random_polygon_lies_in_cone():
    t, vc = build_template_2d(regular_polygon_angles(8))
    rng = np.random.default_rng(7)
    for _ in range(20):
        pts = rng.normal(size=(6, 2))
        y = support_parameter(t.Y, pts)
        assert vc.in_cone(y)


def test_polytope_vertices():
    np.testing.assert_allclose(sorted(map(tuple, polytope_vertices(BOX_Y, np.ones(4)))),
                               [(-1, -1), (-1, 1), (1, -1), (1, 1)])
    np.testing.assert_allclose(polytope_vertices([[1.0], [-1.0]], [0.0, 0.0]), [[0.0]])
    with pytest.raises(EmptyPolytope):
        polytope_vertices([[1.0], [-1.0]], [-1.0, 0.0])


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 3.0), st.floats(0.0, 3.0), st.integers(0, 2 ** 32 - 1))
def test_cone_closed_under_nonnegative_combination(a, b, seed):
    t, vc = build_template_2d(regular_polygon_angles(7))
    rng = np.random.default_rng(seed)
    pts = []
    while len(pts) < 2:
        y = rng.uniform(0.5, 1.5) * t.sigma + rng.normal(0, 0.1, 7)
        if np.all(vc.E @ y <= 0):
            pts.append(y)
    z = a * pts[0] + b * pts[1]
    assert np.all(vc.E @ z <= 1e-12 * (1 + np.abs(z).max()))
