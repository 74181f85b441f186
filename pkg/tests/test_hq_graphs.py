import json
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quasispde.errors import MalformedDiagram, ParseError, TooLarge, UnknownVertex
from quasispde.hq_graphs import (
    FIXTURES,
    Edge,
    Kappas,
    Label,
    LabelledDiagram,
    check_assumption_full,
    check_assumption_weak,
    compute_alpha_full,
    compute_alpha_weak,
    compute_R,
    dumbbell_diagram,
    edge_sets,
    evaluate_subset,
    fixture_path,
    format_diagram,
    load_diagram,
    parse_diagram,
    replay_witness,
)

K100 = Kappas()
DRAWN_TOP_TOP = {"dumbbell_q2_4", "dumbbell_q5_2"}


def check(g, assumption, kappas=K100, method="vectorized"):
    fn = check_assumption_full if assumption == "full" else check_assumption_weak
    return fn(g, kappas, method=method)


# --- labels and parsing ------------------------------------------------------


@pytest.mark.parametrize(
    "text,value",
    [("0", 0), ("2+k", Fraction(201, 100)), ("kp", Fraction(1, 100)), ("1+kpp", Fraction(101, 100)),
     ("3/2*k", Fraction(3, 200)), ("4+k-kp", Fraction(4)), ("1/3", Fraction(1, 3))],
)
def test_label_parse_and_value(text, value):
    lab = Label.parse(text)
    assert lab(K100) == value
    assert Label.parse(str(lab)) == lab


@pytest.mark.parametrize("bad", ["", "2+", "k*2", "x", "1/0", "2++k", "*k"])
def test_label_rejects_garbage(bad):
    with pytest.raises(ValueError):
        Label.parse(bad)


def test_fixture_files_match_builders():
    for name, (g, _) in FIXTURES.items():
        assert load_diagram(fixture_path(name)) == g


def test_format_round_trip():
    g, _ = FIXTURES["cherry_q4_2"]
    assert parse_diagram(format_diagram(g), name=g.name) == g


def test_parse_errors_carry_line_numbers():
    text = "graph |s|=2 star=o tests=a\no a test 0 0\na b kernel kp\n"
    with pytest.raises(ParseError, match="line 3"):
        parse_diagram(text)
    with pytest.raises(ParseError, match="line 1"):
        parse_diagram("o a test 0 0\n")
    with pytest.raises(ParseError, match="line 2"):
        parse_diagram("graph |s|=2 star=o tests=a\no a wobble 0 0\n")
    with pytest.raises(ParseError, match="line 2"):
        parse_diagram("graph |s|=2 star=o tests=a\no a test 1/0 0\n")
    with pytest.raises(ParseError, match="line 1"):
        parse_diagram("graph |s|=3 star=o tests=a\n")


def test_structural_rules():
    with pytest.raises(ParseError, match="r = 0"):
        parse_diagram("graph |s|=2 star=o tests=a\no a test 0 0\no a F 0 1\n")
    with pytest.raises(ParseError, match="test edge"):
        parse_diagram("graph |s|=2 star=o tests=a b\no a test 0 0\n")
    with pytest.raises(ParseError, match="parallel"):
        parse_diagram("graph |s|=2 star=o tests=a\no a test 0 0\nb a kernel kp 1\na b rho 2+k -1\n")
    with pytest.raises(MalformedDiagram):
        LabelledDiagram(("o", "a"), "o", ("a",), 2, (Edge("o", "a", "test", Label()), Edge("a", "a", "kernel", Label())))


def test_comments_and_isolated_vertices():
    g = parse_diagram("# hello\ngraph |s|=2 star=o tests=a  # trailing\nvertex lone\no a test 0 0\n")
    assert set(g.vertices) == {"o", "a", "lone"}
    R, wit = compute_R(g)
    assert R == 2 and wit == ("lone",)


# --- edge sets ---------------------------------------------------------------


def test_edge_sets_trivial():
    g, _ = FIXTURES["dumbbell_q2_1"]
    whole = edge_sets(g, g.vertices)
    assert whole.internal == tuple(range(len(g.edges)))
    assert whole.up == whole.down == ()
    empty = edge_sets(g, ())
    assert empty == type(empty)((), (), (), ())


def test_edge_sets_dumbbell_top_vertices():
    g, _ = FIXTURES["dumbbell_q2_1"]
    sets = edge_sets(g, {"v2", "v4"})
    internal = [g.edges[i] for i in sets.internal]
    assert [(e.kind, e.endpoints()) for e in internal] == [("rho", frozenset({"v2", "v4"}))]
    up = [g.edges[i] for i in sets.up]
    assert sorted((e.src, e.dst, e.kind) for e in up) == [("v2", "v1", "kernel"), ("v4", "v3", "kernel")]
    assert sets.down == ()


def test_edge_sets_unknown_vertex():
    g, _ = FIXTURES["dumbbell_q2_1"]
    with pytest.raises(UnknownVertex):
        edge_sets(g, {"v9"})


# --- fixtures ----------------------------------------------------------------


@pytest.mark.parametrize("name", sorted(set(FIXTURES) - DRAWN_TOP_TOP))
def test_fixture_passes_designated_assumption(name):
    g, assumption = FIXTURES[name]
    rep = check(g, assumption)
    assert rep.passed, rep.table()


@pytest.mark.parametrize("name", sorted(DRAWN_TOP_TOP))
def test_top_top_fictitious_edge_fails_item4(name):
    """A fictitious edge joining two top vertices is counted once, not per vertex."""
    g, _ = FIXTURES[name]
    rep = check_assumption_full(g)
    assert [v.item for v in rep.items if not v.passed] == [4]
    w = rep.item(4).witness
    assert w.lhs == Fraction(303, 100) and w.rhs == 4
    assert replay_witness(g, w)
    # holds once kpp + 2 kp > 1
    assert check_assumption_full(g, Kappas(Fraction(1, 100), Fraction(1, 4), Fraction(7, 10))).passed
    assert check_assumption_full(g, Kappas(Fraction(1, 100), Fraction(2, 5), Fraction(3, 10))).passed
    assert not check_assumption_full(g, Kappas(Fraction(1, 100), Fraction(1, 4), Fraction(1, 2))).passed


@pytest.mark.parametrize("name", [n for n, (g, _) in FIXTURES.items() if len(g.vertices) <= 11])
def test_vectorised_and_reference_agree_on_fixtures(name):
    g, assumption = FIXTURES[name]
    for kappas in (K100, Kappas.uniform(Fraction(1, 4)), Kappas.uniform(1)):
        assert check(g, assumption, kappas).to_dict() == check(g, assumption, kappas, "reference").to_dict()


def test_dumbbell_exponent():
    for name, q in (("dumbbell_q2_1", 2), ("dumbbell_q2_2", 2), ("dumbbell_q5_1", 5)):
        g, _ = FIXTURES[name]
        for k, kp in ((Fraction(1, 100), Fraction(1, 100)), (Fraction(1, 7), Fraction(2, 9))):
            assert compute_alpha_full(g, Kappas(k, kp, Fraction(1, 100))) == -q * (k + kp)
    g, _ = FIXTURES["dumbbell_q2_1"]
    assert compute_alpha_full(g) == Fraction(-1, 25)


def test_fictitious_edge_lowers_alpha_by_its_label():
    base = dumbbell_diagram(2, ((4, 2),))
    aug = dumbbell_diagram(2, ((4, 2),), ((3, 1),))
    assert compute_alpha_full(base) - compute_alpha_full(aug) == Fraction(101, 100)


def test_zero_labels_give_full_dimension():
    g, _ = FIXTURES["phi4_N3_q4"]
    zero = g.with_edges([Edge(e.src, e.dst, e.kind, Label(), e.r, e.I) for e in g.edges])
    assert compute_alpha_full(zero) == 4 * 12


def test_phi4_exponent_and_defect():
    g, _ = FIXTURES["phi4_N3_q4"]
    N, q, m = 3, 4, 4
    R, wit = compute_R(g)
    assert R == 2 * m == 8
    assert len(wit) == m
    for k in (Fraction(1, 100), Fraction(1, 10), Fraction(1, 4)):
        assert compute_alpha_weak(g, Kappas(k, k, k)) == -(N * q - m) * k / 2
    assert compute_alpha_weak(g) == Fraction(-1, 25)


@pytest.mark.parametrize(
    "name,q,m",
    [("cherry_q2_1", 2, 0), ("cherry_q2_2", 2, 2), ("cherry_q4_1", 4, 0), ("cherry_q4_2", 4, 2), ("cherry_q4_3", 4, 4)],
)
def test_cherry_exponent(name, q, m):
    g, _ = FIXTURES[name]
    for k, kp in ((Fraction(1, 100), Fraction(1, 100)), (Fraction(1, 10), Fraction(1, 50))):
        kap = Kappas(k, kp, Fraction(1, 100))
        enumerated = compute_alpha_weak(g, kap)
        assert enumerated == -q * (2 * kp + k) + m * (k / 2 + kp)
        assert compute_R(g, kap)[0] == m * (1 - kp)
        printed = -q * (2 * kp + k) + Fraction(3, 2) * m * k
        if m and k != kp:
            assert enumerated != printed


def test_cherry_values_at_one_percent():
    assert compute_alpha_weak(FIXTURES["cherry_q2_2"][0]) == Fraction(-3, 100)
    assert compute_R(FIXTURES["cherry_q2_1"][0]) == (0, ())
    assert compute_alpha_weak(FIXTURES["cherry_q2_1"][0]) == Fraction(-6, 100)


# --- constructed violations -------------------------------------------------


def test_kappa_prime_one_breaks_item1():
    g, _ = FIXTURES["dumbbell_q2_6"]
    kap = Kappas(Fraction(1, 100), Fraction(1), Fraction(1, 100))
    rep = check_assumption_full(g, kap)
    v = rep.item(1)
    assert not v.passed
    kinds = sorted(g.edges[i].kind for i in v.witness.edges)
    assert kinds == ["fictitious", "kernel"]
    assert v.witness.lhs == Fraction(201, 100)
    assert replay_witness(g, v.witness, kap)


def test_raised_rho_label_breaks_item2():
    g, _ = FIXTURES["cherry_q2_1"]
    heavy = g.with_edges([Edge(e.src, e.dst, e.kind, Label.constant(4) if e.kind == "rho" else e.a, e.r, e.I) for e in g.edges])
    rep = check_assumption_weak(heavy)
    assert not rep.item(2).passed
    w = rep.item(2).witness
    assert len(w.subset) >= 3 and not w.lhs < w.rhs
    assert replay_witness(heavy, w)


def test_kappa_one_sweep_fails_everywhere_with_witnesses():
    for name, (g, assumption) in FIXTURES.items():
        kap = Kappas.uniform(1)
        rep = check(g, assumption, kap)
        assert not rep.passed
        for v in rep.items:
            if not v.passed:
                assert replay_witness(g, v.witness, kap)


def test_single_test_edge_is_vacuous():
    g = parse_diagram("graph |s|=2 star=o tests=v\no v test 0 0\n")
    rep = check_assumption_full(g)
    assert rep.passed
    assert rep.item(2).n_checked == 0 and rep.item(4).n_checked == 0
    assert compute_alpha_full(g) == 0


def test_vertex_limit():
    names = [f"u{i}" for i in range(25)]
    g = LabelledDiagram(("o", *names), "o", ("u0",), 2, (Edge("o", "u0", "test", Label()),))
    with pytest.raises(TooLarge):
        check_assumption_full(g)
    with pytest.raises(TooLarge):
        compute_R(g)


def test_report_json():
    g, _ = FIXTURES["phi4_N3_q4"]
    data = json.loads(check_assumption_weak(g).to_json())
    assert data["passed"] is True and data["R"] == "8" and data["alpha"] == "-1/25"
    assert data["kappas"] == {"k": "1/100", "kp": "1/100", "kpp": "1/100"}
    assert "PASS" in check_assumption_weak(g).table()


# --- random graphs ----------------------------------------------------------


@st.composite
def random_diagrams(draw):
    n_free = draw(st.integers(1, 5))
    q = draw(st.integers(1, 3))
    tests = [f"t{i}" for i in range(q)]
    free = [f"f{i}" for i in range(n_free)]
    verts = ["o", *tests, *free]
    inner = tests + free
    edges = [Edge("o", t, "test", Label()) for t in tests]
    used_pairs = {}
    for _ in range(draw(st.integers(0, 8))):
        u, v = draw(st.sampled_from(inner)), draw(st.sampled_from(inner))
        if u == v:
            continue
        a = Label(Fraction(draw(st.integers(0, 8)), 2), (Fraction(draw(st.integers(0, 2))), Fraction(0), Fraction(0)))
        r = draw(st.sampled_from([-1, 0, 1]))
        group = used_pairs.setdefault(frozenset((u, v)), [])
        if -1 in group:
            continue  # a lone r=-1 edge must stay alone
        if r == -1 and group or r == 1 and 1 in group:
            r = 0
        group.append(r)
        edges.append(Edge(u, v, draw(st.sampled_from(["kernel", "rho", "fictitious"])), a, r, Fraction(1) if r == -1 else None))
    return LabelledDiagram(tuple(verts), "o", tuple(tests), draw(st.sampled_from([2, 4])), tuple(edges))


@settings(max_examples=60, deadline=None)
@given(random_diagrams(), st.fractions(0, 1, max_denominator=20))
def test_vectorised_matches_reference(g, kappa):
    kap = Kappas.uniform(kappa)
    for fn in (check_assumption_full, check_assumption_weak):
        assert fn(g, kap).to_dict() == fn(g, kap, method="reference").to_dict()


@settings(max_examples=40, deadline=None)
@given(random_diagrams(), st.integers(0, 30), st.integers(1, 5))
def test_raising_a_label_lowers_alpha(g, which, bump):
    i = which % len(g.edges)
    e = g.edges[i]
    heavier = list(g.edges)
    heavier[i] = Edge(e.src, e.dst, e.kind, e.a + Label.constant(Fraction(bump, 3)), e.r, e.I)
    h = g.with_edges(heavier)
    assert compute_alpha_full(g) - compute_alpha_full(h) == Fraction(bump, 3)
    assert compute_R(h)[0] <= compute_R(g)[0]
    assert compute_alpha_weak(h) <= compute_alpha_weak(g)


@settings(max_examples=40, deadline=None)
@given(random_diagrams(), st.fractions(0, 1, max_denominator=10))
def test_every_witness_replays(g, kappa):
    kap = Kappas.uniform(kappa)
    for v in check_assumption_full(g, kap).items:
        if v.witness is not None:
            assert replay_witness(g, v.witness, kap)
            if v.item != 1:
                lhs, rhs, rel, holds = evaluate_subset(g, v.item, v.witness.subset, kap)
                assert not holds
