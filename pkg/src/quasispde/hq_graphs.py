"""Exact power-counting checks on labelled Feynman-type diagrams.

A diagram is a finite directed multigraph.  Every edge carries a singularity
degree ``a_e`` (a nonnegative rational), a renormalisation flag
``r_e in {-1, 0, 1}`` and, for ``r_e = -1``, an optional constant ``I_e``.
One vertex is the base point ``star``; the ``q`` test edges run from it to
the distinguished vertices.

Labels may be linear in three small parameters ``k``, ``kp`` and ``kpp``.
They are fixed at check time through a :class:`Kappas` value, after which
all arithmetic is exact: labels are scaled to integers by their common
denominator and every subset inequality is evaluated for all subsets at
once over bitmasks.  A second evaluator works one subset at a time with
:class:`fractions.Fraction`.  It is used to replay failure witnesses and as
an independent check of the vectorised one.

Checks
------
item 1
    every group of parallel edges has ``sum a_e + sum min(r_e, 0) < |s|``.
item 2
    subsets of ``V \\ {star}`` with at least 3 vertices:
    ``sum_{internal} a_e < (|W| - 1) |s|``.
item 3
    subsets containing ``star`` with at least 2 vertices:
    ``sum_{internal} a_e + sum_{out} (a_e + r_e - 1) - sum_{in} r_e < (|W| - 1) |s|``.
item 4
    nonempty subsets of ``V`` minus the distinguished vertices:
    ``sum_{incident, not in} a_e + sum_{out} r_e - sum_{in} (r_e - 1) > |W| |s|``.

``"full"`` runs items 1 to 4, ``"weak"`` runs items 1 and 2.  The exponent is
``|s| |V \\ V_star| - sum a_e``, minus the defect ``R`` in the weak case.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from fractions import Fraction
from math import lcm
from pathlib import Path

import numpy as np

from .errors import MalformedDiagram, ParseError, TooLarge, UnknownVertex

__all__ = [
    "Kappas",
    "Label",
    "Edge",
    "LabelledDiagram",
    "EdgeSets",
    "Witness",
    "ItemVerdict",
    "CheckReport",
    "parse_diagram",
    "load_diagram",
    "format_diagram",
    "edge_sets",
    "evaluate_subset",
    "replay_witness",
    "check_assumption_full",
    "check_assumption_weak",
    "compute_alpha_full",
    "compute_R",
    "compute_alpha_weak",
    "dumbbell_diagram",
    "cherry_diagram",
    "phi4_diagram",
    "FIXTURES",
    "fixture",
    "fixture_path",
    "MAX_VERTICES",
]

MAX_VERTICES = 24
EDGE_KINDS = ("test", "kernel", "rho", "fictitious", "F")
PARAMS = ("k", "kp", "kpp")
_CHUNK = 1 << 18


@dataclass(frozen=True)
class Kappas:
    """Values of the small parameters ``k``, ``kp``, ``kpp``."""

    k: Fraction = Fraction(1, 100)
    kp: Fraction = Fraction(1, 100)
    kpp: Fraction = Fraction(1, 100)

    def __post_init__(self):
        for name in PARAMS:
            object.__setattr__(self, name, Fraction(getattr(self, name)))

    @classmethod
    def uniform(cls, value):
        v = Fraction(value)
        return cls(v, v, v)

    def as_tuple(self):
        return (self.k, self.kp, self.kpp)

    def to_dict(self):
        return {name: str(getattr(self, name)) for name in PARAMS}


_TERM = re.compile(r"^(?:(\d+)(?:/(\d+))?)?(\*)?(kpp|kp|k)?$")


@dataclass(frozen=True)
class Label:
    """``const + c_k k + c_kp kp + c_kpp kpp`` with rational coefficients."""

    const: Fraction = Fraction(0)
    coeffs: tuple = (Fraction(0), Fraction(0), Fraction(0))

    @classmethod
    def parse(cls, text):
        s = str(text).replace(" ", "")
        if not s:
            raise ValueError("empty label")
        const = Fraction(0)
        coeffs = [Fraction(0)] * 3
        pieces = re.findall(r"[+-]?[^+-]+", s)
        if "".join(pieces) != s:
            raise ValueError(f"cannot parse label {text!r}")
        for piece in pieces:
            sign = -1 if piece[0] == "-" else 1
            body = piece.lstrip("+-")
            m = _TERM.match(body)
            if not m or not body:
                raise ValueError(f"cannot parse label term {piece!r}")
            num, den, star, var = m.groups()
            if star and not (num and var):
                raise ValueError(f"dangling '*' in {piece!r}")
            if num is None and var is None:
                raise ValueError(f"cannot parse label term {piece!r}")
            if den is not None and int(den) == 0:
                raise ValueError("zero denominator in label")
            coef = Fraction(int(num), int(den or 1)) if num is not None else Fraction(1)
            if var is None:
                const += sign * coef
            else:
                coeffs[PARAMS.index(var)] += sign * coef
        return cls(const, tuple(coeffs))

    @classmethod
    def constant(cls, value):
        return cls(Fraction(value))

    def __call__(self, kappas: Kappas) -> Fraction:
        return self.const + sum(c * v for c, v in zip(self.coeffs, kappas.as_tuple()))

    def __add__(self, other):
        return Label(self.const + other.const, tuple(a + b for a, b in zip(self.coeffs, other.coeffs)))

    def __str__(self):
        parts = []
        if self.const != 0 or all(c == 0 for c in self.coeffs):
            parts.append(str(self.const))
        for c, name in zip(self.coeffs, PARAMS):
            if c == 0:
                continue
            mag = abs(c)
            term = name if mag == 1 else f"{mag}*{name}"
            if c < 0:
                parts.append("-" + term)
            else:
                parts.append(("+" if parts else "") + term)
        return "".join(parts)


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    kind: str
    a: Label
    r: int = 0
    I: Fraction | None = None

    def endpoints(self):
        return frozenset((self.src, self.dst))


@dataclass(frozen=True)
class LabelledDiagram:
    """Validated diagram.  Vertex order fixes the bit used for each vertex."""

    vertices: tuple
    star: str
    tests: tuple
    scaling: int
    edges: tuple
    name: str = ""

    def __post_init__(self):
        vs = tuple(self.vertices)
        object.__setattr__(self, "vertices", vs)
        object.__setattr__(self, "tests", tuple(self.tests))
        object.__setattr__(self, "edges", tuple(self.edges))
        if self.scaling not in (2, 4):
            raise MalformedDiagram(f"scaling dimension must be 2 or 4, got {self.scaling}")
        if len(set(vs)) != len(vs):
            raise MalformedDiagram("duplicate vertex names")
        known = set(vs)
        if self.star not in known:
            raise MalformedDiagram(f"star vertex {self.star!r} is not declared")
        if not self.tests:
            raise MalformedDiagram("at least one test vertex is required")
        if len(set(self.tests)) != len(self.tests) or self.star in self.tests:
            raise MalformedDiagram("test vertices must be distinct and differ from star")
        for e in self.edges:
            for v in (e.src, e.dst):
                if v not in known:
                    raise MalformedDiagram(f"edge refers to undeclared vertex {v!r}")
            if e.src == e.dst:
                raise MalformedDiagram(f"self-loop at {e.src!r}")
            if e.kind not in EDGE_KINDS:
                raise MalformedDiagram(f"unknown edge kind {e.kind!r}")
            if e.r not in (-1, 0, 1):
                raise MalformedDiagram(f"renormalisation flag must be -1, 0 or 1, got {e.r}")
            if e.I is not None and e.r != -1:
                raise MalformedDiagram("an I value is only allowed on r = -1 edges")
            if self.star in (e.src, e.dst) and e.r != 0:
                raise MalformedDiagram("edges touching star must have r = 0")
        test_edges = [e for e in self.edges if e.kind == "test"]
        if sorted((e.src, e.dst) for e in test_edges) != sorted((self.star, t) for t in self.tests):
            raise MalformedDiagram("need exactly one test edge from star to each test vertex")
        for group in self._parallel_groups().values():
            if len(group) < 2:
                continue
            flags = [self.edges[i].r for i in group if self.edges[i].r != 0]
            if len(flags) > 1 or (flags and flags[0] < 0):
                ends = sorted(self.edges[group[0]].endpoints())
                raise MalformedDiagram(
                    f"parallel edges {ends} may carry at most one nonzero r, and it must be positive"
                )

    def _parallel_groups(self):
        groups = {}
        for i, e in enumerate(self.edges):
            groups.setdefault(e.endpoints(), []).append(i)
        return groups

    @property
    def q(self):
        return len(self.tests)

    @property
    def index(self):
        return {v: i for i, v in enumerate(self.vertices)}

    @property
    def distinguished(self):
        return (self.star,) + self.tests

    @property
    def free_vertices(self):
        """``V`` minus the distinguished vertices."""
        d = set(self.distinguished)
        return tuple(v for v in self.vertices if v not in d)

    def with_edges(self, edges, name=None):
        return LabelledDiagram(self.vertices, self.star, self.tests, self.scaling, tuple(edges), name or self.name)

    def numeric(self, kappas: Kappas):
        """Edge labels at the given parameters, checked nonnegative."""
        vals = []
        for e in self.edges:
            a = e.a(kappas)
            if a < 0:
                raise MalformedDiagram(f"label {e.a} of edge {e.src}->{e.dst} is negative at {kappas.to_dict()}")
            vals.append(a)
        return vals


# --- text format -------------------------------------------------------------


def _frac(tok, lineno):
    try:
        return Fraction(tok)
    except (ValueError, ZeroDivisionError):
        raise ParseError(f"not a rational number: {tok!r}", lineno) from None


def parse_diagram(text, name=""):
    """Parse the line-based diagram format described in ``docs/diagram_format.md``."""
    header = None
    vertices = []
    edges = []

    def add_vertex(v):
        if v not in vertices:
            vertices.append(v)

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if tok[0] == "graph":
            if header is not None:
                raise ParseError("second 'graph' header", lineno)
            opts = {}
            tests = []
            in_tests = False
            for t in tok[1:]:
                if "=" in t:
                    key, val = t.split("=", 1)
                    in_tests = key == "tests"
                    if key in opts:
                        raise ParseError(f"repeated header key {key!r}", lineno)
                    opts[key] = val
                    if in_tests and val:
                        tests.extend(v for v in val.split(",") if v)
                elif in_tests:
                    tests.extend(v for v in t.split(",") if v)
                else:
                    raise ParseError(f"unexpected header token {t!r}", lineno)
            for key in ("|s|", "star", "tests"):
                if key not in opts:
                    raise ParseError(f"header is missing '{key}='", lineno)
            unknown = set(opts) - {"|s|", "star", "tests"}
            if unknown:
                raise ParseError(f"unknown header keys {sorted(unknown)}", lineno)
            try:
                scaling = int(opts["|s|"])
            except ValueError:
                raise ParseError(f"bad scaling dimension {opts['|s|']!r}", lineno) from None
            if scaling not in (2, 4):
                raise ParseError("scaling dimension must be 2 or 4", lineno)
            header = (scaling, opts["star"], tuple(tests))
            continue
        if header is None:
            raise ParseError("the first non-comment line must be the 'graph' header", lineno)
        if tok[0] == "vertex":
            if len(tok) < 2:
                raise ParseError("'vertex' needs at least one name", lineno)
            for v in tok[1:]:
                add_vertex(v)
            continue
        if len(tok) not in (5, 6):
            raise ParseError(f"edge lines need 5 or 6 fields, got {len(tok)}", lineno)
        src, dst, kind, a_txt, r_txt = tok[:5]
        if kind not in EDGE_KINDS:
            raise ParseError(f"unknown edge kind {kind!r}", lineno)
        try:
            a = Label.parse(a_txt)
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        if r_txt not in ("-1", "0", "1"):
            raise ParseError(f"r must be -1, 0 or 1, got {r_txt!r}", lineno)
        I = _frac(tok[5], lineno) if len(tok) == 6 else None
        add_vertex(src)
        add_vertex(dst)
        edges.append((lineno, Edge(src, dst, kind, a, int(r_txt), I)))
    if header is None:
        raise ParseError("missing 'graph' header", None)
    scaling, star, tests = header
    for v in (star, *tests):
        add_vertex(v)
    try:
        return LabelledDiagram(tuple(vertices), star, tests, scaling, tuple(e for _, e in edges), name)
    except MalformedDiagram as exc:
        raise ParseError(str(exc), None) from None


def load_diagram(path):
    p = Path(path)
    return parse_diagram(p.read_text(), name=p.stem)


def format_diagram(g: LabelledDiagram, comment=None):
    """Canonical text form.  ``parse_diagram(format_diagram(g))`` reproduces ``g``."""
    lines = []
    if comment:
        lines.extend(f"# {c}" for c in comment.splitlines())
    lines.append(f"graph |s|={g.scaling} star={g.star} tests={' '.join(g.tests)}")
    lines.append("vertex " + " ".join(g.vertices))
    for e in g.edges:
        fields = [e.src, e.dst, e.kind, str(e.a), str(e.r)]
        if e.I is not None:
            fields.append(str(e.I))
        lines.append(" ".join(fields))
    return "\n".join(lines) + "\n"


# --- per-subset reference evaluation ----------------------------------------


@dataclass(frozen=True)
class EdgeSets:
    """Edge indices, one entry per edge so parallel edges count separately."""

    up: tuple
    down: tuple
    internal: tuple
    incident: tuple


def _resolve(g, subset):
    idx = g.index
    out = set()
    for v in subset:
        if v not in idx:
            raise UnknownVertex(v)
        out.add(v)
    return out


def edge_sets(g: LabelledDiagram, subset) -> EdgeSets:
    """Outgoing, incoming, internal and incident edges of a vertex subset.

    Outgoing edges meet the subset only in their source and have ``r > 0``;
    incoming edges meet it only in their target and have ``r > 0``.
    """
    W = _resolve(g, subset)
    up, down, internal, incident = [], [], [], []
    for i, e in enumerate(g.edges):
        s, d = e.src in W, e.dst in W
        if s and d:
            internal.append(i)
        if s or d:
            incident.append(i)
        if e.r > 0 and s and not d:
            up.append(i)
        if e.r > 0 and d and not s:
            down.append(i)
    return EdgeSets(tuple(up), tuple(down), tuple(internal), tuple(incident))


def evaluate_subset(g: LabelledDiagram, item, subset, kappas: Kappas = Kappas()):
    """Both sides of one subset inequality, exactly.

    Returns ``(lhs, rhs, relation, holds)``.  Items 2 and 3 compare with
    ``<``, item 4 with ``>``, and the defect entering ``R`` is returned as
    ``lhs`` with ``rhs = 0`` and relation ``"max"``.
    """
    W = _resolve(g, subset)
    sets = edge_sets(g, W)
    a = g.numeric(kappas)
    s = g.scaling
    n = len(W)
    if item == 2:
        lhs = sum((a[i] for i in sets.internal), Fraction(0))
        rhs = (n - 1) * s
        return lhs, Fraction(rhs), "<", lhs < rhs
    if item == 3:
        lhs = sum((a[i] for i in sets.internal), Fraction(0))
        lhs += sum((a[i] + g.edges[i].r - 1 for i in sets.up), Fraction(0))
        lhs -= sum((g.edges[i].r for i in sets.down), Fraction(0))
        rhs = (n - 1) * s
        return lhs, Fraction(rhs), "<", lhs < rhs
    if item == 4:
        down = set(sets.down)
        lhs = sum((a[i] for i in sets.incident if i not in down), Fraction(0))
        lhs += sum((g.edges[i].r for i in sets.up), Fraction(0))
        lhs -= sum((g.edges[i].r - 1 for i in sets.down), Fraction(0))
        rhs = n * s
        return lhs, Fraction(rhs), ">", lhs > rhs
    if item == "R":
        val = n * s - sum((a[i] for i in sets.incident), Fraction(0))
        return val, Fraction(0), "max", True
    raise ValueError(f"no subset inequality for item {item!r}")


def _item_domain(g, item):
    """Candidate vertices and the extra rules a subset must obey for ``item``."""
    if item == 2:
        return [v for v in g.vertices if v != g.star], (), 3
    if item == 3:
        return [v for v in g.vertices if v != g.star], (g.star,), 2
    if item in (4, "R"):
        return list(g.free_vertices), (), 1 if item == 4 else 0
    raise ValueError(item)


def _item1(g, kappas):
    """Parallel-edge groups as ``(edge indices, lhs)``, in order of first appearance."""
    a = g.numeric(kappas)
    out = []
    for group in g._parallel_groups().values():
        lhs = sum(a[i] + min(g.edges[i].r, 0) for i in group)
        out.append((tuple(group), lhs))
    return out


# --- vectorised evaluation --------------------------------------------------


def _scaled(g, kappas):
    a = g.numeric(kappas)
    L = lcm(*(x.denominator for x in a)) if a else 1
    a_int = np.array([int(x * L) for x in a], dtype=np.int64)
    r = np.array([e.r for e in g.edges], dtype=np.int64)
    pos = g.index
    src = np.array([pos[e.src] for e in g.edges], dtype=np.int64)
    dst = np.array([pos[e.dst] for e in g.edges], dtype=np.int64)
    return L, a_int, r, src, dst


def _expand(compact, bits):
    """Map compact masks over ``len(bits)`` candidates to full vertex masks."""
    full = np.zeros_like(compact)
    for j, b in enumerate(bits):
        full |= ((compact >> j) & 1) << b
    return full


def _scan(g, item, kappas, stop_at_first=False):
    """Evaluate one subset family over all masks.

    Returns ``(n_checked, n_failed, first_failing_full_mask)`` for items 2 to 4
    and ``(n_checked, best_value_scaled, best_full_mask, L)`` for ``"R"``.
    """
    if len(g.vertices) > MAX_VERTICES:
        raise TooLarge(f"{len(g.vertices)} vertices exceed the limit of {MAX_VERTICES}")
    L, a, r, src, dst = _scaled(g, kappas)
    s = g.scaling * L
    cand, forced, min_size = _item_domain(g, item)
    pos = g.index
    bits = [pos[v] for v in cand]
    forced_mask = 0
    for v in forced:
        forced_mask |= 1 << pos[v]
    total = 1 << len(bits)
    n_checked = n_failed = 0
    first = None
    best_val, best_mask = None, None
    pos_r = r > 0
    for start in range(0, total, _CHUNK):
        compact = np.arange(start, min(total, start + _CHUNK), dtype=np.int64)
        masks = _expand(compact, bits) | forced_mask
        size = np.bitwise_count(masks).astype(np.int64)
        keep = size >= min_size
        masks, size = masks[keep], size[keep]
        if masks.size == 0:
            continue
        S_int = np.zeros(masks.size, dtype=np.int64)
        S_inc = np.zeros_like(S_int)
        S_up3 = np.zeros_like(S_int)  # outgoing a_e + r_e - 1
        S_up_r = np.zeros_like(S_int)
        S_down_r = np.zeros_like(S_int)
        S_down_a = np.zeros_like(S_int)
        S_down_r1 = np.zeros_like(S_int)  # incoming r_e - 1
        for e in range(len(a)):
            bs = (masks >> src[e]) & 1
            bd = (masks >> dst[e]) & 1
            S_int += a[e] * (bs & bd)
            S_inc += a[e] * (bs | bd)
            if pos_r[e]:
                up = bs & (1 - bd)
                down = bd & (1 - bs)
                S_up3 += (a[e] + (r[e] - 1) * L) * up
                S_up_r += r[e] * L * up
                S_down_r += r[e] * L * down
                S_down_a += a[e] * down
                S_down_r1 += (r[e] - 1) * L * down
        if item == "R":
            vals = size * s - S_inc
            j = int(np.argmax(vals))
            if best_val is None or vals[j] > best_val:
                best_val, best_mask = int(vals[j]), int(masks[j])
            n_checked += masks.size
            continue
        if item == 2:
            ok = S_int < (size - 1) * s
        elif item == 3:
            ok = S_int + S_up3 - S_down_r < (size - 1) * s
        else:
            ok = S_inc - S_down_a + S_up_r - S_down_r1 > size * s
        bad = np.flatnonzero(~ok)
        n_checked += masks.size
        n_failed += bad.size
        if bad.size and first is None:
            first = int(masks[bad[0]])
            if stop_at_first:
                break
    if item == "R":
        return n_checked, best_val, best_mask, L
    return n_checked, n_failed, first


def _names(g, mask):
    return tuple(v for i, v in enumerate(g.vertices) if mask >> i & 1)


# --- reports ----------------------------------------------------------------


@dataclass(frozen=True)
class Witness:
    item: int
    lhs: Fraction
    rhs: Fraction
    relation: str
    subset: tuple = ()
    edges: tuple = ()

    def to_dict(self):
        out = {"item": self.item, "lhs": str(self.lhs), "rhs": str(self.rhs), "relation": self.relation}
        if self.subset:
            out["subset"] = list(self.subset)
        if self.edges:
            out["edges"] = list(self.edges)
        return out


@dataclass(frozen=True)
class ItemVerdict:
    item: int
    passed: bool
    n_checked: int
    n_failed: int
    witness: Witness | None = None

    def to_dict(self):
        return {
            "item": self.item,
            "passed": self.passed,
            "checked": self.n_checked,
            "failed": self.n_failed,
            "witness": None if self.witness is None else self.witness.to_dict(),
        }


@dataclass(frozen=True)
class CheckReport:
    assumption: str
    diagram: str
    scaling: int
    kappas: Kappas
    items: tuple
    alpha: Fraction
    R: Fraction | None = None
    R_witness: tuple = ()
    notes: tuple = field(default_factory=tuple)

    @property
    def passed(self):
        return all(v.passed for v in self.items)

    def item(self, k):
        for v in self.items:
            if v.item == k:
                return v
        raise KeyError(k)

    def to_dict(self):
        out = {
            "assumption": self.assumption,
            "diagram": self.diagram,
            "scaling": self.scaling,
            "kappas": self.kappas.to_dict(),
            "passed": self.passed,
            "items": [v.to_dict() for v in self.items],
            "alpha": str(self.alpha),
        }
        if self.R is not None:
            out["R"] = str(self.R)
            out["R_witness"] = list(self.R_witness)
        if self.notes:
            out["notes"] = list(self.notes)
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def table(self):
        rows = [f"{self.diagram or '<diagram>'}  assumption={self.assumption}  |s|={self.scaling}  "
                f"k={self.kappas.k} kp={self.kappas.kp} kpp={self.kappas.kpp}"]
        for v in self.items:
            line = f"  item {v.item}: {'PASS' if v.passed else 'FAIL'}  ({v.n_checked} checked, {v.n_failed} failed)"
            if v.witness is not None:
                w = v.witness
                where = ",".join(w.subset) if w.subset else "edges " + ",".join(map(str, w.edges))
                line += f"  witness {{{where}}}: {w.lhs} {w.relation} {w.rhs} is false"
            rows.append(line)
        rows.append(f"  alpha = {self.alpha}")
        if self.R is not None:
            rows.append(f"  R = {self.R}  at {{{','.join(self.R_witness)}}}")
        rows.append("  verdict: " + ("PASS" if self.passed else "FAIL"))
        return "\n".join(rows)


def _verdict_item1(g, kappas):
    groups = _item1(g, kappas)
    s = g.scaling
    bad = [(grp, lhs) for grp, lhs in groups if not lhs < s]
    witness = None
    if bad:
        grp, lhs = bad[0]
        ends = g.edges[grp[0]]
        witness = Witness(1, lhs, Fraction(s), "<", subset=(ends.src, ends.dst), edges=grp)
    return ItemVerdict(1, not bad, len(groups), len(bad), witness)


def _verdict_subsets(g, item, kappas):
    n_checked, n_failed, first = _scan(g, item, kappas)
    witness = None
    if first is not None:
        names = _names(g, first)
        lhs, rhs, rel, _ = evaluate_subset(g, item, names, kappas)
        witness = Witness(item, lhs, rhs, rel, subset=names)
    return ItemVerdict(item, n_failed == 0, n_checked, n_failed, witness)


def _reference_verdict(g, item, kappas):
    """Same verdict by explicit per-subset enumeration with Fractions."""
    if item == 1:
        return _verdict_item1(g, kappas)
    cand, forced, min_size = _item_domain(g, item)
    n_checked = n_failed = 0
    witness = None
    for mask in range(1 << len(cand)):
        W = tuple(forced) + tuple(v for j, v in enumerate(cand) if mask >> j & 1)
        if len(W) < min_size:
            continue
        n_checked += 1
        lhs, rhs, rel, holds = evaluate_subset(g, item, W, kappas)
        if not holds:
            n_failed += 1
            if witness is None:
                order = g.index
                W = tuple(sorted(W, key=order.__getitem__))
                witness = Witness(item, lhs, rhs, rel, subset=W)
    return ItemVerdict(item, n_failed == 0, n_checked, n_failed, witness)


def replay_witness(g: LabelledDiagram, witness: Witness, kappas: Kappas = Kappas()):
    """Re-evaluate a witness from scratch.  True when it still shows a violation."""
    if witness.item == 1:
        a = g.numeric(kappas)
        lhs = sum(a[i] + min(g.edges[i].r, 0) for i in witness.edges)
        return lhs == witness.lhs and not lhs < g.scaling
    lhs, rhs, rel, holds = evaluate_subset(g, witness.item, witness.subset, kappas)
    return (not holds) and lhs == witness.lhs and rhs == witness.rhs and rel == witness.relation


def _check(g, kappas, items, method, weak):
    if len(g.vertices) > MAX_VERTICES:
        raise TooLarge(f"{len(g.vertices)} vertices exceed the limit of {MAX_VERTICES}")
    if method not in ("vectorized", "reference"):
        raise ValueError(f"unknown method {method!r}")
    verdicts = []
    for item in items:
        if item == 1:
            verdicts.append(_verdict_item1(g, kappas))
        elif method == "vectorized":
            verdicts.append(_verdict_subsets(g, item, kappas))
        else:
            verdicts.append(_reference_verdict(g, item, kappas))
    if weak:
        R, wit = compute_R(g, kappas, method=method)
        alpha = compute_alpha_full(g, kappas) - R
        return CheckReport("weak", g.name, g.scaling, kappas, tuple(verdicts), alpha, R, wit)
    return CheckReport("full", g.name, g.scaling, kappas, tuple(verdicts), compute_alpha_full(g, kappas))


def check_assumption_full(g: LabelledDiagram, kappas: Kappas = Kappas(), method="vectorized") -> CheckReport:
    """Items 1 to 4 over every admissible subset."""
    return _check(g, kappas, (1, 2, 3, 4), method, weak=False)


def check_assumption_weak(g: LabelledDiagram, kappas: Kappas = Kappas(), method="vectorized") -> CheckReport:
    """Items 1 and 2, plus the defect ``R`` and the reduced exponent."""
    return _check(g, kappas, (1, 2), method, weak=True)


def compute_alpha_full(g: LabelledDiagram, kappas: Kappas = Kappas()) -> Fraction:
    return g.scaling * len(g.free_vertices) - sum(g.numeric(kappas), Fraction(0))


def compute_R(g: LabelledDiagram, kappas: Kappas = Kappas(), method="vectorized"):
    """Largest ``|W||s| - sum_{incident} a_e`` over free-vertex subsets, clipped at 0.

    Returns ``(R, witness)``; the witness is the empty tuple when ``R = 0``
    and otherwise the first maximising subset in mask order.
    """
    if method == "reference":
        cand = list(g.free_vertices)
        best, best_W = Fraction(0), ()
        for mask in range(1 << len(cand)):
            W = tuple(v for j, v in enumerate(cand) if mask >> j & 1)
            val = evaluate_subset(g, "R", W, kappas)[0]
            if val > best:
                best, best_W = val, W
        return best, best_W
    _, best, mask, L = _scan(g, "R", kappas)
    value = Fraction(best, L)
    if value <= 0:
        return Fraction(0), ()
    return value, _names(g, mask)


def compute_alpha_weak(g: LabelledDiagram, kappas: Kappas = Kappas()) -> Fraction:
    return compute_alpha_full(g, kappas) - compute_R(g, kappas)[0]


# --- fixture builders -------------------------------------------------------

RHO_LABEL_SPATIAL = Label.parse("2+k")
RHO_LABEL_PARABOLIC = Label.parse("4+k")


def _check_pairs(pairs, n):
    seen = set()
    for i, j in pairs:
        if not (1 <= i <= n and 1 <= j <= n) or i == j:
            raise MalformedDiagram(f"pair {(i, j)} out of range 1..{n}")
        if i in seen or j in seen:
            raise MalformedDiagram(f"vertex used twice in pairs {pairs}")
        seen.update((i, j))
    return seen


def dumbbell_diagram(q, rho_pairs, fictitious_pairs=(), name=""):
    """Diagram of the ``q``-th moment of a recentred kernel against a Wick square.

    Vertices ``v1..v{2q}``; odd ones carry the test edges, ``v{2i} -> v{2i-1}``
    are recentred kernel edges ``(kp, 1)``, ``rho_pairs`` are covariance edges
    ``(2+k, -1)``, ``fictitious_pairs`` are constant edges ``(1+kpp, 0)``.
    Vertices not touched by a covariance edge get an ``F`` edge from star.
    """
    n = 2 * q
    covered = _check_pairs(rho_pairs, n)
    _check_pairs(fictitious_pairs, n)
    star = "o"
    v = [f"v{i}" for i in range(1, n + 1)]
    edges = [Edge(star, v[2 * i], "test", Label()) for i in range(q)]
    edges += [Edge(v[2 * i + 1], v[2 * i], "kernel", Label.parse("kp"), 1) for i in range(q)]
    edges += [Edge(v[i - 1], v[j - 1], "rho", RHO_LABEL_SPATIAL, -1, Fraction(1)) for i, j in rho_pairs]
    edges += [Edge(v[i - 1], v[j - 1], "fictitious", Label.parse("1+kpp"), 0) for i, j in fictitious_pairs]
    edges += [Edge(star, v[i - 1], "F", Label()) for i in range(1, n + 1) if i not in covered]
    return LabelledDiagram((star, *v), star, tuple(v[0::2]), 2, tuple(edges), name)


def cherry_diagram(q, rho_pairs, name=""):
    """Diagram of the ``q``-th moment of two kernels meeting at one point.

    Vertices ``x1..xq`` carry the test edges, ``y{2i-1}, y{2i} -> x_i`` are
    kernel edges ``(1+kp, 0)`` and ``rho_pairs`` (indices into ``y``) are
    covariance edges ``(2+k, -1)``.  Unpaired ``y_j`` get an ``F`` edge from
    their own ``x``.
    """
    return _tree_diagram(q, 2, rho_pairs, Label.parse("1+kp"), RHO_LABEL_SPATIAL, 2, name)


def phi4_diagram(N, q, rho_pairs, name=""):
    """Space-time diagram of the ``q``-th moment of an ``N``-fold Wick power.

    Kernel edges ``(2, 0)``, covariance edges ``(4+k, -1)``, ``|s| = 4``.
    """
    return _tree_diagram(q, N, rho_pairs, Label.constant(2), RHO_LABEL_PARABOLIC, 4, name)


def _tree_diagram(q, width, rho_pairs, kernel_label, rho_label, scaling, name):
    n = width * q
    covered = _check_pairs(rho_pairs, n)
    star = "o"
    x = [f"x{i}" for i in range(1, q + 1)]
    y = [f"y{j}" for j in range(1, n + 1)]
    edges = [Edge(star, xi, "test", Label()) for xi in x]
    edges += [Edge(y[j], x[j // width], "kernel", kernel_label, 0) for j in range(n)]
    edges += [Edge(y[i - 1], y[j - 1], "rho", rho_label, -1, Fraction(1)) for i, j in rho_pairs]
    edges += [Edge(x[(j - 1) // width], y[j - 1], "F", Label()) for j in range(1, n + 1) if j not in covered]
    return LabelledDiagram((star, *x, *y), star, tuple(x), scaling, tuple(edges), name)


# Diagrams drawn for the dumbbell, cherry and phi^4 moment bounds.  Pairs use
# the vertex numbering of the builders above.  (pairs, fictitious, assumption)
_DUMBBELL_Q2 = [
    (((4, 2), (3, 1)), ()),
    (((4, 1), (3, 2)), ()),
    (((4, 2),), ((3, 1),)),
    (((3, 1),), ((4, 2),)),
    (((4, 1),), ((3, 2),)),
    ((), ((2, 1), (4, 3))),
]
_DUMBBELL_Q5 = [
    (((8, 6), (9, 7), (3, 5), (1, 4), (10, 2)), ()),
    (((7, 5), (9, 8), (3, 6), (1, 4)), ((10, 2),)),
    (((8, 6), (7, 5), (2, 3), (10, 4)), ((1, 9),)),
]
_CHERRY_Q2 = [((1, 4), (2, 3)), ((2, 3),)]
_CHERRY_Q4 = [
    ((1, 8), (2, 3), (4, 5), (6, 7)),
    ((1, 8), (2, 3), (4, 7)),
    ((1, 8), (4, 5)),
]
_PHI4_N3_Q4 = ((1, 11), (3, 4), (5, 10), (6, 8))
# Same covariance pairs as dumbbell_q2_4 / dumbbell_q5_2, but each uncovered
# top vertex is tied to its own kernel partner instead of to the other one.
_DUMBBELL_ALT = {
    "dumbbell_q2_4_alt": (2, ((3, 1),), ((2, 1), (4, 3))),
    "dumbbell_q5_2_alt": (5, ((7, 5), (9, 8), (3, 6), (1, 4)), ((2, 1), (10, 9))),
}


def _build_fixtures():
    out = {}
    for i, (rho, fict) in enumerate(_DUMBBELL_Q2, 1):
        name = f"dumbbell_q2_{i}"
        out[name] = (dumbbell_diagram(2, rho, fict, name), "full")
    for i, (rho, fict) in enumerate(_DUMBBELL_Q5, 1):
        name = f"dumbbell_q5_{i}"
        out[name] = (dumbbell_diagram(5, rho, fict, name), "full")
    for i, rho in enumerate(_CHERRY_Q2, 1):
        name = f"cherry_q2_{i}"
        out[name] = (cherry_diagram(2, rho, name), "weak")
    for i, rho in enumerate(_CHERRY_Q4, 1):
        name = f"cherry_q4_{i}"
        out[name] = (cherry_diagram(4, rho, name), "weak")
    out["phi4_N3_q4"] = (phi4_diagram(3, 4, _PHI4_N3_Q4, "phi4_N3_q4"), "weak")
    for name, (q, rho, fict) in _DUMBBELL_ALT.items():
        out[name] = (dumbbell_diagram(q, rho, fict, name), "full")
    return out


FIXTURES = _build_fixtures()

DIAGRAM_DIR = Path(__file__).with_name("diagrams")


def fixture(name):
    """``(diagram, designated assumption)`` for a bundled fixture."""
    return FIXTURES[name]


def fixture_path(name):
    return DIAGRAM_DIR / f"{name}.graph"
