"""System models: state regions, dynamics modes, sampling and simulation.

A model carries a bounding box, three named regions (operating domain,
initial set, unsafe set) and one or more dynamics modes, each guarded by a
region predicate.  Continuous systems use a single mode whose guard is the
trivial predicate ``true``.

Region predicate text uses comparisons joined by ``and`` / ``or``::

    region := conj ("or" conj)*
    conj   := unit ("and" unit)*
    unit   := comparison | "(" region ")" | "true"
    comparison := expr ("<=" | "<" | "=" | ">=" | ">") expr

Comparisons are normalised to atoms ``e <= 0``, ``e < 0`` and ``e = 0``.
Problem files are YAML documents with keys ``dimension``, ``variables``,
``bounding_box``, ``domain``, ``init``, ``unsafe`` and ``modes`` (a list of
``{guard, field}`` tables).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field as dc_field
from typing import Optional, Sequence, Union

import numpy as np
import yaml

from .expr import (
    Box,
    CompiledExprs,
    Const,
    Expr,
    ParseError,
    Sub,
    free_variables,
    parse_expr,
    print_expr,
)

__all__ = [
    "Atom",
    "RegionAnd",
    "RegionOr",
    "Region",
    "Mode",
    "SystemModel",
    "Trajectory",
    "ModelError",
    "RegionEmptyError",
    "ModeError",
    "parse_region",
    "print_region",
    "region_atoms",
    "CompiledRegion",
    "load_problem",
    "save_problem",
    "model_from_dict",
    "model_to_dict",
]

# tolerance for equality atoms at point level; enclosure tests stay exact
EQ_TOL = 1e-12

# total rejection-sampling draw budget: enough to flag empty regions quickly
# while scaling with the request size for thin regions
_BASE_DRAW_BUDGET = 1_000_000
_PER_SAMPLE_DRAWS = 2_000


class ModelError(ValueError):
    """Raised for inconsistent models or invalid model queries."""


class RegionEmptyError(ModelError):
    """Raised when rejection sampling exhausts its draw budget."""


class ModeError(ModelError):
    """Raised when no or several dynamics modes apply at a point."""


# ---------------------------------------------------------------------------
# Regions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Atom:
    """A sign condition on an expression: e <= 0, e < 0 or e = 0."""

    expr: Expr
    rel: str  # "le" | "lt" | "eq"

    def __post_init__(self):
        if self.rel not in ("le", "lt", "eq"):
            raise ValueError(f"unknown relation {self.rel!r}")


@dataclass(frozen=True)
class RegionAnd:
    """Conjunction of subregions; empty conjunction is the whole space."""

    parts: tuple["Region", ...]


@dataclass(frozen=True)
class RegionOr:
    """Disjunction of subregions."""

    parts: tuple["Region", ...]


Region = Union[Atom, RegionAnd, RegionOr]

TRUE_REGION = RegionAnd(())


def region_atoms(region: Region) -> list[Atom]:
    """All atoms of a region in a fixed left-to-right order."""
    out: list[Atom] = []

    def walk(r: Region):
        if isinstance(r, Atom):
            out.append(r)
        else:
            for p in r.parts:
                walk(p)

    walk(region)
    return out


class CompiledRegion:
    """A region with its atom expressions compiled for batched queries."""

    def __init__(self, region: Region):
        self.region = region
        self.atoms = region_atoms(region)
        self._comp = CompiledExprs([a.expr for a in self.atoms]) if self.atoms else None

    def contains(self, X: np.ndarray) -> np.ndarray:
        """Exact membership for each row of ``X`` (strictness honoured)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        k = X.shape[0]
        if self._comp is None:
            vals = []
        else:
            vals = self._comp.eval_points(X)
        masks = []
        for a, v in zip(self.atoms, vals):
            if a.rel == "le":
                masks.append(v <= 0.0)
            elif a.rel == "lt":
                masks.append(v < 0.0)
            else:
                masks.append(np.abs(v) <= EQ_TOL)
        i_next = [0]

        def rec(r: Region) -> np.ndarray:
            if isinstance(r, Atom):
                m = masks[i_next[0]]
                i_next[0] += 1
                return m
            if isinstance(r, RegionAnd):
                m = np.ones(k, dtype=bool)
                for p in r.parts:
                    m &= rec(p)
                return m
            m = np.zeros(k, dtype=bool)
            for p in r.parts:
                m |= rec(p)
            return m

        return rec(self.region)

    def possible(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        """Sound over-approximation of nonempty intersection with each box.

        True whenever the region may intersect the box; strict atoms are
        closed for this test, and enclosure failures count as possible.
        """
        lo = np.atleast_2d(np.asarray(lo, dtype=float))
        hi = np.atleast_2d(np.asarray(hi, dtype=float))
        k = lo.shape[0]
        if self._comp is None:
            results = []
        else:
            results = self._comp.eval_intervals(lo, hi)
        masks = []
        for a, (vlo, vhi, bad) in zip(self.atoms, results):
            if a.rel in ("le", "lt"):
                m = ~(vlo > 0.0)  # NaN bounds stay possible
            else:
                m = ~((vlo > 0.0) | (vhi < 0.0))
            if bad is not None:
                m |= bad
            masks.append(m)
        i_next = [0]

        def rec(r: Region) -> np.ndarray:
            if isinstance(r, Atom):
                m = masks[i_next[0]]
                i_next[0] += 1
                return m
            if isinstance(r, RegionAnd):
                m = np.ones(k, dtype=bool)
                for p in r.parts:
                    m &= rec(p)
                return m
            m = np.zeros(k, dtype=bool)
            for p in r.parts:
                m |= rec(p)
            return m

        return rec(self.region)


# ---------------------------------------------------------------------------
# Region text
# ---------------------------------------------------------------------------

_REL_RE = re.compile(r"(<=|>=|=|<|>)")


def _split_top(text: str, word: str) -> list[str]:
    """Split on a keyword at paren depth zero."""
    parts = []
    depth = 0
    start = 0
    i = 0
    pat = re.compile(rf"\b{word}\b")
    while i < len(text):
        c = text[i]
        if c == "(":
            depth += 1
        elif c == ")":
            depth -= 1
            if depth < 0:
                raise ParseError(f"unbalanced parentheses in region {text!r}")
        elif depth == 0:
            m = pat.match(text, i)
            if m:
                parts.append(text[start:i])
                i = m.end()
                start = i
                continue
        i += 1
    if depth != 0:
        raise ParseError(f"unbalanced parentheses in region {text!r}")
    parts.append(text[start:])
    return parts


def parse_region(text: str, variables: Sequence[str]) -> Region:
    """Parse region predicate text over the given variable names."""
    disjuncts = [_parse_conj(p, variables) for p in _split_top(text, "or")]
    if len(disjuncts) == 1:
        return disjuncts[0]
    return RegionOr(tuple(disjuncts))


def _parse_conj(text: str, variables: Sequence[str]) -> Region:
    units = [_parse_unit(p, variables) for p in _split_top(text, "and")]
    if len(units) == 1:
        return units[0]
    return RegionAnd(tuple(units))


def _parse_unit(text: str, variables: Sequence[str]) -> Region:
    t = text.strip()
    if not t:
        raise ParseError("empty region term")
    if t == "true":
        return TRUE_REGION
    if t.startswith("("):
        # find matching close paren
        depth = 0
        for i, c in enumerate(t):
            if c == "(":
                depth += 1
            elif c == ")":
                depth -= 1
                if depth == 0:
                    if i == len(t) - 1:
                        inner = t[1:-1]
                        try:
                            return parse_region(inner, variables)
                        except ParseError:
                            break  # plain parenthesised expression
                    break
        # fall through: comparison starting with "("
    return _parse_comparison(t, variables)


def _parse_comparison(text: str, variables: Sequence[str]) -> Atom:
    pieces = _REL_RE.split(text)
    if len(pieces) != 3:
        raise ParseError(f"expected exactly one comparison in {text!r}")
    left_text, rel, right_text = pieces
    left = parse_expr(left_text, variables)
    right = parse_expr(right_text, variables)
    if rel in (">", ">="):
        left, right = right, left
        rel = "<" if rel == ">" else "<="
    kind = {"<=": "le", "<": "lt", "=": "eq"}[rel]
    if isinstance(right, Const) and right.value == 0.0:
        e = left
    else:
        e = Sub(left, right)
    return Atom(e, kind)


def print_region(region: Region, variables: Sequence[str]) -> str:
    """Render a region in the predicate grammar."""
    if isinstance(region, Atom):
        op = {"le": "<=", "lt": "<", "eq": "="}[region.rel]
        return f"{print_expr(region.expr, variables)} {op} 0"
    if isinstance(region, RegionAnd):
        if not region.parts:
            return "true"
        rendered = []
        for p in region.parts:
            s = print_region(p, variables)
            rendered.append(f"({s})" if isinstance(p, RegionOr) else s)
        return " and ".join(rendered)
    return " or ".join(print_region(p, variables) for p in region.parts)


# ---------------------------------------------------------------------------
# Modes and models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Mode:
    """One dynamics branch: a guard region and a vector field."""

    guard: Region
    field: tuple[Expr, ...]


@dataclass(frozen=True)
class Trajectory:
    """A simulated path: rows of ``points`` are consecutive states."""

    points: np.ndarray
    exited: bool
    divergent: bool


@dataclass
class SystemModel:
    """A safety problem instance over a box-bounded state space."""

    variables: tuple[str, ...]
    bounding_box: Box
    domain: Region
    init: Region
    unsafe: Region
    modes: tuple[Mode, ...]
    name: str = ""
    _cache: dict = dc_field(default_factory=dict, repr=False, compare=False)

    @property
    def dimension(self) -> int:
        return len(self.variables)

    def region(self, which: Union[str, Region]) -> Region:
        if isinstance(which, str):
            try:
                return {"domain": self.domain, "init": self.init, "unsafe": self.unsafe}[which]
            except KeyError:
                raise ModelError(f"unknown region name {which!r}") from None
        return which

    def compiled(self, which: Union[str, Region]) -> CompiledRegion:
        r = self.region(which)
        key = id(r)
        if key not in self._cache:
            self._cache[key] = CompiledRegion(r)
        return self._cache[key]

    def compiled_field(self, mode_index: int) -> CompiledExprs:
        key = ("field", mode_index)
        if key not in self._cache:
            self._cache[key] = CompiledExprs(list(self.modes[mode_index].field))
        return self._cache[key]

    def contains(self, which: Union[str, Region], X: np.ndarray) -> np.ndarray:
        return self.compiled(which).contains(X)

    def diameter(self) -> float:
        lo, hi = self.bounding_box.as_arrays()
        return float(np.linalg.norm(hi - lo))


def validate_model(m: SystemModel, rng: Optional[np.random.Generator] = None, samples: int = 200):
    """Check structural and statistical model invariants; raises ModelError."""
    n = m.dimension
    if m.bounding_box.dim != n:
        raise ModelError(f"bounding box has {m.bounding_box.dim} dimensions, expected {n}")
    if not m.modes:
        raise ModelError("model needs at least one mode")
    for k, mode in enumerate(m.modes):
        if len(mode.field) != n:
            raise ModelError(f"mode {k} field has {len(mode.field)} components, expected {n}")
    all_exprs = [a.expr for r in (m.domain, m.init, m.unsafe) for a in region_atoms(r)]
    for mode in m.modes:
        all_exprs.extend(mode.field)
        all_exprs.extend(a.expr for a in region_atoms(mode.guard))
    for e in all_exprs:
        fv = free_variables(e)
        if fv and max(fv) >= n:
            raise ModelError(f"expression uses variable index {max(fv)}, model has {n}")
    rng = rng if rng is not None else np.random.default_rng(0)
    # initial states must live where the dynamics are defined; the unsafe
    # set may legitimately lie (partly) outside the working region — the
    # certificate still has to be positive on all of it
    pts = sample_region(m, "init", samples, rng)
    inside = m.contains("domain", pts)
    if not np.all(inside):
        frac = 1.0 - float(np.mean(inside))
        raise ModelError(f"init region leaves the domain ({frac:.1%} of samples)")
    sample_region(m, "unsafe", samples, rng)  # must be nonempty and samplable
    pts = sample_region(m, "domain", samples, rng)
    match_count = np.zeros(len(pts), dtype=int)
    for mode in m.modes:
        match_count += m.compiled(mode.guard).contains(pts).astype(int)
    if np.any(match_count == 0):
        raise ModelError("mode guards do not cover the domain")
    if np.any(match_count > 1):
        raise ModelError("mode guards overlap inside the domain")


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def _tighten_sampling_box(
    comp: CompiledRegion, lo: np.ndarray, hi: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Shave axis slabs that provably miss the region.

    Small regions inside large boxes (a ball of radius 0.25 in [-4, 4]^8)
    make plain rejection sampling hopeless; cutting only slabs whose
    interval test rules the region out keeps the restricted-to-region
    distribution exactly uniform.
    """
    lo = lo.copy()
    hi = hi.copy()
    for axis in range(len(lo)):
        for side in (0, 1):
            a, b = lo[axis], hi[axis]
            for _ in range(30):
                mid = 0.5 * (a + b)
                slab_lo, slab_hi = lo.copy(), hi.copy()
                if side == 0:
                    slab_lo[axis], slab_hi[axis] = lo[axis], mid
                else:
                    slab_lo[axis], slab_hi[axis] = mid, hi[axis]
                if bool(comp.possible(slab_lo[None, :], slab_hi[None, :])[0]):
                    # the slab may still contain region points: keep it,
                    # try shaving a thinner one
                    if side == 0:
                        b = mid
                    else:
                        a = mid
                else:
                    if side == 0:
                        lo[axis] = mid
                        a = mid
                    else:
                        hi[axis] = mid
                        b = mid
                if b - a <= 1e-9 * max(1.0, abs(a), abs(b)):
                    break
    return lo, hi


def sample_region(
    m: SystemModel,
    which: Union[str, Region],
    count: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw ``count`` uniform samples from a region by rejection over the box.

    The box is first tightened by interval shaving (see
    ``_tighten_sampling_box``); raises RegionEmptyError when the draw budget
    runs out, which flags empty or vanishingly thin regions.
    """
    if count <= 0:
        return np.empty((0, m.dimension))
    comp = m.compiled(which)
    lo, hi = m.bounding_box.as_arrays()
    name = which if isinstance(which, str) else "region"
    if not bool(comp.possible(lo[None, :], hi[None, :])[0]):
        raise RegionEmptyError(f"{name} is provably empty inside the bounding box")
    lo, hi = _tighten_sampling_box(comp, lo, hi)
    budget = max(_BASE_DRAW_BUDGET, _PER_SAMPLE_DRAWS * count)
    out: list[np.ndarray] = []
    got = 0
    drawn = 0
    chunk = max(2048, 2 * count)
    while got < count:
        if drawn >= budget:
            raise RegionEmptyError(
                f"could not sample {count} points from {name} within {budget} draws"
            )
        take = min(chunk, budget - drawn)
        X = rng.uniform(lo, hi, size=(take, m.dimension))
        drawn += take
        mask = comp.contains(X)
        if np.any(mask):
            hit = X[mask]
            out.append(hit[: count - got])
            got += len(out[-1])
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# Mode selection and simulation
# ---------------------------------------------------------------------------


def active_mode(m: SystemModel, x: Sequence[float]) -> int:
    """Index of the unique mode whose guard holds at ``x``."""
    x = np.asarray(x, dtype=float)
    matches = [k for k, mode in enumerate(m.modes) if bool(m.compiled(mode.guard).contains(x)[0])]
    if len(matches) == 1:
        return matches[0]
    if not matches:
        raise ModeError(f"no mode guard holds at {x.tolist()}")
    raise ModeError(f"modes {matches} all claim point {x.tolist()}")


def mode_of_batch(m: SystemModel, X: np.ndarray) -> np.ndarray:
    """Per-row active mode index; -1 where no guard matches."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    out = np.full(X.shape[0], -1, dtype=int)
    for k, mode in enumerate(m.modes):
        mask = m.compiled(mode.guard).contains(X)
        out = np.where((out == -1) & mask, k, out)
    return out


def field_at(m: SystemModel, X: np.ndarray, modes: Optional[np.ndarray] = None) -> np.ndarray:
    """Vector field values at each row of ``X`` under its active mode."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if modes is None:
        modes = mode_of_batch(m, X)
        if np.any(modes == -1):
            bad = X[modes == -1][0]
            raise ModeError(f"no mode guard holds at {bad.tolist()}")
    F = np.empty_like(X)
    for k in range(len(m.modes)):
        mask = modes == k
        if not np.any(mask):
            continue
        vals = m.compiled_field(k).eval_points(X[mask])
        F[mask] = np.stack(vals, axis=1)
    return F


def simulate(m: SystemModel, x0: Sequence[float], dt: float, steps: int) -> Trajectory:
    """Integrate with fixed-step RK4, re-selecting the mode every step.

    Stops early when the state leaves the bounding box (``exited``) or turns
    non-finite (``divergent``).
    """
    x0 = np.asarray(x0, dtype=float)
    if not bool(m.contains("domain", x0)[0]):
        raise ModelError(f"initial state {x0.tolist()} is outside the domain")
    trajs, exited, divergent, lengths = simulate_batch(m, x0[None, :], dt, steps)
    k = int(lengths[0])
    return Trajectory(points=trajs[:k, 0, :].copy(), exited=bool(exited[0]), divergent=bool(divergent[0]))


def simulate_batch(
    m: SystemModel, X0: np.ndarray, dt: float, steps: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """RK4 for a batch of start states.

    Returns (points, exited, divergent, lengths) where points has shape
    (steps + 1, batch, n) and lengths gives the number of valid rows per
    trajectory.
    """
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    nb, n = X0.shape
    lo, hi = m.bounding_box.as_arrays()
    points = np.full((steps + 1, nb, n), np.nan)
    points[0] = X0
    alive = np.ones(nb, dtype=bool)
    exited = np.zeros(nb, dtype=bool)
    divergent = np.zeros(nb, dtype=bool)
    lengths = np.ones(nb, dtype=int)
    X = X0.copy()
    for s in range(steps):
        if not np.any(alive):
            break
        idx = np.where(alive)[0]
        cur = X[idx]
        modes = mode_of_batch(m, cur)
        gap = modes == -1
        if np.any(gap):
            exited[idx[gap]] = True
            alive[idx[gap]] = False
            keep = ~gap
            idx = idx[keep]
            cur = cur[keep]
            modes = modes[keep]
            if len(idx) == 0:
                continue
        k1 = field_at(m, cur, modes)
        k2 = field_at(m, cur + 0.5 * dt * k1, modes)
        k3 = field_at(m, cur + 0.5 * dt * k2, modes)
        k4 = field_at(m, cur + dt * k3, modes)
        nxt = cur + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        bad = ~np.all(np.isfinite(nxt), axis=1)
        out = ~bad & (np.any(nxt < lo, axis=1) | np.any(nxt > hi, axis=1))
        ok = ~bad & ~out
        divergent[idx[bad]] = True
        exited[idx[out]] = True
        alive[idx[bad | out]] = False
        good = idx[ok]
        X[good] = nxt[ok]
        points[s + 1, good] = nxt[ok]
        lengths[good] = s + 2
    return points, exited, divergent, lengths


# ---------------------------------------------------------------------------
# Problem files
# ---------------------------------------------------------------------------


def model_from_dict(doc: dict) -> SystemModel:
    """Build and validate a model from a problem-file dictionary."""
    try:
        dim = int(doc["dimension"])
        variables = tuple(str(v) for v in doc["variables"])
        bb = doc["bounding_box"]
        domain_text = doc["domain"]
        init_text = doc["init"]
        unsafe_text = doc["unsafe"]
        modes_doc = doc["modes"]
    except KeyError as k:
        raise ModelError(f"problem file is missing key {k}") from None
    if len(variables) != dim:
        raise ModelError(f"{len(variables)} variables for dimension {dim}")
    reserved = {"e", "sin", "cos", "exp", "tanh", "and", "or", "true"}
    for v in variables:
        if v in reserved or not re.fullmatch(r"[A-Za-z_][A-Za-z_0-9]*", v):
            raise ModelError(f"invalid variable name {v!r}")
    if len(bb) != dim:
        raise ModelError("bounding_box length does not match dimension")
    box = Box.from_bounds(bb)
    modes = []
    for k, md in enumerate(modes_doc):
        guard = parse_region(str(md["guard"]), variables)
        fld = tuple(parse_expr(str(c), variables) for c in md["field"])
        modes.append(Mode(guard, fld))
    m = SystemModel(
        variables=variables,
        bounding_box=box,
        domain=parse_region(str(domain_text), variables),
        init=parse_region(str(init_text), variables),
        unsafe=parse_region(str(unsafe_text), variables),
        modes=tuple(modes),
        name=str(doc.get("name", "")),
    )
    validate_model(m)
    return m


def model_to_dict(m: SystemModel) -> dict:
    lo, hi = m.bounding_box.as_arrays()
    return {
        "name": m.name,
        "dimension": m.dimension,
        "variables": list(m.variables),
        "bounding_box": [[float(a), float(b)] for a, b in zip(lo, hi)],
        "domain": print_region(m.domain, m.variables),
        "init": print_region(m.init, m.variables),
        "unsafe": print_region(m.unsafe, m.variables),
        "modes": [
            {
                "guard": print_region(mode.guard, m.variables),
                "field": [print_expr(c, m.variables) for c in mode.field],
            }
            for mode in m.modes
        ],
    }


def load_problem(path: str) -> SystemModel:
    """Load and validate a YAML problem file."""
    with open(path, "r") as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise ModelError(f"problem file {path} is not a mapping")
    return model_from_dict(doc)


def save_problem(m: SystemModel, path: str):
    with open(path, "w") as fh:
        yaml.safe_dump(model_to_dict(m), fh, sort_keys=False)
