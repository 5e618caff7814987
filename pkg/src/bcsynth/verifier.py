"""Sound falsifier for candidate certificates.

Each barrier condition is negated into a search clause over the state box:

* ``init``: a point of the initial region with B > 0,
* ``unsafe``: a point of the unsafe region with B <= 0,
* ``derivative``: a point of the domain (per mode, under its guard) on the
  zero level set of B with positive flow derivative,
* ``derivative_relaxed``: as above but with the level set widened to the
  band |B| < level_tol; tried when the exact clause times out.

A clause is checked by interval branch-and-bound over boxes in FIFO order:
prune a box when the interval enclosure rules the clause out; otherwise try
the box midpoint as an exact witness; otherwise, below the width floor,
report the midpoint as a spurious witness; otherwise bisect the widest
dimension.  An emptied queue is a sound refutation of the clause.  All
interval arithmetic rounds outward, so pruning never discards a satisfying
point; witnesses are validated by exact evaluation, so non-spurious
counterexamples are genuine violations.

Boxes are processed in batches on the compiled expression tape for speed;
batching preserves the exact FIFO order and therefore the sequential
verdict, statistics and witness choice.
"""

from __future__ import annotations

import math
import time
from collections import deque
from dataclasses import dataclass, field as dc_field
from typing import Optional, Sequence

import numpy as np

from .expr import CompiledExprs, Expr, Neg, differentiate
from .model import (
    CompiledRegion,
    Region,
    RegionAnd,
    SystemModel,
    mode_of_batch,
    sample_region,
)
from .translate import CertificateExpr

__all__ = [
    "VerifierConfig",
    "Clause",
    "Counterexample",
    "ClauseResult",
    "ClauseStats",
    "VerificationOutcome",
    "build_clauses",
    "check_clause",
    "verify",
    "enrich",
    "cheap_falsify",
    "export_smtlib",
]

INIT = "init"
UNSAFE = "unsafe"
DERIVATIVE = "derivative"
DERIVATIVE_RELAXED = "derivative_relaxed"


@dataclass(frozen=True)
class VerifierConfig:
    """Branch-and-bound precision, budgets and enrichment parameters."""

    min_width: float = 1e-6
    level_tol: float = 0.05
    clause_timeout: float = 60.0
    max_boxes: int = 50_000_000
    batch_size: int = 2048
    max_witnesses: int = 8
    witness_separation: Optional[float] = None  # None: 2% of the box diagonal
    cloud_count: int = 20
    cloud_radius: Optional[float] = None  # None: 5% of the box diagonal
    ascent_steps: int = 5
    ascent_step_size: Optional[float] = None  # None: 10% of the box diagonal
    workers: int = 1

    def __post_init__(self):
        if self.min_width <= 0:
            raise ValueError("min_width must be positive")
        if self.level_tol <= 0:
            raise ValueError("level_tol must be positive")
        if self.max_boxes < 1 or self.batch_size < 1:
            raise ValueError("budgets must be at least 1")
        if self.max_witnesses < 1:
            raise ValueError("max_witnesses must be at least 1")
        if self.workers != 1:
            raise ValueError("only single-worker verification is supported")


@dataclass(frozen=True)
class Clause:
    """One negated barrier condition restricted to a region."""

    tag: str
    region: Region
    mode: Optional[int] = None


@dataclass(frozen=True)
class Counterexample:
    point: np.ndarray
    tag: str
    magnitude: float
    spurious: bool
    mode: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "point": [float(v) for v in self.point],
            "tag": self.tag,
            "magnitude": self.magnitude,
            "spurious": self.spurious,
            "mode": self.mode,
        }


@dataclass(frozen=True)
class ClauseResult:
    status: str  # "refuted" | "witness" | "timeout"
    witnesses: tuple[Counterexample, ...]
    boxes: int
    seconds: float


@dataclass(frozen=True)
class ClauseStats:
    tag: str
    mode: Optional[int]
    status: str  # "refuted" | "witness" | "timeout" | "skipped"
    boxes: int
    seconds: float

    def to_dict(self) -> dict:
        return {
            "clause": self.tag,
            "mode": self.mode,
            "status": self.status,
            "boxes": self.boxes,
            "seconds": self.seconds,
        }


@dataclass
class VerificationOutcome:
    verdict: str  # "certified" | "falsified" | "unknown"
    counterexamples: list = dc_field(default_factory=list)
    clause_stats: list = dc_field(default_factory=list)
    workers: int = 1

    @property
    def certified(self) -> bool:
        return self.verdict == "certified"


def build_clauses(m: SystemModel) -> list[Clause]:
    """The negated conditions: init, unsafe, then one derivative per mode."""
    clauses = [Clause(INIT, m.init), Clause(UNSAFE, m.unsafe)]
    for k, mode in enumerate(m.modes):
        clauses.append(Clause(DERIVATIVE, RegionAnd((m.domain, mode.guard)), k))
    return clauses


def _bdot_expr(cert: CertificateExpr, mode: Optional[int]) -> Expr:
    for k, e in cert.bdot_per_mode:
        if k == mode:
            return e
    raise ValueError(f"certificate has no flow derivative for mode {mode}")


def check_clause(
    clause: Clause, cert: CertificateExpr, m: SystemModel, cfg: VerifierConfig
) -> ClauseResult:
    """Branch-and-bound search for clause-satisfying points.

    Collects up to ``cfg.max_witnesses`` mutually separated witnesses so a
    falsified candidate reports the whole violating region, not a single
    spot; retraining then has to clear all of it at once instead of chasing
    the violation around one locale per iteration.  Returns a refutation
    only after exhausting the box queue with no witness; a timeout is
    reported when the wall clock or box budget runs out first.
    """
    t0 = time.perf_counter()
    tag = clause.tag
    needs_bdot = tag in (DERIVATIVE, DERIVATIVE_RELAXED)
    exprs = [cert.B] + ([_bdot_expr(cert, clause.mode)] if needs_bdot else [])
    comp = CompiledExprs(exprs)
    region = CompiledRegion(clause.region)
    tol = cfg.level_tol
    n_exprs = len(exprs)
    # midpoint gradients steer bisection toward the axis that shrinks the
    # enclosures fastest; any choice of axis is sound, this is just faster
    grad_exprs = [differentiate(e, i) for e in exprs for i in range(m.dimension)]
    comp_mid = CompiledExprs(exprs + grad_exprs)

    lo0, hi0 = m.bounding_box.as_arrays()
    # FIFO queue of box batches; array chunks keep the hot loop vectorised
    queue: deque[tuple[np.ndarray, np.ndarray]] = deque(
        [(lo0[None, :].copy(), hi0[None, :].copy())]
    )
    boxes_done = 0
    sep = (
        cfg.witness_separation
        if cfg.witness_separation is not None
        else 0.02 * float(np.linalg.norm(hi0 - lo0))
    )
    found: list[Counterexample] = []
    t_first = math.inf  # time of the first witness; bounds the extra search
    extra_budget = 0.1 * cfg.clause_timeout

    def try_add(point: np.ndarray, magnitude: float, spurious: bool) -> None:
        nonlocal t_first
        for prev in found:
            if float(np.linalg.norm(point - prev.point)) < sep:
                return
        if not found:
            t_first = time.perf_counter()
        found.append(
            Counterexample(
                point=point.copy(),
                tag=tag,
                magnitude=float(magnitude),
                spurious=spurious,
                mode=clause.mode,
            )
        )

    while queue:
        now = time.perf_counter()
        if now - t0 > cfg.clause_timeout or boxes_done >= cfg.max_boxes:
            status = "witness" if found else "timeout"
            return ClauseResult(status, tuple(found), boxes_done, now - t0)
        if now - t_first > extra_budget:
            return ClauseResult("witness", tuple(found), boxes_done, now - t0)
        parts_lo: list[np.ndarray] = []
        parts_hi: list[np.ndarray] = []
        k = 0
        while queue and k < cfg.batch_size:
            clo, chi = queue.popleft()
            take = min(len(clo), cfg.batch_size - k)
            if take < len(clo):
                queue.appendleft((clo[take:], chi[take:]))
                clo, chi = clo[:take], chi[:take]
            parts_lo.append(clo)
            parts_hi.append(chi)
            k += take
        los = parts_lo[0] if len(parts_lo) == 1 else np.concatenate(parts_lo)
        his = parts_hi[0] if len(parts_hi) == 1 else np.concatenate(parts_hi)

        enc = comp.eval_intervals(los, his)
        B_lo, B_hi, B_fail = enc[0]
        fail = np.zeros(k, dtype=bool) if B_fail is None else B_fail.copy()
        if needs_bdot:
            D_lo, D_hi, D_fail = enc[1]
            if D_fail is not None:
                fail |= D_fail
        possible = region.possible(los, his)
        mids = 0.5 * (los + his)
        mid_vals = comp_mid.eval_points(mids)
        Bm = mid_vals[0]
        Dm = mid_vals[1] if needs_bdot else None
        sens = np.zeros((k, m.dimension))
        for j in range(n_exprs):
            block = mid_vals[n_exprs + j * m.dimension : n_exprs + (j + 1) * m.dimension]
            sens += np.abs(np.stack(block, axis=1))
        mid_in = region.contains(mids)
        widths = (his - los).max(axis=1)

        # pruning masks; NaN bounds compare False, hence never prune
        prune = ~possible
        ok = ~fail
        if tag == INIT:
            prune |= ok & (B_hi <= 0.0)
        elif tag == UNSAFE:
            prune |= ok & (B_lo > 0.0)
        elif tag == DERIVATIVE:
            prune |= ok & ((B_lo > 0.0) | (B_hi < 0.0) | (D_hi <= 0.0))
        else:
            prune |= ok & ((B_lo >= tol) | (B_hi <= -tol) | (D_hi <= 0.0))

        # exact midpoint witnesses
        if tag == INIT:
            hit = mid_in & (Bm > 0.0)
            mag = Bm
        elif tag == UNSAFE:
            hit = mid_in & (Bm <= 0.0)
            mag = -Bm
        elif tag == DERIVATIVE:
            # witness only in boxes whose B-enclosure straddles zero
            straddle = (B_lo <= 0.0) & (B_hi >= 0.0)
            hit = mid_in & straddle & (np.abs(Bm) <= tol) & (Dm > 0.0)
            mag = Dm
        else:
            hit = mid_in & (np.abs(Bm) < tol) & (Dm > 0.0)
            mag = Dm
        hit &= ~prune
        small = ~prune & ~hit & (widths < cfg.min_width)
        boxes_done += k

        for i in np.flatnonzero(hit | small):
            if len(found) >= cfg.max_witnesses:
                break
            if hit[i]:
                try_add(mids[i], mag[i], spurious=(tag == DERIVATIVE_RELAXED))
            else:
                try_add(mids[i], mag[i], spurious=True)
        if len(found) >= cfg.max_witnesses:
            return ClauseResult("witness", tuple(found), boxes_done, time.perf_counter() - t0)

        split_idx = np.flatnonzero(~prune & ~hit & ~small)
        if len(split_idx):
            gaps = his[split_idx] - los[split_idx]
            score = sens[split_idx] * gaps
            # never pick an axis much thinner than the widest one, or a box
            # could be halved along one direction indefinitely
            score = np.where(gaps >= 0.25 * gaps.max(axis=1, keepdims=True), score, -np.inf)
            finite = np.isfinite(score)
            bad = ~np.all(finite | (score == -np.inf), axis=1) | (score.max(axis=1) <= 0.0)
            axis = np.where(bad, np.argmax(gaps, axis=1), np.argmax(score, axis=1))
            rows = np.arange(len(split_idx))
            par_lo = los[split_idx]
            par_hi = his[split_idx]
            cut = 0.5 * (par_lo[rows, axis] + par_hi[rows, axis])
            lo_child = np.repeat(par_lo, 2, axis=0)
            hi_child = np.repeat(par_hi, 2, axis=0)
            hi_child[2 * rows, axis] = cut
            lo_child[2 * rows + 1, axis] = cut
            queue.append((lo_child, hi_child))

    status = "witness" if found else "refuted"
    return ClauseResult(status, tuple(found), boxes_done, time.perf_counter() - t0)


def _exactly_violates(
    cert: CertificateExpr, m: SystemModel, tag: str, mode: Optional[int],
    points: np.ndarray, tol: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Exact violation test and magnitude for enriched points."""
    if tag == UNSAFE:
        B = CompiledExprs([cert.B]).eval_points(points)[0]
        return (B <= 0.0), -B
    if tag == INIT:
        B = CompiledExprs([cert.B]).eval_points(points)[0]
        return (B > 0.0), B
    vals = CompiledExprs([cert.B, _bdot_expr(cert, mode)]).eval_points(points)
    B, D = vals
    return (np.abs(B) <= tol) & (D > 0.0), D


def enrich(
    cex: Counterexample,
    cert: CertificateExpr,
    m: SystemModel,
    cfg: VerifierConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """The counterexample plus a cloud of nearby region points pushed uphill.

    Cloud points are drawn in a ball around the counterexample; each then
    takes fixed-length steps along the gradient of the violated quantity
    (B for init, -B for unsafe, the flow derivative for derivative tags),
    stopping before it would leave the clause region or the state box.
    """
    n = m.dimension
    point = np.asarray(cex.point, dtype=float)
    band_comp = None
    if cex.tag == INIT:
        region = m.init
        quantity = cert.B
    elif cex.tag == UNSAFE:
        region = m.unsafe
        quantity = Neg(cert.B)
    else:
        region = RegionAnd((m.domain, m.modes[cex.mode].guard))
        quantity = _bdot_expr(cert, cex.mode)
        # keep the uphill walk near the level set: off-level points with a
        # large flow derivative are not violations, so walking the cloud
        # along the set toward worse spots is what informs the learner
        band_comp = CompiledExprs([cert.B])
    comp_region = CompiledRegion(region)
    lo, hi = m.bounding_box.as_arrays()
    diag = m.diameter()
    radius = cfg.cloud_radius if cfg.cloud_radius is not None else 0.05 * diag
    step = cfg.ascent_step_size if cfg.ascent_step_size is not None else 0.1 * diag

    if cfg.cloud_count <= 0 or radius <= 0.0:
        return point[None, :]

    direction = rng.normal(size=(cfg.cloud_count, n))
    norms = np.linalg.norm(direction, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    scale = radius * rng.uniform(0.0, 1.0, size=(cfg.cloud_count, 1)) ** (1.0 / n)
    pts = point[None, :] + direction / norms * scale

    def inside(P: np.ndarray) -> np.ndarray:
        box_ok = np.all(P >= lo, axis=1) & np.all(P <= hi, axis=1)
        return box_ok & comp_region.contains(P)

    def may_step_to(P: np.ndarray) -> np.ndarray:
        ok = inside(P)
        if band_comp is not None:
            ok &= np.abs(band_comp.eval_points(P)[0]) <= 2.0 * cfg.level_tol
        return ok

    pts = pts[inside(pts)]
    if len(pts) and cfg.ascent_steps > 0 and step > 0.0:
        grad_comp = CompiledExprs([differentiate(quantity, i) for i in range(n)])
        grad_B_comp = (
            CompiledExprs([differentiate(cert.B, i) for i in range(n)])
            if band_comp is not None
            else None
        )
        alive = np.ones(len(pts), dtype=bool)
        if band_comp is not None:
            alive &= may_step_to(pts)
        for _ in range(cfg.ascent_steps):
            if not np.any(alive):
                break
            G = np.stack(grad_comp.eval_points(pts[alive]), axis=1)
            if grad_B_comp is not None:
                # slide along the level set: remove the component that would
                # change B, since the violation only matters where B = 0
                Gb = np.stack(grad_B_comp.eval_points(pts[alive]), axis=1)
                denom = np.sum(Gb * Gb, axis=1, keepdims=True)
                denom = np.where(denom > 0.0, denom, 1.0)
                G = G - (np.sum(G * Gb, axis=1, keepdims=True) / denom) * Gb
            norms = np.linalg.norm(G, axis=1, keepdims=True)
            moving = np.isfinite(norms[:, 0]) & (norms[:, 0] > 0.0)
            cand = pts[alive] + np.where(moving[:, None], step * G / np.where(norms > 0, norms, 1.0), 0.0)
            ok = may_step_to(cand) & moving
            idx = np.flatnonzero(alive)
            pts[idx[ok]] = cand[ok]
            alive[idx[~ok]] = False
    return np.concatenate([point[None, :], pts], axis=0)


def select_separated(
    cexs: Sequence[Counterexample], m: SystemModel, cfg: VerifierConfig
) -> list[Counterexample]:
    """Greedy per-tag thinning to at most ``max_witnesses`` separated points."""
    sep = (
        cfg.witness_separation
        if cfg.witness_separation is not None
        else 0.02 * m.diameter()
    )
    kept: list[Counterexample] = []
    per_tag: dict[tuple, list[Counterexample]] = {}
    for cex in cexs:
        group = per_tag.setdefault((cex.tag, cex.mode), [])
        if len(group) >= cfg.max_witnesses:
            continue
        if any(float(np.linalg.norm(cex.point - prev.point)) < sep for prev in group):
            continue
        group.append(cex)
        kept.append(cex)
    return kept


def enriched_counterexamples(
    witnesses: Sequence[Counterexample],
    cert: CertificateExpr,
    m: SystemModel,
    cfg: VerifierConfig,
    rng: np.random.Generator,
) -> list[Counterexample]:
    """Each witness followed by its enrichment cloud, violation-checked."""
    out: list[Counterexample] = []
    for witness in witnesses:
        out.append(witness)
        points = enrich(witness, cert, m, cfg, rng)
        viol, mag = _exactly_violates(
            cert, m, witness.tag, witness.mode, points[1:], cfg.level_tol
        )
        for p, v, g in zip(points[1:], viol, mag):
            out.append(
                Counterexample(
                    point=p,
                    tag=witness.tag,
                    magnitude=float(g),
                    spurious=bool(witness.spurious or not v),
                    mode=witness.mode,
                )
            )
    return out


def verify(
    cert: CertificateExpr,
    m: SystemModel,
    cfg: VerifierConfig,
    rng: Optional[np.random.Generator] = None,
) -> VerificationOutcome:
    """Check all clauses with prioritisation and belt relaxation.

    Init and unsafe clauses go first; derivative clauses run only if both
    are refuted.  A derivative timeout retries the relaxed band clause,
    whose refutation also soundly refutes the exact clause (the band is a
    superset of the level set).  The first clause with witnesses stops the
    search; every witness is returned together with its enrichment cloud.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    clauses = build_clauses(m)
    stats: list[ClauseStats] = []
    outcome_cexs: list[Counterexample] = []

    def skipped_after(idx: int):
        for c in clauses[idx:]:
            stats.append(ClauseStats(c.tag, c.mode, "skipped", 0, 0.0))

    def falsified(idx: int, witnesses: tuple[Counterexample, ...]) -> VerificationOutcome:
        outcome_cexs.extend(enriched_counterexamples(witnesses, cert, m, cfg, rng))
        skipped_after(idx + 1)
        return VerificationOutcome("falsified", outcome_cexs, stats, cfg.workers)

    for idx, clause in enumerate(clauses):
        res = check_clause(clause, cert, m, cfg)
        stats.append(ClauseStats(clause.tag, clause.mode, res.status, res.boxes, res.seconds))
        if res.status == "witness":
            return falsified(idx, res.witnesses)
        if res.status == "refuted":
            continue
        # timeout: only derivative clauses get the relaxed retry
        if clause.tag != DERIVATIVE:
            skipped_after(idx + 1)
            return VerificationOutcome("unknown", [], stats, cfg.workers)
        relaxed = Clause(DERIVATIVE_RELAXED, clause.region, clause.mode)
        res2 = check_clause(relaxed, cert, m, cfg)
        stats.append(ClauseStats(relaxed.tag, relaxed.mode, res2.status, res2.boxes, res2.seconds))
        if res2.status == "witness":
            return falsified(idx, res2.witnesses)
        if res2.status == "timeout":
            skipped_after(idx + 1)
            return VerificationOutcome("unknown", [], stats, cfg.workers)
        # relaxed refuted: the band contains the level set, so the exact
        # clause is refuted as well
    return VerificationOutcome("certified", [], stats, cfg.workers)


def _smt_number(v: float) -> str:
    if math.isnan(v) or math.isinf(v):
        raise ValueError(f"cannot emit non-finite constant {v} to SMT")
    if v < 0:
        return f"(- {_smt_number(-v)})"
    if v == int(v) and abs(v) < 2**53:
        return f"{int(v)}.0"
    p, q = v.as_integer_ratio()
    return f"(/ {p}.0 {q}.0)"


_SMT_TRANSCENDENTAL = {"Sin": "sin", "Cos": "cos", "Exp": "exp", "Tanh": "tanh"}


class _SmtPrinter:
    """Emits expressions with shared subterms bound once via nested lets."""

    def __init__(self):
        self.defs: list[tuple[str, str]] = []  # (name, body) in emission order
        self._names: dict[int, str] = {}
        self._counts: dict[int, int] = {}
        self.nonlinear = False

    def count(self, e: Expr) -> None:
        stack = [e]
        while stack:
            node = stack.pop()
            i = id(node)
            self._counts[i] = self._counts.get(i, 0) + 1
            if self._counts[i] == 1:
                stack.extend(self._children(node))

    @staticmethod
    def _children(e: Expr) -> tuple:
        kind = type(e).__name__
        if kind in ("Const", "Var"):
            return ()
        if kind in ("Neg", "Sin", "Cos", "Exp", "Tanh", "PowInt"):
            return (e.arg,) if hasattr(e, "arg") else (e.base,)
        return (e.left, e.right)

    def emit(self, e: Expr, variables: tuple[str, ...]) -> str:
        i = id(e)
        if i in self._names:
            return self._names[i]
        kind = type(e).__name__
        if kind == "Const":
            return _smt_number(e.value)
        if kind == "Var":
            return variables[e.index]
        if kind == "Neg":
            body = f"(- {self.emit(e.arg, variables)})"
        elif kind in _SMT_TRANSCENDENTAL:
            self.nonlinear = True
            body = f"({_SMT_TRANSCENDENTAL[kind]} {self.emit(e.arg, variables)})"
        elif kind == "PowInt":
            if e.power == 0:
                return "1.0"
            base = self.emit(e.base, variables)
            body = f"(* {' '.join([base] * e.power)})" if e.power > 1 else base
        else:
            op = {"Add": "+", "Sub": "-", "Mul": "*", "Div": "/"}[kind]
            body = f"({op} {self.emit(e.left, variables)} {self.emit(e.right, variables)})"
        if self._counts.get(i, 0) > 1:
            name = f"_s{len(self.defs)}"
            self.defs.append((name, body))
            self._names[i] = name
            return name
        return body

    def wrap(self, body: str) -> str:
        for name, expr_body in reversed(self.defs):
            body = f"(let (({name} {expr_body})) {body})"
        return body


def _smt_region(p: _SmtPrinter, r: Region, variables: tuple[str, ...]) -> str:
    kind = type(r).__name__
    if kind == "Atom":
        e = p.emit(r.expr, variables)
        op = {"le": "<=", "lt": "<", "eq": "="}[r.rel]
        return f"({op} {e} 0.0)"
    parts = [q for q in r.parts]
    if not parts:
        return "true"
    inner = " ".join(_smt_region(p, q, variables) for q in parts)
    op = "and" if kind == "RegionAnd" else "or"
    return f"({op} {inner})" if len(parts) > 1 else inner


def _region_exprs(r: Region) -> list[Expr]:
    kind = type(r).__name__
    if kind == "Atom":
        return [r.expr]
    out = []
    for q in r.parts:
        out.extend(_region_exprs(q))
    return out


def export_smtlib(cert: CertificateExpr, m: SystemModel, cfg: VerifierConfig) -> dict[str, str]:
    """QF_NRA scripts asserting each negated condition, one per clause kind.

    The derivative script carries a single disjunction over modes.  Each
    script is satisfiable exactly when the corresponding clause has a
    witness inside the state box, so an external solver can corroborate
    refutations independently.  Transcendental operators mark the script
    for solvers with a nonlinear-extension dialect.
    """
    scripts: dict[str, str] = {}

    def box_atoms(variables: tuple[str, ...]) -> list[str]:
        lo, hi = m.bounding_box.as_arrays()
        out = []
        for i, v in enumerate(variables):
            out.append(f"(<= {_smt_number(float(lo[i]))} {v})")
            out.append(f"(<= {v} {_smt_number(float(hi[i]))})")
        return out

    def build(tag: str) -> str:
        p = _SmtPrinter()
        variables = m.variables
        p.count(cert.B)
        if tag == INIT:
            for e in _region_exprs(m.init):
                p.count(e)
        elif tag == UNSAFE:
            for e in _region_exprs(m.unsafe):
                p.count(e)
        else:
            for e in _region_exprs(m.domain):
                p.count(e)
            for mode in m.modes:
                for e in _region_exprs(mode.guard):
                    p.count(e)
            for _, bd in cert.bdot_per_mode:
                p.count(bd)

        B = p.emit(cert.B, variables)
        if tag == INIT:
            region = _smt_region(p, m.init, variables)
            claim = f"(and {region} (> {B} 0.0))"
        elif tag == UNSAFE:
            region = _smt_region(p, m.unsafe, variables)
            claim = f"(and {region} (<= {B} 0.0))"
        else:
            domain = _smt_region(p, m.domain, variables)
            arms = []
            for k, bd in cert.bdot_per_mode:
                guard = _smt_region(p, m.modes[k].guard, variables)
                D = p.emit(bd, variables)
                arms.append(f"(and {guard} (> {D} 0.0))")
            disj = arms[0] if len(arms) == 1 else f"(or {' '.join(arms)})"
            claim = f"(and {domain} (= {B} 0.0) {disj})"
        body = p.wrap(f"(and {' '.join(box_atoms(variables))} {claim})")
        dialect = "nonlinear" if p.nonlinear else "polynomial"
        lines = [
            f"; clause: {tag}",
            f"; dialect: {dialect}",
            "(set-logic QF_NRA)",
        ]
        lines += [f"(declare-const {v} Real)" for v in variables]
        lines += [f"(assert {body})", "(check-sat)", "(get-model)", ""]
        return "\n".join(lines)

    scripts[INIT] = build(INIT)
    scripts[UNSAFE] = build(UNSAFE)
    scripts[DERIVATIVE] = build(DERIVATIVE)
    return scripts


def cheap_falsify(
    cert: CertificateExpr,
    m: SystemModel,
    count: int,
    rng: np.random.Generator,
    level_tol: float = 0.05,
) -> list[Counterexample]:
    """Random-sampling screen; hits are genuine violations, misses prove nothing."""
    if count <= 0:
        raise ValueError("count must be positive")
    out: list[Counterexample] = []
    comp_B = CompiledExprs([cert.B])

    pts = sample_region(m, "init", count, rng)
    B = comp_B.eval_points(pts)[0]
    for i in np.flatnonzero(B > 0.0):
        out.append(Counterexample(pts[i].copy(), INIT, float(B[i]), False, None))

    pts = sample_region(m, "unsafe", count, rng)
    B = comp_B.eval_points(pts)[0]
    for i in np.flatnonzero(B <= 0.0):
        out.append(Counterexample(pts[i].copy(), UNSAFE, float(-B[i]), False, None))

    pts = sample_region(m, "domain", count, rng)
    modes = mode_of_batch(m, pts)
    B = comp_B.eval_points(pts)[0]
    for k, bdot in cert.bdot_per_mode:
        sel = modes == k
        if not np.any(sel):
            continue
        D = CompiledExprs([bdot]).eval_points(pts[sel])[0]
        near = (np.abs(B[sel]) <= level_tol) & (D > 0.0)
        for j in np.flatnonzero(near):
            i = np.flatnonzero(sel)[j]
            out.append(Counterexample(pts[i].copy(), DERIVATIVE, float(D[j]), False, k))
    return out
