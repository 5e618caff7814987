"""Built-in benchmark systems with recommended synthesis configurations.

Eight classic safety-verification problems: two-dimensional polynomial and
non-polynomial flows, a three-dimensional vehicle/obstacle system, a
two-mode hybrid system, and three high-order linear ODEs in companion
form.  Each constructor returns the system model together with a synthesis
configuration (network shape, sample counts) known to work on it.
``empirical_safety`` complements the sound falsifier with a trajectory
simulation check of a candidate certificate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .cegis import CegisConfig
from .expr import CompiledExprs
from .learner import LossConfig, parse_shape
from .model import SystemModel, model_from_dict, model_to_dict, sample_region, simulate_batch
from .translate import CertificateExpr
from .verifier import VerifierConfig

__all__ = ["Benchmark", "builtin", "names", "export_problem_files", "empirical_safety", "SafetyReport"]


@dataclass(frozen=True)
class Benchmark:
    name: str
    model: SystemModel
    config: CegisConfig


_HALF_PI = repr(math.pi / 2)
_SIXTH_PI = repr(math.pi / 6)


def _box_region(bounds: list[tuple[str, float, float]]) -> str:
    return " and ".join(f"{v} >= {lo} and {v} <= {hi}" for v, lo, hi in bounds)


def darboux_model() -> dict:
    return {
        "name": "darboux",
        "dimension": 2,
        "variables": ["x", "y"],
        "bounding_box": [[-2.0, 2.0], [-2.0, 2.0]],
        "domain": _box_region([("x", -2, 2), ("y", -2, 2)]),
        "init": _box_region([("x", 0, 1), ("y", 1, 2)]),
        "unsafe": "x + y^2 <= 0",
        "modes": [
            {"name": "flow", "guard": "true", "field": ["y + 2*x*y", "-x + 2*x^2 - y^2"]}
        ],
    }


def exponential_model() -> dict:
    return {
        "name": "exponential",
        "dimension": 2,
        "variables": ["x", "y"],
        "bounding_box": [[-2.0, 2.0], [-2.0, 2.0]],
        "domain": _box_region([("x", -2, 2), ("y", -2, 2)]),
        "init": "(x + 0.5)^2 + (y - 0.5)^2 <= 0.16",
        "unsafe": "(x - 0.7)^2 + (y + 0.7)^2 <= 0.09",
        "modes": [
            {"name": "flow", "guard": "true", "field": ["exp(-x) + y - 1", "-sin(x)^2"]}
        ],
    }


def obstacle_model(speed: float = 1.0) -> dict:
    v = repr(float(speed))
    steer = "-sin(phi) + 3*(x*sin(phi) + y*cos(phi))/(0.5 + x^2 + y^2)"
    return {
        "name": "obstacle",
        "dimension": 3,
        "variables": ["x", "y", "phi"],
        "bounding_box": [[-2.0, 2.0], [-2.0, 2.0], [-math.pi / 2, math.pi / 2]],
        "domain": _box_region([("x", -2, 2), ("y", -2, 2)])
        + f" and phi < {_HALF_PI} and -phi < {_HALF_PI}",
        "init": _box_region([("x", -0.1, 0.1), ("y", -2.0, -1.8)])
        + f" and phi < {_SIXTH_PI} and -phi < {_SIXTH_PI}",
        "unsafe": "x^2 + y^2 <= 0.04",
        "modes": [
            {
                "name": "flow",
                "guard": "true",
                "field": [f"{v}*sin(phi)", f"{v}*cos(phi)", steer],
            }
        ],
    }


def polynomial_model() -> dict:
    return {
        "name": "polynomial",
        "dimension": 2,
        "variables": ["x", "y"],
        "bounding_box": [[-3.5, 2.0], [-2.0, 1.0]],
        "domain": _box_region([("x", -3.5, 2), ("y", -2, 1)]),
        "init": (
            "(x - 1.5)^2 + y^2 <= 0.25"
            " or (" + _box_region([("x", -1.8, -1.2), ("y", -0.1, 0.1)]) + ")"
            " or (" + _box_region([("x", -1.4, -1.2), ("y", -0.5, 0.1)]) + ")"
        ),
        "unsafe": (
            "(x + 1)^2 + (y + 1)^2 <= 0.16"
            " or (" + _box_region([("x", 0.4, 0.6), ("y", 0.1, 0.5)]) + ")"
            " or (" + _box_region([("x", 0.4, 0.8), ("y", 0.1, 0.3)]) + ")"
        ),
        "modes": [
            {"name": "flow", "guard": "true", "field": ["y", "-x + (1/3)*x^3 - y"]}
        ],
    }


def hybrid_model() -> dict:
    return {
        "name": "hybrid",
        "dimension": 2,
        "variables": ["x", "y"],
        "bounding_box": [[-2.0, 2.0], [-2.0, 2.0]],
        "domain": "x^2 + y^2 <= 4",
        "init": "(x + 1)^2 + (y + 1)^2 <= 0.25",
        "unsafe": "(x - 1)^2 + (y - 1)^2 <= 0.25",
        "modes": [
            {"name": "left", "guard": "x < 0", "field": ["y", "-x - 0.5*x^3"]},
            {"name": "right", "guard": "-x <= 0", "field": ["y", "x - 0.25*y^2"]},
        ],
    }


_ODE_COEFFS = [576, 2400, 4180, 3980, 2273, 800, 170, 20]


def ode_model(order: int) -> dict:
    """Companion form of the high-order linear ODE benchmarks.

    The working region is the origin-centred ball of radius 4; the initial
    and unsafe sets are small balls around +1 and -2 (componentwise), the
    latter lying outside the working region for orders 6 and 8 — the
    certificate must still be positive there.
    """
    if order not in (4, 6, 8):
        raise ValueError("order must be 4, 6 or 8")
    names_ = [f"x{i + 1}" for i in range(order)]
    fields = list(names_[1:])
    fields.append(
        "-(" + " + ".join(f"{c}*{v}" for c, v in zip(_ODE_COEFFS, names_)) + ")"
    )
    ball = lambda c: " + ".join(f"({v} - ({c}))^2" for v in names_)
    return {
        "name": f"ode{order}",
        "dimension": order,
        "variables": names_,
        "bounding_box": [[-4.0, 4.0]] * order,
        "domain": " + ".join(f"{v}^2" for v in names_) + " <= 16",
        "init": f"{ball(1)} <= {0.25 ** 2}",
        "unsafe": f"{ball(-2)} <= {0.16 ** 2}",
        "modes": [{"name": "flow", "guard": "true", "field": fields}],
    }


# name -> (model dict builder, shape text, (n0, nu, nx))
_BUILTINS = {
    "darboux": (darboux_model, "lin10,poly3-10,lin10", (100, 100, 300)),
    "exponential": (exponential_model, "poly3-10", (100, 100, 300)),
    "obstacle": (obstacle_model, "poly2-10", (100, 100, 300)),
    "polynomial": (polynomial_model, "tanh10," * 9 + "tanh10", (200, 200, 600)),
    "hybrid": (hybrid_model, "poly2-3", (100, 100, 300)),
    "ode4": (lambda: ode_model(4), "poly1-2", (200, 200, 600)),
    "ode6": (lambda: ode_model(6), "poly1-2", (200, 200, 600)),
    "ode8": (lambda: ode_model(8), "poly1-2", (200, 200, 600)),
}


def names() -> list[str]:
    return list(_BUILTINS)


def builtin(name: str) -> Benchmark:
    """Construct a named benchmark with its recommended configuration."""
    try:
        build, shape_text, counts = _BUILTINS[name]
    except KeyError:
        raise KeyError(
            f"unknown benchmark {name!r}; available: {', '.join(_BUILTINS)}"
        ) from None
    m = model_from_dict(build())
    cfg = CegisConfig(
        shape=parse_shape(shape_text, m.dimension),
        loss=LossConfig(),
        verifier=VerifierConfig(),
        samples=counts,
        max_iterations=20,
        seed=0,
    )
    return Benchmark(name=name, model=m, config=cfg)


def export_problem_files(directory) -> list[str]:
    """Write every builtin as a problem file; returns the paths."""
    import pathlib

    import yaml

    directory = pathlib.Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in names():
        doc = model_to_dict(builtin(name).model)
        path = directory / f"{name}.yaml"
        path.write_text(yaml.safe_dump(doc, sort_keys=False))
        paths.append(str(path))
    return paths


@dataclass
class SafetyReport:
    """Trajectory-simulation check of a candidate certificate."""

    passed: bool
    trials: int
    unsafe_entries: list = dc_field(default_factory=list)
    positive_starts: list = dc_field(default_factory=list)
    level_crossings: list = dc_field(default_factory=list)
    divergent: int = 0

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "trials": self.trials,
            "unsafe_entries": self.unsafe_entries,
            "positive_starts": self.positive_starts,
            "level_crossings": self.level_crossings,
            "divergent": self.divergent,
        }


def empirical_safety(
    m: SystemModel,
    cert: CertificateExpr,
    trials: int,
    dt: float = 0.01,
    steps: int = 1000,
    rng: np.random.Generator | None = None,
) -> SafetyReport:
    """Simulate trajectories from the initial region and test three facts:
    no trajectory point is unsafe while inside the domain, the certificate
    is nonpositive at every start, and its sign never flips from nonpositive
    to positive between consecutive in-domain points.
    """
    if trials <= 0:
        raise ValueError("trials must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    starts = sample_region(m, "init", trials, rng)
    points, exited, divergent, lengths = simulate_batch(m, starts, dt, steps)
    comp = CompiledExprs([cert.B])
    n_steps, nb, dim = points.shape
    flat = points.reshape(-1, dim)
    valid = np.isfinite(flat).all(axis=1)
    B = np.full(len(flat), np.nan)
    in_dom = np.zeros(len(flat), dtype=bool)
    in_unsafe = np.zeros(len(flat), dtype=bool)
    if np.any(valid):
        B[valid] = comp.eval_points(flat[valid])[0]
        in_dom[valid] = m.contains("domain", flat[valid])
        in_unsafe[valid] = m.contains("unsafe", flat[valid])
    B = B.reshape(n_steps, nb)
    in_dom = in_dom.reshape(n_steps, nb)
    in_unsafe = in_unsafe.reshape(n_steps, nb)

    report = SafetyReport(passed=True, trials=trials, divergent=int(divergent.sum()))

    def note(bucket, mask2d):
        rows, cols = np.where(mask2d)
        for s, t in list(zip(rows, cols))[:20]:
            bucket.append(
                {"trial": int(t), "step": int(s), "point": [float(v) for v in points[s, t]]}
            )

    bad_unsafe = in_dom & in_unsafe
    if np.any(bad_unsafe):
        report.passed = False
        note(report.unsafe_entries, bad_unsafe)
    bad_start = B[0] > 0
    if np.any(bad_start):
        report.passed = False
        note(report.positive_starts, bad_start[None, :])
    if n_steps > 1:
        crossing = (
            (B[:-1] <= 0) & (B[1:] > 0) & in_dom[:-1] & in_dom[1:]
        )
        if np.any(crossing):
            report.passed = False
            note(report.level_crossings, crossing)
    return report
