"""Barrier certificate synthesis for continuous and hybrid dynamical systems.

The package trains small neural candidates against sampled system states,
unrolls them into closed-form expressions and certifies them with a sound
interval branch-and-bound falsifier inside a counterexample-guided loop.
"""

from .expr import (
    Box,
    Expr,
    Interval,
    eval_interval,
    eval_point,
    differentiate,
    lie_derivative,
    parse_expr,
    print_expr,
    simplify,
)

__version__ = "0.1.0"
