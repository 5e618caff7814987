"""Shared helpers for the test suite."""

from __future__ import annotations

import numpy as np

from bcsynth.expr import (
    Add,
    Const,
    Cos,
    Div,
    Exp,
    Mul,
    Neg,
    PowInt,
    Sin,
    Sub,
    Tanh,
    Var,
)


def random_expr(rng: np.random.Generator, n_vars: int, depth: int, allow_div: bool = True):
    """Build a random expression tree of bounded depth (seeded, reproducible)."""
    if depth <= 0 or rng.random() < 0.25:
        if rng.random() < 0.6:
            return Var(int(rng.integers(n_vars)))
        return Const(round(float(rng.uniform(-3.0, 3.0)), 3))
    ops = ["add", "sub", "mul", "neg", "pow", "sin", "cos", "exp", "tanh"]
    if allow_div:
        ops.append("div")
    op = ops[int(rng.integers(len(ops)))]
    a = random_expr(rng, n_vars, depth - 1, allow_div)
    if op == "neg":
        return Neg(a)
    if op == "pow":
        return PowInt(a, int(rng.integers(0, 5)))
    if op == "sin":
        return Sin(a)
    if op == "cos":
        return Cos(a)
    if op == "exp":
        return Exp(a)
    if op == "tanh":
        return Tanh(a)
    b = random_expr(rng, n_vars, depth - 1, allow_div)
    if op == "add":
        return Add(a, b)
    if op == "sub":
        return Sub(a, b)
    if op == "mul":
        return Mul(a, b)
    return Div(a, b)
