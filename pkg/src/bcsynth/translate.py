"""Unrolls a trained candidate network into closed-form expressions.

The network output becomes a single expression B over the state variables,
built by composing each layer symbolically: affine pre-activations stay as
shared subexpressions (no monomial expansion, which would blow up
exponentially with depth), polynomial portions become integer powers of
those shared forms, tanh layers become tanh nodes.  The flow derivative of
B is formed per mode from the symbolic gradient and the mode's field.
"""

from __future__ import annotations

from dataclasses import dataclass

from .expr import Add, Const, Expr, Mul, PowInt, Tanh, Var, lie_derivative, simplify
from .learner import BarrierNet, _layer_exponents
from .model import SystemModel

__all__ = ["CertificateExpr", "translate"]


@dataclass(frozen=True)
class CertificateExpr:
    """Closed-form candidate: B plus one flow derivative per mode."""

    B: Expr
    bdot_per_mode: tuple[tuple[int, Expr], ...]


def _affine(coeffs, exprs: list[Expr], bias: float) -> Expr:
    terms = [Mul(Const(float(c)), z) for c, z in zip(coeffs, exprs)]
    out: Expr = terms[0]
    for t in terms[1:]:
        out = Add(out, t)
    if bias != 0.0:
        out = Add(out, Const(float(bias)))
    return out


def translate(net: BarrierNet, m: SystemModel) -> CertificateExpr:
    """Symbolic form of the candidate and its per-mode flow derivatives."""
    if net.shape.input_dim != m.dimension:
        raise ValueError(
            f"network expects {net.shape.input_dim} inputs, model has {m.dimension}"
        )
    zs: list[Expr] = [Var(i) for i in range(m.dimension)]
    for spec, W, b in zip(net.shape.layers, net.weights, net.biases):
        exps = _layer_exponents(spec)
        pre = [_affine(W[r], zs, float(b[r])) for r in range(spec.width)]
        if exps is None:
            zs = [Tanh(p) for p in pre]
        else:
            zs = [p if k == 1 else PowInt(p, int(k)) for p, k in zip(pre, exps)]
    B = simplify(_affine(net.out_w, zs, net.out_b))
    bdots = tuple(
        (k, simplify(lie_derivative(B, mode.field))) for k, mode in enumerate(m.modes)
    )
    return CertificateExpr(B=B, bdot_per_mode=bdots)
