"""Neural barrier candidates: architecture, loss, exact gradients, training.

A candidate network maps the state to a scalar through hidden layers whose
activations are linear, tanh, or split polynomial: a layer of width h split
into g portions of near-equal size, where the j-th portion raises its
pre-activation elementwise to the j-th power.  Every activation is smooth,
so the candidate has an exact spatial gradient and Lie derivative.

The training loss has three parts over sample batches drawn from the
initial, unsafe and whole-domain regions:

* initial samples are penalised above a margin and earn a small saturated
  reward below it,
* unsafe samples mirror that around the positive margin,
* domain samples inside a belt around the zero level set earn a saturated
  reward for pushing the flow derivative down; there is no flow penalty.

The saturated rewards keep a slight pull on already-satisfied samples
without letting any one sample dominate.  Gradients are exact everywhere,
with subgradient zero at the hinge points.  Training is plain full-batch
gradient descent and returns the best-satisfying iterate.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field as dc_field
from typing import Optional, Sequence

import numpy as np

from .model import SystemModel, field_at, mode_of_batch, sample_region

__all__ = [
    "LayerSpec",
    "NetShape",
    "BarrierNet",
    "LossConfig",
    "LossResult",
    "SampleSet",
    "TrainLog",
    "TrainingDivergence",
    "parse_shape",
    "shape_text",
    "portion_sizes",
    "init_net",
    "forward",
    "lie_value",
    "loss",
    "param_gradient",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_text",
    "net_from_checkpoint_text",
    "net_hash",
]


class TrainingDivergence(RuntimeError):
    """Raised when training produces non-finite values."""


# ---------------------------------------------------------------------------
# Shapes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerSpec:
    """One hidden layer: linear, tanh, or order-``gamma`` split polynomial."""

    kind: str  # "linear" | "poly" | "tanh"
    width: int
    gamma: int = 1

    def __post_init__(self):
        if self.kind not in ("linear", "poly", "tanh"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.width < 1:
            raise ValueError("layer width must be at least 1")
        if self.kind == "poly":
            if self.gamma < 1:
                raise ValueError("polynomial order must be at least 1")
            if self.width < self.gamma:
                raise ValueError(
                    f"poly layer needs width >= order ({self.width} < {self.gamma})"
                )
        elif self.gamma != 1:
            raise ValueError(f"{self.kind} layers take no order")


@dataclass(frozen=True)
class NetShape:
    """Hidden-layer stack over an input dimension; scalar linear output."""

    input_dim: int
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError("input dimension must be at least 1")
        if not self.layers:
            raise ValueError("at least one hidden layer is required")


def portion_sizes(width: int, gamma: int) -> list[int]:
    """Split ``width`` into ``gamma`` near-equal portions, larger ones first."""
    base, rem = divmod(width, gamma)
    return [base + 1] * rem + [base] * (gamma - rem)


def _layer_exponents(spec: LayerSpec) -> Optional[np.ndarray]:
    """Per-neuron polynomial exponent, or None for tanh layers."""
    if spec.kind == "tanh":
        return None
    if spec.kind == "linear":
        return np.ones(spec.width, dtype=int)
    exps = []
    for j, size in enumerate(portion_sizes(spec.width, spec.gamma), start=1):
        exps.extend([j] * size)
    return np.array(exps, dtype=int)


_SHAPE_ITEM_RE = re.compile(r"(lin|tanh|poly)(?:(\d+)-)?(\d+)")


def parse_shape(text: str, input_dim: int) -> NetShape:
    """Parse a shape string like ``lin10,poly3-10,lin10`` or ``tanh3x10``.

    Items are ``lin<width>``, ``tanh<width>`` or ``poly<order>-<width>``;
    ``<item>x<count>`` repeats an item.
    """
    layers: list[LayerSpec] = []
    for raw in text.split(","):
        item = raw.strip().lower()
        count = 1
        if "x" in item:
            item, _, count_text = item.rpartition("x")
            if not count_text.isdigit():
                raise ValueError(f"bad repeat count in shape item {raw!r}")
            count = int(count_text)
        m = _SHAPE_ITEM_RE.fullmatch(item)
        if not m:
            raise ValueError(f"bad shape item {raw!r}")
        kind, order, width = m.group(1), m.group(2), int(m.group(3))
        if kind == "poly":
            spec = LayerSpec("poly", width, int(order) if order else 1)
        else:
            if order is not None:
                raise ValueError(f"{kind} takes no order in shape item {raw!r}")
            spec = LayerSpec("linear" if kind == "lin" else "tanh", width)
        layers.extend([spec] * count)
    return NetShape(input_dim, tuple(layers))


def shape_text(shape: NetShape) -> str:
    """Inverse of parse_shape, without repeat groups."""
    items = []
    for l in shape.layers:
        if l.kind == "linear":
            items.append(f"lin{l.width}")
        elif l.kind == "tanh":
            items.append(f"tanh{l.width}")
        else:
            items.append(f"poly{l.gamma}-{l.width}")
    return ",".join(items)


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


@dataclass
class BarrierNet:
    """Candidate parameters: hidden weights/biases and the scalar head."""

    shape: NetShape
    weights: list[np.ndarray]  # per layer, (width, fan_in)
    biases: list[np.ndarray]  # per layer, (width,)
    out_w: np.ndarray  # (last_width,)
    out_b: float

    def copy(self) -> "BarrierNet":
        return BarrierNet(
            shape=self.shape,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            out_w=self.out_w.copy(),
            out_b=self.out_b,
        )


def init_net(shape: NetShape, rng: np.random.Generator) -> BarrierNet:
    """Uniform weights in +-1/sqrt(fan_in), zero biases."""
    weights = []
    biases = []
    fan_in = shape.input_dim
    for spec in shape.layers:
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(spec.width, fan_in)))
        biases.append(np.zeros(spec.width))
        fan_in = spec.width
    bound = 1.0 / math.sqrt(fan_in)
    out_w = rng.uniform(-bound, bound, size=fan_in)
    return BarrierNet(shape=shape, weights=weights, biases=biases, out_w=out_w, out_b=0.0)


def _activations(shape: NetShape) -> list[Optional[np.ndarray]]:
    return [_layer_exponents(spec) for spec in shape.layers]


def _phi(A: np.ndarray, exps: Optional[np.ndarray]):
    """Activation value and first/second derivatives, elementwise."""
    if exps is None:
        z = np.tanh(A)
        d1 = 1.0 - z * z
        return z, d1, -2.0 * z * d1
    z = A ** exps
    d1 = exps * A ** (exps - 1)
    coef2 = exps * (exps - 1)
    d2 = np.where(coef2 > 0, coef2 * A ** np.maximum(exps - 2, 0), 0.0)
    return z, d1, d2


def _forward_pass(net: BarrierNet, X: np.ndarray):
    """Hidden-layer cache for a batch: pre-activations and activations.

    Overflow is left to produce non-finite values; callers that train check
    finiteness explicitly.
    """
    exps_list = _activations(net.shape)
    Z = X
    cache = []
    with np.errstate(all="ignore"):
        for W, b, exps in zip(net.weights, net.biases, exps_list):
            A = Z @ W.T + b
            Znew, d1, d2 = _phi(A, exps)
            cache.append((Z, A, Znew, d1, d2))
            Z = Znew
        B = Z @ net.out_w + net.out_b
    return B, cache


def _tangent_pass(net: BarrierNet, cache, T0: np.ndarray):
    """Directional derivative of the output along input tangents ``T0``."""
    T = T0
    tangents = []
    with np.errstate(all="ignore"):
        for (W, (_, _, _, d1, _)) in zip(net.weights, cache):
            U = T @ W.T
            T = U * d1
            tangents.append((U, T))
        return T @ net.out_w, tangents


def forward(net: BarrierNet, X: np.ndarray):
    """Value and exact spatial gradient of the candidate.

    A single point returns (float, (n,) array); a batch of rows returns
    ((N,) array, (N, n) array).
    """
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    Xb = X[None, :] if single else X
    B, cache = _forward_pass(net, Xb)
    gZ = np.broadcast_to(net.out_w, (Xb.shape[0], net.out_w.shape[0]))
    for (W, (_, _, _, d1, _)) in zip(reversed(net.weights), reversed(cache)):
        gA = gZ * d1
        gZ = gA @ W
    if single:
        return float(B[0]), gZ[0].copy()
    return B, gZ


def lie_value(net: BarrierNet, x: Sequence[float], m: SystemModel) -> float:
    """Flow derivative of the candidate at ``x`` under the active mode."""
    x = np.asarray(x, dtype=float)
    _, grad = forward(net, x)
    f = field_at(m, x[None, :])[0]
    return float(np.dot(grad, f))


# ---------------------------------------------------------------------------
# Samples
# ---------------------------------------------------------------------------


@dataclass
class SampleSet:
    """Training batches over the initial, unsafe and whole-domain regions.

    ``flow_field`` caches the vector field at the domain batch so epochs do
    not re-evaluate the dynamics.
    """

    init_pts: np.ndarray
    unsafe_pts: np.ndarray
    flow_pts: np.ndarray
    flow_field: Optional[np.ndarray] = None
    flow_modes: Optional[np.ndarray] = None

    @classmethod
    def from_model(
        cls,
        m: SystemModel,
        counts: tuple[int, int, int],
        rng: np.random.Generator,
    ) -> "SampleSet":
        n0, nu, nx = counts
        s = cls(
            init_pts=sample_region(m, "init", n0, rng),
            unsafe_pts=sample_region(m, "unsafe", nu, rng),
            flow_pts=sample_region(m, "domain", nx, rng),
        )
        s.ensure_field(m)
        return s

    def ensure_field(self, m: SystemModel):
        if self.flow_field is None or len(self.flow_field) != len(self.flow_pts):
            self.flow_modes = mode_of_batch(m, self.flow_pts)
            self.flow_field = field_at(m, self.flow_pts, self.flow_modes)

    def counts(self) -> tuple[int, int, int]:
        return len(self.init_pts), len(self.unsafe_pts), len(self.flow_pts)

    def absorb(self, m: SystemModel, tag: str, points: np.ndarray) -> "SampleSet":
        """New sample set with extra points appended to one batch."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if tag == "init":
            return SampleSet(
                np.concatenate([self.init_pts, points]),
                self.unsafe_pts,
                self.flow_pts,
                self.flow_field,
                self.flow_modes,
            )
        if tag == "unsafe":
            return SampleSet(
                self.init_pts,
                np.concatenate([self.unsafe_pts, points]),
                self.flow_pts,
                self.flow_field,
                self.flow_modes,
            )
        s = SampleSet(
            self.init_pts,
            self.unsafe_pts,
            np.concatenate([self.flow_pts, points]),
        )
        s.ensure_field(m)
        return s


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossConfig:
    """Margins, reward strength, belt bounds and descent schedule."""

    margin_init: float = 0.1
    margin_unsafe: float = 0.1
    margin_flow: float = 0.1
    leak: float = 1e-4
    belt_below: float = 0.1
    belt_above: float = math.inf
    sat_cap: float = 1.0
    lr: float = 0.1
    max_epochs: int = 2500
    window: int = 50

    def __post_init__(self):
        if min(self.margin_init, self.margin_unsafe, self.margin_flow) <= 0:
            raise ValueError("margins must be positive")
        if self.leak <= 0:
            raise ValueError("leak must be positive")
        if not (self.belt_above > self.belt_below > 0):
            raise ValueError("belt bounds must satisfy above > below > 0")
        if self.sat_cap <= 0:
            raise ValueError("sat_cap must be positive")


@dataclass(frozen=True)
class LossResult:
    """Loss value with its three terms and per-batch satisfaction counts."""

    total: float
    init_term: float
    unsafe_term: float
    flow_term: float
    sat_init: int
    sat_unsafe: int
    sat_flow: int
    n_init: int
    n_unsafe: int
    n_flow: int

    @property
    def all_satisfied(self) -> bool:
        return (
            self.sat_init == self.n_init
            and self.sat_unsafe == self.n_unsafe
            and self.sat_flow == self.n_flow
        )

    @property
    def satisfaction(self) -> float:
        total = self.n_init + self.n_unsafe + self.n_flow
        return (self.sat_init + self.sat_unsafe + self.sat_flow) / total

    @property
    def rank(self) -> tuple[float, float]:
        """Iterate-selection key: value-condition satisfaction outranks flow.

        A candidate that misses B <= 0 or B > 0 at a known sample is falsified
        immediately, so those fractions dominate; flow satisfaction breaks
        ties among iterates that pass both value conditions.
        """
        return (
            self.sat_init / self.n_init + self.sat_unsafe / self.n_unsafe,
            self.sat_flow / self.n_flow,
        )


def _relu(x):
    return np.maximum(x, 0.0)


def _sat_relu(x, cap):
    return np.minimum(np.maximum(x, 0.0), cap)


def _evaluate(net: BarrierNet, samples: SampleSet, m: SystemModel, cfg: LossConfig, need_grad: bool):
    """Loss, satisfaction and (optionally) exact parameter gradients.

    Satisfaction is judged on the very same values the loss uses.
    """
    n0, nu, nx = samples.counts()
    if min(n0, nu, nx) == 0:
        raise ValueError("all three sample batches must be nonempty")
    samples.ensure_field(m)

    B0, cache0 = _forward_pass(net, samples.init_pts)
    Bu, cacheu = _forward_pass(net, samples.unsafe_pts)
    Bx, cachex = _forward_pass(net, samples.flow_pts)
    Dx, tangents = _tangent_pass(net, cachex, samples.flow_field)

    with np.errstate(all="ignore"):
        return _loss_terms(net, samples, cfg, B0, Bu, Bx, Dx, cache0, cacheu, cachex, tangents, need_grad)


def _loss_terms(net, samples, cfg, B0, Bu, Bx, Dx, cache0, cacheu, cachex, tangents, need_grad):
    n0, nu, nx = samples.counts()
    cap = cfg.sat_cap
    a = cfg.leak
    u0 = B0 - cfg.margin_init
    r0 = -B0 + cfg.margin_init
    init_term = float(np.mean(_relu(u0) - a * _sat_relu(r0, cap)))
    uu = -Bu + cfg.margin_unsafe
    ru = Bu - cfg.margin_unsafe
    unsafe_term = float(np.mean(_relu(uu) - a * _sat_relu(ru, cap)))
    belt = (Bx >= -cfg.belt_below) & (Bx <= cfg.belt_above)
    ud = -Dx + cfg.margin_flow
    flow_term = float(-np.sum(np.where(belt, _sat_relu(ud, cap), 0.0)) / nx)

    # flow satisfaction demands a non-increasing B only in a narrow band
    # around the zero level set — the set the falsifier actually checks.
    # Samples deep on the positive side may flow toward the unsafe region
    # with B legitimately increasing, so counting the whole reward belt
    # would make full satisfaction unreachable for perfectly valid
    # certificates.  Falsifier witnesses land inside this band, so absorbed
    # counterexamples always register as unsatisfied until fixed.
    near_level = np.abs(Bx) <= cfg.belt_below
    result = LossResult(
        total=init_term + unsafe_term + flow_term,
        init_term=init_term,
        unsafe_term=unsafe_term,
        flow_term=flow_term,
        sat_init=int(np.sum(B0 <= 0.0)),
        sat_unsafe=int(np.sum(Bu > 0.0)),
        sat_flow=int(np.sum(~near_level | (Dx <= 0.0))),
        n_init=n0,
        n_unsafe=nu,
        n_flow=nx,
    )
    if not need_grad:
        return result, None, (B0, Bu, Bx, Dx)

    # hinge derivatives with subgradient 0 at the kinks
    gB0 = ((u0 > 0.0).astype(float) + a * ((r0 > 0.0) & (r0 < cap))) / n0
    gBu = (-(uu > 0.0).astype(float) - a * ((ru > 0.0) & (ru < cap))) / nu
    gDx = np.where(belt & (ud > 0.0) & (ud < cap), 1.0 / nx, 0.0)

    gW = [np.zeros_like(w) for w in net.weights]
    gb = [np.zeros_like(b) for b in net.biases]
    g_out_w = np.zeros_like(net.out_w)
    g_out_b = 0.0

    def backprop_value(cache, gB):
        nonlocal g_out_w, g_out_b
        ZL = cache[-1][2]
        g_out_w += ZL.T @ gB
        g_out_b += float(gB.sum())
        gZ = gB[:, None] * net.out_w[None, :]
        for k in range(len(net.weights) - 1, -1, -1):
            Zprev, _, _, d1, _ = cache[k]
            gA = gZ * d1
            gW[k] += gA.T @ Zprev
            gb[k] += gA.sum(axis=0)
            gZ = gA @ net.weights[k]

    def backprop_flow(cache, tangents, gD):
        nonlocal g_out_w
        TL = tangents[-1][1]
        g_out_w += TL.T @ gD
        gZ = np.zeros_like(cache[-1][2])
        gT = gD[:, None] * net.out_w[None, :]
        for k in range(len(net.weights) - 1, -1, -1):
            Zprev, _, _, d1, d2 = cache[k]
            U, _ = tangents[k]
            Tprev = samples.flow_field if k == 0 else tangents[k - 1][1]
            gU = gT * d1
            gA = gZ * d1 + gT * U * d2
            gW[k] += gA.T @ Zprev + gU.T @ Tprev
            gb[k] += gA.sum(axis=0)
            gZ = gA @ net.weights[k]
            gT = gU @ net.weights[k]

    backprop_value(cache0, gB0)
    backprop_value(cacheu, gBu)
    backprop_flow(cachex, tangents, gDx)

    return result, (gW, gb, g_out_w, g_out_b), (B0, Bu, Bx, Dx)


def loss(net: BarrierNet, samples: SampleSet, m: SystemModel, cfg: LossConfig) -> LossResult:
    result, _, _ = _evaluate(net, samples, m, cfg, need_grad=False)
    return result


def param_gradient(net: BarrierNet, samples: SampleSet, m: SystemModel, cfg: LossConfig):
    """Exact loss gradient as (dW list, db list, d out_w, d out_b)."""
    _, grads, _ = _evaluate(net, samples, m, cfg, need_grad=True)
    return grads


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainLog:
    epochs: int
    best_epoch: int
    best_satisfaction: float
    final_loss: float
    converged: bool
    loss_history: list = dc_field(default_factory=list)
    satisfaction_history: list = dc_field(default_factory=list)


def _first_bad_sample(samples: SampleSet, values) -> str:
    B0, Bu, Bx, Dx = values
    for name, pts, arr in (
        ("init", samples.init_pts, B0),
        ("unsafe", samples.unsafe_pts, Bu),
        ("domain", samples.flow_pts, Bx),
        ("domain", samples.flow_pts, Dx),
    ):
        bad = ~np.isfinite(arr)
        if np.any(bad):
            i = int(np.argmax(bad))
            return f"{name} sample {pts[i].tolist()}"
    return "unknown sample"


def train(
    net: BarrierNet,
    samples: SampleSet,
    m: SystemModel,
    cfg: LossConfig,
    rng: Optional[np.random.Generator] = None,
) -> tuple[BarrierNet, TrainLog]:
    """Full-batch gradient descent to full sample satisfaction.

    Stops once every sample meets its condition for ``cfg.window``
    consecutive epochs, or at ``cfg.max_epochs``; returns the post-update
    iterate with the highest satisfaction (latest on ties).  The starting
    parameters are not a candidate: returning them verbatim would stall a
    warm-started synthesis loop, whereas the reward terms keep later
    iterates moving even at equal satisfaction.  The ``rng`` argument is
    accepted for interface symmetry; descent itself is deterministic.
    """
    del rng
    net = net.copy()
    best = net.copy()
    best_rank = (-1.0, -1.0)
    best_sat = -1.0
    best_epoch = 0
    streak = 0
    log = TrainLog(epochs=0, best_epoch=0, best_satisfaction=0.0, final_loss=math.nan, converged=False)
    for epoch in range(cfg.max_epochs + 1):
        result, grads, values = _evaluate(net, samples, m, cfg, need_grad=True)
        if not math.isfinite(result.total):
            raise TrainingDivergence(
                f"non-finite loss at epoch {epoch} near {_first_bad_sample(samples, values)}"
            )
        log.loss_history.append(result.total)
        log.satisfaction_history.append(result.satisfaction)
        log.epochs = epoch
        log.final_loss = result.total
        if epoch >= 1 and result.rank >= best_rank:
            best_rank = result.rank
            best_sat = result.satisfaction
            best = net.copy()
            best_epoch = epoch
        streak = streak + 1 if result.all_satisfied else 0
        if streak >= cfg.window:
            log.converged = True
            break
        if epoch == cfg.max_epochs:
            break
        gW, gb, g_out_w, g_out_b = grads
        for k in range(len(net.weights)):
            net.weights[k] -= cfg.lr * gW[k]
            net.biases[k] -= cfg.lr * gb[k]
        net.out_w -= cfg.lr * g_out_w
        net.out_b -= cfg.lr * g_out_b
    if best_epoch == 0:  # no update ever ran (max_epochs = 0)
        best_sat = log.satisfaction_history[0]
    log.best_epoch = best_epoch
    log.best_satisfaction = best_sat
    return best, log


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def checkpoint_text(net: BarrierNet) -> str:
    doc = {
        "input_dim": net.shape.input_dim,
        "layers": [
            {"kind": l.kind, "width": l.width, "gamma": l.gamma} for l in net.shape.layers
        ],
        "weights": [w.tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
        "out_w": net.out_w.tolist(),
        "out_b": net.out_b,
    }
    return json.dumps(doc, indent=1)


def net_from_checkpoint_text(text: str) -> BarrierNet:
    doc = json.loads(text)
    shape = NetShape(
        int(doc["input_dim"]),
        tuple(LayerSpec(l["kind"], int(l["width"]), int(l["gamma"])) for l in doc["layers"]),
    )
    return BarrierNet(
        shape=shape,
        weights=[np.array(w, dtype=float) for w in doc["weights"]],
        biases=[np.array(b, dtype=float) for b in doc["biases"]],
        out_w=np.array(doc["out_w"], dtype=float),
        out_b=float(doc["out_b"]),
    )


def save_checkpoint(net: BarrierNet, path: str):
    with open(path, "w") as fh:
        fh.write(checkpoint_text(net))


def load_checkpoint(path: str) -> BarrierNet:
    with open(path, "r") as fh:
        return net_from_checkpoint_text(fh.read())


def net_hash(net: BarrierNet) -> str:
    return hashlib.sha256(checkpoint_text(net).encode()).hexdigest()[:16]
