"""Synthesis loop: alternate sample-based training with sound falsification.

One iteration trains the candidate network on the current samples,
translates it to closed form, screens it against random points, and — if
the screen finds nothing — runs the interval falsifier.  A certified
candidate ends the loop; otherwise every returned counterexample is
appended to the sample batch matching its clause (initial-region hits to
S0, unsafe-region hits to Su, flow hits to Sx) and training resumes from
the current parameters.  The whole run is deterministic for a fixed master
seed: each random phase (weight init, initial sampling, screening,
counterexample enrichment) draws from its own derived stream.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field as dc_field, replace
from typing import Optional

import numpy as np

from .expr import eval_point, print_expr
from .learner import (
    LossConfig,
    NetShape,
    SampleSet,
    TrainingDivergence,
    checkpoint_text,
    init_net,
    train,
)
from .model import SystemModel
from .translate import translate
from .verifier import (
    DERIVATIVE_RELAXED,
    INIT,
    UNSAFE,
    VerifierConfig,
    cheap_falsify,
    enriched_counterexamples,
    select_separated,
    verify,
)

__all__ = [
    "CegisConfig",
    "IterationRecord",
    "CegisReport",
    "RunStatistics",
    "synthesize",
    "repeat_runs",
    "report_json",
]


@dataclass(frozen=True)
class CegisConfig:
    """Everything a synthesis run needs besides the model itself."""

    shape: NetShape
    loss: LossConfig = dc_field(default_factory=LossConfig)
    verifier: VerifierConfig = dc_field(default_factory=VerifierConfig)
    samples: tuple[int, int, int] = (100, 100, 300)
    max_iterations: int = 20
    seed: int = 0
    screen_count: int = 1000

    def __post_init__(self):
        if any(int(c) <= 0 for c in self.samples):
            raise ValueError("initial sample counts must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")

    def to_dict(self) -> dict:
        return {
            "shape": {
                "input_dim": self.shape.input_dim,
                "layers": [
                    {"kind": l.kind, "width": l.width, "gamma": l.gamma}
                    for l in self.shape.layers
                ],
            },
            "loss": {
                "margin_init": self.loss.margin_init,
                "margin_unsafe": self.loss.margin_unsafe,
                "margin_flow": self.loss.margin_flow,
                "leak": self.loss.leak,
                "belt_below": self.loss.belt_below,
                "belt_above": self.loss.belt_above,
                "sat_cap": self.loss.sat_cap,
                "lr": self.loss.lr,
                "max_epochs": self.loss.max_epochs,
                "window": self.loss.window,
            },
            "verifier": {
                "min_width": self.verifier.min_width,
                "level_tol": self.verifier.level_tol,
                "clause_timeout": self.verifier.clause_timeout,
                "max_boxes": self.verifier.max_boxes,
                "batch_size": self.verifier.batch_size,
                "cloud_count": self.verifier.cloud_count,
                "cloud_radius": self.verifier.cloud_radius,
                "ascent_steps": self.verifier.ascent_steps,
                "ascent_step_size": self.verifier.ascent_step_size,
                "workers": self.verifier.workers,
            },
            "samples": list(self.samples),
            "max_iterations": self.max_iterations,
            "seed": self.seed,
            "screen_count": self.screen_count,
        }


@dataclass
class IterationRecord:
    """What one loop pass did: timings, verdict, counterexamples, sizes."""

    index: int
    sample_sizes: tuple[int, int, int]
    learn_seconds: float
    verify_seconds: float
    epochs: int
    best_epoch: int
    satisfaction: float
    verdict: str  # "certified" | "falsified" | "unknown" | "screened"
    counterexamples: list = dc_field(default_factory=list)
    start_checkpoint_sha: str = ""
    end_checkpoint_sha: str = ""

    def to_dict(self) -> dict:
        return {
            "iteration": self.index,
            "sample_sizes": list(self.sample_sizes),
            "learn_seconds": self.learn_seconds,
            "verify_seconds": self.verify_seconds,
            "epochs": self.epochs,
            "best_epoch": self.best_epoch,
            "satisfaction": self.satisfaction,
            "verdict": self.verdict,
            "counterexamples": self.counterexamples,
            "start_checkpoint_sha": self.start_checkpoint_sha,
            "end_checkpoint_sha": self.end_checkpoint_sha,
        }


@dataclass
class CegisReport:
    """Outcome of a synthesis run plus its full iteration history."""

    success: bool
    failure_reason: Optional[str]
    certificate_text: Optional[str]
    bdot_texts: list  # [[mode index, expression text], ...]
    verification: Optional[dict]  # final VerificationOutcome as dict
    iterations: list  # of IterationRecord
    config: dict
    seed: int
    model_name: str
    checkpoint: Optional[str]  # final network, checkpoint format
    checkpoint_path: Optional[str] = None
    total_seconds: float = 0.0

    @property
    def iteration_count(self) -> int:
        return len(self.iterations)

    def to_dict(self) -> dict:
        return {
            "success": self.success,
            "failure_reason": self.failure_reason,
            "certificate": self.certificate_text,
            "flow_derivatives": self.bdot_texts,
            "verification": self.verification,
            "iterations": [r.to_dict() for r in self.iterations],
            "config": self.config,
            "seed": self.seed,
            "model": self.model_name,
            "checkpoint": self.checkpoint,
            "checkpoint_path": self.checkpoint_path,
            "total_seconds": self.total_seconds,
        }


def report_json(report: CegisReport) -> str:
    return json.dumps(report.to_dict(), indent=2)


def _sha(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def _outcome_dict(out) -> dict:
    return {
        "verdict": out.verdict,
        "counterexamples": [ce.to_dict() for ce in out.counterexamples],
        "clauses": [st.to_dict() for st in out.clause_stats],
        "workers": out.workers,
    }


def _absorb_counterexamples(
    samples: SampleSet,
    m: SystemModel,
    cert,
    ces,
    level_tol: float,
) -> tuple[SampleSet, list]:
    """Append each counterexample to the batch matching its clause.

    Exact witnesses satisfy their clause region by construction and go
    straight to that batch.  Spurious points (width-floor stops) carry no
    membership guarantee: they are re-checked and rerouted to the domain
    batch — or dropped — when they fall outside, so batch membership
    invariants survive.  Relaxed-band hits that sit far from the zero level
    set are flagged for the report but absorbed all the same.
    """
    recorded = []
    for ce in ces:
        entry = ce.to_dict()
        if ce.tag == DERIVATIVE_RELAXED:
            entry["far_from_level"] = bool(
                abs(eval_point(cert.B, ce.point)) > level_tol
            )
        target = (
            "init" if ce.tag == INIT else "unsafe" if ce.tag == UNSAFE else "flow"
        )
        if ce.spurious:
            region = {"init": "init", "unsafe": "unsafe", "flow": "domain"}[target]
            if not bool(m.contains(region, ce.point)[0]):
                target = (
                    "flow" if bool(m.contains("domain", ce.point)[0]) else None
                )
        entry["absorbed_into"] = target
        recorded.append(entry)
        if target is not None:
            samples = samples.absorb(m, target, ce.point)
    return samples, recorded


def synthesize(m: SystemModel, cfg: CegisConfig) -> CegisReport:
    """Run the full loop; certified success or a failure report with history."""
    t_run = time.perf_counter()
    root = np.random.SeedSequence(cfg.seed)
    ss_net, ss_samples, ss_screen, ss_verify = root.spawn(4)
    rng_screen = np.random.default_rng(ss_screen)
    rng_verify = np.random.default_rng(ss_verify)

    rng_net = np.random.default_rng(ss_net)
    net = init_net(cfg.shape, rng_net)
    samples = SampleSet.from_model(m, cfg.samples, np.random.default_rng(ss_samples))

    records: list[IterationRecord] = []

    def report(success, reason, cert=None, outcome=None):
        return CegisReport(
            success=success,
            failure_reason=reason,
            certificate_text=print_expr(cert.B, m.variables) if cert else None,
            bdot_texts=(
                [[k, print_expr(e, m.variables)] for k, e in cert.bdot_per_mode]
                if cert
                else []
            ),
            verification=_outcome_dict(outcome) if outcome else None,
            iterations=records,
            config=cfg.to_dict(),
            seed=cfg.seed,
            model_name=m.name,
            checkpoint=checkpoint_text(net),
            total_seconds=time.perf_counter() - t_run,
        )

    last_verdict = "none"
    for index in range(1, cfg.max_iterations + 1):
        sizes = samples.counts()
        start_sha = _sha(checkpoint_text(net))
        t0 = time.perf_counter()
        try:
            net, tlog = train(net, samples, m, cfg.loss)
        except TrainingDivergence:
            # gradient descent blew up from this start; re-seed the weights
            # and spend an iteration, keeping every sample gathered so far
            records.append(
                IterationRecord(
                    index=index,
                    sample_sizes=sizes,
                    learn_seconds=time.perf_counter() - t0,
                    verify_seconds=0.0,
                    epochs=0,
                    best_epoch=0,
                    satisfaction=0.0,
                    verdict="diverged",
                    start_checkpoint_sha=start_sha,
                )
            )
            net = init_net(cfg.shape, rng_net)
            last_verdict = "diverged"
            continue
        learn_seconds = time.perf_counter() - t0
        rec = IterationRecord(
            index=index,
            sample_sizes=sizes,
            learn_seconds=learn_seconds,
            verify_seconds=0.0,
            epochs=tlog.epochs,
            best_epoch=tlog.best_epoch,
            satisfaction=tlog.best_satisfaction,
            verdict="",
            start_checkpoint_sha=start_sha,
            end_checkpoint_sha=_sha(checkpoint_text(net)),
        )
        records.append(rec)
        cert = translate(net, m)

        hits = cheap_falsify(
            cert, m, cfg.screen_count, rng_screen, cfg.verifier.level_tol
        )
        if hits:
            hits = select_separated(hits, m, cfg.verifier)
            ces = enriched_counterexamples(hits, cert, m, cfg.verifier, rng_screen)
            samples, recorded = _absorb_counterexamples(
                samples, m, cert, ces, cfg.verifier.level_tol
            )
            rec.verdict = "screened"
            rec.counterexamples = recorded
            last_verdict = "screened"
            continue

        t0 = time.perf_counter()
        out = verify(cert, m, cfg.verifier, rng_verify)
        rec.verify_seconds = time.perf_counter() - t0
        rec.verdict = out.verdict
        last_verdict = out.verdict
        if out.verdict == "certified":
            return report(True, None, cert, out)
        if out.counterexamples:
            samples, recorded = _absorb_counterexamples(
                samples, m, cert, out.counterexamples, cfg.verifier.level_tol
            )
            rec.counterexamples = recorded

    return report(
        False,
        f"no certificate within {cfg.max_iterations} iterations"
        f" (last verdict: {last_verdict})",
    )


@dataclass
class RunStatistics:
    """Aggregates over repeated runs with derived seeds."""

    runs: int
    successes: int
    learn_calls: int
    verify_calls: int
    learn_seconds: tuple[float, float, float]  # mean, min, max
    verify_seconds: tuple[float, float, float]
    iterations: tuple[float, int, int]
    per_run: list = dc_field(default_factory=list)

    @property
    def success_rate(self) -> float:
        return self.successes / self.runs

    def to_dict(self) -> dict:
        return {
            "runs": self.runs,
            "successes": self.successes,
            "success_rate": self.success_rate,
            "learn_calls": self.learn_calls,
            "verify_calls": self.verify_calls,
            "learn_seconds_mean_min_max": list(self.learn_seconds),
            "verify_seconds_mean_min_max": list(self.verify_seconds),
            "iterations_mean_min_max": list(self.iterations),
            "per_run": self.per_run,
        }


def derived_seeds(master: int, runs: int) -> list[int]:
    """Deterministic per-run seeds from one master seed."""
    return [
        int(child.generate_state(1, np.uint32)[0])
        for child in np.random.SeedSequence(master).spawn(runs)
    ]


def repeat_runs(m: SystemModel, cfg: CegisConfig, runs: int) -> RunStatistics:
    """Statistics over per-call learner/verifier times, not per-run sums."""
    if runs < 1:
        raise ValueError("runs must be at least 1")
    learn_times: list[float] = []
    verify_times: list[float] = []
    iteration_counts: list[int] = []
    per_run = []
    successes = 0
    for seed in derived_seeds(cfg.seed, runs):
        rep = synthesize(m, replace(cfg, seed=seed))
        successes += int(rep.success)
        iteration_counts.append(rep.iteration_count)
        for rec in rep.iterations:
            learn_times.append(rec.learn_seconds)
            if rec.verdict in ("certified", "falsified", "unknown"):
                verify_times.append(rec.verify_seconds)
        per_run.append(
            {
                "seed": seed,
                "success": rep.success,
                "iterations": rep.iteration_count,
                "failure_reason": rep.failure_reason,
            }
        )

    def agg(xs):
        if not xs:
            return (0.0, 0.0, 0.0)
        return (float(np.mean(xs)), float(np.min(xs)), float(np.max(xs)))

    return RunStatistics(
        runs=runs,
        successes=successes,
        learn_calls=len(learn_times),
        verify_calls=len(verify_times),
        learn_seconds=agg(learn_times),
        verify_seconds=agg(verify_times),
        iterations=(
            float(np.mean(iteration_counts)),
            int(np.min(iteration_counts)),
            int(np.max(iteration_counts)),
        ),
        per_run=per_run,
    )
