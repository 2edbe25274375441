"""Verification-in-the-loop training: bound rollout, tube loss, Adam update, check."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from . import diffcore as dc
from .backend import DIFFCORE, NUMPY, jax_backend
from .certify import CertReport, certify
from .crown import BoundError, ReachTube, rollout_bounds
from .losses import combine, loss_terms
from .scenario import Scenario, TrainConfig

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    """Non-finite loss or gradient; ``report`` holds the state before the bad epoch."""

    def __init__(self, msg: str, report: "TrainReport"):
        super().__init__(msg)
        self.report = report


# ---- Adam -----------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict, lr: float = 1e-4, **kw) -> "AdamState":
        zeros = {k: np.zeros_like(np.asarray(p, dtype=np.float64)) for k, p in params.items()}
        return cls(lr=lr, m=zeros, v={k: z.copy() for k, z in zeros.items()}, **kw)

    def copy(self) -> "AdamState":
        return AdamState(self.lr, self.beta1, self.beta2, self.eps, self.t,
                         {k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()})


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """Bias-corrected Adam update; advances ``state`` in place and returns new params."""
    if set(grads) != set(params):
        raise ValueError(f"gradient keys {sorted(grads)} != parameter keys {sorted(params)}")
    for k, g in grads.items():
        if np.shape(g) != np.shape(params[k]):
            raise ValueError(f"gradient for {k!r} has shape {np.shape(g)}, parameter {np.shape(params[k])}")
        bad = ~np.isfinite(g)
        if np.any(bad):
            idx = tuple(int(i) for i in np.argwhere(bad)[0])
            raise FloatingPointError(f"non-finite gradient for {k!r} at index {idx}: {np.asarray(g)[idx]}")
    if not state.m:
        state.m = {k: np.zeros_like(np.asarray(p, dtype=np.float64)) for k, p in params.items()}
        state.v = {k: np.zeros_like(np.asarray(p, dtype=np.float64)) for k, p in params.items()}
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    out = {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        mhat = state.m[k] / c1
        vhat = state.v[k] / c2
        out[k] = np.asarray(p, dtype=np.float64) - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return out


# ---- loss and gradient ------------------------------------------------------------


@dataclass
class Evaluation:
    loss: float
    grads: dict
    terms: dict
    tube: ReachTube


def _loss_key(scenario: Scenario) -> str:
    d = scenario.to_dict()
    d.pop("train")
    d.pop("certify")
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


_JAX_CACHE: dict = {}


def _jax_evaluator(scenario: Scenario):
    key = _loss_key(scenario)
    if key in _JAX_CACHE:
        return _JAX_CACHE[key]
    J = jax_backend()
    jnp = J.jnp
    graph = scenario.closed_loop().graph
    w = scenario.weights

    def f(p):
        tube = rollout_bounds(graph, p, scenario.X0, scenario.T, scenario.bounds, J)
        terms = loss_terms(tube, scenario, w, J)
        total = jnp.asarray(combine(terms, w), dtype=jnp.float64)
        return total, (terms, tube.lo, tube.hi)

    vg = J.jax.jit(J.jax.value_and_grad(f, has_aux=True))

    def run(params: dict) -> Evaluation:
        (loss, (terms, lo, hi)), g = vg({k: jnp.asarray(v) for k, v in params.items()})
        return Evaluation(float(loss), {k: np.asarray(a) for k, a in g.items()},
                          {k: float(v) for k, v in terms.items()}, ReachTube(np.asarray(lo), np.asarray(hi)))

    _JAX_CACHE[key] = run
    return run


def _diffcore_evaluator(scenario: Scenario):
    graph = scenario.closed_loop().graph
    w = scenario.weights

    def run(params: dict) -> Evaluation:
        tape = dc.Tape()
        P = {k: tape.param(np.asarray(v, dtype=np.float64)) for k, v in params.items()}
        tube = rollout_bounds(graph, P, scenario.X0, scenario.T, scenario.bounds, DIFFCORE)
        terms = loss_terms(tube, scenario, w, DIFFCORE)
        total = combine(terms, w)
        if isinstance(total, dc.Tensor):
            by_tensor = tape.backward(total)
            grads = {k: by_tensor[t] for k, t in P.items()}
        else:
            grads = {k: np.zeros_like(np.asarray(v, dtype=np.float64)) for k, v in params.items()}
        return Evaluation(float(dc.value(total)), grads, {k: float(dc.value(v)) for k, v in terms.items()},
                          ReachTube(np.asarray(dc.value(tube.lo)), np.asarray(dc.value(tube.hi))))

    return run


def evaluator(scenario: Scenario, backend: str = "jax"):
    """Callable ``params -> Evaluation`` computing the tube loss and its gradient."""
    if backend == "jax":
        return _jax_evaluator(scenario)
    if backend == "diffcore":
        return _diffcore_evaluator(scenario)
    raise ValueError(f"unknown training backend {backend!r} (expected 'jax' or 'diffcore')")


def loss_value(scenario: Scenario, params: dict) -> float:
    """Plain numpy evaluation of the total loss, no gradient."""
    tube = rollout_bounds(scenario.closed_loop().graph, params, scenario.X0, scenario.T, scenario.bounds, NUMPY)
    return float(combine(loss_terms(tube, scenario, scenario.weights, NUMPY), scenario.weights))


def _first_nonfinite(ev: Evaluation) -> str | None:
    if not np.isfinite(ev.loss):
        bad = [k for k, v in ev.terms.items() if not np.isfinite(v)]
        return f"loss is {ev.loss} (non-finite terms: {bad or 'none'})"
    for k, g in ev.grads.items():
        if not np.all(np.isfinite(g)):
            return f"gradient for {k!r} has {int(np.sum(~np.isfinite(g)))} non-finite entries"
    return None


# ---- training loop -----------------------------------------------------------------


@dataclass
class TrainReport:
    params: dict
    initial_params: dict
    history: list = field(default_factory=list)
    cert_checks: list = field(default_factory=list)
    stop_reason: str = "max_epochs"
    wall_clock: float = 0.0
    cert: CertReport | None = None
    tube: ReachTube | None = None
    adam: AdamState | None = None
    config_hash: str = ""
    seed: int = 0

    @property
    def epochs(self) -> int:
        return len(self.history)

    @property
    def losses(self) -> list[float]:
        return [h["loss"] for h in self.history]

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "seed": self.seed,
            "epochs": self.epochs,
            "stop_reason": self.stop_reason,
            "wall_clock_s": self.wall_clock,
            "final_loss": self.history[-1]["loss"] if self.history else None,
            "history": self.history,
            "cert_checks": self.cert_checks,
            "cert": None if self.cert is None else self.cert.to_dict(),
        }


def _window_spread(losses) -> float:
    """Range of ``losses`` relative to the latest value.

    Using the whole window rather than its two endpoints keeps an oscillating
    loss from looking flat just because it came back to where it was.
    """
    return (max(losses) - min(losses)) / max(abs(losses[-1]), 1e-12)


def train(scenario: Scenario, config: TrainConfig | None = None, backend: str = "jax",
          checkpoint_path=None, params: dict | None = None, adam: AdamState | None = None,
          start_epoch: int = 0) -> TrainReport:
    """Optimize the policy parameters of ``scenario``.

    Each epoch evaluates the tube of the current parameters, records the loss,
    runs the termination checks on that tube and only then applies an Adam step,
    so a parameter set returned on certification is the one that was checked.
    ``params``/``adam``/``start_epoch`` resume from a checkpoint.
    """
    cfg = config or scenario.train
    if cfg.epochs < 0:
        raise ValueError(f"epochs must be >= 0, got {cfg.epochs}")
    if params is None:
        params = scenario.policy.init_params(cfg.seed)
    params = {k: np.asarray(v, dtype=np.float64).copy() for k, v in params.items()}
    state = adam.copy() if adam is not None else AdamState.for_params(params, lr=cfg.lr)
    report = TrainReport(params=params, initial_params={k: v.copy() for k, v in params.items()},
                         config_hash=scenario.replace(train=cfg).config_hash(), seed=cfg.seed, adam=state)

    def save(epoch):
        if checkpoint_path is not None:
            ckpt.save(checkpoint_path, params, state, epoch, report.config_hash, cfg.seed)

    t0 = time.perf_counter()
    run = evaluator(scenario, backend) if cfg.epochs > 0 else None
    epoch = start_epoch
    for i in range(cfg.epochs):
        epoch = start_epoch + i
        try:
            ev = run(params)
            problem = _first_nonfinite(ev)
        except (BoundError, dc.NumericError, FloatingPointError) as e:
            problem = str(e)
        if problem is not None:
            report.params, report.adam, report.stop_reason = params, state, "aborted"
            report.wall_clock = time.perf_counter() - t0
            save(epoch)
            raise TrainingAborted(f"epoch {epoch}: {problem}", report)
        report.history.append({"epoch": epoch, "loss": ev.loss, **ev.terms})

        if cfg.cert_every > 0 and i % cfg.cert_every == 0:
            c = certify(scenario, params, ev.tube)
            ok = c.satisfied(scenario.certify.require_goal, scenario.certify.require_invariance)
            report.cert_checks.append({"epoch": epoch, "satisfied": ok, "goal_step": c.goal_step,
                                       "avoids_obstacles": c.avoids_obstacles})
            if ok and cfg.early_stop_on_cert:
                report.stop_reason = "certified"
                break
        w = cfg.plateau_window
        if w > 0 and cfg.plateau_tol > 0 and len(report.history) > w:
            if _window_spread([h["loss"] for h in report.history[-1 - w:]]) < cfg.plateau_tol:
                report.stop_reason = "plateau"
                break

        params = adam_step(state, params, ev.grads)
        if cfg.checkpoint_every > 0 and (i + 1) % cfg.checkpoint_every == 0:
            save(epoch + 1)
        if i % 500 == 0:
            log.info("epoch %d loss %.6g", epoch, ev.loss)
    else:
        epoch = start_epoch + cfg.epochs  # updates applied so far

    report.params, report.adam = params, state
    report.wall_clock = time.perf_counter() - t0
    save(epoch)
    report.tube = rollout_bounds(scenario.closed_loop().graph, params, scenario.X0, scenario.T, scenario.bounds)
    report.cert = certify(scenario, params, report.tube)
    return report
