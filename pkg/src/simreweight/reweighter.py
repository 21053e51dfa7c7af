"""Bilevel sample reweighting solved with a two-phase cutting-plane method.

The upper level chooses one logit ``w_i`` per simulated sample so that the
model fitted to the sigmoid-weighted simulated loss does well on real
validation data. The lower-level argmin is replaced by ``K`` unrolled gradient
steps ``psi(w)``, and the coupling becomes the constraint

    h(w, phi) = |phi - psi(w)|_1 / n_params <= eps.

Phase 1 runs primal descent / dual ascent on the Lagrangian over a set of
linear cuts of that constraint, adding a cut (tangent to ``h - eps``) and
pruning inactive ones every ``manage_every`` iterations. Phase 2 freezes the
cuts and multipliers and descends a squared-hinge penalty instead.

The plane terms are linear (phase 1) or piecewise quadratic (phase 2) in
``(w, phi)``, so only cut insertion needs the hypergradient through the
unrolled inner steps; every other iteration costs one validation gradient.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, Diverged, NonFiniteGradient, NonFiniteValue
from .params import ParamVector

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ["iter", "phase", "G", "g", "h", "n_planes", "max_mu"]
WEIGHT_COLUMNS = ["sample_id", "raw_w", "sigmoid_w"]
PLANE_OFFSETS = ("residual", "paper")
ANCHORS = ("warm", "fixed")


@dataclass
class ReweightConfig:
    K: int = 3
    inner_lr: float = 0.05
    epsilon: float = 0.01
    lr_w: float = 0.05
    lr_phi: float = 0.01
    lr_mu: float = 0.1
    phase1_iters: int = 300
    manage_every: int = 25
    max_iters: int = 600
    mu_init: float = 1.0
    inactive_tol: float = 1e-8
    tol: float = 1e-6
    plane_offset: str = "residual"
    anchor: str = "warm"
    log_every: int = 1
    retrain_with_weights: bool = False
    w_bound: float | None = None  # project logits onto [-w_bound, w_bound] after each step
    penalty_scale: float = 1.0  # multiplies the phase-2 hinge penalty; 1.0 is the plain form

    def validate(self) -> "ReweightConfig":
        positive = ("K", "epsilon", "lr_w", "lr_phi", "lr_mu", "manage_every", "max_iters",
                    "mu_init", "inactive_tol", "tol", "log_every", "penalty_scale")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"reweight.{name} must be positive")
        if self.w_bound is not None and not self.w_bound > 0:
            raise ConfigError("reweight.w_bound must be positive when set")
        if self.inner_lr < 0:
            raise ConfigError("reweight.inner_lr must be nonnegative")
        if not 0 <= self.phase1_iters <= self.max_iters:
            raise ConfigError("reweight.phase1_iters must lie in [0, max_iters]")
        if self.plane_offset not in PLANE_OFFSETS:
            raise ConfigError(f"reweight.plane_offset must be one of {PLANE_OFFSETS}")
        if self.anchor not in ANCHORS:
            raise ConfigError(f"reweight.anchor must be one of {ANCHORS}")
        return self


class BilevelProblem:
    """The data side of the bilevel program.

    sim_losses(phi) -> Tensor [n_sim] of per-sample training losses;
    val_loss(phi) -> scalar Tensor. ``phi`` is a name -> Tensor mapping laid
    out like ``params``.
    """

    def __init__(self, params: ParamVector, sim_losses: Callable, val_loss: Callable,
                 n_sim: int, sample_ids=None):
        self.params = params
        self.sim_losses = sim_losses
        self.val_loss = val_loss
        self.n_sim = int(n_sim)
        self.sample_ids = np.arange(n_sim) if sample_ids is None else np.asarray(sample_ids)
        if len(self.sample_ids) != self.n_sim:
            raise ConfigError("sample_ids must have one entry per simulated sample")

    @property
    def n_params(self) -> int:
        return len(self.params)

    def unflatten(self, flat, requires_grad: bool = False) -> dict:
        return self.params.with_flat(flat).tensors(requires_grad)

    def flat_tensor(self, phi: dict) -> ad.Tensor:
        return ad.concat([ad.reshape(phi[k], (-1,)) for k in self.params.names()])


@dataclass
class CuttingPlane:
    a: np.ndarray
    b: np.ndarray
    c: float
    mu: float
    plane_id: int
    born: int

    def value(self, w: np.ndarray, phi: np.ndarray) -> float:
        return float(self.a @ w + self.b @ phi + self.c)


@dataclass
class ReweightState:
    w: np.ndarray
    phi: np.ndarray
    anchor: np.ndarray
    planes: list = field(default_factory=list)
    t: int = 0
    next_id: int = 0
    removed: set = field(default_factory=set)
    insertions: list = field(default_factory=list)  # (plane_id, residual at insertion, h - eps)


@dataclass
class ReweightResult:
    w: np.ndarray
    params: ParamVector
    planes: list
    history: list
    state: ReweightState

    @property
    def sigmoid_w(self) -> np.ndarray:
        return sigmoid(self.w)


def sigmoid(x) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


# ---------------------------------------------------------------- objectives


def _as_phi(problem: BilevelProblem, phi) -> dict:
    return problem.unflatten(phi) if isinstance(phi, np.ndarray) else phi


def inner_loss_g(problem: BilevelProblem, w, phi) -> ad.Tensor:
    """Mean over simulated samples of sigmoid(w_i) * loss_i(phi)."""
    w = ad.as_tensor(w)
    if w.shape != (problem.n_sim,):
        raise ConfigError(f"expected {problem.n_sim} sample weights, got shape {w.shape}")
    losses = problem.sim_losses(_as_phi(problem, phi))
    return ad.mean(ad.mul(ad.sigmoid(w), losses))


def outer_loss_G(problem: BilevelProblem, phi) -> ad.Tensor:
    return problem.val_loss(_as_phi(problem, phi))


def k_step_inner(problem: BilevelProblem, w, phi0, K: int, lr: float,
                 create_graph: bool = True) -> tuple:
    """Unroll K gradient steps on the weighted simulated loss from ``phi0``.

    Returns (psi, trace): psi is the final name -> Tensor mapping, trace the
    list of intermediate mappings. With ``create_graph`` the whole trace stays
    differentiable with respect to ``w``.
    """
    if K < 1:
        raise ConfigError("K must be at least 1")
    phi = _as_phi(problem, phi0)
    if create_graph:
        # the start point must be on the tape for grad(g, phi) to be nonzero
        phi = {k: v if v.requires_grad else ad.Tensor(v.data, True) for k, v in phi.items()}
    names = problem.params.names()
    trace = [phi]
    with ad.set_grad_enabled(True):
        for _ in range(K):
            leaves = phi if create_graph else {k: ad.Tensor(v.data, True) for k, v in phi.items()}
            g = inner_loss_g(problem, w, leaves)
            try:
                grads = ad.grad(g, [leaves[k] for k in names], create_graph=create_graph)
            except NonFiniteValue as exc:
                raise NonFiniteGradient(str(exc)) from exc
            if create_graph:
                phi = {k: ad.sub(leaves[k], ad.mul(gk, lr)) for k, gk in zip(names, grads)}
            else:
                phi = {k: ad.Tensor(leaves[k].data - lr * gk.data) for k, gk in zip(names, grads)}
            trace.append(phi)
    return phi, trace


def constraint_h(problem: BilevelProblem, w, phi, anchor, cfg: ReweightConfig,
                 create_graph: bool = True) -> ad.Tensor:
    """Per-parameter l1 gap between ``phi`` and the unrolled solution psi(w)."""
    psi, _ = k_step_inner(problem, w, anchor, cfg.K, cfg.inner_lr, create_graph)
    gap = ad.sub(problem.flat_tensor(_as_phi(problem, phi)), problem.flat_tensor(psi))
    return ad.mul(ad.tsum(ad.absolute(gap)), 1.0 / problem.n_params)


def _plane_arrays(planes: list) -> tuple:
    A = np.stack([p.a for p in planes])
    B = np.stack([p.b for p in planes])
    c = np.array([p.c for p in planes])
    mu = np.array([p.mu for p in planes])
    return A, B, c, mu


def _plane_values(planes: list, w, phi_flat) -> ad.Tensor:
    A, B, c, _ = _plane_arrays(planes)
    vw = ad.reshape(ad.matmul(A, ad.reshape(w, (-1, 1))), (-1,))
    vp = ad.reshape(ad.matmul(B, ad.reshape(phi_flat, (-1, 1))), (-1,))
    return ad.add(ad.add(vw, vp), c)


def lagrangian_Lq(problem: BilevelProblem, w, phi, planes: list, mu=None) -> ad.Tensor:
    """G + sum_l mu_l (a_l.w + b_l.phi + c_l); ``mu`` may be a Tensor for ascent."""
    phi = _as_phi(problem, phi)
    G = outer_loss_G(problem, phi)
    if not planes:
        return G
    mu = np.array([p.mu for p in planes]) if mu is None else mu
    values = _plane_values(planes, w, problem.flat_tensor(phi))
    return ad.add(G, ad.tsum(ad.mul(mu, values)))


def penalty_Lhat(problem: BilevelProblem, w, phi, planes: list, scale: float = 1.0) -> ad.Tensor:
    """G + scale * sum_l mu_l max(0, a_l.w + b_l.phi + c_l)^2."""
    phi = _as_phi(problem, phi)
    G = outer_loss_G(problem, phi)
    if not planes:
        return G
    mu = scale * np.array([p.mu for p in planes])
    hinge = ad.relu(_plane_values(planes, w, problem.flat_tensor(phi)))
    return ad.add(G, ad.tsum(ad.mul(mu, ad.mul(hinge, hinge))))


# ---------------------------------------------------------------- iterations


def _objective_grads(problem: BilevelProblem, state: ReweightState, objective) -> tuple:
    w = ad.Tensor(state.w, requires_grad=True)
    phi = problem.unflatten(state.phi, requires_grad=True)
    mu = ad.Tensor(np.array([p.mu for p in state.planes]), requires_grad=True)
    with ad.set_grad_enabled(True):
        value = objective(w, phi, mu)
    if not np.isfinite(value.item()):
        raise Diverged(f"non-finite objective at iteration {state.t}")
    names = problem.params.names()
    grads = ad.grad(value, [w, mu] + [phi[k] for k in names])
    g_phi = np.concatenate([g.data.ravel() for g in grads[2:]])
    return value.item(), grads[0].data, grads[1].data, g_phi


def _project_w(w: np.ndarray, cfg: ReweightConfig) -> np.ndarray:
    return w if cfg.w_bound is None else np.clip(w, -cfg.w_bound, cfg.w_bound)


def phase1_step(problem: BilevelProblem, state: ReweightState, cfg: ReweightConfig) -> ReweightState:
    """Descent in (w, phi) on L_q, then projected ascent in mu.

    The multiplier gradient (each plane's value) is taken at the updated
    primal point; evaluating it at the old point turns the bilinear w-mu
    coupling into an expanding spiral.
    """
    _, gw, _, gphi = _objective_grads(
        problem, state, lambda w, phi, mu: lagrangian_Lq(problem, w, phi, state.planes, mu))
    state.w = _project_w(state.w - cfg.lr_w * gw, cfg)
    state.phi = state.phi - cfg.lr_phi * gphi
    for plane in state.planes:
        plane.mu = max(0.0, plane.mu + cfg.lr_mu * plane.value(state.w, state.phi))
    state.t += 1
    return state


def phase2_step(problem: BilevelProblem, state: ReweightState, cfg: ReweightConfig) -> ReweightState:
    """Descent in (w, phi) on the frozen penalty objective."""
    _, gw, _, gphi = _objective_grads(
        problem, state, lambda w, phi, mu: penalty_Lhat(problem, w, phi, state.planes,
                                                cfg.penalty_scale))
    state.w = _project_w(state.w - cfg.lr_w * gw, cfg)
    state.phi = state.phi - cfg.lr_phi * gphi
    state.t += 1
    return state


def manage_polyhedron(problem: BilevelProblem, state: ReweightState,
                      cfg: ReweightConfig) -> ReweightState:
    """Prune cuts whose multiplier died, then add a tangent cut if h > eps."""
    kept = []
    for plane in state.planes:
        if plane.mu <= cfg.inactive_tol:
            state.removed.add(plane.plane_id)
        else:
            kept.append(plane)
    state.planes = kept
    if cfg.anchor == "warm":
        state.anchor = state.phi.copy()
    w = ad.Tensor(state.w, requires_grad=True)
    phi = problem.unflatten(state.phi, requires_grad=True)
    with ad.set_grad_enabled(True):
        h = constraint_h(problem, w, phi, problem.unflatten(state.anchor), cfg, create_graph=True)
    h_val = h.item()
    if not np.isfinite(h_val):
        raise NonFiniteGradient(f"non-finite constraint value at iteration {state.t}")
    if h_val <= cfg.epsilon:
        return state
    names = problem.params.names()
    try:
        grads = ad.grad(h, [w] + [phi[k] for k in names])
    except NonFiniteValue as exc:
        raise NonFiniteGradient(str(exc)) from exc
    a = grads[0].data.copy()
    b = np.concatenate([g.data.ravel() for g in grads[1:]])
    shift = cfg.epsilon if cfg.plane_offset == "residual" else 0.0
    c = h_val - float(a @ state.w) - float(b @ state.phi) - shift
    plane = CuttingPlane(a, b, c, cfg.mu_init, state.next_id, state.t)
    state.next_id += 1
    state.planes.append(plane)
    state.insertions.append((plane.plane_id, plane.value(state.w, state.phi), h_val - shift))
    return state


def _history_row(problem: BilevelProblem, state: ReweightState, cfg: ReweightConfig,
                 phase: int, it: int, full: bool) -> dict:
    with ad.no_grad():
        G = outer_loss_G(problem, state.phi).item()
    row = {"iter": it, "phase": phase, "G": G, "g": "", "h": "",
           "n_planes": len(state.planes),
           "max_mu": max((p.mu for p in state.planes), default=0.0)}
    if full:
        with ad.no_grad():
            row["g"] = inner_loss_g(problem, state.w, state.phi).item()
        row["h"] = constraint_h(problem, state.w, state.phi, state.anchor, cfg,
                                create_graph=False).item()
    if not np.isfinite(G):
        raise Diverged(f"non-finite validation objective at iteration {it}")
    return row


def run(problem: BilevelProblem, cfg: ReweightConfig, w0=None, phi0=None,
        callback: Callable | None = None) -> ReweightResult:
    """Full two-phase schedule; ``callback(state)`` is invoked after every iteration."""
    cfg.validate()
    w = np.zeros(problem.n_sim) if w0 is None else np.array(w0, dtype=np.float64)
    phi = problem.params.flat.copy() if phi0 is None else np.array(phi0, dtype=np.float64)
    state = ReweightState(w=w, phi=phi, anchor=phi.copy())
    history = []
    for it in range(cfg.max_iters):
        phase = 1 if it < cfg.phase1_iters else 2
        if phase == 1 and it > 0 and it % cfg.manage_every == 0:
            manage_polyhedron(problem, state, cfg)
        history.append(_history_row(problem, state, cfg, phase, it, it % cfg.log_every == 0))
        w_prev, phi_prev = state.w, state.phi
        if phase == 1:
            phase1_step(problem, state, cfg)
        else:
            phase2_step(problem, state, cfg)
        if callback is not None:
            callback(state)
        if not (np.all(np.isfinite(state.w)) and np.all(np.isfinite(state.phi))):
            raise Diverged(f"iterates became non-finite at iteration {it}")
        if phase == 2 and (np.max(np.abs(state.phi - phi_prev), initial=0.0) < cfg.tol
                           and np.max(np.abs(state.w - w_prev), initial=0.0) < cfg.tol):
            log.info("phase 2 converged at iteration %d", it)
            break
    log.info("reweighting finished after %d iterations with %d planes", state.t, len(state.planes))
    return ReweightResult(state.w, problem.params.with_flat(state.phi), state.planes, history, state)


def weights_rows(problem: BilevelProblem, w: np.ndarray) -> list:
    s = sigmoid(w)
    return [{"sample_id": int(i), "raw_w": float(wi), "sigmoid_w": float(si)}
            for i, wi, si in zip(problem.sample_ids, w, s)]
