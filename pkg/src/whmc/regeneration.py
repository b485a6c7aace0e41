"""Regenerative hybrid sampler: Gaussian-mixture independence kernel and retrospective regeneration."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import ModeLibrary
from .targets import log_sum_exp
from .samplers import Sampler, SamplerConfig, Trace, library_hash

LOG_FLOOR = -745.0
LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class IndependenceKernel:
    """Normalized Gaussian mixture at known modes plus the regeneration constant.

    Attributes:
        means: ``(K, D)`` component means.
        covariances: ``(K, D, D)`` component covariances.
        weights: mixture weights summing to one.
        c: positive constant splitting the transition kernel.
        visit_counts: per-mode visit counts that set the weights.
        log_scale: log of the estimated normalizing scale of the target, used
            to put the unnormalized target on the scale of ``q``.
    """

    means: np.ndarray
    covariances: np.ndarray
    weights: np.ndarray
    c: float = 1.0
    visit_counts: tuple = ()
    log_scale: float = 0.0
    _chol: np.ndarray = field(init=False, repr=False)
    _log_norm: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        K, D = self.means.shape
        self.covariances = np.asarray(self.covariances, dtype=float).reshape(K, D, D)
        self.weights = np.asarray(self.weights, dtype=float).ravel()
        if self.weights.shape != (K,) or np.any(self.weights <= 0):
            raise ValueError("weights must be positive, one per component")
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must sum to one")
        if not self.c > 0:
            raise ValueError("c must be positive")
        try:
            self._chol = np.linalg.cholesky(self.covariances)
        except np.linalg.LinAlgError as exc:
            raise ValueError("component covariances must be positive definite") from exc
        log_det = 2.0 * np.log(np.diagonal(self._chol, axis1=1, axis2=2)).sum(axis=1)
        self._log_norm = np.log(self.weights) - 0.5 * (D * LOG_2PI + log_det)

    @property
    def n_components(self):
        return len(self.weights)

    @property
    def dim(self):
        return self.means.shape[1]

    def component_log_densities(self, theta):
        diff = np.asarray(theta, dtype=float) - self.means
        z = np.linalg.solve(self._chol, diff[:, :, None])[:, :, 0]
        return self._log_norm - 0.5 * np.einsum("kd,kd->k", z, z)

    def sample(self, rng, size=None):
        n = 1 if size is None else int(size)
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        eps = rng.standard_normal((n, self.dim))
        draws = self.means[comp] + np.einsum("nij,nj->ni", self._chol[comp], eps)
        return draws[0] if size is None else draws

    def log_weight(self, target, theta):
        """``log(pi(theta) / (Z q(theta)))`` with the log-space floor on ``q``."""
        return target.log_density(theta) - self.log_scale - q_log_density(self, theta)

    def with_c(self, c):
        return IndependenceKernel(self.means, self.covariances, self.weights, c, self.visit_counts, self.log_scale)


def q_log_density(kernel, theta):
    """Log-density of the mixture, floored at ``-745``."""
    return max(log_sum_exp(kernel.component_log_densities(theta)), LOG_FLOOR)


def laplace_log_scale(target, library):
    """Laplace estimate of ``log Z`` summed over the library's modes."""
    D = library.dim
    terms = [
        target.log_density(m.location) + 0.5 * D * LOG_2PI - 0.5 * np.linalg.slogdet(m.hessian)[1] for m in library
    ]
    return log_sum_exp(np.array(terms))


def _regularized_covariance(hessian):
    H = 0.5 * (hessian + hessian.T)
    D = len(H)
    eig = np.linalg.eigvalsh(H)
    if eig[0] <= 0 or eig[-1] / eig[0] > 1e12:
        H = H + 1e-6 * np.trace(H) / D * np.eye(D)
    return np.linalg.inv(H)


def fit_independence_kernel(library, visit_counts=None, target=None, calibration_points=None, log_scale=None):
    """Fit the mixture to the library and recompute the scale estimate and ``c``.

    Args:
        library: non-empty :class:`ModeLibrary`.
        visit_counts: per-mode counts; library counts when omitted.
        target: target density, needed for the scale estimate and for ``c``.
        calibration_points: states whose median ``pi / (Z q)`` sets ``c``
            (``c = 1`` when empty).
        log_scale: override for the log scale estimate.

    Returns:
        IndependenceKernel.
    """
    if len(library) == 0:
        raise ValueError("cannot fit a kernel to an empty library")
    counts = np.asarray(library.visit_counts if visit_counts is None else visit_counts, dtype=float)
    w = np.maximum(1.0, counts)
    w = w / w.sum()
    covs = np.array([_regularized_covariance(m.hessian) for m in library])
    if log_scale is None:
        log_scale = laplace_log_scale(target, library) if target is not None else 0.0
    kernel = IndependenceKernel(library.locations, covs, w, 1.0, tuple(int(c) for c in counts), log_scale)
    if target is not None and calibration_points is not None and len(calibration_points):
        lw = np.array([kernel.log_weight(target, x) for x in calibration_points])
        c = float(np.exp(np.median(lw)))
        if np.isfinite(c) and c > 0:
            kernel = kernel.with_c(c)
    return kernel


def tsq_log(log_weight_t, log_weight_next, log_q_next, log_c):
    """``(log T, log S, log Q)`` from log importance weights ``log(pi / q)`` of the two states."""
    log_T = log_q_next + min(0.0, log_weight_next - log_weight_t)
    log_S = min(0.0, log_c - log_weight_t)
    log_Q = log_q_next + min(0.0, log_weight_next - log_c)
    return log_T, log_S, log_Q


def compute_T_S_Q(kernel, target, theta_t, theta_next):
    """Log-space ``(T, S, Q)`` for a move ``theta_t -> theta_next`` of the independence sampler."""
    lw_t = kernel.log_weight(target, theta_t)
    lw_n = kernel.log_weight(target, theta_next)
    return tsq_log(lw_t, lw_n, q_log_density(kernel, theta_next), np.log(kernel.c))


def regeneration_probability(log_T, log_S, log_Q):
    """``S Q / T`` clamped to ``[0, 1]``; inputs are logs."""
    if log_S == -np.inf or log_Q == -np.inf:
        return 0.0
    return float(np.clip(np.exp(log_S + log_Q - log_T), 0.0, 1.0))


def sample_from_Q(kernel, target, rng, max_proposals=100_000):
    """Rejection sampler for ``Q ∝ q min(1, pi / (Z q c))``.

    Raises:
        RuntimeError: when ``max_proposals`` draws are all rejected.
    """
    log_c = np.log(kernel.c)
    for _ in range(int(max_proposals)):
        theta = kernel.sample(rng)
        if np.log(rng.random()) < min(0.0, kernel.log_weight(target, theta) - log_c):
            return theta
    raise RuntimeError("Q rejection sampler hit its proposal cap; increase c")


@dataclass
class IndependenceResult:
    state: np.ndarray
    accepted: bool
    regenerated: bool
    r: float = 0.0
    discarded: Optional[np.ndarray] = None


def independence_step(theta, target, kernel, rng):
    """Independence Metropolis-Hastings move with retrospective regeneration.

    On acceptance a Bernoulli(r) draw decides regeneration; when it fires the
    accepted proposal is discarded and replaced by a draw from ``Q``.
    """
    theta = np.asarray(theta, dtype=float)
    prop = kernel.sample(rng)
    lw_t = kernel.log_weight(target, theta)
    lw_p = kernel.log_weight(target, prop)
    log_alpha = min(0.0, lw_p - lw_t) if np.isfinite(lw_p) else -np.inf
    if not np.log(rng.random()) < log_alpha:
        return IndependenceResult(theta, False, False)
    r = regeneration_probability(*tsq_log(lw_t, lw_p, q_log_density(kernel, prop), np.log(kernel.c)))
    if rng.random() < r:
        return IndependenceResult(sample_from_Q(kernel, target, rng), True, True, r, prop)
    return IndependenceResult(prop, True, False, r)


# -- visit counting -------------------------------------------------------------


def mahalanobis_sq(points, library):
    """``(n, K)`` squared Mahalanobis distances under each mode's Hessian."""
    pts = np.atleast_2d(points)
    diff = pts[:, None, :] - library.locations[None, :, :]
    return np.einsum("nki,kij,nkj->nk", diff, library.hessians, diff)


def count_visits(points, library, radius=3.0):
    """Number of points within Mahalanobis ``radius`` of each mode."""
    if len(points) == 0 or len(library) == 0:
        return np.zeros(len(library), dtype=int)
    return (mahalanobis_sq(points, library) <= radius**2).sum(axis=0)


# -- hybrid chain ---------------------------------------------------------------


@dataclass
class HybridConfig:
    """Settings of the regenerative hybrid chain.

    Attributes:
        sampler: configuration of the WHMC moves (``variant`` must be ``whmc_aug``).
        alternation: WHMC trajectories per independence step.
        n_starts: optimizer starts per mode search.
        temperature: residual-energy temperature.
        burn_in: iterations before visit counting starts.
        search: run mode search at regenerations.
        visit_radius: Mahalanobis radius of a visit.
        max_calibration: cap on the states used to recompute ``c``.
    """

    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(variant="whmc_aug"))
    alternation: int = 1
    n_starts: int = 20
    temperature: float = 1.05
    burn_in: int = 0
    search: bool = True
    visit_radius: float = 3.0
    max_calibration: int = 2000

    def __post_init__(self):
        if self.alternation < 1:
            raise ValueError("alternation must be at least 1")
        if self.temperature < 1:
            raise ValueError("temperature must be at least 1")


@dataclass
class RegenerationEvent:
    iteration: int
    r: float
    discarded: np.ndarray
    fresh: np.ndarray
    library_before: str
    library_after: str
    new_modes: list = field(default_factory=list)

    def to_json(self):
        return json.dumps(
            {
                "iteration": self.iteration,
                "r": self.r,
                "discarded": np.asarray(self.discarded).tolist(),
                "fresh": np.asarray(self.fresh).tolist(),
                "library_before": self.library_before,
                "library_after": self.library_after,
                "new_modes": [np.asarray(m).tolist() for m in self.new_modes],
            }
        )


def write_events(path, events):
    with open(path, "w") as fh:
        for ev in events:
            fh.write(ev.to_json() + "\n")


@dataclass
class HybridResult:
    trace: Trace
    events: list
    library: ModeLibrary
    kernel: IndependenceKernel


def hybrid_chain(
    theta0,
    target,
    library,
    config=None,
    rng=None,
    n_cycles=None,
    wall_budget=None,
    max_regenerations=None,
    seed=None,
):
    """Alternate WHMC and independence moves, adapting only at regenerations.

    Each cycle runs ``config.alternation`` WHMC trajectories and one
    independence step; every move is recorded in the trace. When the
    independence step regenerates, new modes are searched with the tempered
    residual energy, the library and mirror worlds are rebuilt, and the
    kernel is refitted with accumulated visit counts and a fresh ``c``.

    Args:
        theta0: starting parameter vector.
        target: target density.
        library: initial non-empty mode library.
        config: :class:`HybridConfig`.
        rng: numpy generator (built from ``seed`` if omitted).
        n_cycles: cap on cycles.
        wall_budget: cap on wall-clock seconds.
        max_regenerations: stop after this many regenerations.
        seed: seed for a fresh generator.

    Returns:
        HybridResult.
    """
    from .modesearch import search_new_modes, update_library

    config = config or HybridConfig()
    if n_cycles is None and wall_budget is None and max_regenerations is None:
        raise ValueError("need a stopping rule")
    rng = rng if rng is not None else np.random.default_rng(seed)
    sampler = Sampler(target, config.sampler, library)
    visits = np.array(library.visit_counts, dtype=int)
    kernel = fit_independence_kernel(library, visits, target)
    state = sampler.initial_state(theta0, rng)
    trace = Trace(initial=sampler.project(state).copy())
    events = []
    since_regen = []
    t0 = time.perf_counter()
    cycle = 0

    def record(theta, accepted, jumped, regen=False):
        trace.append(theta, accepted, jumped, 1000.0 * (time.perf_counter() - t0), regen)
        since_regen.append(np.array(theta))
        if len(trace) > config.burn_in:
            hit = count_visits(theta[None, :], library, config.visit_radius)
            visits[: len(hit)] += hit

    while n_cycles is None or cycle < n_cycles:
        if wall_budget is not None and time.perf_counter() - t0 >= wall_budget:
            break
        if max_regenerations is not None and len(events) >= max_regenerations:
            break
        cycle += 1
        for _ in range(config.alternation):
            tr = sampler.step(state, rng)
            state = tr.state
            record(sampler.project(state), tr.accepted, tr.jumped)
        theta = sampler.project(state)
        ind = independence_step(theta, target, kernel, rng)
        if not ind.regenerated:
            if ind.accepted:
                state = _lift(sampler, ind.state, state)
            record(sampler.project(state), ind.accepted, False)
            continue
        before = library_hash(library)
        new_modes = []
        if config.search:
            samples = trace.as_array()
            new_modes, _ = search_new_modes(target, kernel, library, config.n_starts, config.temperature, rng, samples)
            library = update_library(library, new_modes)
            visits = np.concatenate([visits, np.zeros(len(library) - len(visits), dtype=int)])
        library = library.with_counts(visits)
        calib = np.array(since_regen)
        if len(calib) > config.max_calibration:
            calib = calib[rng.choice(len(calib), config.max_calibration, replace=False)]
        kernel = fit_independence_kernel(library, visits, target, calib)
        sampler = Sampler(target, config.sampler, library)
        fresh = sample_from_Q(kernel, target, rng)
        state = _lift(sampler, fresh, state)
        events.append(
            RegenerationEvent(
                len(trace), ind.r, ind.discarded, fresh, before, library_hash(library), [m.location for m in new_modes]
            )
        )
        since_regen = []
        record(sampler.project(state), True, False, regen=True)
    return HybridResult(trace, events, library.with_counts(visits), kernel)


def _lift(sampler, theta, previous_state):
    """Chain state for parameters ``theta`` keeping the previous extra coordinate."""
    if sampler.augmented:
        return np.append(theta, previous_state[-1])
    return np.asarray(theta, dtype=float)
