"""Mode discovery: BFGS on the tempered residual energy and library maintenance."""

from __future__ import annotations

import logging
from collections import namedtuple
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .geometry import Mode, ModeLibrary
from .regeneration import q_log_density

log = logging.getLogger(__name__)

BFGSResult = namedtuple("BFGSResult", ["x", "fun", "converged"])


def bfgs_minimize(f, grad, x0, tol=1e-6, max_iter=200, c1=1e-4, shrink=0.5, max_backtrack=60):
    """BFGS with inverse-Hessian updates and Armijo backtracking.

    Stops when ``max|grad| <= tol``. A failed line search returns the best
    iterate with ``converged = False``.

    Returns:
        BFGSResult ``(x, fun, converged)``.
    """
    x = np.array(x0, dtype=float)
    fx = float(f(x))
    g = np.asarray(grad(x), dtype=float)
    n = x.size
    Hinv = np.eye(n)
    first = True
    for _ in range(int(max_iter)):
        if np.max(np.abs(g)) <= tol:
            return BFGSResult(x, fx, True)
        d = -Hinv @ g
        slope = g @ d
        if slope >= 0:
            Hinv = np.eye(n)
            d = -g
            slope = -(g @ g)
        t = 1.0
        for _ in range(max_backtrack):
            x_new = x + t * d
            f_new = float(f(x_new))
            if np.isfinite(f_new) and f_new <= fx + c1 * t * slope:
                break
            t *= shrink
        else:
            return BFGSResult(x, fx, False)
        g_new = np.asarray(grad(x_new), dtype=float)
        s = x_new - x
        y = g_new - g
        sy = s @ y
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            if first:
                Hinv = (sy / (y @ y)) * np.eye(n)
                first = False
            rho = 1.0 / sy
            V = np.eye(n) - rho * np.outer(s, y)
            Hinv = V @ Hinv @ V.T + rho * np.outer(s, s)
        x, fx, g = x_new, f_new, g_new
    return BFGSResult(x, fx, bool(np.max(np.abs(g)) <= tol))


@dataclass
class ResidualEnergy:
    """``-log(max(pi/Z - q^(1/T) + c_r, c_r/2))`` for a target and a fitted kernel.

    ``pi/Z`` uses the kernel's log scale estimate. ``floor`` defaults to
    ``1e-8`` times the largest scaled target density over the kernel's
    component means.
    """

    target: object
    kernel: object
    temperature: float = 1.05
    floor: float = None

    def __post_init__(self):
        if self.temperature < 1:
            raise ValueError("temperature must be at least 1")
        if self.floor is None:
            peak = max(self.target.log_density(m) for m in self.kernel.means) - self.kernel.log_scale
            self.floor = 1e-8 * float(np.exp(peak))
        if not self.floor > 0:
            raise ValueError("floor constant must be positive")

    def _parts(self, theta):
        log_pi = self.target.log_density(theta) - self.kernel.log_scale
        log_q = q_log_density(self.kernel, theta)
        pi = np.exp(log_pi)
        qt = np.exp(log_q / self.temperature)
        return pi, qt, pi - qt + self.floor


def residual_energy(re, theta):
    _, _, inner = re._parts(np.asarray(theta, dtype=float))
    return float(-np.log(max(inner, 0.5 * re.floor)))


def residual_energy_grad(re, theta):
    """Analytic gradient of :func:`residual_energy`; zero where the clamp is active."""
    theta = np.asarray(theta, dtype=float)
    pi, qt, inner = re._parts(theta)
    if inner <= 0.5 * re.floor:
        return np.zeros_like(theta)
    k = re.kernel
    comp = k.component_log_densities(theta)
    resp = np.exp(comp - comp.max())
    resp /= resp.sum()
    diff = theta - k.means
    prec_diff = np.linalg.solve(k.covariances, diff[:, :, None])[:, :, 0]
    grad_log_q = -(resp @ prec_diff)
    if q_log_density(k, theta) <= -745.0:
        grad_log_q = np.zeros_like(theta)
    grad_inner = pi * re.target.grad_log_density(theta) - qt / re.temperature * grad_log_q
    return -grad_inner / inner


def finite_difference_hessian(target, theta, step=1e-5):
    """Hessian of ``-log pi`` by central differences of the gradient, symmetrized."""
    theta = np.asarray(theta, dtype=float)
    D = theta.size
    H = np.empty((D, D))
    for i in range(D):
        e = np.zeros(D)
        e[i] = step
        H[:, i] = -(target.grad_log_density(theta + e) - target.grad_log_density(theta - e)) / (2 * step)
    return 0.5 * (H + H.T)


def dedup_threshold(library):
    if len(library) < 2:
        return 1e-3
    locs = library.locations
    return 1e-2 * float(np.mean([np.linalg.norm(locs[i] - locs[j]) for i, j in combinations(range(len(locs)), 2)]))


def update_library(library, new_modes, threshold=None):
    """Append modes not within ``threshold`` of an existing or earlier new mode.

    New modes get zero visit counts; existing order and counts are kept.
    """
    thr = dedup_threshold(library) if threshold is None else threshold
    modes = list(library.modes)
    counts = list(library.visit_counts)
    for m in new_modes:
        if any(np.linalg.norm(m.location - old.location) <= thr for old in modes):
            log.info("skipping duplicate mode at %s", m.location)
            continue
        modes.append(m)
        counts.append(0)
    return ModeLibrary(tuple(modes), tuple(counts))


def start_distribution(samples, library, scale=4.0):
    """Mean and covariance of the optimizer start distribution."""
    pts = np.asarray(samples, dtype=float) if samples is not None and len(samples) else None
    D = library.dim
    if pts is None or len(pts) <= D:
        # too little history: spread over the library, widened by the mode covariances
        pts = library.locations
        spread = np.mean(np.linalg.inv(library.hessians), axis=0)
    else:
        spread = np.zeros((D, D))
    mean = pts.mean(axis=0)
    cov = np.atleast_2d(np.cov(pts.T)) if len(pts) > 1 else np.zeros((D, D))
    cov = cov + spread + 1e-6 * max(np.trace(cov) / D, 1.0) * np.eye(D)
    return mean, scale * cov


@dataclass
class StartReport:
    start: np.ndarray
    end: np.ndarray
    converged: bool
    energy: float
    outcome: str

    def to_dict(self):
        return {
            "start": self.start.tolist(),
            "end": self.end.tolist(),
            "converged": self.converged,
            "energy": self.energy,
            "outcome": self.outcome,
        }


def polish_mode(target, theta, tol=1e-6, max_iter=20):
    """Short BFGS on ``-log pi``; returns a :class:`Mode` or ``None`` when it does not qualify."""
    res = bfgs_minimize(target.potential, target.grad_potential, theta, tol=tol, max_iter=max_iter)
    if not res.converged or np.max(np.abs(target.grad_log_density(res.x))) > 10 * tol:
        return None
    H = finite_difference_hessian(target, res.x)
    if not np.all(np.isfinite(H)) or np.linalg.eigvalsh(H)[0] <= 0:
        return None
    return Mode(res.x, H)


def search_new_modes(
    target,
    kernel,
    library,
    n_starts,
    temperature,
    rng,
    samples=None,
    starts=None,
    tol=1e-6,
    max_iter=200,
    use_residual=True,
):
    """Multi-start search for modes missing from ``library``.

    Each start is minimized on the tempered residual energy (or on the plain
    potential when ``use_residual`` is false), then re-polished on the plain
    potential. Minima on the clamped plateau, failed polishes and duplicates
    of library modes are dropped.

    Args:
        target: target density.
        kernel: fitted :class:`IndependenceKernel`.
        library: current library.
        n_starts: number of random starts.
        temperature: residual temperature.
        rng: numpy generator.
        samples: chain history for the start distribution.
        starts: explicit ``(n, D)`` start points overriding the random draw.
        tol: gradient tolerance.
        max_iter: BFGS iteration cap on the residual.
        use_residual: minimize the residual energy instead of the potential.

    Returns:
        ``(new_modes, reports)``: modes ordered by potential then location,
        and one :class:`StartReport` per start.
    """
    if starts is None:
        mean, cov = start_distribution(samples, library)
        starts = rng.multivariate_normal(mean, cov, size=int(n_starts))
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    re = ResidualEnergy(target, kernel, temperature) if use_residual else None
    thr = dedup_threshold(library)
    found = []
    reports = []
    for x0 in starts:
        if use_residual:
            res = bfgs_minimize(
                lambda x: residual_energy(re, x), lambda x: residual_energy_grad(re, x), x0, tol, max_iter
            )
            on_plateau = re._parts(res.x)[2] <= 0.5 * re.floor or residual_energy(re, res.x) >= -np.log(re.floor) - 1e-9
            if on_plateau:
                reports.append(StartReport(x0, res.x, res.converged, res.fun, "plateau"))
                continue
        else:
            res = bfgs_minimize(target.potential, target.grad_potential, x0, tol, max_iter)
        mode = polish_mode(target, res.x, tol)
        if mode is None:
            reports.append(StartReport(x0, res.x, res.converged, res.fun, "rejected"))
            continue
        if any(np.linalg.norm(mode.location - m.location) <= thr for m in library):
            reports.append(StartReport(x0, mode.location, res.converged, res.fun, "known"))
            continue
        reports.append(StartReport(x0, mode.location, res.converged, res.fun, "new"))
        found.append((target.potential(mode.location), tuple(mode.location), mode))
    found.sort(key=lambda t: (t[0], t[1]))
    unique = []
    for _, _, m in found:
        if all(np.linalg.norm(m.location - u.location) > thr for u in unique):
            unique.append(m)
    return unique, reports


def known_basin_fraction(end_points, library, radius=1.0):
    """Fraction of end points within Mahalanobis ``radius`` of a library mode."""
    pts = np.atleast_2d(np.asarray(end_points, dtype=float))
    if len(pts) == 0:
        return 0.0
    diff = pts[:, None, :] - library.locations[None]
    d2 = np.einsum("nki,kij,nkj->nk", diff, library.hessians, diff)
    return float(np.mean(d2.min(axis=1) <= radius**2))


def laplace_weights(target, library):
    """Normalized Laplace masses ``pi(mu_k) |H_k|^(-1/2)`` of the library modes."""
    if len(library) == 0:
        return np.zeros(0)
    lm = np.array([target.log_density(m.location) - 0.5 * np.linalg.slogdet(m.hessian)[1] for m in library])
    w = np.exp(lm - lm.max())
    return w / w.sum()


def prune_library(target, library, min_weight=1e-3):
    """Keep modes with Laplace weight above ``min_weight``, heaviest first."""
    w = laplace_weights(target, library)
    order = np.argsort(-w, kind="stable")
    return ModeLibrary(tuple(library[i] for i in order if w[i] > min_weight))


def optimizer_library(target, starts, tol=1e-6, max_iter=2000, min_weight=None):
    """Library from plain-energy BFGS runs at ``starts``, deduplicated and optionally pruned."""
    new, _ = search_new_modes(
        target, None, ModeLibrary(), len(starts), 1.0, None, starts=starts, tol=tol, max_iter=max_iter,
        use_residual=False,
    )
    lib = update_library(ModeLibrary(), new)
    return lib if min_weight is None else prune_library(target, lib, min_weight)
