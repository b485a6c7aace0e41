"""Discrete Hamiltonian flows: leapfrog, generalized leapfrog and mirror-world steps.

Unit mass throughout, so velocity and momentum coincide. ``grad_U`` is the
gradient of the potential energy ``U = -log pi``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import DEFAULT_INFLUENCE, DEFAULT_WORLD_OFFSET, nearest_mode, world_sign


class NumericalError(ArithmeticError):
    """Non-finite quantity inside an integrator."""


@dataclass
class PhaseState:
    position: np.ndarray
    velocity: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.velocity = np.asarray(self.velocity, dtype=float)
        if self.position.shape != self.velocity.shape:
            raise ValueError("position and velocity must have equal lengths")

    def flipped(self):
        return PhaseState(self.position.copy(), -self.velocity)


@dataclass
class TrajectoryOutcome:
    final: PhaseState
    log_jacobian: float = 0.0
    jump_step: Optional[int] = None
    energy_gap: float = 0.0
    fixed_point_converged: bool = True
    destination: Optional[int] = None
    anchor: Optional[int] = None
    log_proposal_ratio: float = 0.0

    @property
    def jumped(self):
        return self.jump_step is not None


def _grad(grad_U, theta):
    g = grad_U(theta)
    if not np.all(np.isfinite(g)):
        raise NumericalError("non-finite gradient")
    return g


def leapfrog_step(state, grad_U, step_size):
    """Half kick, drift, half kick."""
    if step_size <= 0:
        raise ValueError("step_size must be positive")
    e = step_size
    v = state.velocity - 0.5 * e * _grad(grad_U, state.position)
    theta = state.position + e * v
    v = v - 0.5 * e * _grad(grad_U, theta)
    return PhaseState(theta, v)


def leapfrog_trajectory(state, grad_U, step_size, n_steps):
    for _ in range(n_steps):
        state = leapfrog_step(state, grad_U, step_size)
    return state


def generalized_leapfrog_vf(state, grad_U, field, step_size, tol=1e-10, max_iter=10):
    """One step of the implicit leapfrog for ``theta' = v + f(theta, v)``.

    ``field`` is callable as ``field(theta, v)`` and provides
    ``field.jacobian(theta, v)`` (derivative in ``theta``). The implicit drift
    is solved by fixed-point iteration.

    Returns:
        ``(new_state, log_abs_det, converged)``.
    """
    e = step_size
    theta = state.position
    v_half = state.velocity - 0.5 * e * _grad(grad_U, theta)
    f0 = field(theta, v_half)
    new = theta + e * (v_half + f0)
    converged = False
    for _ in range(max_iter):
        nxt = theta + e * (v_half + 0.5 * (f0 + field(new, v_half)))
        delta = np.max(np.abs(nxt - new))
        new = nxt
        if delta <= tol:
            converged = True
            break
    if not np.all(np.isfinite(new)):
        raise NumericalError("non-finite position in generalized leapfrog")
    I = np.eye(theta.size)
    _, logdet_fwd = np.linalg.slogdet(I + 0.5 * e * field.jacobian(theta, v_half))
    _, logdet_bwd = np.linalg.slogdet(I - 0.5 * e * field.jacobian(new, v_half))
    v_new = v_half - 0.5 * e * _grad(grad_U, new)
    return PhaseState(new, v_new), float(logdet_fwd - logdet_bwd), converged


# -- mirror worlds ------------------------------------------------------------


class MirrorWorlds:
    """Wormholes between the real world (``theta_{D+1} = -h``) and the mirror world (``+h``).

    For an augmented position the network runs from the nearest mode in the
    current world to every mode in the opposite world; jump probabilities come
    from the vicinity mollifiers ``exp(-V_k / (D F))`` of those wormholes.
    """

    def __init__(self, library, world_offset=DEFAULT_WORLD_OFFSET, influence_factor=DEFAULT_INFLUENCE):
        if len(library) == 0:
            raise ValueError("mirror worlds need at least one mode")
        if world_offset <= 0:
            raise ValueError("world_offset must be positive for mirror-world jumps")
        self.library = library
        self.h = float(world_offset)
        self.F = float(influence_factor)
        self.locations = library.locations
        self.K, self.dim = self.locations.shape
        self.scale = self.dim * self.F
        covs = np.linalg.inv(library.hessians)
        self.chol = np.linalg.cholesky(covs)
        self.chol_inv = np.linalg.inv(self.chol)
        self.log_det_chol = np.log(np.diagonal(self.chol, axis1=1, axis2=2)).sum(axis=1)

    def endpoints(self, position):
        """Anchor index, anchor point and the ``K`` destination points for ``position``."""
        s = world_sign(position[-1])
        k0 = nearest_mode(position[:-1], self.locations)
        start = np.append(self.locations[k0], s * self.h)
        dest = np.hstack([self.locations, np.full((self.K, 1), -s * self.h)])
        return k0, start, dest

    def mollifiers(self, position):
        k0, a, dest = self.endpoints(position)
        diff = dest - a
        u = diff / np.linalg.norm(diff, axis=1, keepdims=True)
        ta = position - a
        tb = position - dest
        V = tb @ ta + np.abs(u @ ta) * np.abs(np.einsum("kd,kd->k", tb, u))
        return k0, dest, np.exp(-V / self.scale)

    def branch_probabilities(self, position):
        """``(k0, dest, p, p_none)``: per-wormhole jump probabilities and the stay probability."""
        k0, dest, m = self.mollifiers(position)
        total = m.sum()
        if total < 1.0:
            return k0, dest, m, 1.0 - total
        return k0, dest, m / total, 0.0

    def choose(self, position, u, c):
        """Random-vector-field branch from frozen uniforms ``u`` (stay vs. jump) and ``c`` (which wormhole)."""
        k0, dest, p, p_none = self.branch_probabilities(position)
        if u < p_none:
            return None, k0, dest
        cdf = np.cumsum(p) / p.sum()
        k = min(int(np.searchsorted(cdf, c, side="right")), self.K - 1)
        return k, k0, dest

    def reflect(self, position, k0, k):
        """Map ``position`` through the wormhole ``k0 -> k`` into the opposite world.

        The offset from the anchor mode is mirrored through the wormhole
        (pointing back along it from mode ``k``) after reshaping it from mode
        ``k0``'s covariance to mode ``k``'s, and the extra coordinate changes
        sign. An offset that leans towards the destination therefore lands
        leaning back towards the anchor, inside the reverse wormhole's tube.
        Applying the map again through the reverse wormhole ``k -> k0``
        returns the original point.
        Returns ``(new_position, log_abs_det)``.
        """
        offset = self.locations[k0] - position[:-1]
        theta = self.locations[k] + self.chol[k] @ (self.chol_inv[k0] @ offset)
        return np.append(theta, -position[-1]), float(self.log_det_chol[k] - self.log_det_chol[k0])


def stochastic_leapfrog_aug(
    state,
    grad_U,
    worlds,
    step_size,
    rng,
    jump_allowed=True,
    hamiltonian=None,
    max_iter=10,
    tol=1e-10,
):
    """One augmented-space step under the random vector field.

    The field at each evaluation point is either the velocity or
    ``2 (theta*_k - theta) / e`` for a wormhole ``k`` chosen with the
    mollifier probabilities. Branch uniforms are drawn once per evaluation
    point and frozen across the fixed-point iterations; once a jump has been
    taken at the current point the trial point is held to the velocity
    branch (at most one jump). ``jump_allowed=False`` forces the velocity
    branch everywhere.

    Returns a :class:`TrajectoryOutcome` describing the single step;
    ``jump_step`` is 0 when the step jumped.
    """
    e = step_size
    theta = state.position
    v_half = state.velocity - 0.5 * e * _grad(grad_U, theta)
    u0, c0, u1, c1 = rng.random(4)
    if jump_allowed:
        k, _, dest = worlds.choose(theta, u0, c0)
    else:
        k = None
    f0 = v_half if k is None else 2.0 * (dest[k] - theta) / e
    guess = theta.copy()
    converged = False
    for _ in range(max_iter):
        k1 = None
        if jump_allowed and k is None:
            k1, _, dest1 = worlds.choose(guess, u1, c1)
        f1 = v_half if k1 is None else 2.0 * (dest1[k1] - guess) / e
        nxt = theta + 0.5 * e * (f0 + f1)
        delta = np.max(np.abs(nxt - guess))
        guess = nxt
        if delta <= tol:
            converged = True
            break
    v_new = v_half - 0.5 * e * _grad(grad_U, guess)
    final = PhaseState(guess, v_new)
    if k is None:
        return TrajectoryOutcome(final, fixed_point_converged=converged)
    gap = 0.0 if hamiltonian is None else hamiltonian(final) - hamiltonian(state)
    return TrajectoryOutcome(final, jump_step=0, energy_gap=gap, fixed_point_converged=converged, destination=k)


def vf_trajectory(state, grad_U, field, step_size, n_steps, tol=1e-10, max_iter=10):
    """``n_steps`` generalized leapfrog steps with the accumulated log-Jacobian."""
    total = 0.0
    converged = True
    for _ in range(n_steps):
        state, logdet, ok = generalized_leapfrog_vf(state, grad_U, field, step_size, tol, max_iter)
        total += logdet
        converged = converged and ok
    return TrajectoryOutcome(state, log_jacobian=total, fixed_point_converged=converged)


def mirror_jump_trajectory(state, grad_U, worlds, step_size, n_steps, rng=None, decision=None):
    """Leapfrog trajectory in the augmented space with one reversible jump opportunity.

    One step index is drawn uniformly. At the midpoint of that step's drift the
    wormhole branch is drawn from the mollifier probabilities; if a wormhole
    ``k`` is chosen the position is mapped through
    :meth:`MirrorWorlds.reflect` and the drift continues from the image.
    The reverse trajectory reaches the image at the mirrored step index, so
    the proposal ratio needs only the branch probability of returning to the
    anchor from the image and the Jacobian of the reflection.

    Args:
        state: augmented :class:`PhaseState`.
        grad_U: gradient of the augmented potential.
        worlds: :class:`MirrorWorlds`.
        step_size: leapfrog step size.
        n_steps: number of leapfrog steps.
        rng: generator used for the decision step and the branch.
        decision: optional ``(step, branch)`` replayed instead of drawing,
            where ``branch`` is a mode index or ``None`` for no jump.

    Returns:
        TrajectoryOutcome whose ``log_jacobian`` holds the reflection's
        log-determinant and ``log_proposal_ratio`` the reverse-over-forward
        branch probability (``-inf`` when the jump cannot be reversed).
    """
    e = step_size
    if decision is None:
        step, u = int(rng.integers(n_steps)), float(rng.random())
    else:
        step, u = int(decision[0]), None
    x, p = state.position, state.velocity
    out = TrajectoryOutcome(state)
    for i in range(n_steps):
        p = p - 0.5 * e * _grad(grad_U, x)
        y = x + 0.5 * e * p
        if i == step:
            k0, _, probs, p_none = worlds.branch_probabilities(y)
            if decision is None:
                k = None if u < p_none else _pick(probs, u - p_none)
            else:
                k = decision[1]
            if k is not None:
                y_new, logdet = worlds.reflect(y, k0, k)
                back, _, probs_back, _ = worlds.branch_probabilities(y_new)
                if back != k or probs[k] <= 0 or probs_back[k0] <= 0:
                    ratio = -np.inf
                else:
                    ratio = float(np.log(probs_back[k0]) - np.log(probs[k]))
                out = TrajectoryOutcome(
                    state, log_jacobian=logdet, jump_step=i, destination=k, anchor=k0, log_proposal_ratio=ratio
                )
                y = y_new
        x = y + 0.5 * e * p
        p = p - 0.5 * e * _grad(grad_U, x)
    out.final = PhaseState(x, p)
    return out


def _pick(probs, u):
    k = int(np.searchsorted(np.cumsum(probs), u, side="right"))
    return min(k, len(probs) - 1)


def stochastic_aug_trajectory(state, grad_U, worlds, step_size, n_steps, rng, hamiltonian, max_iter=10, tol=1e-10):
    """``n_steps`` random-vector-field steps with at most one jump.

    After the first jump the remaining steps are forced onto the velocity
    branch. The returned outcome carries the jump step and energy gap of
    that jump; ``fixed_point_converged`` is false if any solve failed.
    """
    out = TrajectoryOutcome(state)
    converged = True
    for i in range(n_steps):
        step = stochastic_leapfrog_aug(
            state, grad_U, worlds, step_size, rng, not out.jumped, hamiltonian, max_iter, tol
        )
        converged = converged and step.fixed_point_converged
        if step.jumped:
            out = TrajectoryOutcome(state, jump_step=i, energy_gap=step.energy_gap, destination=step.destination)
        state = step.final
    out.final = state
    out.fixed_point_converged = converged
    return out
