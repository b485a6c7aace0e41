"""Metropolis transition kernels (HMC, vector-field WHMC, mirror-world WHMC) and chain drivers."""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import ModeLibrary, NetworkVectorField, WormholeNetwork
from .integrators import (
    MirrorWorlds,
    NumericalError,
    PhaseState,
    leapfrog_trajectory,
    mirror_jump_trajectory,
    stochastic_aug_trajectory,
    vf_trajectory,
)

VARIANTS = ("hmc", "whmc_vf", "whmc_aug")
JUMP_RULES = ("reversible", "paper")


@dataclass
class SamplerConfig:
    """Tuning of a single sampler.

    Attributes:
        step_size: leapfrog step size.
        n_leapfrog: leapfrog steps per trajectory.
        epsilon: wormhole metric contraction, in (0, 1).
        influence: mollifier influence factor.
        world_offset: distance of the two worlds from the origin of the extra coordinate.
        variant: one of ``hmc``, ``whmc_vf``, ``whmc_aug``.
        jump_rule: ``reversible`` (default) or ``paper`` for the mirror-world variant.
        fixed_point_tol: early-exit tolerance of implicit solves.
        fixed_point_max_iter: iteration cap of implicit solves.
    """

    step_size: float = 0.1
    n_leapfrog: int = 20
    epsilon: float = 0.03
    influence: float = 0.3
    world_offset: float = 1.0
    variant: str = "hmc"
    jump_rule: str = "reversible"
    fixed_point_tol: float = 1e-10
    fixed_point_max_iter: int = 10

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if int(self.n_leapfrog) < 1:
            raise ValueError("n_leapfrog must be at least 1")
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if not self.influence > 0:
            raise ValueError("influence must be positive")
        if self.world_offset < 0:
            raise ValueError("world_offset must be nonnegative")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.jump_rule not in JUMP_RULES:
            raise ValueError(f"unknown jump_rule {self.jump_rule!r}")
        self.n_leapfrog = int(self.n_leapfrog)

    @classmethod
    def from_dict(cls, data):
        known = {k: data[k] for k in cls.__dataclass_fields__ if k in data}
        return cls(**known)

    def to_dict(self):
        return asdict(self)


@dataclass
class Transition:
    state: np.ndarray
    accepted: bool
    jumped: bool = False


def _safe_log_accept(log_alpha):
    return log_alpha if np.isfinite(log_alpha) else -np.inf


def _metropolis(rng, log_alpha):
    log_alpha = _safe_log_accept(log_alpha)
    return bool(np.log(rng.random()) < log_alpha)


def hmc_transition(theta, target, config, rng):
    """One HMC trajectory with Metropolis correction. Returns ``(theta', accepted)``."""
    theta = np.asarray(theta, dtype=float)
    v = rng.standard_normal(theta.size)
    try:
        H0 = target.potential(theta) + 0.5 * v @ v
        end = leapfrog_trajectory(PhaseState(theta, v), target.grad_potential, config.step_size, config.n_leapfrog)
        H1 = target.potential(end.position) + 0.5 * end.velocity @ end.velocity
        log_alpha = H0 - H1
    except (NumericalError, FloatingPointError):
        log_alpha = -np.inf
    if _metropolis(rng, log_alpha):
        return end.position, True
    return theta, False


def whmc_vf_transition(theta, target, field, config, rng):
    """One trajectory of the vector-field dynamics, accepted with the Jacobian-adjusted ratio.

    ``field`` is a :class:`NetworkVectorField`; an empty field gives HMC.
    Returns ``(theta', accepted)``.
    """
    theta = np.asarray(theta, dtype=float)
    v = rng.standard_normal(theta.size)
    try:
        H0 = target.potential(theta) + 0.5 * v @ v
        out = vf_trajectory(
            PhaseState(theta, v),
            target.grad_potential,
            field,
            config.step_size,
            config.n_leapfrog,
            config.fixed_point_tol,
            config.fixed_point_max_iter,
        )
        end = out.final
        H1 = target.potential(end.position) + 0.5 * end.velocity @ end.velocity
        log_alpha = H0 - H1 + out.log_jacobian if out.fixed_point_converged else -np.inf
    except (NumericalError, FloatingPointError):
        log_alpha = -np.inf
    if _metropolis(rng, log_alpha):
        return end.position, True
    return theta, False


def augmented_potential(target, x):
    return target.potential(x[:-1]) + 0.5 * x[-1] ** 2


def augmented_grad_potential(target, x):
    return np.append(target.grad_potential(x[:-1]), x[-1])


def whmc_aug_transition(state, target, worlds, config, rng):
    """One mirror-world trajectory on the augmented state ``(theta, theta_{D+1})``.

    With ``config.jump_rule == "reversible"`` a jump is a reflection through
    the chosen wormhole and the energy change is kept in the acceptance ratio
    together with the proposal ratio. With ``"paper"`` the random vector field
    is integrated literally and the energy gap of the jump is forgiven.

    Returns:
        ``(state', accepted, jumped)`` where ``jumped`` reports whether the
        proposal went through a wormhole (accepted or not).
    """
    state = np.asarray(state, dtype=float)
    v = rng.standard_normal(state.size)
    grad = lambda x: augmented_grad_potential(target, x)  # noqa: E731
    ham = lambda s: augmented_potential(target, s.position) + 0.5 * s.velocity @ s.velocity  # noqa: E731
    start = PhaseState(state, v)
    jumped = False
    try:
        H0 = ham(start)
        if config.jump_rule == "reversible":
            out = mirror_jump_trajectory(start, grad, worlds, config.step_size, config.n_leapfrog, rng)
            log_alpha = H0 - ham(out.final) + out.log_jacobian + out.log_proposal_ratio
        else:
            out = stochastic_aug_trajectory(
                start,
                grad,
                worlds,
                config.step_size,
                config.n_leapfrog,
                rng,
                ham,
                config.fixed_point_max_iter,
                config.fixed_point_tol,
            )
            log_alpha = H0 - ham(out.final) + out.energy_gap if out.fixed_point_converged else -np.inf
        jumped = out.jumped
    except (NumericalError, FloatingPointError):
        log_alpha = -np.inf
    if _metropolis(rng, log_alpha):
        return out.final.position, True, jumped
    return state, False, jumped


class Sampler:
    """Binds a target, a configuration and (for wormhole variants) a mode library.

    The chain state is the augmented vector for ``whmc_aug`` and the plain
    parameter vector otherwise; :meth:`project` maps it to parameters.
    """

    def __init__(self, target, config, library=None):
        self.target = target
        self.config = config
        self.library = library if library is not None else ModeLibrary()
        self.field = None
        self.worlds = None
        if config.variant == "whmc_vf":
            if len(self.library) >= 2:
                net = WormholeNetwork.from_library(
                    self.library, metric_epsilon=config.epsilon, influence_factor=config.influence
                )
                self.field = NetworkVectorField.from_network(net)
            else:
                self.field = NetworkVectorField([], target.dim, config.influence)
        elif config.variant == "whmc_aug":
            if len(self.library) == 0:
                raise ValueError("whmc_aug needs a non-empty mode library")
            self.worlds = MirrorWorlds(self.library, config.world_offset, config.influence)

    @property
    def augmented(self):
        return self.config.variant == "whmc_aug"

    def initial_state(self, theta, rng):
        """Chain state for parameters ``theta``; the extra coordinate starts at ``N(0, 1)``."""
        theta = np.asarray(theta, dtype=float).ravel()
        if theta.size != self.target.dim:
            raise ValueError("initial point has the wrong dimension")
        if self.augmented:
            return np.append(theta, rng.standard_normal())
        return theta

    def project(self, state):
        return state[:-1] if self.augmented else state

    def step(self, state, rng):
        c = self.config
        if c.variant == "hmc":
            s, acc = hmc_transition(state, self.target, c, rng)
            return Transition(s, acc)
        if c.variant == "whmc_vf":
            s, acc = whmc_vf_transition(state, self.target, self.field, c, rng)
            return Transition(s, acc)
        s, acc, jumped = whmc_aug_transition(state, self.target, self.worlds, c, rng)
        return Transition(s, acc, acc and jumped)


@dataclass
class Trace:
    """Recorded chain: one row per iteration plus the starting point.

    ``jumped`` marks accepted moves through a wormhole; ``regen`` marks
    regeneration times of the hybrid chain.
    """

    initial: Optional[np.ndarray] = None
    samples: list = field(default_factory=list)
    accepted: list = field(default_factory=list)
    jumped: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)
    regen: list = field(default_factory=list)

    def append(self, theta, accepted, jumped, wall_ms, regen=False):
        self.samples.append(np.array(theta, dtype=float))
        self.accepted.append(bool(accepted))
        self.jumped.append(bool(jumped))
        self.wall_ms.append(float(wall_ms))
        self.regen.append(bool(regen))

    def __len__(self):
        return len(self.samples)

    def as_array(self):
        return np.array(self.samples)

    @property
    def times(self):
        return np.array(self.wall_ms) / 1000.0

    @property
    def acceptance_rate(self):
        return float(np.mean(self.accepted)) if len(self) else float("nan")

    def write_csv(self, path):
        dim = len(self.samples[0]) if self.samples else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "wall_ms"] + [f"x{i}" for i in range(dim)] + ["accepted", "jumped", "regen"])
            for i, row in enumerate(zip(self.samples, self.wall_ms, self.accepted, self.jumped, self.regen)):
                theta, ms, acc, jmp, reg = row
                w.writerow([i, f"{ms:.3f}"] + [repr(float(t)) for t in theta] + [int(acc), int(jmp), int(reg)])

    @classmethod
    def read_csv(cls, path):
        trace = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                coords = [float(v) for k, v in row.items() if k.startswith("x")]
                trace.append(coords, row["accepted"] == "1", row["jumped"] == "1", float(row["wall_ms"]), row["regen"] == "1")
        return trace


def library_hash(library):
    payload = json.dumps(library.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()[:16]


def write_manifest(path, config, seed, library=None, extra=None):
    """JSON run manifest with the configuration, seed and a library snapshot hash."""
    manifest = {"config": config.to_dict() if hasattr(config, "to_dict") else dict(config), "seed": seed}
    if library is not None:
        manifest["library_hash"] = library_hash(library)
        manifest["library_size"] = len(library)
    if extra:
        manifest.update(extra)
    Path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def run_chain(sampler, initial, n_iter=None, rng=None, wall_budget=None, seed=None):
    """Iterate ``sampler`` until ``n_iter`` transitions or ``wall_budget`` seconds, whichever is first.

    Args:
        sampler: a :class:`Sampler`.
        initial: starting parameter vector.
        n_iter: maximum number of transitions (``None`` for no cap).
        rng: numpy generator; built from ``seed`` when omitted.
        wall_budget: wall-clock limit in seconds (``None`` for no limit).
        seed: seed for a fresh generator.

    Returns:
        Trace with ``n_iter`` rows when the wall budget does not bind.
    """
    if n_iter is None and wall_budget is None:
        raise ValueError("need n_iter or wall_budget")
    rng = rng if rng is not None else np.random.default_rng(seed)
    state = sampler.initial_state(initial, rng)
    trace = Trace(initial=sampler.project(state).copy())
    t0 = time.perf_counter()
    i = 0
    while n_iter is None or i < n_iter:
        elapsed = time.perf_counter() - t0
        if wall_budget is not None and elapsed >= wall_budget:
            break
        tr = sampler.step(state, rng)
        state = tr.state
        trace.append(sampler.project(state), tr.accepted, tr.jumped, 1000.0 * (time.perf_counter() - t0))
        i += 1
    return trace
