"""Wormhole geometry: metrics, mollifiers, vicinity, vector fields and networks."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from itertools import combinations
from pathlib import Path

import numpy as np

DEFAULT_EPSILON = 0.03
DEFAULT_INFLUENCE = 0.3
DEFAULT_WORLD_OFFSET = 1.0


@dataclass(frozen=True, eq=False)
class Mode:
    """A known local maximum of the target with its Hessian of ``-log pi``."""

    location: np.ndarray
    hessian: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        loc = np.asarray(self.location, dtype=float).ravel()
        hess = np.atleast_2d(np.asarray(self.hessian, dtype=float))
        if hess.shape != (loc.size, loc.size):
            raise ValueError("hessian shape does not match location")
        hess = 0.5 * (hess + hess.T)
        if np.linalg.eigvalsh(hess)[0] <= 0:
            raise ValueError("mode hessian must be positive definite")
        if self.weight < 0:
            raise ValueError("mode weight must be nonnegative")
        object.__setattr__(self, "location", loc)
        object.__setattr__(self, "hessian", hess)

    @property
    def dim(self):
        return self.location.size

    @property
    def covariance(self):
        return np.linalg.inv(self.hessian)


@dataclass(frozen=True, eq=False)
class ModeLibrary:
    """Immutable ordered collection of modes plus per-mode visit counts."""

    modes: tuple = ()
    visit_counts: tuple = ()

    def __post_init__(self):
        modes = tuple(self.modes)
        counts = tuple(int(c) for c in self.visit_counts) or (0,) * len(modes)
        if len(counts) != len(modes):
            raise ValueError("visit_counts must have one entry per mode")
        if len({m.dim for m in modes}) > 1:
            raise ValueError("all modes must share a dimension")
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "visit_counts", counts)

    def __len__(self):
        return len(self.modes)

    def __iter__(self):
        return iter(self.modes)

    def __getitem__(self, i):
        return self.modes[i]

    @property
    def dim(self):
        return self.modes[0].dim if self.modes else 0

    @property
    def locations(self):
        return np.array([m.location for m in self.modes])

    @property
    def hessians(self):
        return np.array([m.hessian for m in self.modes])

    def with_counts(self, counts):
        return replace(self, visit_counts=tuple(int(c) for c in counts))

    def to_dict(self):
        return {
            "dim": self.dim,
            "locations": [m.location.tolist() for m in self.modes],
            "hessians": [m.hessian.ravel().tolist() for m in self.modes],
            "weights": [m.weight for m in self.modes],
            "visit_counts": list(self.visit_counts),
        }

    @classmethod
    def from_dict(cls, data):
        D = int(data["dim"])
        weights = data.get("weights") or [1.0] * len(data["locations"])
        modes = tuple(
            Mode(np.array(loc), np.reshape(h, (D, D)), w)
            for loc, h, w in zip(data["locations"], data["hessians"], weights)
        )
        return cls(modes, tuple(data.get("visit_counts") or ()))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True, eq=False)
class Wormhole:
    endpoint_a: np.ndarray
    endpoint_b: np.ndarray
    direction: np.ndarray
    length: float

    @classmethod
    def between(cls, a, b):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        diff = b - a
        length = float(np.linalg.norm(diff))
        if length <= 0:
            raise ValueError("wormhole endpoints must differ")
        return cls(a, b, diff / length, length)


@dataclass(frozen=True, eq=False)
class WormholeNetwork:
    """Known modes plus the wormholes joining them.

    ``edges`` holds index pairs into ``modes``; ``wormholes`` the matching
    geometric segments.
    """

    modes: ModeLibrary
    edges: tuple = ()
    world_offset: float = DEFAULT_WORLD_OFFSET
    metric_epsilon: float = DEFAULT_EPSILON
    influence_factor: float = DEFAULT_INFLUENCE
    wormholes: tuple = field(init=False)

    def __post_init__(self):
        if not 0 < self.metric_epsilon < 1:
            raise ValueError("metric_epsilon must lie in (0, 1)")
        if self.influence_factor <= 0:
            raise ValueError("influence_factor must be positive")
        if self.world_offset < 0:
            raise ValueError("world_offset must be nonnegative")
        K = len(self.modes)
        edges = tuple((int(i), int(j)) for i, j in self.edges)
        for i, j in edges:
            if not (0 <= i < K and 0 <= j < K) or i == j:
                raise ValueError(f"edge {(i, j)} does not join two distinct modes")
        locs = self.modes.locations
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "wormholes", tuple(Wormhole.between(locs[i], locs[j]) for i, j in edges))

    @classmethod
    def from_library(cls, library, **kwargs):
        return cls(library, mst_network(library), **kwargs)


# -- metrics ----------------------------------------------------------------


def wormhole_metric(direction, epsilon):
    """``I - (1 - epsilon) v v^T`` for a unit direction ``v``."""
    v = np.asarray(direction, dtype=float)
    if abs(np.linalg.norm(v) - 1.0) > 1e-10:
        raise ValueError("wormhole direction must be a unit vector")
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    return np.eye(v.size) - (1.0 - epsilon) * np.outer(v, v)


def segment_mollifier(theta, a, b, F):
    """``exp(-(|theta - a| + |theta - b| - |a - b|) / F)``."""
    theta, a, b = (np.asarray(x, dtype=float) for x in (theta, a, b))
    excess = np.linalg.norm(theta - a) + np.linalg.norm(theta - b) - np.linalg.norm(a - b)
    return float(np.exp(-max(excess, 0.0) / F))


def overall_metric(theta, network, base_metric=None):
    """Blend of the base metric and the wormhole metric of the most influential edge."""
    theta = np.asarray(theta, dtype=float)
    G0 = np.eye(theta.size) if base_metric is None else np.asarray(base_metric, dtype=float)
    if not network.wormholes:
        return G0.copy()
    F = network.influence_factor
    moll = [segment_mollifier(theta, w.endpoint_a, w.endpoint_b, F) for w in network.wormholes]
    best = int(np.argmax(moll))
    m = moll[best]
    GW = wormhole_metric(network.wormholes[best].direction, network.metric_epsilon)
    return (1.0 - m) * G0 + m * GW


def numeric_arclength(points, metric):
    """Length of the piecewise-linear curve through ``points`` under ``metric(theta)``.

    Composite midpoint rule on each linear piece.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or len(pts) < 2:
        raise ValueError("need at least two curve points")
    total = 0.0
    for p, q in zip(pts[:-1], pts[1:]):
        d = q - p
        G = metric(0.5 * (p + q))
        total += np.sqrt(max(d @ G @ d, 0.0))
    return float(total)


# -- vicinity and vector field ----------------------------------------------


def vicinity(theta, a, b):
    """Nonnegative tube distance to the segment ``[a, b]``; zero exactly on it."""
    theta, a, b = (np.asarray(x, dtype=float) for x in (theta, a, b))
    u = (b - a) / np.linalg.norm(b - a)
    ta, tb = theta - a, theta - b
    return float(ta @ tb + abs(ta @ u) * abs(tb @ u))


def vicinity_grad(theta, a, b):
    """Gradient of :func:`vicinity`, using ``sign(0) = 0`` at the kinks."""
    theta, a, b = (np.asarray(x, dtype=float) for x in (theta, a, b))
    u = (b - a) / np.linalg.norm(b - a)
    ta, tb = theta - a, theta - b
    pa, pb = ta @ u, tb @ u
    return ta + tb + (np.sign(pa) * abs(pb) + abs(pa) * np.sign(pb)) * u


def vicinity_mollifier(theta, a, b, D, F):
    return float(np.exp(-vicinity(theta, a, b) / (D * F)))


def vector_field(theta, v, wormhole, D, F):
    """Mollified projection ``m(theta) <v, u> u`` of ``v`` onto the wormhole direction."""
    u = wormhole.direction
    m = vicinity_mollifier(theta, wormhole.endpoint_a, wormhole.endpoint_b, D, F)
    return m * (np.asarray(v, dtype=float) @ u) * u


def vector_field_jacobian(theta, v, wormhole, D, F):
    """Derivative of :func:`vector_field` in ``theta``: ``u (u.v) grad m^T``."""
    a, b, u = wormhole.endpoint_a, wormhole.endpoint_b, wormhole.direction
    m = vicinity_mollifier(theta, a, b, D, F)
    grad_m = -m / (D * F) * vicinity_grad(theta, a, b)
    return (np.asarray(v, dtype=float) @ u) * np.outer(u, grad_m)


class NetworkVectorField:
    """Sum of the per-wormhole vector fields over a network, vectorized over edges."""

    def __init__(self, wormholes, dim, influence_factor):
        self.dim = int(dim)
        self.scale = self.dim * float(influence_factor)
        if wormholes:
            self.A = np.array([w.endpoint_a for w in wormholes])
            self.B = np.array([w.endpoint_b for w in wormholes])
            self.U = np.array([w.direction for w in wormholes])
        else:
            self.A = self.B = self.U = np.zeros((0, self.dim))

    @classmethod
    def from_network(cls, network):
        return cls(network.wormholes, network.modes.dim, network.influence_factor)

    def __bool__(self):
        return len(self.U) > 0

    def _parts(self, theta):
        ta = theta - self.A
        tb = theta - self.B
        pa = np.einsum("ed,ed->e", ta, self.U)
        pb = np.einsum("ed,ed->e", tb, self.U)
        V = np.einsum("ed,ed->e", ta, tb) + np.abs(pa) * np.abs(pb)
        return ta, tb, pa, pb, np.exp(-V / self.scale)

    def __call__(self, theta, v):
        if not self:
            return np.zeros_like(theta)
        *_, m = self._parts(theta)
        return (m * (self.U @ v)) @ self.U

    def jacobian(self, theta, v):
        if not self:
            return np.zeros((theta.size, theta.size))
        ta, tb, pa, pb, m = self._parts(theta)
        grad_V = ta + tb + (np.sign(pa) * np.abs(pb) + np.abs(pa) * np.sign(pb))[:, None] * self.U
        coef = -(self.U @ v) * m / self.scale
        return np.einsum("e,ei,ej->ij", coef, self.U, grad_V)


# -- networks ---------------------------------------------------------------


def mst_network(modes):
    """Euclidean minimum spanning tree over mode locations (Kruskal).

    Ties are broken by the lexicographic index pair, so the result is
    deterministic. Returns a sorted list of ``(i, j)`` with ``i < j``.
    """
    locs = modes.locations if isinstance(modes, ModeLibrary) else np.atleast_2d(np.asarray(modes, float))
    K = len(locs)
    if K < 2:
        return []
    cand = sorted(
        (float(np.linalg.norm(locs[i] - locs[j])), i, j) for i, j in combinations(range(K), 2)
    )
    parent = list(range(K))

    def root(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    edges = []
    for _, i, j in cand:
        ri, rj = root(i), root(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
            edges.append((i, j))
            if len(edges) == K - 1:
                break
    return sorted(edges)


def world_sign(z):
    """World of an augmented state: +1 (mirror) for ``z >= 0``, else -1 (real)."""
    return 1.0 if z >= 0 else -1.0


def nearest_mode(theta, locations):
    diff = locations - theta
    return int(np.argmin(np.einsum("kd,kd->k", diff, diff)))


def mirror_network(position, library, h=DEFAULT_WORLD_OFFSET):
    """Wormholes from the nearest mode in the current world to every mode in the other world.

    ``position`` is an augmented vector ``(theta, theta_{D+1})``. Returns the
    anchor index and a list of :class:`Wormhole` in ``D + 1`` dimensions,
    one per library mode in library order.
    """
    if len(library) == 0:
        raise ValueError("mirror network needs at least one mode")
    position = np.asarray(position, dtype=float)
    locs = library.locations
    s = world_sign(position[-1])
    k0 = nearest_mode(position[:-1], locs)
    start = np.append(locs[k0], s * h)
    return k0, [Wormhole.between(start, np.append(loc, -s * h)) for loc in locs]
