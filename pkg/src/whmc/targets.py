"""Target densities used by the samplers and their synthetic-data generators.

All densities are unnormalized log-densities ``log pi(theta)`` with an
analytic gradient. Samplers work with the potential ``U = -log pi``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

LOG_2PI = np.log(2.0 * np.pi)

#: Floor for ``log(1 - p)`` in the sensor model (keeps gradients finite).
SENSOR_LOG_FLOOR = -700.0

#: Fixed anchor sensors in the unit square.
SENSOR_ANCHORS = np.array([[0.2, 0.2], [0.8, 0.2], [0.5, 0.8]])


def log_sum_exp(a):
    """``log(sum(exp(a)))`` for a 1-D array; lighter than the scipy routine on tiny inputs."""
    m = a.max()
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.exp(a - m).sum()))


class TargetDensity:
    """Differentiable unnormalized density on ``R^dim``.

    Subclasses implement :meth:`log_density` and :meth:`grad_log_density`.
    """

    dim: int

    def log_density(self, theta):
        raise NotImplementedError

    def grad_log_density(self, theta):
        raise NotImplementedError

    def potential(self, theta):
        return -self.log_density(theta)

    def grad_potential(self, theta):
        return -self.grad_log_density(theta)

    def _check(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise ValueError(f"expected a vector of length {self.dim}, got shape {theta.shape}")
        return theta


class FunctionTarget(TargetDensity):
    """Wrap a pair of callables as a :class:`TargetDensity`."""

    def __init__(self, dim, log_density, grad_log_density):
        self.dim = int(dim)
        self._logp = log_density
        self._grad = grad_log_density

    def log_density(self, theta):
        return float(self._logp(self._check(theta)))

    def grad_log_density(self, theta):
        return np.asarray(self._grad(self._check(theta)), dtype=float)


class GaussianMixtureTarget(TargetDensity):
    """Finite mixture of full-covariance Gaussians (normalized).

    Args:
        weights: Mixture weights, shape ``(K,)``; must sum to one.
        means: Component means, shape ``(K, D)``.
        precisions: Component precision matrices, shape ``(K, D, D)``.
    """

    def __init__(self, weights, means, precisions):
        weights = np.asarray(weights, dtype=float)
        means = np.atleast_2d(np.asarray(means, dtype=float))
        precisions = np.asarray(precisions, dtype=float)
        K, D = means.shape
        if precisions.shape != (K, D, D):
            raise ValueError(f"precisions must have shape {(K, D, D)}, got {precisions.shape}")
        if weights.shape != (K,) or np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be a nonnegative probability vector of length K")
        if not np.allclose(precisions, np.swapaxes(precisions, 1, 2)):
            raise ValueError("precision matrices must be symmetric")
        chol = np.linalg.cholesky(precisions)  # raises LinAlgError if not SPD
        self.dim = D
        self.weights = weights
        self.means = means
        self.precisions = precisions
        self.log_det_precisions = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
        with np.errstate(divide="ignore"):
            self._log_w = np.log(weights)
        self._log_norm = self._log_w + 0.5 * self.log_det_precisions - 0.5 * D * LOG_2PI

    @property
    def n_components(self):
        return len(self.weights)

    @property
    def covariances(self):
        return np.linalg.inv(self.precisions)

    def _component_terms(self, theta):
        diff = theta - self.means  # (K, D)
        prec_diff = np.einsum("kij,kj->ki", self.precisions, diff)
        log_terms = self._log_norm - 0.5 * np.einsum("ki,ki->k", diff, prec_diff)
        return log_terms, prec_diff

    def log_density(self, theta):
        theta = self._check(theta)
        log_terms, _ = self._component_terms(theta)
        return log_sum_exp(log_terms)

    def grad_log_density(self, theta):
        theta = self._check(theta)
        log_terms, prec_diff = self._component_terms(theta)
        resp = np.exp(log_terms - log_sum_exp(log_terms))
        return -resp @ prec_diff

    def true_mean(self):
        return self.weights @ self.means

    def to_dict(self):
        return {
            "type": "gmm",
            "dim": self.dim,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "precisions": [p.ravel().tolist() for p in self.precisions],
        }

    @classmethod
    def from_dict(cls, data):
        D = int(data["dim"])
        precisions = np.array([np.reshape(p, (D, D)) for p in data["precisions"]])
        return cls(data["weights"], data["means"], precisions)


def gmm_log_density(target, theta):
    """Log of ``sum_k w_k N(theta; mu_k, Sigma_k)``."""
    return target.log_density(theta)


def gmm_grad_log_density(target, theta):
    """Responsibility-weighted sum of ``Lambda_k (mu_k - theta)``."""
    return target.grad_log_density(theta)


class SensorNetworkTarget(TargetDensity):
    """Posterior over planar sensor locations given partial distance data.

    Nodes ``0..N-1`` are the unknown sensors; nodes ``N..N+2`` are the anchors.
    ``obs_distance`` and ``obs_indicator`` are ``(N+3, N+3)`` symmetric
    matrices. The uniform prior is dropped.
    """

    def __init__(self, n_sensors, anchors, obs_distance, obs_indicator, radius=0.3, noise_sd=0.02):
        anchors = np.asarray(anchors, dtype=float)
        Y = np.asarray(obs_distance, dtype=float)
        Z = np.asarray(obs_indicator, dtype=int)
        n_nodes = n_sensors + len(anchors)
        if Y.shape != (n_nodes, n_nodes) or Z.shape != (n_nodes, n_nodes):
            raise ValueError(f"observation matrices must be {n_nodes}x{n_nodes}")
        if not (np.array_equal(Y, Y.T) and np.array_equal(Z, Z.T)):
            raise ValueError("observation matrices must be symmetric")
        if np.any(np.diag(Y) != 0) or np.any(np.diag(Z) != 0):
            raise ValueError("observation matrices must have a zero diagonal")
        I, J = np.triu_indices(n_nodes, k=1)
        keep = I < n_sensors  # anchor-anchor pairs carry no information
        I, J = I[keep], J[keep]
        z = Z[I, J].astype(bool)
        if np.any(Y[I, J][z] <= 0) or np.any(Y[I, J][~z] != 0):
            raise ValueError("obs_distance must be positive exactly where obs_indicator is 1")
        self.n_sensors = int(n_sensors)
        self.dim = 2 * self.n_sensors
        self.anchors = anchors
        self.obs_distance = Y
        self.obs_indicator = Z
        self.radius = float(radius)
        self.noise_sd = float(noise_sd)
        self._I, self._J, self._z = I, J, z
        self._y = Y[I, J]

    def _pairs(self, x):
        nodes = np.vstack([x.reshape(self.n_sensors, 2), self.anchors])
        diff = nodes[self._I] - nodes[self._J]
        d2 = np.einsum("pi,pi->p", diff, diff)
        return diff, d2

    def _log_miss(self, d2):
        a = d2 / (2.0 * self.radius**2)
        with np.errstate(divide="ignore"):
            raw = np.log(-np.expm1(-a))
        return np.maximum(raw, SENSOR_LOG_FLOOR), a

    def log_density(self, x):
        x = self._check(x)
        diff, d2 = self._pairs(x)
        z = self._z
        R2, s2 = self.radius**2, self.noise_sd**2
        d = np.sqrt(d2[z])
        hit = -d2[z] / (2 * R2) - 0.5 * (self._y[z] - d) ** 2 / s2 - 0.5 * np.log(2 * np.pi * s2)
        miss, _ = self._log_miss(d2[~z])
        return float(hit.sum() + miss.sum())

    def grad_log_density(self, x):
        x = self._check(x)
        diff, d2 = self._pairs(x)
        z = self._z
        R2, s2 = self.radius**2, self.noise_sd**2
        coef = np.empty(len(d2))  # d(log p)/d(diff), as a multiple of diff
        d = np.sqrt(np.maximum(d2[z], 1e-300))
        coef[z] = -1.0 / R2 + (self._y[z] - d) / (s2 * d)
        miss, a = self._log_miss(d2[~z])
        with np.errstate(divide="ignore", over="ignore"):
            dmiss = 1.0 / np.expm1(a) / R2
        dmiss[miss <= SENSOR_LOG_FLOOR] = 0.0
        coef[~z] = dmiss
        g = coef[:, None] * diff
        n_nodes = self.n_sensors + len(self.anchors)
        grad = np.zeros((n_nodes, 2))
        for c in range(2):
            grad[:, c] = np.bincount(self._I, g[:, c], n_nodes) - np.bincount(self._J, g[:, c], n_nodes)
        return grad[: self.n_sensors].ravel()

    def flagged(self, x):
        """True when some unobserved pair sits on the ``log(1 - p)`` floor."""
        _, d2 = self._pairs(self._check(x))
        miss, _ = self._log_miss(d2[~self._z])
        return bool(np.any(miss <= SENSOR_LOG_FLOOR))

    def to_dict(self):
        return {
            "type": "sensor",
            "n_sensors": self.n_sensors,
            "anchors": self.anchors.tolist(),
            "obs_distance": self.obs_distance.tolist(),
            "obs_indicator": self.obs_indicator.tolist(),
            "radius": self.radius,
            "noise_sd": self.noise_sd,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            data["n_sensors"],
            data["anchors"],
            data["obs_distance"],
            data["obs_indicator"],
            data["radius"],
            data["noise_sd"],
        )


def sensor_log_density(target, x):
    return target.log_density(x)


class WellingTarget(TargetDensity):
    """Two-parameter posterior with a two-component likelihood.

    ``theta_d ~ N(0, sigma_d^2)`` and
    ``x_i ~ 0.5 N(theta_1, sigma_x^2) + 0.5 N(theta_1 + theta_2, sigma_x^2)``.
    """

    dim = 2

    def __init__(self, data, prior_vars=(10.0, 1.0), obs_var=2.0):
        self.data = np.asarray(data, dtype=float).ravel()
        self.prior_vars = tuple(float(v) for v in prior_vars)
        self.obs_var = float(obs_var)
        if min(self.prior_vars) <= 0 or self.obs_var <= 0:
            raise ValueError("variances must be strictly positive")

    def _terms(self, theta):
        r1 = self.data - theta[0]
        r2 = self.data - theta[0] - theta[1]
        l1 = -0.5 * r1**2 / self.obs_var
        l2 = -0.5 * r2**2 / self.obs_var
        return r1, r2, l1, l2

    def log_density(self, theta):
        theta = self._check(theta)
        s1, s2 = self.prior_vars
        prior = -0.5 * theta[0] ** 2 / s1 - 0.5 * theta[1] ** 2 / s2
        if self.data.size == 0:
            return float(prior)
        _, _, l1, l2 = self._terms(theta)
        norm = np.log(0.5) - 0.5 * np.log(2 * np.pi * self.obs_var)
        return float(prior + np.sum(np.logaddexp(l1, l2) + norm))

    def grad_log_density(self, theta):
        theta = self._check(theta)
        s1, s2 = self.prior_vars
        g = np.array([-theta[0] / s1, -theta[1] / s2])
        if self.data.size == 0:
            return g
        r1, r2, l1, l2 = self._terms(theta)
        w2 = np.exp(l2 - np.logaddexp(l1, l2))
        w1 = 1.0 - w2
        g[0] += np.sum(w1 * r1 + w2 * r2) / self.obs_var
        g[1] += np.sum(w2 * r2) / self.obs_var
        return g

    def to_dict(self):
        return {
            "type": "welling",
            "data": self.data.tolist(),
            "prior_vars": list(self.prior_vars),
            "obs_var": self.obs_var,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(data["data"], data["prior_vars"], data["obs_var"])


def welling_log_density(target, theta):
    return target.log_density(theta)


# -- generators -------------------------------------------------------------


def _mean_pairwise_distance(points):
    K = len(points)
    if K < 2:
        return 0.0
    diff = points[:, None, :] - points[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return float(dist[np.triu_indices(K, k=1)].mean())


def random_spd(rng, D, low=0.25, high=4.0):
    """Random SPD covariance: Haar rotation, eigenvalues log-uniform in [low, high]."""
    Q, R = np.linalg.qr(rng.standard_normal((D, D)))
    Q = Q * np.sign(np.diag(R))
    eig = np.exp(rng.uniform(np.log(low), np.log(high), size=D))
    cov = (Q * eig) @ Q.T
    prec = (Q / eig) @ Q.T
    return 0.5 * (cov + cov.T), 0.5 * (prec + prec.T)


def generate_gmm_instance(K, D, seed, target_spacing=20.0):
    """Equal-weight Gaussian mixture with well-separated, differently shaped modes.

    Means are uniform in ``[0, a]^D`` and then rescaled so their mean pairwise
    distance equals ``target_spacing``.
    """
    if K < 1 or D < 1:
        raise ValueError("K and D must be positive")
    rng = np.random.default_rng(seed)
    side = target_spacing / np.sqrt(D / 6.0)
    means = rng.uniform(0.0, side, size=(K, D))
    if K > 1:
        means *= target_spacing / _mean_pairwise_distance(means)
    precisions = np.array([random_spd(rng, D)[1] for _ in range(K)])
    return GaussianMixtureTarget(np.full(K, 1.0 / K), means, precisions)


def generate_sensor_data(seed, n_sensors=8, radius=0.3, noise_sd=0.02, anchors=SENSOR_ANCHORS):
    """Draw sensor locations and observations; returns ``(target, truth)``.

    ``truth`` is the flattened vector of true sensor locations.
    """
    rng = np.random.default_rng(seed)
    truth = rng.uniform(0.0, 1.0, size=(n_sensors, 2))
    anchors = np.asarray(anchors, dtype=float)
    nodes = np.vstack([truth, anchors])
    n = len(nodes)
    Y = np.zeros((n, n))
    Z = np.zeros((n, n), dtype=int)
    for i in range(n_sensors):
        for j in range(i + 1, n):
            d = np.linalg.norm(nodes[i] - nodes[j])
            if rng.random() < np.exp(-(d**2) / (2 * radius**2)):
                y = d + noise_sd * rng.standard_normal()
                while y <= 0:
                    y = d + noise_sd * rng.standard_normal()
                Y[i, j] = Y[j, i] = y
                Z[i, j] = Z[j, i] = 1
    target = SensorNetworkTarget(n_sensors, anchors, Y, Z, radius, noise_sd)
    return target, truth.ravel()


def generate_welling_data(seed, n=1000, theta=(0.0, 1.0), obs_var=2.0):
    rng = np.random.default_rng(seed)
    second = rng.random(n) < 0.5
    loc = np.where(second, theta[0] + theta[1], theta[0])
    return loc + np.sqrt(obs_var) * rng.standard_normal(n)


def welling_target(seed=0, n=1000):
    """Canonical two-mode posterior: theta=(0, 1), prior variances (10, 1), sigma_x^2 = 2."""
    return WellingTarget(generate_welling_data(seed, n), prior_vars=(10.0, 1.0), obs_var=2.0)


def four_mode_benchmark():
    """2D mixture of four distinct Gaussians laid out along a band.

    Returns ``(target, known_indices)``; the remaining two modes are the
    ones a mode search is expected to discover.
    """
    means = np.array([[-9.0, -1.0], [-3.0, 1.5], [3.0, -1.5], [9.0, 1.0]])
    covs = np.array(
        [
            [[1.0, 0.3], [0.3, 0.6]],
            [[0.5, 0.0], [0.0, 1.2]],
            [[1.2, -0.4], [-0.4, 0.8]],
            [[0.7, 0.2], [0.2, 0.7]],
        ]
    )
    target = GaussianMixtureTarget(np.full(4, 0.25), means, np.linalg.inv(covs))
    return target, (0, 2)


# -- serialization ----------------------------------------------------------

_TARGET_TYPES = {
    "gmm": GaussianMixtureTarget,
    "sensor": SensorNetworkTarget,
    "welling": WellingTarget,
}


def target_to_dict(target):
    return target.to_dict()


def target_from_dict(data):
    try:
        cls = _TARGET_TYPES[data["type"]]
    except KeyError:
        raise ValueError(f"unknown target type {data.get('type')!r}") from None
    return cls.from_dict(data)


def save_target(target, path, extra=None):
    payload = target_to_dict(target)
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))


def load_target(path):
    return target_from_dict(json.loads(Path(path).read_text()))
