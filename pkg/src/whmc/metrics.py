"""Relative error of the mean, mode occupancy and long-run reference means."""

from __future__ import annotations

import json

import numpy as np

from .samplers import Sampler, SamplerConfig, run_chain


def rem_value(mean, theta_star):
    """``|mean - theta_star|_1 / |theta_star|_1``."""
    theta_star = np.asarray(theta_star, dtype=float)
    norm = np.abs(theta_star).sum()
    if norm == 0:
        raise ValueError("reference mean has zero L1 norm")
    return float(np.abs(np.asarray(mean, dtype=float) - theta_star).sum() / norm)


def rem_by_iteration(samples, theta_star):
    """REM of the running mean after each sample."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    theta_star = np.asarray(theta_star, dtype=float)
    norm = np.abs(theta_star).sum()
    if norm == 0:
        raise ValueError("reference mean has zero L1 norm")
    running = np.cumsum(samples, axis=0) / np.arange(1, len(samples) + 1)[:, None]
    return np.abs(running - theta_star).sum(axis=1) / norm


def time_grid(budget, start=0.1, factor=1.3):
    """Geometric grid ``start, start*factor, ...`` up to and including ``budget``."""
    if budget <= 0:
        raise ValueError("budget must be positive")
    grid = [start]
    while grid[-1] * factor < budget:
        grid.append(grid[-1] * factor)
    if grid[-1] < budget:
        grid.append(budget)
    return np.array([t for t in grid if t <= budget])


def rem(trace, theta_star, times=None, budget=None):
    """REM of the running mean at wall-clock marks.

    Args:
        trace: :class:`Trace` (or an object with ``samples`` and ``times``).
        theta_star: reference mean.
        times: marks in seconds; a geometric grid up to ``budget`` (or the
            last recorded time) when omitted.
        budget: end of the default grid.

    Returns:
        ``(n, 2)`` array of ``(time, REM)``; marks before the first sample
        are dropped.
    """
    samples = trace.as_array() if hasattr(trace, "as_array") else np.asarray(trace.samples)
    t = np.asarray(trace.times, dtype=float)
    curve = rem_by_iteration(samples, theta_star)
    if times is None:
        end = budget if budget is not None else max(t[-1], 0.1)
        times = time_grid(end)
    out = []
    for mark in np.asarray(times, dtype=float):
        idx = np.searchsorted(t, mark, side="right") - 1
        if idx >= 0:
            out.append((mark, curve[idx]))
    return np.array(out).reshape(-1, 2)


def time_to_threshold(curve, threshold):
    """First time where the REM curve is at or below ``threshold``, else ``None``."""
    for t, r in np.asarray(curve).reshape(-1, 2):
        if r <= threshold:
            return float(t)
    return None


def integrated_autocorr_time(x):
    """Integrated autocorrelation time of a scalar chain (Geyer's initial positive sequence)."""
    y = np.asarray(x, dtype=float).ravel()
    n = len(y)
    if n < 4:
        raise ValueError("need at least four draws")
    y = y - y.mean()
    f = np.fft.rfft(y, 2 * n)
    acov = np.fft.irfft(f * np.conj(f))[:n] / n
    if acov[0] == 0:
        return 1.0
    rho = acov / acov[0]
    tau = -1.0
    for k in range(0, n - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair <= 0:
            break
        tau += 2.0 * pair
    return float(max(tau, 1.0 / n))


def ks_effective(x, cdf):
    """One-sample KS test with the null distribution taken at the effective sample size.

    The statistic is the usual ``sup |F_n - F|``; the p-value uses
    ``n / tau`` draws, where ``tau`` is the integrated autocorrelation time
    of ``cdf(x)``. Reduces to the ordinary test for independent draws.

    Returns:
        ``(statistic, p_value, tau)``.
    """
    from scipy import stats

    x = np.asarray(x, dtype=float).ravel()
    res = stats.kstest(x, cdf)
    tau = max(integrated_autocorr_time(cdf(x)), 1.0)
    n_eff = max(int(len(x) / tau), 1)
    return float(res.statistic), float(stats.kstwo.sf(res.statistic, n_eff)), tau


def true_mean_gmm(target):
    return np.asarray(target.weights) @ np.asarray(target.means)


def mode_occupancy(samples, locations, hessians=None):
    """Fraction of samples nearest to each mode.

    Distances are Mahalanobis under each mode's Hessian when ``hessians`` is
    given, Euclidean otherwise; ties go to the lower index.
    """
    pts = np.atleast_2d(np.asarray(samples, dtype=float))
    locs = np.atleast_2d(np.asarray(locations, dtype=float))
    diff = pts[:, None, :] - locs[None]
    if hessians is None:
        d2 = np.einsum("nki,nki->nk", diff, diff)
    else:
        d2 = np.einsum("nki,kij,nkj->nk", diff, np.asarray(hessians, dtype=float), diff)
    counts = np.bincount(np.argmin(d2, axis=1), minlength=len(locs))
    return counts / counts.sum()


def library_occupancy(samples, library):
    return mode_occupancy(samples, library.locations, library.hessians)


def reference_mean_longrun(target, library, seed, n_iter=None, wall_budget=None, n_chains=8, config=None,
                           return_samples=False):
    """Pooled mean of ``n_chains`` mirror-world WHMC chains started at the library modes.

    Chains start at the modes in turn. Each chain owns the generator derived
    from ``(seed, chain index)``.

    Returns:
        ``(mean, info)`` where ``info`` records the provenance and per-chain
        means, plus the stacked draws under ``"samples"`` when
        ``return_samples`` is set.
    """
    config = config or SamplerConfig(variant="whmc_aug")
    sampler = Sampler(target, config, library)
    means, lengths, pooled_samples = [], [], []
    for c in range(n_chains):
        rng = np.random.default_rng([seed, c])
        start = library[c % len(library)].location
        trace = run_chain(sampler, start, n_iter=n_iter, rng=rng, wall_budget=wall_budget)
        x = trace.as_array()
        means.append(x.mean(axis=0))
        lengths.append(len(x))
        if return_samples:
            pooled_samples.append(x)
    means = np.array(means)
    w = np.array(lengths, dtype=float)
    pooled = w @ means / w.sum()
    info = {
        "seed": seed,
        "n_chains": n_chains,
        "n_iter": n_iter,
        "wall_budget": wall_budget,
        "chain_lengths": lengths,
        "chain_means": means.tolist(),
        "standard_error": (means.std(axis=0, ddof=1) / np.sqrt(n_chains)).tolist() if n_chains > 1 else None,
        "config": config.to_dict(),
    }
    if return_samples:
        info["samples"] = np.vstack(pooled_samples)
    return pooled, info


def write_rem_csv(path, curve):
    with open(path, "w") as fh:
        fh.write("time,rem\n")
        for t, r in np.asarray(curve).reshape(-1, 2):
            fh.write(f"{t:.6g},{r:.10g}\n")


def write_metrics_jsonl(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
