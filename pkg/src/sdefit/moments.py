"""Conditional-moment estimation and time quadrature.

Estimates u(tau, xi; phi) = E[phi(X_xi(tau))] from observations, either as an
ensemble average over trajectories started at xi or by Nadaraya--Watson
kernel regression on one long stationary series, and integrates the
resulting moment curves with the trapezoidal rule.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

NW_ZERO_DENOMINATOR = 1e-300  # below this the kernel weights degenerate to 1/N


@dataclass
class MomentCurve:
    """Moment estimates at lags k*h for k = 0..n; h is the curve spacing."""

    xi: np.ndarray
    h: float
    values: np.ndarray


def _value_fn(phi):
    return getattr(phi, "value", phi)


def _block_of(trajectories):
    if isinstance(trajectories, np.ndarray):
        return trajectories
    return np.stack([t.states for t in trajectories])


def ensemble_moment(trajectories, tau_index, phi):
    """Ensemble average (1/N) sum_k phi(X^(k)(tau)) in fixed member order."""
    block = _block_of(trajectories)
    if block.shape[0] == 0:
        raise ValueError("empty ensemble")
    if not 0 <= tau_index < block.shape[1]:
        raise ValueError(f"tau_index {tau_index} outside grid 0..{block.shape[1] - 1}")
    return float(np.mean(_value_fn(phi)(block[:, tau_index, :])))


def nadaraya_watson_moment(series, xi, tau_index, phi, bandwidth):
    """Kernel-regression estimate of E[phi(X_xi(tau))] from one series.

    Uses the Gaussian kernel K(x) = (2 pi)^{-d/2} exp(-||x||^2/2) (the
    normalizing constant cancels in the weights) over pairs (j, j + k) with
    j <= N - k. A numerically zero denominator falls back to uniform
    weights 1/N.
    """
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    states = series.states if hasattr(series, "states") else np.asarray(series, dtype=float)
    if states.ndim == 1:
        states = states[:, None]
    k = int(tau_index)
    if len(states) < k + 2:
        raise ValueError(f"series of length {len(states)} too short for lag {k}")
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    n_w = len(states) - k
    kv = np.exp(-0.5 * np.sum(((states[:n_w] - xi) / bandwidth) ** 2, axis=-1))
    den = kv.sum()
    targets = _value_fn(phi)(states[k:])
    if den < NW_ZERO_DENOMINATOR:
        return float(np.mean(targets))
    return float(np.dot(kv, targets) / den)


def default_bandwidth(n_samples, dim, series_scale):
    """Plug-in bandwidth scale * N^(-1/(d+4)).

    ``series_scale`` is the per-coordinate standard deviation (scalar or
    length-d); the scale factor is its geometric mean. The resulting rate
    satisfies the kernel-consistency divergence condition
    kappa^d N / log(N)^(2 + 1/nu) -> infinity.
    """
    if n_samples < 2:
        raise ValueError("need at least two samples")
    scale = np.atleast_1d(np.asarray(series_scale, dtype=float))
    factor = float(np.exp(np.mean(np.log(scale))))
    return factor * n_samples ** (-1.0 / (dim + 4))


def trapezoid_integrate(values, delta):
    """(delta/2) (v_0 + v_n + 2 sum_{k=1}^{n-1} v_k)."""
    values = np.asarray(values, dtype=float)
    if len(values) < 2:
        raise ValueError("need at least two nodes")
    if delta <= 0:
        raise ValueError("delta must be positive")
    return float(0.5 * delta * (values[0] + values[-1] + 2.0 * values[1:-1].sum()))


def moment_curve(observations, xi, phi, t, stride_l=1, bandwidth=None):
    """Moment curve of phi at trial point xi, sampled at spacing delta = l h.

    For ensemble observations ``xi`` may be the trial-point index or the
    point itself (matched exactly against the stored points). For series
    observations ``bandwidth`` defaults to the plug-in rule on the usable
    window. The horizon t must be a multiple of delta.
    """
    l = int(stride_l)
    if l < 1:
        raise ValueError("stride must be >= 1")
    delta = l * observations.h
    n_nodes = int(round(t / delta))
    if n_nodes < 1 or abs(n_nodes * delta - t) > 1e-9 * max(1.0, t):
        raise ValueError(f"t={t} is not a positive multiple of delta={delta}")
    k_grid = l * np.arange(n_nodes + 1)

    if observations.kind == "ensemble":
        idx = xi if isinstance(xi, (int, np.integer)) else _match_point(observations, xi)
        block = observations.block(idx)
        if k_grid[-1] >= block.shape[1]:
            raise ValueError("t exceeds the ensemble horizon")
        point = observations.xi_points[idx]
        vals = np.array([ensemble_moment(block, k, phi) for k in k_grid])
        bound = getattr(phi, "sup_bound", None)
        if bound is not None and np.abs(vals).max() > bound + 1e-12:
            raise ValueError("ensemble moment exceeded the declared sup bound")
        return MomentCurve(xi=point, h=delta, values=vals)

    series = observations.series
    if bandwidth is None:
        usable = len(series.states) - int(k_grid[-1])
        bandwidth = default_bandwidth(usable, series.dim, series.states.std(axis=0))
    vals = np.array(
        [nadaraya_watson_moment(series, xi, k, phi, bandwidth) for k in k_grid]
    )
    bound = getattr(phi, "sup_bound", None)
    if bound is not None and np.abs(vals).max() > bound + 1e-12:
        warnings.warn("kernel moment estimate exceeded the declared sup bound")
    return MomentCurve(xi=np.atleast_1d(np.asarray(xi, dtype=float)), h=delta, values=vals)


def _match_point(observations, xi):
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    hits = np.where(np.all(observations.xi_points == xi, axis=1))[0]
    if len(hits) == 0:
        raise ValueError("xi does not match any stored trial point")
    return int(hits[0])


# ---------------------------------------------------------------------------
# batched curve tables (the estimator's moment cache)
# ---------------------------------------------------------------------------

@dataclass
class CurveTable:
    """All moment curves one estimate needs, computed once and reused.

    ``values[i, 0]`` is the phi curve at trial point i and ``values[i, j]``
    for j >= 1 the curve of the j-th basis generator applied to phi, all
    sampled at spacing delta. Every t in a sweep reassembles from this cache.
    """

    delta: float
    k_grid: np.ndarray
    xi_points: np.ndarray
    phi_at_xi: np.ndarray
    values: np.ndarray  # (m, n_funcs, n_nodes)

    def node_index(self, t):
        idx = int(round(t / self.delta))
        if not 1 <= idx < len(self.k_grid) or abs(idx * self.delta - t) > 1e-9 * max(1.0, t):
            raise ValueError(f"t={t} is not a positive grid multiple of delta={self.delta}")
        return idx


def curve_table(observations, xi_points, eval_all, phi_values, t_max, stride_l=1,
                bandwidth=None, sup_bound=None):
    """Build the (m, n+1, nodes) table of phi and generator moment curves.

    ``eval_all`` maps states (..., d) to (..., n+1) stacking
    [phi, L_1 phi, ..., L_n phi]; ``phi_values`` maps states to phi alone.
    """
    l = int(stride_l)
    delta = l * observations.h
    n_nodes = int(round(t_max / delta))
    if n_nodes < 1 or abs(n_nodes * delta - t_max) > 1e-9 * max(1.0, t_max):
        raise ValueError(f"t_max={t_max} is not a positive multiple of delta={delta}")
    k_grid = l * np.arange(n_nodes + 1)
    xi_points = np.atleast_2d(np.asarray(xi_points, dtype=float))
    m = len(xi_points)

    if observations.kind == "ensemble":
        rows = [ensemble_curve_row(observations.block(i), eval_all, k_grid)
                for i in range(m)]
        values = np.stack(rows)
        if sup_bound is not None and np.abs(values[:, 0]).max() > sup_bound + 1e-12:
            raise ValueError("ensemble moment exceeded the declared sup bound")
    else:
        series = observations.series
        if bandwidth is None:
            usable = len(series.states) - int(k_grid[-1])
            bandwidth = default_bandwidth(usable, series.dim, series.states.std(axis=0))
        psi = np.ascontiguousarray(eval_all(series.states).T)  # (n+1, N)
        values = np.stack(
            [nw_curve_row(series.states, psi, xi, k_grid, bandwidth)
             for xi in xi_points]
        )
        if sup_bound is not None and np.abs(values[:, 0]).max() > sup_bound + 1e-12:
            warnings.warn("kernel moment estimate exceeded the declared sup bound")

    return CurveTable(delta=delta, k_grid=k_grid, xi_points=xi_points,
                      phi_at_xi=np.asarray(phi_values(xi_points), dtype=float),
                      values=values)


def ensemble_curve_row(block, eval_all, k_grid):
    """Curves for one trial point from its ensemble block; (n+1, nodes)."""
    sub = block[:, k_grid, :]  # (N, nodes, d)
    vals = eval_all(sub)       # (N, nodes, n+1)
    return np.ascontiguousarray(vals.mean(axis=0).T)


def nw_curve_row(states, psi, xi, k_grid, bandwidth):
    """Kernel-regression curves for one trial point; psi is (n+1, N) contiguous."""
    n_total = psi.shape[1]
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    kv = np.exp(-0.5 * np.sum(((states - xi) / bandwidth) ** 2, axis=-1))
    csum = np.cumsum(kv)
    out = np.empty((psi.shape[0], len(k_grid)))
    for col, k in enumerate(k_grid):
        n_w = n_total - int(k)
        den = csum[n_w - 1]
        if den < NW_ZERO_DENOMINATOR:
            out[:, col] = psi[:, k:].mean(axis=1)
        else:
            for j in range(psi.shape[0]):
                out[j, col] = np.dot(kv[:n_w], psi[j, k:]) / den
    return out


# ---------------------------------------------------------------------------
# stationarity / mixing diagnostics
# ---------------------------------------------------------------------------

@dataclass
class MixingDiagnostics:
    decay_rate: float      # fitted per-lag autocorrelation factor rho
    log_fit_r2: float
    autocorrelation: np.ndarray


def mixing_diagnostics(series_values, max_lag=200):
    """Fit an exponential to the lag autocorrelation of a scalar series.

    A proxy for the geometric mixing hypothesis of the kernel-regression
    consistency result, which is not checkable exactly at runtime.
    """
    x = np.asarray(series_values, dtype=float).ravel()
    x = x - x.mean()
    var = float(np.dot(x, x)) / len(x)
    lags = np.arange(1, max_lag + 1)
    acf = np.array([np.dot(x[:-k], x[k:]) / (len(x) * var) for k in lags])
    pos = acf > 1e-3
    if pos.sum() < 3:
        return MixingDiagnostics(decay_rate=0.0, log_fit_r2=1.0, autocorrelation=acf)
    y = np.log(acf[pos])
    t = lags[pos].astype(float)
    slope, intercept = np.polyfit(t, y, 1)
    resid = y - (slope * t + intercept)
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - float(np.sum(resid ** 2) / ss_tot) if ss_tot > 0 else 1.0
    return MixingDiagnostics(decay_rate=float(np.exp(slope)), log_fit_r2=r2,
                             autocorrelation=acf)
