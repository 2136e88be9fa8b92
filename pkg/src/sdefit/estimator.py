"""Linear-system assembly and minimum-norm least-squares estimation.

The estimating equation instantiated at m trial points gives A theta = b with
b_i = u(t, xi_i; phi) - phi(xi_i) and A_ij the time integral over [0, t] of
the moment curve of the j-th basis generator applied to phi. The estimate is
the minimum-norm least-squares solution theta_hat = A^+ b.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import model as model_mod
from . import moments as moments_mod
from . import simulate as simulate_mod


@dataclass(frozen=True)
class TrialPoints:
    """Fixed trial points xi_i; drawn once per experiment, then immutable."""

    points: np.ndarray  # (m, d)
    seed: int

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if len(pts) < 1 or not np.all(np.isfinite(pts)):
            raise ValueError("trial points must be a nonempty finite array")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


@dataclass
class LinearSystemEstimate:
    A: np.ndarray
    b: np.ndarray
    theta_hat: np.ndarray
    singular_values: np.ndarray
    effective_rank: int
    residual_norm: float

    @property
    def condition(self):
        """Condition number over the retained spectrum."""
        s = self.singular_values
        if self.effective_rank == 0 or s[0] == 0:
            return math.inf
        return float(s[0] / s[self.effective_rank - 1])


class AssemblyError(RuntimeError):
    pass


def draw_trial_points(m, d, seed):
    """m i.i.d. standard-normal d-vectors from the seeded stream."""
    if m < 1:
        raise ValueError("m must be >= 1")
    rng = np.random.default_rng(seed)
    return TrialPoints(points=rng.standard_normal((m, d)), seed=seed)


def min_norm_least_squares(A, b, rank_tol=None):
    """Minimum-norm least-squares solution via SVD truncation.

    Singular values s_i <= rank_tol * s_1 are treated as zero; the default
    tolerance is machine epsilon times max(m, n).
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
        raise ValueError("non-finite entries in the linear system")
    if rank_tol is None:
        rank_tol = np.finfo(float).eps * max(A.shape)
    u, s, vt = np.linalg.svd(A, full_matrices=False)
    rank = int(np.sum(s > rank_tol * s[0])) if s.size and s[0] > 0 else 0
    theta = np.zeros(A.shape[1])
    if rank > 0:
        theta = vt[:rank].T @ ((u[:, :rank].T @ b) / s[:rank])
    return LinearSystemEstimate(
        A=A, b=b, theta_hat=theta, singular_values=s,
        effective_rank=rank,
        residual_norm=float(np.linalg.norm(A @ theta - b)),
    )


def assemble_from_table(table, t):
    """(A, b) for horizon t from a precomputed moment-curve table."""
    idx = table.node_index(t)
    b = table.values[:, 0, idx] - table.phi_at_xi
    weights = np.ones(idx + 1)
    weights[0] = weights[-1] = 0.5
    A = np.einsum("mjk,k->mj", table.values[:, 1:, : idx + 1], weights) * table.delta
    bad = np.argwhere(~np.isfinite(A))
    if len(bad):
        i, j = bad[0]
        raise AssemblyError(f"non-finite matrix entry at row {i}, column {j + 1}")
    if not np.all(np.isfinite(b)):
        i = int(np.argwhere(~np.isfinite(b))[0])
        raise AssemblyError(f"non-finite right-hand side entry at row {i}")
    return A, b


def assemble_system(model, phi, trial_points, t, observations, stride_l=1,
                    bandwidth=None):
    """Assemble A (m x n) and b (m,) from observations at horizon t."""
    table = moments_mod.curve_table(
        observations,
        trial_points.points if hasattr(trial_points, "points") else trial_points,
        model_mod.phi_and_generator_values(model, phi),
        phi.value,
        t_max=t,
        stride_l=stride_l,
        bandwidth=bandwidth,
        sup_bound=phi.sup_bound,
    )
    return assemble_from_table(table, t)


# ---------------------------------------------------------------------------
# config-driven pipeline
# ---------------------------------------------------------------------------

def prepare_trial_points(config):
    """Trial points for an experiment, drawn from the config seed and fixed."""
    system = simulate_mod.get_system(config.system, config.system_params,
                                     config.epsilon)
    return draw_trial_points(config.m, len(system.observed_dims), config.seed)


def build_curve_table(config, observations=None, threads=1,
                      collect_observations=False):
    """Moment-curve table for a config, simulating observations if needed.

    For ensemble designs the trial points are simulated one block at a time
    (each with its own child stream of the config seed) and reduced to moment
    curves immediately, so the full observation set is only materialized when
    ``collect_observations`` is set. Returns (trial_points, table,
    observations_or_None, bandwidth_used).
    """
    system = simulate_mod.get_system(config.system, config.system_params,
                                     config.epsilon)
    basis = model_mod.get_basis(config.basis)
    phi = model_mod.get_phi(config.phi, basis.dim)
    eval_all = model_mod.phi_and_generator_values(basis, phi)
    xi = prepare_trial_points(config)
    bandwidth = config.bandwidth

    if observations is not None:
        if observations.kind == "series" and bandwidth is None:
            bandwidth = _series_bandwidth(observations, config)
        table = moments_mod.curve_table(
            observations, xi.points, eval_all, phi.value,
            t_max=config.t_max, stride_l=config.stride_l,
            bandwidth=bandwidth, sup_bound=phi.sup_bound)
        return xi, table, observations, bandwidth

    obs_rng = np.random.default_rng(
        np.random.SeedSequence(entropy=config.seed, spawn_key=(1,)))

    if config.design == "ensemble":
        n_t = int(round(config.t_max / config.h))
        children = obs_rng.spawn(len(xi))
        k_grid = config.stride_l * np.arange(int(round(config.t_max / (config.stride_l * config.h))) + 1)
        blocks = [None] * len(xi) if collect_observations else None

        def row(i):
            block = simulate_mod.ensemble_block(
                system, xi.points[i], config.n_members, config.h, n_t, children[i])
            if blocks is not None:
                blocks[i] = block
            return moments_mod.ensemble_curve_row(block, eval_all, k_grid)

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                rows = list(pool.map(row, range(len(xi))))
        else:
            rows = [row(i) for i in range(len(xi))]
        values = np.stack(rows)
        if np.abs(values[:, 0]).max() > phi.sup_bound + 1e-12:
            raise AssemblyError("ensemble moment exceeded the phi sup bound")
        table = moments_mod.CurveTable(
            delta=config.stride_l * config.h, k_grid=k_grid, xi_points=xi.points,
            phi_at_xi=np.asarray(phi.value(xi.points), dtype=float), values=values)
        obs = None
        if collect_observations:
            obs = simulate_mod.ObservationSet(kind="ensemble", h=config.h,
                                              blocks=blocks, xi_points=xi.points)
        return xi, table, obs, None

    design = simulate_mod.SingleSeriesDesign(
        t_total=config.t_total, h=config.h, burn_in=config.burn_in)
    obs = simulate_mod.generate_observations(system, design, obs_rng)
    if bandwidth is None:
        bandwidth = _series_bandwidth(obs, config)
    table = moments_mod.curve_table(
        obs, xi.points, eval_all, phi.value,
        t_max=config.t_max, stride_l=config.stride_l,
        bandwidth=bandwidth, sup_bound=phi.sup_bound)
    return xi, table, (obs if collect_observations else None), bandwidth


def _series_bandwidth(observations, config):
    k_max = int(round(config.t_max / observations.h))
    series = observations.series
    usable = len(series.states) - k_max
    return moments_mod.default_bandwidth(usable, series.dim,
                                         series.states.std(axis=0))


def estimate(config, observations=None, t=None, threads=1):
    """Full pipeline: assemble the system at horizon t and solve it.

    ``t`` defaults to the last entry of the config's t grid.
    """
    if t is None:
        t = config.t_grid[-1]
    _, table, _, _ = build_curve_table(config, observations, threads=threads)
    A, b = assemble_from_table(table, t)
    return min_norm_least_squares(A, b)


@dataclass
class SweepPoint:
    t: float
    theta_hat: np.ndarray | None
    rel_error: float
    residual_norm: float
    effective_rank: int
    condition: float
    singular_values: np.ndarray | None
    error: str | None = None


def relative_error(theta_hat, theta_true):
    theta_true = np.asarray(theta_true, dtype=float)
    return float(np.linalg.norm(theta_hat - theta_true) / np.linalg.norm(theta_true))


def error_sweep(config, theta_true=None, t_grid=None, observations=None,
                threads=1, table=None):
    """One estimate per horizon t on shared observations.

    Failures at individual t values are recorded on their sweep point and the
    sweep continues. ``rel_error`` is NaN when theta_true is unknown.
    """
    if t_grid is None:
        t_grid = config.t_grid
    if table is None:
        _, table, _, _ = build_curve_table(config, observations, threads=threads)
    points = []
    for t in t_grid:
        try:
            A, b = assemble_from_table(table, t)
            est = min_norm_least_squares(A, b)
            rel = (relative_error(est.theta_hat, theta_true)
                   if theta_true is not None else math.nan)
            points.append(SweepPoint(
                t=t, theta_hat=est.theta_hat, rel_error=rel,
                residual_norm=est.residual_norm,
                effective_rank=est.effective_rank,
                condition=est.condition,
                singular_values=est.singular_values))
        except Exception as exc:  # per-t failure: record and continue
            points.append(SweepPoint(
                t=t, theta_hat=None, rel_error=math.nan,
                residual_norm=math.nan, effective_rank=0,
                condition=math.nan, singular_values=None, error=str(exc)))
    return points
