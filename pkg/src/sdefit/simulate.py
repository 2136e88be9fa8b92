"""Observation generation: Euler--Maruyama integration, the multiscale system
catalog, an exact Ornstein--Uhlenbeck sampler, and closed-form homogenized
coefficients.

System registry names (used by config files):

    "fast_ou"        fast additive Ornstein--Uhlenbeck noise driving a slow
                     scalar variable; params A, varsigma
    "fast_ou_cubic"  same fast noise, cubic drift and quadratic diffusion;
                     params A, B, sigma_a, sigma_b
    "langevin1d"     overdamped Langevin in a 1-d two-scale potential
                     alpha x^2/2 + cos(x/eps); params alpha, sigma
    "langevin2d"     overdamped Langevin in a 2-d two-scale potential with
                     quadratic large-scale part x'Mx/2; params M, sigma

Multiscale systems expose only their slow components as observations
(``observed``); fast components are initialized from their stationary law
where one is defined, else at zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.signal

BLOWUP_LIMIT = 1e8
_NOISE_CHUNK = 1 << 20  # standard normals per buffer refill


class SimulationBlowupError(RuntimeError):
    """State magnitude exceeded BLOWUP_LIMIT (or went non-finite)."""

    def __init__(self, label, step):
        super().__init__(f"simulation of '{label}' blew up at step {step}")
        self.step = step
        self.label = label


@dataclass(frozen=True)
class SdeSystem:
    """dX = drift(X) dt + diffusion(X) dW with state dim d and noise dim r.

    ``drift`` maps (..., d) -> (..., d); ``diffusion`` maps (..., d) ->
    (..., d, r) (constant diffusions may return a plain (d, r) matrix).
    ``observed`` lists the components exposed as observations (None = all);
    ``fast_init`` draws stationary initial values for the remaining
    components. ``scalar_drift`` plus the constant ``scalar_noise`` enable a
    fast plain-float integration path for 1-d additive-noise systems.
    """

    dim_state: int
    dim_noise: int
    drift: Callable
    diffusion: Callable
    label: str
    observed: tuple | None = None
    fast_init: Callable | None = None
    scalar_drift: Callable | None = None
    scalar_noise: float | None = None

    @property
    def observed_dims(self):
        return tuple(range(self.dim_state)) if self.observed is None else self.observed


@dataclass
class Trajectory:
    """Uniformly sampled path: states[k] approximates X(t0 + k h)."""

    t0: float
    h: float
    states: np.ndarray  # (n+1, d)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim == 1:
            self.states = self.states[:, None]
        if self.h <= 0 or len(self.states) < 1:
            raise ValueError("need h > 0 and at least one state")

    def __len__(self):
        return len(self.states)

    @property
    def dim(self):
        return self.states.shape[1]


@dataclass(frozen=True)
class EnsembleDesign:
    """N trajectories of horizon t_horizon from every trial point."""

    xi_points: np.ndarray  # (m, d_obs)
    n_members: int
    t_horizon: float
    h: float


@dataclass(frozen=True)
class SingleSeriesDesign:
    """One long stationary series on [0, t_total], first burn_in discarded."""

    t_total: float
    h: float
    burn_in: float = 10.0


@dataclass
class ObservationSet:
    """Either an ensemble of trajectory blocks per trial point or one series.

    Ensemble blocks are (n_members, n_t + 1, d_obs) arrays; block i holds the
    trajectories started at xi_points[i].
    """

    kind: str  # "ensemble" | "series"
    h: float
    blocks: list | None = None
    xi_points: np.ndarray | None = None
    series: Trajectory | None = None

    @property
    def n_trial_points(self):
        return 0 if self.blocks is None else len(self.blocks)

    def block(self, i):
        return self.blocks[i]

    def save(self, path):
        """Write to an .npz container.

        Layout: scalars ``kind``, ``h``, ``d``; for ensembles ``xi_points``
        plus one ``block_%04d`` array per trial point (members x times x d,
        row-major); for series ``t0`` and ``states``.
        """
        meta = {"kind": self.kind, "h": self.h}
        if self.kind == "ensemble":
            arrays = {f"block_{i:04d}": b for i, b in enumerate(self.blocks)}
            np.savez(path, xi_points=self.xi_points, d=self.blocks[0].shape[2],
                     **meta, **arrays)
        else:
            np.savez(path, t0=self.series.t0, states=self.series.states,
                     d=self.series.dim, **meta)

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as data:
            kind = str(data["kind"])
            h = float(data["h"])
            if kind == "ensemble":
                names = sorted(k for k in data.files if k.startswith("block_"))
                blocks = [data[k] for k in names]
                return cls(kind=kind, h=h, blocks=blocks,
                           xi_points=data["xi_points"])
            series = Trajectory(t0=float(data["t0"]), h=h, states=data["states"])
            return cls(kind=kind, h=h, series=series)


# ---------------------------------------------------------------------------
# Euler--Maruyama integration
# ---------------------------------------------------------------------------

def _euler_block(system, x0, h, n_steps, rng, record_dims=None):
    """Integrate a batch of paths; returns (B, n_steps+1, len(record_dims)).

    Noise is drawn in fixed-size chunks from ``rng``; the value stream is
    identical to one standard normal draw of shape (B, r) per step, so batch
    results do not depend on the chunking.
    """
    x = np.array(x0, dtype=float)
    B = x.shape[0]
    dims = list(range(system.dim_state)) if record_dims is None else list(record_dims)
    rec = np.empty((B, n_steps + 1, len(dims)))
    rec[:, 0] = x[:, dims]
    sqh = math.sqrt(h)
    chunk = max(1, _NOISE_CHUNK // max(1, B * system.dim_noise))
    done = 0
    while done < n_steps:
        nb = min(chunk, n_steps - done)
        eta = rng.standard_normal((nb, B, system.dim_noise))
        for k in range(nb):
            g = system.diffusion(x)
            x = x + system.drift(x) * h + (g @ eta[k][..., None])[..., 0] * sqh
            if not np.all(np.abs(x) < BLOWUP_LIMIT):
                raise SimulationBlowupError(system.label, done + k + 1)
            rec[:, done + k + 1] = x[:, dims]
        done += nb
    return rec


def _euler_scalar(system, x0, h, n_steps, rng):
    """Plain-float loop for 1-d additive-noise systems; same noise stream."""
    drift = system.scalar_drift
    g_sqh = system.scalar_noise * math.sqrt(h)
    x = float(x0)
    out = np.empty(n_steps + 1)
    out[0] = x
    done = 0
    while done < n_steps:
        buf = rng.standard_normal(min(_NOISE_CHUNK, n_steps - done))
        for e in buf:
            x = x + drift(x) * h + g_sqh * e
            done += 1
            if not -BLOWUP_LIMIT < x < BLOWUP_LIMIT:
                raise SimulationBlowupError(system.label, done)
            out[done] = x
    return out[:, None]


def euler_maruyama(system, x0, h, n_steps, rng):
    """Integrate one path X(0) = x0 on the grid {0, h, ..., n_steps h}.

    ``rng`` is an integer seed or a numpy Generator; identical seeds produce
    bit-identical trajectories.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if n_steps < 0:
        raise ValueError("n_steps must be nonnegative")
    rng = np.random.default_rng(rng)
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (system.dim_state,):
        raise ValueError(f"x0 has shape {x0.shape}, expected ({system.dim_state},)")
    if (system.scalar_drift is not None and system.scalar_noise is not None
            and system.dim_state == 1 and system.dim_noise == 1):
        states = _euler_scalar(system, x0[0], h, n_steps, rng)
    else:
        states = _euler_block(system, x0[None, :], h, n_steps, rng)[0]
    return Trajectory(t0=0.0, h=h, states=states)


def generate_observations(system, design, rng):
    """Produce an ObservationSet for either observation design.

    Ensemble: each trial point gets its own child random stream (spawned in
    point order from ``rng``), members occupying fixed columns of the
    vectorized block, so results are reproducible regardless of how points
    are scheduled. Fast components start from ``system.fast_init`` when
    defined, else at zero. SingleSeries: one stream, burn-in discarded.
    """
    rng = np.random.default_rng(rng)
    d_obs = len(system.observed_dims)
    if isinstance(design, EnsembleDesign):
        xi = np.atleast_2d(np.asarray(design.xi_points, dtype=float))
        if xi.shape[1] != d_obs:
            raise ValueError(f"trial points have dim {xi.shape[1]}, expected {d_obs}")
        n_t = int(round(design.t_horizon / design.h))
        if abs(n_t * design.h - design.t_horizon) > 1e-9 * max(1.0, design.t_horizon):
            raise ValueError("t_horizon must be an integer multiple of h")
        children = rng.spawn(len(xi))
        blocks = [
            ensemble_block(system, xi[i], design.n_members, design.h, n_t, children[i])
            for i in range(len(xi))
        ]
        return ObservationSet(kind="ensemble", h=design.h, blocks=blocks, xi_points=xi)
    if isinstance(design, SingleSeriesDesign):
        if not 0 <= design.burn_in < design.t_total:
            raise ValueError("need 0 <= burn_in < t_total")
        n_burn = int(round(design.burn_in / design.h))
        n_keep = int(round((design.t_total - design.burn_in) / design.h))
        x0 = np.zeros(system.dim_state)
        if system.fast_init is not None:
            fast = [i for i in range(system.dim_state) if i not in system.observed_dims]
            x0[fast] = system.fast_init(rng, 1)[0]
        warm = euler_maruyama(system, x0, design.h, n_burn, rng)
        # continue the same stream from the post-burn-in state
        tail = _continue_path(system, warm.states[-1], design.h, n_keep, rng)
        series = Trajectory(t0=design.burn_in, h=design.h,
                            states=tail[:, system.observed_dims])
        return ObservationSet(kind="series", h=design.h, series=series)
    raise TypeError(f"unknown design {type(design).__name__}")


def _continue_path(system, x_start, h, n_steps, rng):
    if (system.scalar_drift is not None and system.scalar_noise is not None
            and system.dim_state == 1 and system.dim_noise == 1):
        return _euler_scalar(system, float(x_start[0]), h, n_steps, rng)
    return _euler_block(system, np.asarray(x_start, dtype=float)[None, :],
                        h, n_steps, rng)[0]


def ensemble_block(system, xi, n_members, h, n_steps, rng):
    """N trajectories from one trial point; slow components only.

    Returns (n_members, n_steps + 1, d_obs); row k is member k's path.
    """
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    x0 = np.zeros((n_members, system.dim_state))
    x0[:, list(system.observed_dims)] = xi
    fast = [i for i in range(system.dim_state) if i not in system.observed_dims]
    if fast:
        x0[:, fast] = (system.fast_init(rng, n_members) if system.fast_init is not None
                       else 0.0)
    return _euler_block(system, x0, h, n_steps, rng,
                        record_dims=list(system.observed_dims))


# ---------------------------------------------------------------------------
# system catalog
# ---------------------------------------------------------------------------

def make_fast_ou_system(h_fun, sigma_fun, epsilon, sigma_prime=None, label="fast_ou"):
    """Joint (slow, fast) system driven by a fast Ornstein--Uhlenbeck process.

    Slow drift sigma(x) y / eps + h(x, y) - sigma'(x) sigma(x) (the last term
    removes the Stratonovich correction so the coarse noise is Ito), fast
    drift -y/eps^2 with noise sqrt(2)/eps. Only the slow component is
    observed; the fast one starts from its stationary N(0, 1) law.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if sigma_prime is None:
        def sigma_prime(x, _s=sigma_fun):
            step = 1e-6 * (1.0 + np.abs(x))
            return (_s(x + step) - _s(x - step)) / (2.0 * step)

    inv_eps = 1.0 / epsilon

    def drift(x):
        x = np.asarray(x, dtype=float)
        xs, ys = x[..., 0], x[..., 1]
        s = sigma_fun(xs)
        out = np.empty_like(x)
        out[..., 0] = s * ys * inv_eps + h_fun(xs, ys) - sigma_prime(xs) * s
        out[..., 1] = -ys * inv_eps ** 2
        return out

    g_const = np.array([[0.0], [math.sqrt(2.0) * inv_eps]])

    return SdeSystem(
        dim_state=2, dim_noise=1,
        drift=drift, diffusion=lambda x: g_const,
        label=label, observed=(0,),
        fast_init=lambda rng, n: rng.standard_normal((n, 1)),
    )


def make_langevin_2d_system(M, sigma, epsilon, p_primes=None):
    """Overdamped Langevin in the 2-d two-scale potential x'Mx/2 + p1 + p2.

    Default fluctuations p1(y) = cos(y), p2(y) = cos(y)/2; pass ``p_primes``
    (two callables) to override, e.g. with zeros to suppress them.
    """
    M = np.asarray(M, dtype=float)
    if M.shape != (2, 2) or not np.allclose(M, M.T, atol=1e-12):
        raise ValueError("M must be a symmetric 2x2 matrix")
    if np.linalg.eigvalsh(M).min() <= 0:
        raise ValueError("M must be positive definite")
    if sigma <= 0 or epsilon <= 0:
        raise ValueError("sigma and epsilon must be positive")
    if p_primes is None:
        p_primes = (lambda y: -np.sin(y), lambda y: -0.5 * np.sin(y))
    p1p, p2p = p_primes
    inv_eps = 1.0 / epsilon

    def drift(x):
        x = np.asarray(x, dtype=float)
        out = -np.einsum("ij,...j->...i", M, x)
        out[..., 0] -= inv_eps * p1p(x[..., 0] * inv_eps)
        out[..., 1] -= inv_eps * p2p(x[..., 1] * inv_eps)
        return out

    g_const = math.sqrt(2.0 * sigma) * np.eye(2)

    return SdeSystem(dim_state=2, dim_noise=2, drift=drift,
                     diffusion=lambda x: g_const, label="langevin2d")


def make_langevin_1d_system(alpha, sigma, epsilon):
    """Overdamped Langevin in the 1-d two-scale potential alpha x^2/2 + cos(x/eps)."""
    if sigma <= 0 or epsilon <= 0:
        raise ValueError("sigma and epsilon must be positive")
    inv_eps = 1.0 / epsilon

    def drift(x):
        x = np.asarray(x, dtype=float)
        return -alpha * x + np.sin(x * inv_eps) * inv_eps

    g_const = np.array([[math.sqrt(2.0 * sigma)]])

    return SdeSystem(
        dim_state=1, dim_noise=1,
        drift=drift, diffusion=lambda x: g_const,
        label="langevin1d",
        scalar_drift=lambda x: -alpha * x + math.sin(x * inv_eps) * inv_eps,
        scalar_noise=math.sqrt(2.0 * sigma),
    )


# ---------------------------------------------------------------------------
# exact Ornstein--Uhlenbeck sampling (oracle for dX = A X dt + sqrt(2 Sigma) dW)
# ---------------------------------------------------------------------------

def ou_transition_moments(A, Sigma, x0, t):
    """Mean and variance of the OU transition law over a step of length t."""
    if A >= 0:
        raise ValueError("exact OU sampler requires A < 0")
    mean = x0 * math.exp(A * t)
    var = Sigma * (1.0 - math.exp(2.0 * A * t)) / abs(A)
    return mean, var


def sample_ou_exact(A, Sigma, x0, t, rng):
    """One exact draw of X(t) given X(0) = x0 for the stable OU process."""
    if t <= 0:
        raise ValueError("t must be positive")
    rng = np.random.default_rng(rng)
    mean, var = ou_transition_moments(A, Sigma, x0, t)
    return mean + math.sqrt(var) * rng.standard_normal()


def sample_ou_exact_path(A, Sigma, x0, h, n_steps, rng):
    """Exact OU path on a uniform grid via the AR(1) transition recursion."""
    rng = np.random.default_rng(rng)
    _, var = ou_transition_moments(A, Sigma, 1.0, h)
    a = math.exp(A * h)
    inp = np.empty(n_steps + 1)
    inp[0] = x0
    inp[1:] = math.sqrt(var) * rng.standard_normal(n_steps)
    states = scipy.signal.lfilter([1.0], [1.0, -a], inp)
    return Trajectory(t0=0.0, h=h, states=states)


# ---------------------------------------------------------------------------
# homogenized coefficients
# ---------------------------------------------------------------------------

def bessel_i0(z, tol=1e-12):
    """Modified Bessel function I_0 by its power series (all-positive terms).

    Intended for arguments up to ~20 (used here with z = 1/sigma); the series
    converges for any z but is guarded against float overflow.
    """
    z = float(z)
    if abs(z) > 600.0:
        raise ValueError("bessel_i0 argument too large for the series evaluation")
    q = 0.25 * z * z
    term = 1.0
    total = 1.0
    k = 0
    while term > tol * total:
        k += 1
        term *= q / (k * k)
        total += term
    return total


def homogenized_langevin_coefficients(alpha, sigma, p, period, n_panels=20000):
    """Coarse (A, Sigma) for the 1-d two-scale Langevin with fluctuation p.

    Computes Z+- = int_0^L exp(+-p(y)/sigma) dy by composite trapezoid with
    at least 10^4 panels and returns (alpha L^2/(Z+ Z-), sigma L^2/(Z+ Z-)).
    """
    if sigma <= 0 or period <= 0:
        raise ValueError("sigma and period must be positive")
    n_panels = max(int(n_panels), 10000)
    y = np.linspace(0.0, period, n_panels + 1)
    pv = np.asarray(p(y), dtype=float)
    z_plus = np.trapezoid(np.exp(pv / sigma), y)
    z_minus = np.trapezoid(np.exp(-pv / sigma), y)
    factor = period ** 2 / (z_plus * z_minus)
    return alpha * factor, sigma * factor


def homogenized_2d_coefficients(M, sigma):
    """Coarse drift -RM and diffusion sigma R for the 2-d two-scale Langevin.

    R = diag(r1, r2) with r1 = I0(1/sigma)^-2 and r2 = I0(1/(2 sigma))^-2,
    matching the cos(y) and cos(y)/2 fluctuation pair.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    M = np.asarray(M, dtype=float)
    r1 = bessel_i0(1.0 / sigma) ** -2
    r2 = bessel_i0(0.5 / sigma) ** -2
    R = np.diag([r1, r2])
    return -R @ M, sigma * R


# ---------------------------------------------------------------------------
# system registry
# ---------------------------------------------------------------------------

def _params_exactly(params, names):
    missing = set(names) - set(params)
    extra = set(params) - set(names)
    if missing or extra:
        raise KeyError(f"expected parameters {sorted(names)}, "
                       f"missing {sorted(missing)}, unexpected {sorted(extra)}")


def _build_fast_ou(params, epsilon):
    _params_exactly(params, ("A", "varsigma"))
    a, vs = float(params["A"]), float(params["varsigma"])
    s = math.sqrt(vs)
    return make_fast_ou_system(
        h_fun=lambda x, y: a * x,
        sigma_fun=lambda x: np.full_like(np.asarray(x, dtype=float), s),
        epsilon=epsilon,
        sigma_prime=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
        label="fast_ou",
    )


def _theta_fast_ou(params):
    return np.array([float(params["A"]), float(params["varsigma"])])


def _build_fast_ou_cubic(params, epsilon):
    _params_exactly(params, ("A", "B", "sigma_a", "sigma_b"))
    a, b = float(params["A"]), float(params["B"])
    sa, sb = float(params["sigma_a"]), float(params["sigma_b"])

    def sigma_fun(x):
        return np.sqrt(sa + sb * np.asarray(x, dtype=float) ** 2)

    return make_fast_ou_system(
        h_fun=lambda x, y: a * x + b * x ** 3,
        sigma_fun=sigma_fun,
        epsilon=epsilon,
        sigma_prime=lambda x: sb * np.asarray(x, dtype=float) / sigma_fun(x),
        label="fast_ou_cubic",
    )


def _theta_fast_ou_cubic(params):
    return np.array([float(params[k]) for k in ("A", "B", "sigma_a", "sigma_b")])


def _build_langevin1d(params, epsilon):
    _params_exactly(params, ("alpha", "sigma"))
    return make_langevin_1d_system(float(params["alpha"]), float(params["sigma"]),
                                   epsilon)


def _theta_langevin1d(params):
    a_hom, s_hom = homogenized_langevin_coefficients(
        float(params["alpha"]), float(params["sigma"]), np.cos, 2.0 * math.pi)
    return np.array([-a_hom, s_hom])


def _build_langevin2d(params, epsilon):
    _params_exactly(params, ("M", "sigma"))
    return make_langevin_2d_system(params["M"], float(params["sigma"]), epsilon)


def _theta_langevin2d(params):
    drift_mat, diff_mat = homogenized_2d_coefficients(params["M"],
                                                      float(params["sigma"]))
    return np.concatenate([drift_mat.ravel(), np.diag(diff_mat)])


@dataclass(frozen=True)
class SystemSpec:
    build: Callable
    true_theta: Callable
    dim_obs: int
    default_basis: str


SYSTEM_REGISTRY = {
    "fast_ou": SystemSpec(_build_fast_ou, _theta_fast_ou, 1, "ou2"),
    "fast_ou_cubic": SystemSpec(_build_fast_ou_cubic, _theta_fast_ou_cubic, 1, "cubic4"),
    "langevin1d": SystemSpec(_build_langevin1d, _theta_langevin1d, 1, "ou2"),
    "langevin2d": SystemSpec(_build_langevin2d, _theta_langevin2d, 2, "linear2d6"),
}


def get_system(name, params, epsilon):
    if name not in SYSTEM_REGISTRY:
        raise KeyError(f"unknown system '{name}'; available: {sorted(SYSTEM_REGISTRY)}")
    return SYSTEM_REGISTRY[name].build(params, epsilon)


def system_true_theta(name, params):
    """Coarse-model parameter vector the system homogenizes to."""
    if name not in SYSTEM_REGISTRY:
        raise KeyError(f"unknown system '{name}'; available: {sorted(SYSTEM_REGISTRY)}")
    return SYSTEM_REGISTRY[name].true_theta(params)
