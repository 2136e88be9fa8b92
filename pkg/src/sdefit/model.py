"""Parametrized SDE families and admissible test functions.

A model describes drift f(x; theta) = sum_j theta_j f_j(x) and diffusion
G(x; theta) = sum_j theta_j G_j(x), with d-dimensional state and n
parameters. Basis functions operate on state arrays of shape (..., d) and
must broadcast over leading axes; every G_j returns a symmetric (..., d, d)
array (constant bases may return a plain (d, d) matrix).

Test functions phi are bounded C^2 functions with gradient and Hessian
access. Built-in catalogs are selectable by registry name:

    phi registry:    "gauss"       exp(-||x||^2 / 2), any dimension
                     "gauss_lin"   (1 + x) exp(-x^2 / 2), 1-d
                     "gauss_prod2" Phi(x1) Phi(x2) with
                                   Phi(z) = (1 + z^2) exp(-z^2 / 2), 2-d

    basis registry:  "ou2"         d=1, n=2: f = [x, 0], G = [0, 2]
                     "cubic4"      d=1, n=4: f = [x, x^3, 0, 0],
                                   G = [0, 0, 2, 2 x^2]
                     "linear2d6"   d=2, n=6: f = [(x1,0), (x2,0), (0,x1),
                                   (0,x2), 0, 0], G_5 = diag(2, 0),
                                   G_6 = diag(0, 2)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

FD_STEP = 1e-5          # central-difference step, scaled per coordinate by (1 + |x_i|)
DERIV_CHECK_TOL = 1e-5  # relative tolerance of the finite-difference check


@dataclass(frozen=True)
class ParametrizedModel:
    """SDE family with drift and diffusion linear in the parameter vector."""

    dim: int
    n_params: int
    drift_basis: tuple
    diffusion_basis: tuple
    name: str = ""

    def __post_init__(self):
        if self.dim < 1 or self.n_params < 1:
            raise ValueError("dim and n_params must be positive")
        if len(self.drift_basis) != self.n_params:
            raise ValueError(
                f"drift_basis has {len(self.drift_basis)} entries, expected {self.n_params}"
            )
        if len(self.diffusion_basis) != self.n_params:
            raise ValueError(
                f"diffusion_basis has {len(self.diffusion_basis)} entries, expected {self.n_params}"
            )


@dataclass(frozen=True)
class AdmissibleFunction:
    """Bounded C^2 test function with gradient and Hessian access.

    ``fd_fallback`` marks functions whose derivatives come from central
    finite differences rather than analytic formulas.
    """

    value: Callable
    gradient: Callable
    hessian: Callable
    sup_bound: float
    dim: int
    name: str = ""
    fd_fallback: bool = False


def _as_state(x, dim):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1)
    if x.shape[-1] != dim:
        raise ValueError(f"state has trailing dimension {x.shape[-1]}, expected {dim}")
    return x


def fd_gradient(value, x, dim):
    """Central-difference gradient with per-coordinate step FD_STEP * (1 + |x_i|)."""
    x = _as_state(x, dim)
    g = np.empty_like(x)
    for i in range(dim):
        step = FD_STEP * (1.0 + np.abs(x[..., i]))
        xp = x.copy()
        xm = x.copy()
        xp[..., i] += step
        xm[..., i] -= step
        g[..., i] = (value(xp) - value(xm)) / (2.0 * step)
    return g


def fd_hessian(value, x, dim):
    """Central-difference Hessian, symmetric by construction."""
    x = _as_state(x, dim)
    out = np.empty(x.shape + (dim,))
    for i in range(dim):
        si = FD_STEP * (1.0 + np.abs(x[..., i]))
        for j in range(i, dim):
            sj = FD_STEP * (1.0 + np.abs(x[..., j]))
            xpp = x.copy(); xpm = x.copy(); xmp = x.copy(); xmm = x.copy()
            xpp[..., i] += si; xpp[..., j] += sj
            xpm[..., i] += si; xpm[..., j] -= sj
            xmp[..., i] -= si; xmp[..., j] += sj
            xmm[..., i] -= si; xmm[..., j] -= sj
            hij = (value(xpp) - value(xpm) - value(xmp) + value(xmm)) / (4.0 * si * sj)
            out[..., i, j] = hij
            out[..., j, i] = hij
    return out


def admissible_from_value(value, sup_bound, dim, name=""):
    """Wrap a bare bounded function, deriving gradient/Hessian by finite differences."""
    return AdmissibleFunction(
        value=value,
        gradient=lambda x: fd_gradient(value, x, dim),
        hessian=lambda x: fd_hessian(value, x, dim),
        sup_bound=float(sup_bound),
        dim=dim,
        name=name,
        fd_fallback=True,
    )


def scale_phi(phi, c):
    """Scale a test function (and its derivatives) by a constant c > 0."""
    return AdmissibleFunction(
        value=lambda x, _v=phi.value: c * _v(x),
        gradient=lambda x, _g=phi.gradient: c * _g(x),
        hessian=lambda x, _h=phi.hessian: c * _h(x),
        sup_bound=c * phi.sup_bound,
        dim=phi.dim,
        name=f"{c}*{phi.name}",
        fd_fallback=phi.fd_fallback,
    )


def evaluate_drift(model, theta, x):
    """f(x; theta) = sum_j theta_j f_j(x); works on batched states (..., d)."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (model.n_params,):
        raise ValueError(f"theta has shape {theta.shape}, expected ({model.n_params},)")
    x = _as_state(x, model.dim)
    out = np.zeros_like(x)
    for tj, fj in zip(theta, model.drift_basis):
        if tj != 0.0:
            out += tj * np.broadcast_to(fj(x), x.shape)
    return out


def evaluate_diffusion(model, theta, x):
    """G(x; theta) = sum_j theta_j G_j(x); result is symmetric (..., d, d)."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (model.n_params,):
        raise ValueError(f"theta has shape {theta.shape}, expected ({model.n_params},)")
    x = _as_state(x, model.dim)
    shape = x.shape + (model.dim,)
    out = np.zeros(shape)
    for tj, Gj in zip(theta, model.diffusion_basis):
        if tj != 0.0:
            out += tj * np.broadcast_to(Gj(x), shape)
    return out


def generator_apply(model, j, phi, x):
    """Apply the j-th basis generator to phi at x.

    Returns f_j(x) . grad phi(x) + (1/2) G_j(x) : hess phi(x), where ":" is
    the Frobenius inner product. Index j is 1-based.
    """
    if not 1 <= j <= model.n_params:
        raise ValueError(f"basis index {j} out of range 1..{model.n_params}")
    x = _as_state(x, model.dim)
    fj = np.broadcast_to(model.drift_basis[j - 1](x), x.shape)
    Gj = np.broadcast_to(model.diffusion_basis[j - 1](x), x.shape + (model.dim,))
    grad = phi.gradient(x)
    hess = phi.hessian(x)
    return np.sum(fj * grad, axis=-1) + 0.5 * np.sum(Gj * hess, axis=(-2, -1))


def phi_and_generator_values(model, phi):
    """Batch evaluator for [phi, L_1 phi, ..., L_n phi].

    Returns a callable mapping states (..., d) to an array (..., n+1). The
    gradient and Hessian are evaluated once per call and shared across j,
    which is what the moment-curve assembly iterates millions of times.
    """

    def evaluate(x):
        x = _as_state(x, model.dim)
        out = np.empty(x.shape[:-1] + (model.n_params + 1,))
        out[..., 0] = phi.value(x)
        grad = phi.gradient(x)
        hess = phi.hessian(x)
        for j in range(model.n_params):
            fj = np.broadcast_to(model.drift_basis[j](x), x.shape)
            Gj = np.broadcast_to(model.diffusion_basis[j](x), x.shape + (model.dim,))
            out[..., j + 1] = np.sum(fj * grad, axis=-1) + 0.5 * np.sum(
                Gj * hess, axis=(-2, -1)
            )
        return out

    return evaluate


@dataclass
class AdmissibilityReport:
    max_abs_phi: float
    max_abs_generator: np.ndarray  # per basis index j
    max_deriv_error: float
    bound_ok: bool
    deriv_ok: bool

    @property
    def passed(self):
        return self.bound_ok and self.deriv_ok


def _deriv_check_error(phi, x):
    """Normalized disagreement between analytic and FD derivatives at points x."""
    g_an = phi.gradient(x)
    g_fd = fd_gradient(phi.value, x, phi.dim)
    h_an = phi.hessian(x)
    h_fd = fd_hessian(phi.value, x, phi.dim)
    g_err = np.abs(g_an - g_fd).max() / max(1.0, np.abs(g_an).max())
    h_err = np.abs(h_an - h_fd).max() / max(1.0, np.abs(h_an).max())
    return max(float(g_err), float(h_err))


def validate_admissible(phi, model, sample_points):
    """Spot-check membership of phi in the admissible class for this model.

    Reports max |phi|, max |L_j phi| per basis index, and the worst relative
    disagreement between the declared derivatives and central finite
    differences. Fails if |phi| exceeds sup_bound anywhere in the sample or
    the derivative check exceeds DERIV_CHECK_TOL.
    """
    pts = _as_state(np.asarray(sample_points, dtype=float), model.dim)
    if pts.size == 0:
        raise ValueError("sample_points must be nonempty")
    vals = phi.value(pts)
    max_phi = float(np.abs(vals).max())
    max_gen = np.array(
        [float(np.abs(generator_apply(model, j, phi, pts)).max())
         for j in range(1, model.n_params + 1)]
    )
    # An fd-fallback phi trivially agrees with its own finite differences;
    # the check only constrains analytic derivative pairs.
    deriv_err = 0.0 if phi.fd_fallback else _deriv_check_error(phi, pts)
    return AdmissibilityReport(
        max_abs_phi=max_phi,
        max_abs_generator=max_gen,
        max_deriv_error=deriv_err,
        bound_ok=max_phi <= phi.sup_bound + 1e-12,
        deriv_ok=deriv_err <= DERIV_CHECK_TOL,
    )


# ---------------------------------------------------------------------------
# built-in phi catalog
# ---------------------------------------------------------------------------

def _gauss(dim):
    def value(x):
        return np.exp(-0.5 * np.sum(np.asarray(x) ** 2, axis=-1))

    def gradient(x):
        x = np.asarray(x, dtype=float)
        return -x * value(x)[..., None]

    def hessian(x):
        x = np.asarray(x, dtype=float)
        eye = np.eye(dim)
        outer = x[..., :, None] * x[..., None, :]
        return (outer - eye) * value(x)[..., None, None]

    return AdmissibleFunction(value, gradient, hessian, sup_bound=1.0,
                              dim=dim, name="gauss")


# sup of (1+x) exp(-x^2/2), attained at x = (sqrt(5)-1)/2
_GAUSS_LIN_SUP = (1.0 + (math.sqrt(5.0) - 1.0) / 2.0) * math.exp(
    -(((math.sqrt(5.0) - 1.0) / 2.0) ** 2) / 2.0
)


def _gauss_lin(dim):
    if dim != 1:
        raise ValueError("gauss_lin is one-dimensional")

    def value(x):
        z = np.asarray(x)[..., 0]
        return (1.0 + z) * np.exp(-0.5 * z ** 2)

    def gradient(x):
        z = np.asarray(x)[..., 0]
        return ((1.0 - z - z ** 2) * np.exp(-0.5 * z ** 2))[..., None]

    def hessian(x):
        z = np.asarray(x)[..., 0]
        return ((z ** 3 + z ** 2 - 3.0 * z - 1.0) * np.exp(-0.5 * z ** 2))[..., None, None]

    return AdmissibleFunction(value, gradient, hessian, sup_bound=_GAUSS_LIN_SUP,
                              dim=1, name="gauss_lin")


def _bump(z):
    return (1.0 + z ** 2) * np.exp(-0.5 * z ** 2)


def _bump_d1(z):
    return z * (1.0 - z ** 2) * np.exp(-0.5 * z ** 2)


def _bump_d2(z):
    return (z ** 4 - 4.0 * z ** 2 + 1.0) * np.exp(-0.5 * z ** 2)


# sup of Phi(z) = (1+z^2) exp(-z^2/2) is at z = +-1
_BUMP_SUP = 2.0 * math.exp(-0.5)


def _gauss_prod2(dim):
    if dim != 2:
        raise ValueError("gauss_prod2 is two-dimensional")

    def value(x):
        x = np.asarray(x)
        return _bump(x[..., 0]) * _bump(x[..., 1])

    def gradient(x):
        x = np.asarray(x, dtype=float)
        p1, p2 = _bump(x[..., 0]), _bump(x[..., 1])
        return np.stack([_bump_d1(x[..., 0]) * p2, p1 * _bump_d1(x[..., 1])], axis=-1)

    def hessian(x):
        x = np.asarray(x, dtype=float)
        z1, z2 = x[..., 0], x[..., 1]
        p1, p2 = _bump(z1), _bump(z2)
        d1, d2 = _bump_d1(z1), _bump_d1(z2)
        out = np.empty(x.shape + (2,))
        out[..., 0, 0] = _bump_d2(z1) * p2
        out[..., 1, 1] = p1 * _bump_d2(z2)
        out[..., 0, 1] = d1 * d2
        out[..., 1, 0] = d1 * d2
        return out

    return AdmissibleFunction(value, gradient, hessian, sup_bound=_BUMP_SUP ** 2,
                              dim=2, name="gauss_prod2")


PHI_REGISTRY = {
    "gauss": _gauss,
    "gauss_lin": _gauss_lin,
    "gauss_prod2": _gauss_prod2,
}


def get_phi(name, dim):
    if name not in PHI_REGISTRY:
        raise KeyError(f"unknown phi '{name}'; available: {sorted(PHI_REGISTRY)}")
    return PHI_REGISTRY[name](dim)


# ---------------------------------------------------------------------------
# built-in basis catalog
# ---------------------------------------------------------------------------

def _zero_vec(x):
    return np.zeros_like(np.asarray(x, dtype=float))


def _zero_mat_factory(dim):
    def zero_mat(x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape + (dim,))
    return zero_mat


def _const_mat_factory(mat):
    mat = np.asarray(mat, dtype=float)

    def const_mat(x):
        return mat
    return const_mat


def _make_ou2():
    return ParametrizedModel(
        dim=1, n_params=2,
        drift_basis=(lambda x: np.asarray(x, dtype=float), _zero_vec),
        diffusion_basis=(_zero_mat_factory(1), _const_mat_factory([[2.0]])),
        name="ou2",
    )


def _make_cubic4():
    def f_cubic(x):
        x = np.asarray(x, dtype=float)
        return x ** 3

    def g_quad(x):
        x = np.asarray(x, dtype=float)
        return (2.0 * x ** 2)[..., None]

    return ParametrizedModel(
        dim=1, n_params=4,
        drift_basis=(lambda x: np.asarray(x, dtype=float), f_cubic,
                     _zero_vec, _zero_vec),
        diffusion_basis=(_zero_mat_factory(1), _zero_mat_factory(1),
                         _const_mat_factory([[2.0]]), g_quad),
        name="cubic4",
    )


def _make_linear2d6():
    def component(src, dst):
        def f(x):
            x = np.asarray(x, dtype=float)
            out = np.zeros_like(x)
            out[..., dst] = x[..., src]
            return out
        return f

    return ParametrizedModel(
        dim=2, n_params=6,
        drift_basis=(component(0, 0), component(1, 0),
                     component(0, 1), component(1, 1),
                     _zero_vec, _zero_vec),
        diffusion_basis=(_zero_mat_factory(2),) * 4
        + (_const_mat_factory([[2.0, 0.0], [0.0, 0.0]]),
           _const_mat_factory([[0.0, 0.0], [0.0, 2.0]])),
        name="linear2d6",
    )


BASIS_REGISTRY = {
    "ou2": _make_ou2,
    "cubic4": _make_cubic4,
    "linear2d6": _make_linear2d6,
}


def get_basis(name):
    if name not in BASIS_REGISTRY:
        raise KeyError(f"unknown basis '{name}'; available: {sorted(BASIS_REGISTRY)}")
    return BASIS_REGISTRY[name]()
