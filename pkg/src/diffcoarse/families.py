"""Closed finite-dimensional families of the master equation.

Four families are invariant under the flow ``dp/dtau = -p + 2 * gain(p)``:

* polynomial times exponential, ``lam * sum_n p_n (lam x)^n / n! * exp(-lam x)``
* the Laguerre expansion ``sum_n (-1)^n A_n L_n(2x) exp(-x)``
* finite exponential mixtures ``sum_j A_j lam_j exp(-lam_j x)``
* continuous exponential mixtures over a lambda grid

Each family has an exact coefficient dynamics here and a renderer onto a
:class:`~diffcoarse.kinetics.DensityGrid`.
"""

import csv
import json
from dataclasses import dataclass, field
from math import comb, factorial

import numpy as np

from . import _ode
from ._validation import check_1d, check_increasing, check_positive
from .exceptions import CapacityError, DomainError
from .kinetics import DensityGrid

__all__ = [
    "PolyExpCoeffs",
    "LaguerreCoeffs",
    "ExpMixture",
    "ExpIntegral",
    "GridSpec",
    "poly_exp_rhs",
    "poly_exp_evolve",
    "poly_exp_tensor",
    "poly_exp_asymptote",
    "laguerre_step",
    "laguerre_rhs",
    "laguerre_iterate",
    "laguerre_evolve",
    "laguerre_render",
    "laguerre_asymptote",
    "tail_is_exponential",
    "expmix_rhs",
    "expmix_evolve",
    "expintegral_rhs",
    "expintegral_evolve",
    "family_render",
    "family_mean",
    "state_to_json",
    "state_from_json",
    "write_trajectory_csv",
    "MAX_POLY_DEGREE",
]

MAX_POLY_DEGREE = 32
NORM_TOL = 1e-12


@dataclass(frozen=True)
class GridSpec:
    x_max: float = 40.0
    n_points: int = 4001


def _frozen(arr):
    arr = np.array(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


# -- polynomial x exponential -------------------------------------------------


@dataclass(frozen=True, eq=False)
class PolyExpCoeffs:
    lam: float
    p: np.ndarray = field(repr=False)

    def __post_init__(self):
        check_positive(self.lam, "lam")
        p = check_1d(self.p, "p")
        if p.size - 1 > MAX_POLY_DEGREE:
            raise CapacityError(
                f"degree {p.size - 1} exceeds the supported maximum {MAX_POLY_DEGREE}"
            )
        if abs(p.sum() - 1.0) > NORM_TOL:
            raise DomainError(f"coefficients must sum to 1, got {p.sum()!r}")
        object.__setattr__(self, "lam", float(self.lam))
        object.__setattr__(self, "p", _frozen(p))

    @property
    def degree(self):
        return self.p.size - 1

    def mean(self):
        n = np.arange(self.p.size)
        return float(np.dot(self.p, n + 1) / self.lam)


_TENSOR_CACHE = {}


def poly_exp_tensor(degree):
    """Interaction tensor ``T[k, a, b]`` of the gain term in the Gamma basis.

    With ``phi_n(x) = x^n e^{-x} / n!`` one has
    ``2 int_0^inf phi_a(y) phi_b(x + y) dy = sum_{k<=b} T[k, a, b] phi_k(x)``
    and ``T[k, a, b] = C(a + b - k, a) / 2^(a + b - k)``.
    """
    if degree > MAX_POLY_DEGREE:
        raise CapacityError(f"degree {degree} exceeds {MAX_POLY_DEGREE}")
    if degree not in _TENSOR_CACHE:
        m = degree + 1
        T = np.zeros((m, m, m))
        for k in range(m):
            for a in range(m):
                for b in range(k, m):
                    e = a + b - k
                    T[k, a, b] = comb(e, a) / 2.0**e
        T.setflags(write=False)
        _TENSOR_CACHE[degree] = T
    return _TENSOR_CACHE[degree]


def _poly_rhs(p, T):
    # -p written as -p * sum(p): identical on the simplex, and it removes the
    # unstable mass mode d(sum p)/dtau = (sum p)^2 - sum p from the flow.
    return -p * p.sum() + np.einsum("kab,a,b->k", T, p, p)


def poly_exp_rhs(state):
    """``dp_n/dtau`` for every coefficient, including ``p_0``.

    The rate constant ``lam`` drops out: the flow is scale invariant.
    """
    return _poly_rhs(np.array(state.p), poly_exp_tensor(state.degree))


def poly_exp_evolve(state, tau_end, d_tau=0.01, record_every=1):
    """Fixed-step RK4 trajectory; returns ``(taus, coefficient array)``."""
    T = poly_exp_tensor(state.degree)
    return _ode.integrate(lambda p: _poly_rhs(p, T), state.p, tau_end, d_tau, record_every)


def poly_exp_asymptote(degree, n, tau):
    """Leading large-tau coefficient ``N!/(N-n)! * 2^n * tau^-n``."""
    if n > degree:
        return 0.0 * np.asarray(tau)
    return factorial(degree) / factorial(degree - n) * 2.0**n * np.asarray(tau, float) ** (-n)


def _poly_density(lam, p, x):
    lx = lam * x
    out = np.zeros_like(x)
    term = np.exp(-lx)
    for n, c in enumerate(p):
        if n:
            term = term * lx / n
        out += c * term
    return lam * out


# -- Laguerre expansion -------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LaguerreCoeffs:
    """Coefficients of ``sum_n (-1)^n A_n L_n(2x) e^{-x}`` truncated at ``M``."""

    A: np.ndarray = field(repr=False)
    mass_drift: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "A", _frozen(check_1d(self.A, "A")))
        object.__setattr__(self, "mass_drift", float(self.mass_drift))

    @classmethod
    def from_coefficients(cls, A):
        A = check_1d(A, "A")
        return cls(A, float(1.0 - A.sum()))

    @property
    def truncation(self):
        return self.A.size - 1

    def mean(self):
        # int x psi_n dx = 1 + 2n for psi_n = (-1)^n L_n(2x) e^{-x}
        n = np.arange(self.A.size)
        return float(np.dot(self.A, 1.0 + 2.0 * n))


def _laguerre_map(A):
    M = A.size
    out = np.empty(M)
    shifted = np.append(A, 0.0)
    pair = A + shifted[1:]  # A_m + A_{m+1}
    for n in range(M):
        out[n] = np.dot(A[: M - n], pair[n:])
    return out


def laguerre_step(state):
    """One application of ``A'_n = sum_l A_l (A_{n+l} + A_{n+l+1})``.

    Indices past the truncation are zero; the map then conserves
    ``sum A`` exactly, so ``mass_drift`` only records roundoff.
    """
    A = _laguerre_map(np.array(state.A))
    return LaguerreCoeffs(A, float(1.0 - A.sum()))


def laguerre_iterate(state, steps):
    out = [state]
    for _ in range(steps):
        out.append(laguerre_step(out[-1]))
    return out


def laguerre_rhs(A):
    """Continuous-time flow ``dA/dtau = step(A) - A``.

    The loss term uses ``A * sum(A)`` so that ``sum A`` is a first integral.
    """
    A = np.asarray(A, dtype=np.float64)
    return _laguerre_map(A) - A * A.sum()


def laguerre_evolve(state, tau_end, d_tau=0.01, record_every=1):
    taus, traj = _ode.integrate(laguerre_rhs, state.A, tau_end, d_tau, record_every)
    return taus, traj


def laguerre_asymptote(N, k, tau):
    """``N!/(N-k)! tau^-k`` for the positivity-truncated expansion."""
    if k > N:
        return 0.0 * np.asarray(tau)
    return factorial(N) / factorial(N - k) * np.asarray(tau, float) ** (-k)


def _laguerre_density(A, x):
    u = 2.0 * x
    L_prev = np.ones_like(u)
    out = A[0] * L_prev
    if A.size > 1:
        L = 1.0 - u
        out = out - A[1] * L
        with np.errstate(over="ignore", invalid="ignore"):
            for n in range(1, A.size - 1):
                L_prev, L = L, ((2 * n + 1 - u) * L - n * L_prev) / (n + 1)
                out = out + (-1) ** (n + 1) * A[n + 1] * L
    if not np.all(np.isfinite(out)):
        raise CapacityError(
            f"Laguerre recurrence overflowed for M={A.size - 1} at x_max={x.max()}"
        )
    return out * np.exp(-x)


def laguerre_render(state, grid_spec=GridSpec()):
    """Evaluate the expansion on a grid with the three-term recurrence.

    Negative far tails are kept; :func:`tail_is_exponential` flags them.
    """
    x = np.linspace(0.0, grid_spec.x_max, grid_spec.n_points)
    return DensityGrid.from_values(grid_spec.x_max, _laguerre_density(np.array(state.A), x))


def tail_is_exponential(grid, fraction=0.1):
    """False when the far tail of a rendered density is negative."""
    k = max(2, int(fraction * grid.n_points))
    tail = grid.values[-k:]
    return bool(np.all(tail >= 0))


# -- finite exponential mixture ----------------------------------------------


@dataclass(frozen=True, eq=False)
class ExpMixture:
    rates: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)

    def __post_init__(self):
        rates = check_1d(self.rates, "rates")
        weights = check_1d(self.weights, "weights")
        if rates.size != weights.size:
            raise DomainError("rates and weights must have the same length")
        if np.any(rates <= 0):
            raise DomainError("rates must be positive")
        check_increasing(rates, "rates")
        if abs(weights.sum() - 1.0) > NORM_TOL:
            raise DomainError(f"weights must sum to 1, got {weights.sum()!r}")
        object.__setattr__(self, "rates", _frozen(rates))
        object.__setattr__(self, "weights", _frozen(weights))

    def mean(self):
        return float(np.dot(self.weights, 1.0 / self.rates))


def _kernel(rates):
    lj = rates[None, :]
    lk = rates[:, None]
    return (lj - lk) / (lj + lk)


def _mix_rhs(A, K):
    return A * (K @ A)


def expmix_rhs(state):
    """``dA_k/dtau = A_k sum_j A_j (lam_j - lam_k) / (lam_j + lam_k)``."""
    return _mix_rhs(np.array(state.weights), _kernel(state.rates))


def expmix_evolve(state, tau_end, d_tau=0.01, record_every=1):
    K = _kernel(state.rates)
    return _ode.integrate(lambda A: _mix_rhs(A, K), state.weights, tau_end, d_tau, record_every)


# -- continuous exponential mixture ------------------------------------------


def _trap_weights(grid):
    w = np.zeros_like(grid)
    d = np.diff(grid)
    w[:-1] += 0.5 * d
    w[1:] += 0.5 * d
    return w


@dataclass(frozen=True, eq=False)
class ExpIntegral:
    """Density ``f`` over rates on ``lambda_grid`` (trapezoid measure)."""

    lambda_grid: np.ndarray = field(repr=False)
    f: np.ndarray = field(repr=False)

    def __post_init__(self):
        lg = check_1d(self.lambda_grid, "lambda_grid", min_length=2)
        f = check_1d(self.f, "f")
        if lg.size != f.size:
            raise DomainError("lambda_grid and f must have the same length")
        if lg[0] <= 0:
            raise DomainError("lambda_grid must start at a positive rate")
        check_increasing(lg, "lambda_grid")
        if np.any(f < 0):
            raise DomainError("f must be nonnegative")
        total = float(np.dot(_trap_weights(lg), f))
        if abs(total - 1.0) > 1e-8:
            raise DomainError(f"f must integrate to 1 over lambda_grid, got {total!r}")
        object.__setattr__(self, "lambda_grid", _frozen(lg))
        object.__setattr__(self, "f", _frozen(f))

    @staticmethod
    def geometric_grid(lam0, lam_max=None, n=256):
        lam_max = 50.0 * lam0 if lam_max is None else lam_max
        return np.geomspace(lam0, lam_max, n)

    @classmethod
    def from_function(cls, func, lam0=1.0, lam_max=None, n=256):
        """Sample ``func`` on the default geometric grid and normalize."""
        lg = cls.geometric_grid(lam0, lam_max, n)
        f = np.asarray(func(lg), dtype=np.float64)
        return cls(lg, f / np.dot(_trap_weights(lg), f))

    @property
    def quadrature_weights(self):
        return _trap_weights(self.lambda_grid)

    def as_mixture_weights(self):
        """Discrete weights ``w_i f_i`` of the equivalent finite mixture."""
        return self.quadrature_weights * self.f

    def mean(self):
        return float(np.dot(self.as_mixture_weights(), 1.0 / self.lambda_grid))


def _expint_rhs(f, K, w):
    return f * (K @ (w * f))


def expintegral_rhs(state):
    """``df/dtau = f(lam) int f(lam') (lam' - lam)/(lam' + lam) dlam'``."""
    return _expint_rhs(np.array(state.f), _kernel(state.lambda_grid), state.quadrature_weights)


def expintegral_evolve(state, tau_end, d_tau=0.01, record_every=1):
    K = _kernel(state.lambda_grid)
    w = state.quadrature_weights
    return _ode.integrate(lambda f: _expint_rhs(f, K, w), state.f, tau_end, d_tau, record_every)


# -- rendering and serialization ---------------------------------------------


def _exp_sum(rates, weights, x):
    return (weights * rates * np.exp(-np.outer(x, rates))).sum(axis=1)


def family_render(state, grid_spec=GridSpec()):
    """Pointwise evaluation of any family density on a grid.

    Negative nodes are kept; inspect ``grid.min_value``.
    """
    if isinstance(state, LaguerreCoeffs):
        return laguerre_render(state, grid_spec)
    x = np.linspace(0.0, grid_spec.x_max, grid_spec.n_points)
    if isinstance(state, PolyExpCoeffs):
        vals = _poly_density(state.lam, state.p, x)
    elif isinstance(state, ExpMixture):
        vals = _exp_sum(state.rates, state.weights, x)
    elif isinstance(state, ExpIntegral):
        vals = _exp_sum(state.lambda_grid, state.as_mixture_weights(), x)
    else:
        raise TypeError(f"not a family state: {type(state).__name__}")
    return DensityGrid.from_values(grid_spec.x_max, vals)


def family_mean(state):
    return state.mean()


def state_to_json(state):
    if isinstance(state, PolyExpCoeffs):
        return {"family": "polyexp", "lam": state.lam, "p": state.p.tolist()}
    if isinstance(state, LaguerreCoeffs):
        return {"family": "laguerre", "A": state.A.tolist(), "mass_drift": state.mass_drift}
    if isinstance(state, ExpMixture):
        return {"family": "expsum", "rates": state.rates.tolist(), "weights": state.weights.tolist()}
    if isinstance(state, ExpIntegral):
        return {"family": "expint", "lambda_grid": state.lambda_grid.tolist(), "f": state.f.tolist()}
    raise TypeError(f"not a family state: {type(state).__name__}")


def state_from_json(obj):
    if isinstance(obj, str):
        obj = json.loads(obj)
    kind = obj.get("family")
    if kind == "polyexp":
        return PolyExpCoeffs(obj["lam"], obj["p"])
    if kind == "laguerre":
        return LaguerreCoeffs(obj["A"], obj.get("mass_drift", 0.0))
    if kind == "expsum":
        return ExpMixture(obj["rates"], obj["weights"])
    if kind == "expint":
        return ExpIntegral(obj["lambda_grid"], obj["f"])
    raise DomainError(f"unknown family tag {kind!r}")


def write_trajectory_csv(path, taus, coeffs, prefix="c"):
    coeffs = np.atleast_2d(coeffs)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tau"] + [f"{prefix}{i}" for i in range(coeffs.shape[1])])
        for tau, row in zip(taus, coeffs):
            writer.writerow([repr(float(tau))] + [repr(float(v)) for v in row])
