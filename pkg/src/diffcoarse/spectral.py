"""Characteristic functions of exponential-class densities.

Three analytic representations are supported:

``PoleSum``
    ``sum_j c_j (lam_j / (lam_j - i z))^{m_j}``; finite-order poles at
    ``-i lam_j``.  Polynomial-times-exponential densities live here.
``BranchCut``
    ``int f(lam) lam / (lam - i z) dlam`` over a rate grid starting at
    ``lam_0``; a cut runs from ``-i lam_0`` to ``-i inf``.
``GammaType``
    ``(lam / (lam - i z))^(alpha + 1)`` on the principal branch.

The gain term of the master equation acts on ``phi`` through a Cauchy-type
integral along the real axis, evaluated by :func:`collision_transform`.
A density is a fixed point exactly when that transform reproduces ``phi``.
"""

import csv
import json
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Tuple

import numpy as np

from ._validation import check_1d, check_increasing, check_positive
from .exceptions import DomainError, SingularityError

__all__ = [
    "PoleSum",
    "BranchCut",
    "GammaType",
    "SingularityReport",
    "exponential",
    "from_poly_exp",
    "from_mixture",
    "evaluate",
    "singularity_report",
    "collision_transform",
    "steady_state_defect",
    "contour_sign",
    "defect_scan",
    "write_defect_csv",
    "charfn_to_json",
    "charfn_from_json",
]

DEFAULT_ARC_TOL = 1e-2
_SING_TOL = 1e-12


@dataclass(frozen=True)
class PoleSum:
    terms: Tuple[Tuple[int, float, complex], ...]

    def __post_init__(self):
        terms = []
        for order, lam, coef in self.terms:
            if int(order) != order or order < 1:
                raise DomainError(f"pole order must be a positive integer, got {order}")
            check_positive(lam, "rate")
            terms.append((int(order), float(lam), complex(coef)))
        if not terms:
            raise DomainError("PoleSum needs at least one term")
        object.__setattr__(self, "terms", tuple(terms))


@dataclass(frozen=True, eq=False)
class BranchCut:
    lambda_grid: np.ndarray = field(repr=False)
    f: np.ndarray = field(repr=False)

    def __post_init__(self):
        lg = check_1d(self.lambda_grid, "lambda_grid", min_length=2)
        f = check_1d(self.f, "f")
        if lg.size != f.size:
            raise DomainError("lambda_grid and f must have the same length")
        if lg[0] <= 0:
            raise DomainError("rates must be positive")
        check_increasing(lg, "lambda_grid")
        object.__setattr__(self, "lambda_grid", lg)
        object.__setattr__(self, "f", f)

    @property
    def lam0(self):
        return float(self.lambda_grid[0])

    @property
    def weights(self):
        d = np.diff(self.lambda_grid)
        w = np.zeros_like(self.lambda_grid)
        w[:-1] += 0.5 * d
        w[1:] += 0.5 * d
        return w * self.f


@dataclass(frozen=True)
class GammaType:
    alpha: float
    lam: float = 1.0

    def __post_init__(self):
        check_positive(self.alpha, "alpha")
        check_positive(self.lam, "lam")


@dataclass(frozen=True)
class SingularityReport:
    location: complex
    kind: str  # "pole" or "branch"
    order: int  # pole order; 0 for branch points
    mgf_radius: float


def exponential(lam=1.0):
    return PoleSum(((1, lam, 1.0),))


def from_poly_exp(state):
    """Pole sum of a :class:`~diffcoarse.families.PolyExpCoeffs` density."""
    return PoleSum(tuple((n + 1, state.lam, c) for n, c in enumerate(state.p) if c != 0))


def from_mixture(rates, weights):
    return PoleSum(tuple((1, r, w) for r, w in zip(rates, weights) if w != 0))


def _singular_rates(cf):
    if isinstance(cf, PoleSum):
        return np.array([lam for _, lam, c in cf.terms if c != 0])
    if isinstance(cf, GammaType):
        return np.array([cf.lam])
    return None


def _check_regular(cf, z):
    if isinstance(cf, BranchCut):
        if abs(z.real) < _SING_TOL and -z.imag >= cf.lam0 * (1 - _SING_TOL):
            raise SingularityError(
                f"z={z} lies on the branch cut below -i*{cf.lam0}",
                location=-1j * cf.lam0,
                kind="branch",
            )
        return
    for lam in _singular_rates(cf):
        if abs(z + 1j * lam) < _SING_TOL * max(1.0, lam):
            raise SingularityError(f"z={z} is the pole -i*{lam}", location=-1j * lam, kind="pole")
    if isinstance(cf, GammaType) and not float(cf.alpha).is_integer():
        if abs(z.real) < _SING_TOL and -z.imag > cf.lam:
            raise SingularityError(
                f"z={z} lies on the branch cut below -i*{cf.lam}",
                location=-1j * cf.lam,
                kind="branch",
            )


def _eval_array(cf, z):
    z = np.asarray(z, dtype=np.complex128)
    if isinstance(cf, PoleSum):
        out = np.zeros_like(z)
        for order, lam, coef in cf.terms:
            out += coef * (lam / (lam - 1j * z)) ** order
        return out
    if isinstance(cf, GammaType):
        # principal branch; its cut lam - i z < 0 is the ray below -i lam
        return np.exp((cf.alpha + 1.0) * (np.log(cf.lam) - np.log(cf.lam - 1j * z)))
    if isinstance(cf, BranchCut):
        lg = cf.lambda_grid
        w = cf.weights
        zz = z.reshape(-1, 1)
        return ((w * lg) / (lg - 1j * zz)).sum(axis=1).reshape(z.shape)
    raise TypeError(f"not a characteristic function: {type(cf).__name__}")


def evaluate(cf, z):
    """Value of the analytically continued characteristic function at ``z``.

    Raises
    ------
    SingularityError
        If ``z`` is a pole or lies on a branch cut.
    """
    z = complex(z)
    _check_regular(cf, z)
    return complex(_eval_array(cf, z))


def singularity_report(cf):
    """Singularity nearest the real axis in the lower half-plane."""
    if isinstance(cf, PoleSum):
        active = [(lam, order) for order, lam, c in cf.terms if c != 0]
        lam = min(l for l, _ in active)
        order = max(o for l, o in active if l == lam)
        return SingularityReport(-1j * lam, "pole", order, lam)
    if isinstance(cf, GammaType):
        if float(cf.alpha).is_integer():
            return SingularityReport(-1j * cf.lam, "pole", int(cf.alpha) + 1, cf.lam)
        return SingularityReport(-1j * cf.lam, "branch", 0, cf.lam)
    if isinstance(cf, BranchCut):
        return SingularityReport(-1j * cf.lam0, "branch", 0, cf.lam0)
    raise TypeError(f"not a characteristic function: {type(cf).__name__}")


def _arc_error(cf, z, k_max):
    """Bound on the integral dropped outside ``[-k_max, k_max]``."""
    k = np.geomspace(k_max, 1e3 * k_max, 400)
    mag = np.abs(_eval_array(cf, k) * _eval_array(cf, -k))
    both = mag / np.maximum(k - abs(z), 1e-300)
    seg = 0.5 * (both[1:] + both[:-1]) * np.diff(k)
    return float(2.0 * 2.0 * seg.sum() / (2.0 * np.pi))


def _raw_transform(cf, z, epsilon, k_max, n_quad):
    k = np.linspace(-k_max, k_max, n_quad)
    integrand = 2.0 * _eval_array(cf, -k) * _eval_array(cf, k) / (z - k + 1j * epsilon)
    h = k[1] - k[0]
    s = h * (integrand.sum() - 0.5 * (integrand[0] + integrand[-1]))
    return complex(s / (2j * np.pi))


@lru_cache(maxsize=1)
def contour_sign():
    """Global orientation factor of the real-line integral.

    Fixed once by requiring the transform of ``1 / (1 - i z)`` to give back
    ``phi(0) = 1``.  Returns ``+1`` or ``-1``.
    """
    raw = _raw_transform(exponential(1.0), 0.0, 1e-2, 50.0, 20001)
    return 1 if raw.real > 0 else -1


def collision_transform(cf, z, epsilon=None, k_max=None, n_quad=20000, arc_tol=DEFAULT_ARC_TOL):
    """Fourier image of the gain term ``2 int p(y) p(x + y) dy`` at real ``z``.

    Trapezoid quadrature of ``(1/2 pi i) int 2 phi(-k) phi(k) / (z - k + i eps) dk``
    on ``[-k_max, k_max]``, times :func:`contour_sign`.

    Defaults: ``epsilon = min(0.01, lam / 100)``, ``k_max = 50 lam`` with
    ``lam`` the MGF radius of ``cf``.
    """
    z = float(np.real(z)) if np.isreal(z) else None
    if z is None:
        raise DomainError("collision_transform is defined for real z only")
    lam = singularity_report(cf).mgf_radius
    if epsilon is None:
        epsilon = min(0.01, lam / 100.0)
    if k_max is None:
        k_max = 50.0 * lam
    if not epsilon > 0:
        raise DomainError(f"epsilon must be positive, got {epsilon}")
    if epsilon > lam / 10.0:
        raise DomainError(f"epsilon={epsilon} exceeds lam/10={lam / 10.0}")
    if k_max <= abs(z):
        raise DomainError(f"k_max={k_max} must exceed |z|={abs(z)}")
    arc = _arc_error(cf, z, k_max)
    if arc > arc_tol:
        raise DomainError(
            f"k_max={k_max} too small: truncation error estimate {arc:.2e} > {arc_tol:.2e}"
        )
    return contour_sign() * _raw_transform(cf, z, epsilon, k_max, n_quad)


def steady_state_defect(cf, z_samples=(0.0, 1.0, -1.0, 5.0, -5.0), **kwargs):
    """``max_z |collision_transform(cf, z) - phi(z)|`` over real samples."""
    return float(max(abs(collision_transform(cf, z, **kwargs) - evaluate(cf, z)) for z in z_samples))


def defect_scan(cf, z_samples, **kwargs):
    """Rows ``(z, |phi|, |transform|, defect)`` for CSV output."""
    rows = []
    for z in z_samples:
        phi = evaluate(cf, z)
        tr = collision_transform(cf, z, **kwargs)
        rows.append((float(z), abs(phi), abs(tr), abs(tr - phi)))
    return rows


def write_defect_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["z", "abs_phi", "abs_transform", "defect"])
        for row in rows:
            writer.writerow([repr(float(v)) for v in row])


def charfn_to_json(cf):
    if isinstance(cf, PoleSum):
        return {
            "kind": "pole_sum",
            "terms": [[o, l, [c.real, c.imag]] for o, l, c in cf.terms],
        }
    if isinstance(cf, BranchCut):
        return {"kind": "branch_cut", "lambda_grid": cf.lambda_grid.tolist(), "f": cf.f.tolist()}
    if isinstance(cf, GammaType):
        return {"kind": "gamma", "alpha": cf.alpha, "lam": cf.lam}
    raise TypeError(f"not a characteristic function: {type(cf).__name__}")


def charfn_from_json(obj):
    if isinstance(obj, str):
        obj = json.loads(obj)
    kind = obj.get("kind")
    if kind == "pole_sum":
        return PoleSum(tuple((o, l, complex(*c) if isinstance(c, list) else c) for o, l, c in obj["terms"]))
    if kind == "branch_cut":
        return BranchCut(np.asarray(obj["lambda_grid"]), np.asarray(obj["f"]))
    if kind == "gamma":
        return GammaType(obj["alpha"], obj.get("lam", 1.0))
    raise DomainError(f"unknown characteristic-function kind {kind!r}")
