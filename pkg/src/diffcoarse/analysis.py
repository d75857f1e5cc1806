"""Decay-law fitting, tail-rate estimation and distribution distances.

The estimators follow the scikit-learn conventions (constructor holds only
hyper-parameters, ``fit`` returns ``self``, learned state ends in ``_``) so
they can be cloned, grid-searched and dropped into pipelines.
"""

import csv
import math
from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import optimize, special
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_1d, check_positive
from .exceptions import DomainError, EstimationError
from .kinetics import DensityGrid, fit_tail_rate

__all__ = [
    "RateFit",
    "TailEstimate",
    "DecayRateRegressor",
    "TailRateEstimator",
    "fit_rate",
    "estimate_lambda",
    "ks_distance",
    "ks_critical_value",
    "SelectionReport",
    "selection_report",
    "write_fit_csv",
    "MODELS",
]

MODELS = ("power", "exp")
MIN_FIT_POINTS = 8


@dataclass(frozen=True)
class RateFit:
    """``y = a * tau^-b`` (``model="power"``) or ``y = a * exp(-b tau)`` (``"exp"``)."""

    model: str
    a: float
    b: float
    rms_residual: float
    window: Tuple[float, float]

    def predict(self, taus):
        taus = np.asarray(taus, dtype=np.float64)
        if self.model == "power":
            return self.a * taus ** (-self.b)
        return self.a * np.exp(-self.b * taus)

    def to_json(self):
        return asdict(self)


class DecayRateRegressor(RegressorMixin, BaseEstimator):
    """Least-squares decay law in log space.

    Parameters
    ----------
    model : {"power", "exp"}
        Power law is fitted in ``(log tau, log y)``, exponential decay in
        ``(tau, log y)``.
    window : tuple or None
        ``(tau_min, tau_max)``; ``None`` uses ``[0.3 * max(tau), max(tau)]``.
    fixed_exponent : float or None
        Pin ``b`` and fit only the prefactor.
    """

    def __init__(self, model="power", window=None, fixed_exponent=None):
        self.model = model
        self.window = window
        self.fixed_exponent = fixed_exponent

    def fit(self, X, y):
        if self.model not in MODELS:
            raise DomainError(f"model must be one of {MODELS}, got {self.model!r}")
        taus = check_1d(X, "taus")
        ys = check_1d(y, "ys")
        if taus.size != ys.size:
            raise DomainError("taus and ys must have the same length")
        lo, hi = self.window if self.window is not None else (0.3 * taus.max(), taus.max())
        sel = (taus >= lo) & (taus <= hi)
        t, v = taus[sel], ys[sel]
        if np.any(v <= 0):
            raise DomainError("decay fits need strictly positive y inside the window")
        if t.size < MIN_FIT_POINTS:
            raise EstimationError(
                f"need at least {MIN_FIT_POINTS} samples in window [{lo}, {hi}], got {t.size}"
            )
        u = np.log(t) if self.model == "power" else t
        if self.model == "power" and np.any(t <= 0):
            raise DomainError("power-law fits need tau > 0")
        logy = np.log(v)
        if self.fixed_exponent is None:
            slope, intercept = np.polyfit(u, logy, 1)
            b = -slope
        else:
            b = float(self.fixed_exponent)
            intercept = float(np.mean(logy + b * u))
        resid = logy - (intercept - b * u)
        self.a_ = float(np.exp(intercept))
        self.b_ = float(b)
        self.rms_residual_ = float(np.sqrt(np.mean(resid**2)))
        self.window_ = (float(lo), float(hi))
        self.n_samples_ = int(t.size)
        return self

    def predict(self, X):
        check_is_fitted(self, "a_")
        return self.as_ratefit().predict(check_1d(X, "taus"))

    def as_ratefit(self):
        check_is_fitted(self, "a_")
        return RateFit(self.model, self.a_, self.b_, self.rms_residual_, self.window_)


def fit_rate(taus, ys, model="power", window=None, fixed_exponent=None):
    """Functional front end to :class:`DecayRateRegressor`."""
    reg = DecayRateRegressor(model, window, fixed_exponent).fit(taus, ys)
    return reg.as_ratefit()


def write_fit_csv(path, taus, ys, fit):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tau", "y", "y_fit"])
        for t, y, f in zip(taus, ys, fit.predict(taus)):
            writer.writerow([repr(float(t)), repr(float(y)), repr(float(f))])


# -- tail rate ---------------------------------------------------------------


@dataclass(frozen=True)
class TailEstimate:
    lambda_hat: float
    stderr: float
    method: str
    threshold: float = math.nan
    n_tail: int = 0
    shape: float = 0.0


def _log_norm(k, lam, u):
    # log int_u^inf x^k e^{-lam x} dx
    return special.gammaln(k + 1.0) + np.log(special.gammaincc(k + 1.0, lam * u)) - (k + 1.0) * np.log(lam)


def _tail_mle(exc, u):
    """Gamma-shaped tail ``x^k e^{-lam x}`` fitted to exceedances of ``u``.

    The polynomial prefactor is a nuisance parameter: it absorbs the
    sub-exponential corrections of pole-type densities so that ``lam``
    targets the exponential rate itself.
    """
    n = exc.size
    s_log = np.log(exc).sum()
    s_x = exc.sum()

    def nll(theta):
        k, loglam = theta
        lam = np.exp(loglam)
        val = -(k * s_log - lam * s_x - n * _log_norm(k, lam, u))
        return val if np.isfinite(val) else 1e300

    lam0 = 1.0 / max(np.mean(exc - u), 1e-300)
    res = optimize.minimize(
        nll,
        x0=[0.0, np.log(lam0)],
        method="L-BFGS-B",
        bounds=[(-0.999, 50.0), (np.log(lam0) - 10, np.log(lam0) + 10)],
        options={"ftol": 1e-15, "gtol": 1e-10, "maxiter": 500},
    )
    k, lam = float(res.x[0]), float(np.exp(res.x[1]))
    # observed information = n * Hessian of the log-normalizer in (k, lam)
    eps_k, eps_l = 1e-4, 1e-4 * lam
    f = lambda kk, ll: _log_norm(kk, ll, u)
    hkk = (f(k + eps_k, lam) - 2 * f(k, lam) + f(k - eps_k, lam)) / eps_k**2
    hll = (f(k, lam + eps_l) - 2 * f(k, lam) + f(k, lam - eps_l)) / eps_l**2
    hkl = (
        f(k + eps_k, lam + eps_l) - f(k + eps_k, lam - eps_l) - f(k - eps_k, lam + eps_l) + f(k - eps_k, lam - eps_l)
    ) / (4 * eps_k * eps_l)
    info = n * np.array([[hkk, hkl], [hkl, hll]])
    try:
        cov = np.linalg.inv(info)
        se = float(np.sqrt(cov[1, 1])) if cov[1, 1] > 0 else math.nan
    except np.linalg.LinAlgError:
        se = math.nan
    return lam, se, k


def _tail_logslope(exc, n_total):
    xs = np.sort(exc)
    m = xs.size
    surv = (m - np.arange(m) - 0.5) / n_total
    keep = surv * n_total >= 10
    xs, surv = xs[keep], surv[keep]
    if xs.size < 2:
        raise EstimationError("too few tail samples for a log-slope fit")
    if xs.size > 4000:
        idx = np.linspace(0, xs.size - 1, 4000).astype(int)
        xs, surv = xs[idx], surv[idx]
    slope = np.polyfit(xs, np.log(surv), 1)[0]
    return float(-slope)


class TailRateEstimator(BaseEstimator):
    """Exponential tail rate of a sample (the MGF radius).

    Parameters
    ----------
    method : {"mle", "log-slope"}
        ``"mle"`` maximizes a truncated Gamma-shaped tail likelihood on the
        exceedances; ``"log-slope"`` regresses the empirical log-survival
        function on ``x``.
    quantile : float
        Threshold quantile defining the tail.
    """

    def __init__(self, method="mle", quantile=0.9):
        self.method = method
        self.quantile = quantile

    def fit(self, X, y=None):
        x = check_1d(X, "samples")
        if x.size < 1000:
            raise EstimationError(f"need at least 1000 samples, got {x.size}")
        u = float(np.quantile(x, self.quantile))
        exc = x[x > u]
        if exc.size < 20 or u <= 0:
            raise EstimationError("tail above the threshold is too thin")
        if self.method == "mle":
            # fit in units of the threshold so the estimate is scale-equivariant
            lam, se, k = _tail_mle(exc / u, 1.0)
            lam, se = lam / u, se / u
        elif self.method == "log-slope":
            lam = _tail_logslope(exc, x.size)
            se, k = lam / math.sqrt(exc.size), 0.0
        else:
            raise DomainError(f"unknown method {self.method!r}")
        if not lam > 0:
            raise EstimationError("tail does not decay")
        self.lambda_ = lam
        self.stderr_ = se
        self.shape_ = k
        self.threshold_ = u
        self.n_tail_ = int(exc.size)
        return self

    def as_estimate(self):
        check_is_fitted(self, "lambda_")
        return TailEstimate(self.lambda_, self.stderr_, self.method, self.threshold_, self.n_tail_, self.shape_)


def _grid_lambda(grid):
    x = grid.x
    vals = np.asarray(grid.values)
    if vals[-1] <= 0:
        raise EstimationError("grid tail is not positive")
    lam = fit_tail_rate(x, vals)
    if not lam > 0:
        raise EstimationError("grid tail does not decay")
    mag = np.abs(vals)
    resolved = np.flatnonzero(mag > 1e-30)
    sel = resolved[x[resolved] >= 0.9 * x[resolved[-1]]]
    if sel.size > 2:
        coef, res, *_ = np.polyfit(x[sel], np.log(mag[sel]), 1, full=True)
        dof = sel.size - 2
        s2 = float(res[0]) / dof if res.size and dof > 0 else 0.0
        sxx = float(np.sum((x[sel] - x[sel].mean()) ** 2))
        se = math.sqrt(s2 / sxx) if sxx > 0 else math.nan
    else:
        se = math.nan
    return TailEstimate(lam, se, "log-slope", float(x[sel[0]]), int(sel.size), 0.0)


def estimate_lambda(data, method="mle", quantile=0.9):
    """Tail rate of a sample array or of a :class:`DensityGrid`.

    Grids always use the log-slope of ``log p`` over the last resolved decade.
    """
    if isinstance(data, DensityGrid):
        return _grid_lambda(data)
    return TailRateEstimator(method, quantile).fit(data).as_estimate()


# -- distances ---------------------------------------------------------------


def ks_distance(samples, lam):
    """Sup distance between the empirical CDF and ``1 - exp(-lam x)``."""
    x = np.sort(check_1d(samples, "samples"))
    lam = check_positive(lam, "lam")
    n = x.size
    F = -np.expm1(-lam * np.maximum(x, 0.0))
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - F), np.max(F - (i - 1) / n)))


def ks_critical_value(n, alpha=0.05):
    """Asymptotic one-sample KS critical value (1.358 / sqrt(n) at 5%)."""
    c = math.sqrt(-0.5 * math.log(alpha / 2.0))
    return c / math.sqrt(n)


# -- selection report --------------------------------------------------------


_EXPECTED = {
    "pole": "power",
    "gamma": "power",
    "mixture": "exp",
    "exponential": "degenerate",
    "none": None,
}


@dataclass
class SelectionReport:
    initial_class: str
    lambda_initial: float
    lambda_evolved: Optional[TailEstimate]
    ks_to_exp: float
    power_fit: Optional[RateFit]
    exp_fit: Optional[RateFit]
    best_model: str
    expected_model: Optional[str]
    verdict: str

    def to_json(self):
        out = asdict(self)
        for key in ("lambda_initial", "ks_to_exp"):
            if isinstance(out[key], float) and not math.isfinite(out[key]):
                out[key] = None
        return out


def selection_report(initial, taus, means, final=None, window=None, rel_tie=0.05, degenerate_tol=1e-9):
    """Compare the observed approach to the selected exponential with theory.

    Parameters
    ----------
    initial : InitialSpec
    taus, means : array-like
        First-moment trajectory in logarithmic time.
    final : array or DensityGrid, optional
        Evolved samples or grid for the tail estimate and KS distance.
    """
    cls = initial.singularity_class()
    lam0 = initial.mgf_radius()
    expected = _EXPECTED[cls]
    if not math.isfinite(lam0):
        return SelectionReport(cls, lam0, None, math.nan, None, None, "none", None, "outside paper scope")

    lam_hat, ks = None, math.nan
    if final is not None:
        lam_hat = estimate_lambda(final)
        if not isinstance(final, DensityGrid):
            ks = ks_distance(final, lam_hat.lambda_hat)

    taus = check_1d(taus, "taus")
    dev = np.abs(check_1d(means, "means") - 1.0 / lam0)
    lo, hi = window if window is not None else (0.3 * taus.max(), taus.max())
    sel = (taus >= lo) & (taus <= hi)
    if np.count_nonzero(dev[sel] > degenerate_tol / lam0) < MIN_FIT_POINTS:
        verdict = "match" if expected == "degenerate" else "mismatch"
        return SelectionReport(cls, lam0, lam_hat, ks, None, None, "degenerate", expected, verdict)

    # keep the fits on a common, strictly positive support
    mask = sel & (dev > 0)
    pfit = fit_rate(taus[mask], dev[mask], "power", (lo, hi))
    efit = fit_rate(taus[mask], dev[mask], "exp", (lo, hi))
    big = max(pfit.rms_residual, efit.rms_residual)
    if big > 0 and abs(pfit.rms_residual - efit.rms_residual) < rel_tie * big:
        best = "inconclusive"
    else:
        best = "power" if pfit.rms_residual < efit.rms_residual else "exp"
    if best == "inconclusive":
        verdict = "inconclusive"
    else:
        verdict = "match" if best == expected else "mismatch"
    return SelectionReport(cls, lam0, lam_hat, ks, pfit, efit, best, expected, verdict)
