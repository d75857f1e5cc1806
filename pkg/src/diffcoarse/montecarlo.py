"""Event-driven particle simulation of the three redistribution processes.

Excess
    Signed values; a uniformly chosen pair of nonzero values with opposite
    signs becomes ``(y1 + y2, 0)``.  Clock rate ``2 n (n - 1) / N0``.
Difference
    Nonnegative values; a uniformly chosen active pair is replaced by the
    single survivor ``|x1 - x2|``.  Clock rate ``n (n - 1) / N0``.
Dual
    Fixed population; both members of a pair become ``|x1 - x2|``.  The
    clock runs directly in logarithmic time at rate ``n / 2``.

Random numbers come from ``numpy.random.PCG64`` seeded with the run seed and
are fed to compiled event loops in fixed-size blocks, so a (spec, seed,
horizon) triple always reproduces the same trajectory bit for bit.
"""

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numba
import numpy as np

from ._validation import check_int, check_nonnegative, check_positive, check_random_state
from .exceptions import AbsorbedStateError, DomainError

__all__ = [
    "InitialSpec",
    "ParticleEnsemble",
    "Snapshot",
    "RunResult",
    "VARIANTS",
    "sample_initial",
    "step_excess",
    "step_difference",
    "step_dual",
    "step",
    "run",
    "run_replicas",
    "histogram_edges",
]

VARIANTS = ("excess", "difference", "dual")
# Excess values live on this dyadic lattice so that pair sums are exact.
LATTICE = 2.0**-32
_BLOCK = 1 << 16


# -- initial laws -------------------------------------------------------------


_KIND_PARAMS = {
    "exponential": ("lam",),
    "gamma": ("shape", "lam"),
    "polyexp": ("lam", "p"),
    "expmixture": ("rates", "weights"),
    "halfgaussian": ("sigma",),
    "uniform": ("a", "b"),
}


@dataclass(frozen=True)
class InitialSpec:
    """Initial law of the particle values.

    ``gamma`` uses ``shape = alpha + 1`` and rate ``lam``; ``polyexp`` is
    the Gamma mixture with weights ``p_n`` on shapes ``n + 1``.
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in _KIND_PARAMS:
            raise DomainError(f"unknown initial kind {self.kind!r}; choose from {sorted(_KIND_PARAMS)}")
        expected = set(_KIND_PARAMS[self.kind])
        got = set(self.params)
        if got != expected:
            raise DomainError(
                f"{self.kind} needs parameters {sorted(expected)}, got {sorted(got)}"
            )
        p = self.params
        if self.kind in ("polyexp", "expmixture"):
            w = np.asarray(p["p"] if self.kind == "polyexp" else p["weights"], float)
            if abs(w.sum() - 1.0) > 1e-12:
                raise DomainError("mixture weights must sum to 1")
            if self.kind == "expmixture":
                rates = np.asarray(p["rates"], float)
                if rates.size != w.size or np.any(rates <= 0):
                    raise DomainError("expmixture needs one positive rate per weight")
            else:
                check_positive(p["lam"], "lam")
        elif self.kind == "uniform":
            if not 0 <= p["a"] < p["b"]:
                raise DomainError("uniform needs 0 <= a < b")
        else:
            for name in _KIND_PARAMS[self.kind]:
                check_positive(p[name], name)

    @classmethod
    def exponential(cls, lam=1.0):
        return cls("exponential", {"lam": lam})

    @classmethod
    def gamma(cls, shape, lam=1.0):
        return cls("gamma", {"shape": shape, "lam": lam})

    @classmethod
    def polyexp(cls, p, lam=1.0):
        return cls("polyexp", {"lam": lam, "p": list(map(float, p))})

    @classmethod
    def expmixture(cls, rates, weights):
        return cls("expmixture", {"rates": list(map(float, rates)), "weights": list(map(float, weights))})

    @classmethod
    def from_json(cls, obj):
        obj = dict(obj)
        kind = obj.pop("kind", None)
        return cls(kind, obj)

    def to_json(self):
        return {"kind": self.kind, **self.params}

    def mgf_radius(self):
        """Radius of convergence of the moment generating function."""
        p = self.params
        if self.kind in ("exponential", "gamma", "polyexp"):
            return float(p["lam"])
        if self.kind == "expmixture":
            rates = np.asarray(p["rates"], float)
            w = np.asarray(p["weights"], float)
            return float(rates[w != 0].min())
        return math.inf

    def singularity_class(self):
        """``"pole"``, ``"mixture"``, ``"gamma"``, ``"exponential"`` or ``"none"``."""
        p = self.params
        if self.kind == "exponential":
            return "exponential"
        if self.kind == "gamma":
            return "exponential" if p["shape"] == 1 else "gamma"
        if self.kind == "polyexp":
            return "exponential" if np.count_nonzero(p["p"][1:]) == 0 else "pole"
        if self.kind == "expmixture":
            return "exponential" if np.count_nonzero(p["weights"]) == 1 else "mixture"
        return "none"

    def sample(self, n, rng):
        p = self.params
        if self.kind == "exponential":
            return rng.exponential(1.0 / p["lam"], n)
        if self.kind == "gamma":
            return rng.gamma(p["shape"], 1.0 / p["lam"], n)
        if self.kind == "polyexp":
            w = np.asarray(p["p"], float)
            if np.any(w < 0):
                raise DomainError("polyexp with negative weights cannot be sampled")
            comp = rng.choice(w.size, size=n, p=w)
            return rng.gamma(comp + 1.0, 1.0 / p["lam"])
        if self.kind == "expmixture":
            w = np.asarray(p["weights"], float)
            if np.any(w < 0):
                raise DomainError("expmixture with negative weights cannot be sampled")
            comp = rng.choice(w.size, size=n, p=w)
            return rng.exponential(1.0 / np.asarray(p["rates"], float)[comp])
        if self.kind == "halfgaussian":
            return np.abs(rng.normal(0.0, p["sigma"], n))
        return rng.uniform(p["a"], p["b"], n)


# -- ensemble -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ParticleEnsemble:
    """Particle values plus clock and generator state.

    ``values[:active_count]`` are the interacting particles.  For the
    excess variant the remaining slots hold the zeroed values (they still
    count toward the conserved sum); for the difference variant they are
    removed particles; for the dual variant ``active_count == len(values)``.
    """

    values: np.ndarray = field(repr=False)
    active_count: int
    t: float
    tau: float
    rng_seed: int
    variant: str
    n0: int
    events: int = 0
    rng_state: Optional[dict] = field(default=None, repr=False)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise DomainError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        vals = np.array(self.values, dtype=np.float64)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def active(self):
        return self.values[: self.active_count]

    @property
    def active_fraction(self):
        return self.active_count / self.n0

    def generator(self):
        rng = np.random.Generator(np.random.PCG64(self.rng_seed))
        if self.rng_state is not None:
            rng.bit_generator.state = self.rng_state
        return rng


def sample_initial(spec, n, seed, variant="dual"):
    """Draw ``n`` particles from ``spec``; deterministic in ``seed``.

    The excess variant symmetrizes by independent random signs and snaps
    values to a dyadic lattice so that every pair sum is exact.
    """
    n = check_int(n, "n", minimum=2)
    seed = check_int(seed, "seed", minimum=0)
    rng = check_random_state(seed)
    vals = np.asarray(spec.sample(n, rng), dtype=np.float64)
    if variant == "excess":
        vals = np.round(vals / LATTICE) * LATTICE
        vals *= np.where(rng.random(n) < 0.5, -1.0, 1.0)
        nz = vals != 0
        vals = np.concatenate([vals[nz], vals[~nz]])
        active = int(nz.sum())
    elif variant == "difference":
        nz = vals != 0
        vals = np.concatenate([vals[nz], np.zeros(n - int(nz.sum()))])
        active = int(nz.sum())
    elif variant == "dual":
        active = n
    else:
        raise DomainError(f"variant must be one of {VARIANTS}, got {variant!r}")
    return ParticleEnsemble(vals, active, 0.0, 0.0, seed, variant, n, 0, rng.bit_generator.state)


# -- compiled event loops -----------------------------------------------------
#
# Each kernel consumes one block of pre-drawn randoms: ``expo`` (unit
# exponentials), ``u1`` and ``u2`` (uniforms on [0, 1)).  It stops when the
# block is used up or the next event would pass ``t_stop``; the overshooting
# waiting time is discarded, which is exact by memorylessness.
# Returns (active, clock, used, events, reached_stop).


@numba.njit(cache=True)
def _pick_pair(n, a, b):
    i = int(a * n)
    j = int(b * (n - 1))
    if i >= n:
        i = n - 1
    if j >= n - 1:
        j = n - 2
    if j >= i:
        j += 1
    return i, j


@numba.njit(cache=True)
def _difference_kernel(vals, n, clock, n0, t_stop, expo, u1, u2):
    events = 0
    k = 0
    m = expo.shape[0]
    while k < m:
        if n < 2:
            return n, clock, k, events, False
        rate = n * (n - 1.0) / n0
        nxt = clock + expo[k] / rate
        if nxt > t_stop:
            return n, t_stop, k + 1, events, True
        clock = nxt
        i, j = _pick_pair(n, u1[k], u2[k])
        k += 1
        events += 1
        d = abs(vals[i] - vals[j])
        vals[i] = d
        # remove j by swapping in the last active particle
        n -= 1
        if j != n:
            vals[j] = vals[n]
            if i == n:
                i = j
        vals[n] = 0.0
        if d == 0.0:
            n -= 1
            if i != n:
                vals[i] = vals[n]
            vals[n] = 0.0
    return n, clock, k, events, False


@numba.njit(cache=True)
def _excess_kernel(vals, n, clock, n0, t_stop, expo, u1, u2):
    events = 0
    k = 0
    m = expo.shape[0]
    while k < m:
        if n < 2:
            return n, clock, k, events, False
        rate = 2.0 * n * (n - 1.0) / n0
        nxt = clock + expo[k] / rate
        if nxt > t_stop:
            return n, t_stop, k + 1, events, True
        clock = nxt
        i, j = _pick_pair(n, u1[k], u2[k])
        k += 1
        events += 1
        a = vals[i]
        b = vals[j]
        if (a > 0.0) != (b > 0.0):
            s = a + b
            vals[i] = s
            vals[j] = 0.0
            # zeroed slots move past the active prefix
            n -= 1
            vals[j] = vals[n]
            vals[n] = 0.0
            if i == n:
                i = j
            if s == 0.0:
                n -= 1
                vals[i] = vals[n]
                vals[n] = 0.0
    return n, clock, k, events, False


@numba.njit(cache=True)
def _dual_kernel(vals, n, clock, n0, t_stop, expo, u1, u2):
    events = 0
    k = 0
    m = expo.shape[0]
    rate = 0.5 * n
    while k < m:
        nxt = clock + expo[k] / rate
        if nxt > t_stop:
            return n, t_stop, k + 1, events, True
        clock = nxt
        i, j = _pick_pair(n, u1[k], u2[k])
        k += 1
        events += 1
        d = abs(vals[i] - vals[j])
        vals[i] = d
        vals[j] = d
    return n, clock, k, events, False


_KERNELS = {
    "difference": _difference_kernel,
    "excess": _excess_kernel,
    "dual": _dual_kernel,
}


def _clock(ens):
    return ens.tau if ens.variant == "dual" else ens.t


def _with_clock(ens, vals, n, clock, events, rng):
    if ens.variant == "dual":
        t, tau = math.expm1(clock), clock
    else:
        t, tau = clock, math.log1p(clock)
    return ParticleEnsemble(
        vals, n, t, tau, ens.rng_seed, ens.variant, ens.n0, ens.events + events, rng.bit_generator.state
    )


def _advance(ens, t_stop, max_events=None):
    """Run events until the clock reaches ``t_stop`` or the state absorbs."""
    vals = np.array(ens.values)
    n = ens.active_count
    clock = _clock(ens)
    rng = ens.generator()
    kernel = _KERNELS[ens.variant]
    events = 0
    while True:
        block = _BLOCK if max_events is None else max(1, min(_BLOCK, max_events - events))
        expo = rng.standard_exponential(block)
        u1 = rng.random(block)
        u2 = rng.random(block)
        n, clock, used, ev, reached = kernel(vals, n, clock, float(ens.n0), t_stop, expo, u1, u2)
        events += ev
        # unused draws of the last block are dropped; fresh exponentials
        # after a stop are exact because waiting times are memoryless
        if reached or n < 2 or (max_events is not None and events >= max_events):
            break
    out = _with_clock(ens, vals, n, clock, events, rng)
    if n < 2 and ens.variant != "dual" and not reached:
        raise AbsorbedStateError(
            f"{ens.variant} process absorbed at t={out.t:.6g} with {n} active particle(s)"
        )
    return out


def _single_event(ens, pair, expected):
    if ens.variant != expected:
        raise DomainError(f"expected a {expected} ensemble, got {ens.variant}")
    n = ens.active_count
    if n < 2:
        raise AbsorbedStateError(f"{ens.variant} process has {n} active particle(s)")
    rng = ens.generator()
    if pair is None:
        e, a, b = rng.standard_exponential(), rng.random(), rng.random()
    else:
        i, j = pair
        if not (0 <= i < n and 0 <= j < n and i != j):
            raise DomainError(f"pair {pair} is not two distinct active indices")
        e = rng.standard_exponential()
        a, b = (i + 0.5) / n, ((j if j < i else j - 1) + 0.5) / (n - 1)
    vals = np.array(ens.values)
    kernel = _KERNELS[ens.variant]
    n, clock, _, ev, _ = kernel(
        vals, n, _clock(ens), float(ens.n0), math.inf, np.array([e]), np.array([a]), np.array([b])
    )
    return _with_clock(ens, vals, n, clock, ev, rng)


def step_excess(ensemble, pair=None):
    """One event of the excess process; ``pair`` fixes the chosen indices."""
    return _single_event(ensemble, pair, "excess")


def step_difference(ensemble, pair=None):
    """One event of the difference process; ``pair`` fixes the chosen indices."""
    return _single_event(ensemble, pair, "difference")


def step_dual(ensemble, pair=None):
    """One event of the dual process; ``pair`` fixes the chosen indices."""
    return _single_event(ensemble, pair, "dual")


def step(ensemble, pair=None):
    return _single_event(ensemble, pair, ensemble.variant)


# -- runs ---------------------------------------------------------------------


def histogram_edges(samples, n_linear=8, n_log=56, q=1e-3):
    """Linear bins below the ``q`` quantile, log-spaced bins above it."""
    samples = np.asarray(samples)
    if samples.size == 0:
        return np.array([0.0, 1.0])
    lo = float(np.quantile(samples, q))
    hi = float(samples.max())
    if hi <= 0:
        return np.array([0.0, 1.0])
    if lo <= 0 or lo >= hi:
        lo = hi * 1e-3
    lin = np.linspace(0.0, lo, n_linear + 1)
    log = np.geomspace(lo, hi * (1 + 1e-12), n_log + 1)
    return np.concatenate([lin, log[1:]])


@dataclass(frozen=True, eq=False)
class Snapshot:
    t: float
    tau: float
    active_fraction: float
    mean: float
    ks_to_exp: float
    lambda_hat: float
    lambda_stderr: float
    edges: np.ndarray = field(repr=False)
    counts: np.ndarray = field(repr=False)
    events: int = 0

    def summary(self):
        return {
            "t": self.t,
            "tau": self.tau,
            "active_fraction": self.active_fraction,
            "mean": self.mean,
            "ks_to_exp": self.ks_to_exp,
            "lambda_hat": self.lambda_hat,
            "lambda_stderr": self.lambda_stderr,
            "events": self.events,
        }

    def histogram_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_left", "bin_right", "count"])
            for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
                writer.writerow([repr(float(lo)), repr(float(hi)), int(c)])


@dataclass(frozen=True, eq=False)
class RunResult:
    snapshots: list
    final: ParticleEnsemble

    @property
    def times(self):
        return np.array([s.t for s in self.snapshots])

    @property
    def taus(self):
        return np.array([s.tau for s in self.snapshots])

    @property
    def means(self):
        return np.array([s.mean for s in self.snapshots])

    @property
    def active_fractions(self):
        return np.array([s.active_fraction for s in self.snapshots])

    def summary_json(self):
        return json.dumps([s.summary() for s in self.snapshots], indent=2)


def _observable(ens):
    x = ens.active
    return np.abs(x) if ens.variant == "excess" else x


def snapshot(ens, with_histogram=True, estimate=True):
    from .analysis import estimate_lambda, ks_distance  # noqa: cyclic at import

    x = _observable(ens)
    mean = float(x.mean()) if x.size else math.nan
    lam, se, ks = math.nan, math.nan, math.nan
    if estimate and x.size >= 1000:
        try:
            est = estimate_lambda(x)
            lam, se = est.lambda_hat, est.stderr
            ks = ks_distance(x, lam)
        except (DomainError, ValueError):
            pass
    if with_histogram:
        edges = histogram_edges(x)
        counts = np.histogram(x, edges)[0]
    else:
        edges, counts = np.array([]), np.array([], dtype=np.int64)
    return Snapshot(
        ens.t, ens.tau, ens.active_fraction, mean, ks, lam, se, edges, counts, ens.events
    )


def run(ensemble, horizon, checkpoints=None, with_histogram=True, estimate=True):
    """Advance to ``horizon`` and snapshot at every checkpoint.

    ``horizon`` and ``checkpoints`` are physical times ``t`` for the excess
    and difference variants and logarithmic times ``tau`` for the dual one.
    A snapshot of the initial state is always included.

    Raises
    ------
    AbsorbedStateError
        With the snapshots taken so far in its ``partial`` attribute.
    """
    horizon = check_nonnegative(horizon, "horizon")
    stops = sorted({float(c) for c in ([] if checkpoints is None else checkpoints) if 0 < c <= horizon} | {horizon})
    stops = [s for s in stops if s > _clock(ensemble)]
    snaps = [snapshot(ensemble, with_histogram, estimate)]
    ens = ensemble
    for stop in stops:
        try:
            ens = _advance(ens, stop)
        except AbsorbedStateError as exc:
            exc.partial = RunResult(snaps, ens)
            raise
        snaps.append(snapshot(ens, with_histogram, estimate))
    return RunResult(snaps, ens)


def _replica(args):
    spec, n, seed, variant, horizon, checkpoints, kw = args
    ens = sample_initial(spec, n, seed, variant)
    return run(ens, horizon, checkpoints, **kw)


def run_replicas(spec, n, seeds, variant, horizon, checkpoints=None, workers=1, **kw):
    """Independent runs over ``seeds``; results come back in seed order."""
    jobs = [(spec, n, s, variant, horizon, checkpoints, kw) for s in seeds]
    if workers <= 1:
        return [_replica(j) for j in jobs]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_replica, jobs))
