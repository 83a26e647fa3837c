"""Observables of the charging dynamics: order parameter, susceptibility,
Gini coefficient of charging times, and ensemble aggregation.

The order parameter is the steady-state ratio between the net growth rate
of the vehicle population and the arrival rate, estimated from consecutive
windows of the N(t) series after a transient trim.  The susceptibility is
the window length times the standard deviation of the per-window values;
it peaks at the critical arrival rate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "GiniEstimate",
    "StatRecord",
    "window_rates",
    "order_parameter",
    "susceptibility",
    "gini",
    "gini_bruteforce",
    "charging_time_gini",
    "mean_ci",
    "ensemble",
    "summarize_runs",
    "DEFAULT_WINDOW",
    "DEFAULT_TRIM",
]

DEFAULT_WINDOW = 100.0
DEFAULT_TRIM = 1000.0


@dataclass(frozen=True)
class GiniEstimate:
    n: int
    mean: float
    value: float


@dataclass(frozen=True)
class StatRecord:
    arrival_rate: float
    algorithm: str
    eta_mean: float
    eta_lo: float
    eta_hi: float
    chi_mean: float
    chi_lo: float
    chi_hi: float
    gini_mean: float
    gini_lo: float
    gini_hi: float
    runs: int
    window: float


def _window_samples(times, values, window, trim):
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if times.ndim != 1 or times.shape != values.shape:
        raise ValueError("times and values must be matching 1-d arrays")
    t_start = trim
    t_end = times[-1]
    n_windows = int(math.floor((t_end - t_start) / window + 1e-9))
    if n_windows < 1:
        raise ValueError(
            f"series of length {t_end - t_start} after trim holds no window of {window}"
        )
    boundaries = t_start + window * np.arange(n_windows + 1)
    idx = np.searchsorted(times, boundaries - 1e-9)
    idx = np.minimum(idx, len(times) - 1)
    if np.max(np.abs(times[idx] - boundaries)) > 1e-6 * max(1.0, window):
        raise ValueError("window boundaries must align with the sampling grid")
    return values[idx]


def window_rates(times, values, window=DEFAULT_WINDOW, trim=DEFAULT_TRIM):
    """Per-window growth rates (N(t+w) - N(t)) / w over consecutive windows."""
    at_bounds = _window_samples(times, values, window, trim)
    return np.diff(at_bounds) / window


def order_parameter(times, values, window=DEFAULT_WINDOW, arrival_rate=None,
                    trim=DEFAULT_TRIM) -> float:
    """Time-averaged window growth rate of N(t) over the arrival rate.

    The average of (N(t+w) - N(t))/w over every post-trim window start
    telescopes to the difference between the mean of N over the final
    window and over the first window; both ends are therefore full window
    averages rather than single samples.  Zero in free flow, positive when
    vehicles accumulate; negative estimates are reported as computed so
    zero-mean fluctuations remain visible.
    """
    if arrival_rate is None or arrival_rate <= 0:
        raise ValueError("a positive arrival rate is required")
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if times.ndim != 1 or times.shape != values.shape:
        raise ValueError("times and values must be matching 1-d arrays")
    t_end = times[-1]
    span = t_end - window - trim
    if span < window:
        raise ValueError("need at least two windows after the trim")
    head = (times >= trim) & (times <= trim + window)
    tail = times >= t_end - window
    growth = (float(np.mean(values[tail])) - float(np.mean(values[head]))) / span
    return growth / arrival_rate


def susceptibility(times, values, window=DEFAULT_WINDOW, arrival_rate=None,
                   trim=DEFAULT_TRIM) -> float:
    """Window length times the standard deviation of per-window order
    parameters (sample standard deviation, n-1 denominator)."""
    if arrival_rate is None or arrival_rate <= 0:
        raise ValueError("a positive arrival rate is required")
    rates = window_rates(times, values, window, trim) / arrival_rate
    if len(rates) < 10:
        raise ValueError(f"need at least 10 windows, got {len(rates)}")
    return window * float(np.std(rates, ddof=1))


def gini(samples) -> GiniEstimate:
    """Empirical Gini coefficient via the sorted-order formula.

    Equals the pairwise double sum over 2 n^2 mu; requires a positive mean.
    """
    x = np.sort(np.asarray(list(samples), dtype=float))
    n = len(x)
    if n < 1:
        raise ValueError("need at least one sample")
    if np.any(x < 0):
        raise ValueError("samples must be non-negative")
    total = float(np.sum(x))
    if total <= 0:
        raise ValueError("Gini undefined for an all-zero sample")
    ranks = np.arange(1, n + 1)
    value = float((2.0 * ranks - n - 1.0) @ x) / (n * total)
    return GiniEstimate(n=n, mean=total / n, value=value)


def gini_bruteforce(samples) -> float:
    """Direct pairwise double sum; the oracle for the sorted form."""
    x = np.asarray(list(samples), dtype=float)
    n = len(x)
    mu = x.mean()
    if mu <= 0:
        raise ValueError("Gini undefined for an all-zero sample")
    return float(np.sum(np.abs(x[:, None] - x[None, :]))) / (2 * n * n * mu)


def charging_time_gini(run_or_runs, trim=DEFAULT_TRIM) -> GiniEstimate:
    """Gini of charging times of vehicles that finished after the trim.

    Accepts one run output, an iterable of run outputs (pooled), or a bare
    iterable of vehicle records.  Raises if no vehicle completed after the
    trim point.
    """
    if hasattr(run_or_runs, "completed"):
        runs = [run_or_runs.completed]
    else:
        items = list(run_or_runs)
        if items and hasattr(items[0], "completed"):
            runs = [out.completed for out in items]
        else:
            runs = [items]
    durations = []
    for completed in runs:
        for v in completed:
            if v.departure_time is not None and v.departure_time > trim:
                durations.append(v.departure_time - v.arrival_time)
    if not durations:
        raise ValueError("no vehicle completed after the trim point")
    return gini(durations)


def mean_ci(values: Sequence[float], method: str = "normal", rng=None):
    """Mean with a 95% confidence interval.

    `normal` uses mean +- 1.96 sigma / sqrt(n); `bootstrap` uses the 2.5/97.5
    percentiles of 2000 resampled means (seeded generator required for
    reproducibility).
    """
    x = np.asarray(list(values), dtype=float)
    n = len(x)
    if n < 1:
        raise ValueError("need at least one value")
    mean = float(np.mean(x))
    if n == 1:
        return mean, mean, mean
    if method == "normal":
        half = 1.96 * float(np.std(x, ddof=1)) / math.sqrt(n)
        return mean, mean - half, mean + half
    if method == "bootstrap":
        if rng is None:
            rng = np.random.Generator(np.random.PCG64(0))
        means = np.array([
            np.mean(rng.choice(x, size=n, replace=True)) for _ in range(2000)
        ])
        return mean, float(np.percentile(means, 2.5)), float(np.percentile(means, 97.5))
    raise ValueError(f"unknown CI method {method!r}")


def ensemble(arrival_rate: float, algorithm: str, observables, window=DEFAULT_WINDOW,
             method: str = "normal") -> StatRecord:
    """Aggregate per-run (eta, chi, gini) triples into a StatRecord.

    `gini` entries may be NaN (no completions); they are dropped from the
    Gini aggregate.
    """
    etas = [o[0] for o in observables]
    chis = [o[1] for o in observables]
    ginis = [o[2] for o in observables if not math.isnan(o[2])]
    if not etas:
        raise ValueError("need at least one run")
    eta = mean_ci(etas, method)
    chi = mean_ci(chis, method)
    gin = mean_ci(ginis, method) if ginis else (math.nan, math.nan, math.nan)
    return StatRecord(
        arrival_rate=arrival_rate, algorithm=algorithm,
        eta_mean=eta[0], eta_lo=eta[1], eta_hi=eta[2],
        chi_mean=chi[0], chi_lo=chi[1], chi_hi=chi[2],
        gini_mean=gin[0], gini_lo=gin[1], gini_hi=gin[2],
        runs=len(etas), window=window,
    )


def run_observables(out, window=DEFAULT_WINDOW, trim=DEFAULT_TRIM):
    """(eta, chi, gini) of one run output; gini is NaN without completions."""
    lam = out.config.arrival_rate
    eta = order_parameter(out.times, out.n_vehicles, window, lam, trim)
    chi = susceptibility(out.times, out.n_vehicles, window, lam, trim)
    try:
        gin = charging_time_gini(out, trim).value
    except ValueError:
        gin = math.nan
    return eta, chi, gin


def summarize_runs(outputs, window=DEFAULT_WINDOW, trim=DEFAULT_TRIM,
                   method: str = "normal") -> StatRecord:
    """StatRecord over an ensemble of runs of one (rate, algorithm) cell."""
    outputs = list(outputs)
    if not outputs:
        raise ValueError("no runs to summarize")
    lam = outputs[0].config.arrival_rate
    algo = outputs[0].config.algorithm
    for out in outputs:
        if out.config.arrival_rate != lam or out.config.algorithm != algo:
            raise ValueError("runs mix arrival rates or algorithms")
    obs = [run_observables(out, window, trim) for out in outputs]
    return ensemble(lam, algo, obs, window, method)
