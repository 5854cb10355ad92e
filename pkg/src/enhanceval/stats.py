"""Bootstrap summaries, regression fits, and classical tests.

p-values come from in-house regularized incomplete beta/gamma functions
(continued-fraction evaluation, documented accuracy 1e-10), so nothing here
depends on an external statistics package.  Resampling is always at the
case level and deterministic: iteration ``i`` of a bootstrap draws from a
generator seeded with ``SeedSequence(seed, spawn_key=(i,))``, so serial and
parallel evaluation agree bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateStatisticsError, SeparationError, ValidationError

_EPS = 1e-15
_MAX_ITER = 500


# ---------------------------------------------------------------------------
# Special functions
# ---------------------------------------------------------------------------


def _betacf(a: float, b: float, x: float) -> float:
    # Modified Lentz continued fraction for the incomplete beta function.
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < 1e-300:
        d = 1e-300
    d = 1.0 / d
    h = d
    for m in range(1, _MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < 1e-300:
            d = 1e-300
        c = 1.0 + aa / c
        if abs(c) < 1e-300:
            c = 1e-300
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < 1e-300:
            d = 1e-300
        c = 1.0 + aa / c
        if abs(c) < 1e-300:
            c = 1e-300
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    return h


def reg_inc_beta(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if not (a > 0 and b > 0):
        raise ValidationError(f"beta parameters must be positive, got a={a}, b={b}")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def reg_lower_gamma(a: float, x: float) -> float:
    """Regularized lower incomplete gamma function P(a, x)."""
    if not a > 0:
        raise ValidationError(f"gamma parameter must be positive, got a={a}")
    if x <= 0.0:
        return 0.0
    if x < a + 1.0:
        # series representation
        term = 1.0 / a
        total = term
        n = a
        for _ in range(_MAX_ITER):
            n += 1.0
            term *= x / n
            total += term
            if abs(term) < abs(total) * _EPS:
                break
        return total * math.exp(-x + a * math.log(x) - math.lgamma(a))
    return 1.0 - _upper_gamma_cf(a, x)


def reg_upper_gamma(a: float, x: float) -> float:
    """Regularized upper incomplete gamma function Q(a, x) = 1 - P(a, x)."""
    if x <= 0.0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - reg_lower_gamma(a, x)
    return _upper_gamma_cf(a, x)


def _upper_gamma_cf(a: float, x: float) -> float:
    # Lentz continued fraction for Q(a, x), valid for x >= a + 1.
    b = x + 1.0 - a
    c = 1e300
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER + 1):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < 1e-300:
            d = 1e-300
        c = b + an / c
        if abs(c) < 1e-300:
            c = 1e-300
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return h * math.exp(-x + a * math.log(x) - math.lgamma(a))


def f_sf(f_stat: float, df1: float, df2: float) -> float:
    """Upper tail of the F distribution."""
    if math.isinf(f_stat):
        return 0.0
    if f_stat <= 0.0:
        return 1.0
    return reg_inc_beta(df2 / 2.0, df1 / 2.0, df2 / (df2 + df1 * f_stat))


def t_sf_two_sided(t_stat: float, df: float) -> float:
    """Two-sided p-value for a t statistic."""
    if math.isinf(t_stat):
        return 0.0
    return reg_inc_beta(df / 2.0, 0.5, df / (df + t_stat * t_stat))


def chi2_sf(x: float, df: float) -> float:
    """Upper tail of the chi-square distribution."""
    if x <= 0.0:
        return 1.0
    return reg_upper_gamma(df / 2.0, x / 2.0)


def normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


# ---------------------------------------------------------------------------
# Bootstrap
# ---------------------------------------------------------------------------


@dataclass
class BootstrapSummary:
    point: float
    sd: float
    ci_lo: float
    ci_hi: float
    iterations: int
    seed: int

    def to_dict(self) -> dict:
        return {
            "point": self.point,
            "sd": self.sd,
            "ci_lo": self.ci_lo,
            "ci_hi": self.ci_hi,
            "iterations": self.iterations,
            "seed": self.seed,
        }


def _iteration_rng(seed: int, i: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))


def bootstrap_multi(
    samples: Sequence,
    statistics: dict[str, Callable],
    iterations: int = 1000,
    seed: int = 0,
) -> dict[str, BootstrapSummary]:
    """Bootstrap several statistics of one sample over shared resamples.

    ``samples`` is indexed at the case level; every statistic is a pure
    reducer from a resampled array to a float.  The point estimate is the
    statistic of the full sample, ``sd`` the sample standard deviation of
    the resample statistics, and the CI the 2.5/97.5 percentiles.
    """
    arr = np.asarray(samples)
    n = len(arr)
    if n < 2:
        raise DegenerateStatisticsError(f"bootstrap needs n >= 2, got {n}")
    values = {name: np.empty(iterations) for name in statistics}
    for i in range(iterations):
        idx = _iteration_rng(seed, i).integers(0, n, size=n)
        resample = arr[idx]
        for name, stat in statistics.items():
            values[name][i] = stat(resample)
    out = {}
    for name, stat in statistics.items():
        draws = values[name]
        ci_lo, ci_hi = np.percentile(draws, [2.5, 97.5])
        out[name] = BootstrapSummary(
            point=float(stat(arr)),
            sd=float(np.std(draws, ddof=1)),
            ci_lo=float(ci_lo),
            ci_hi=float(ci_hi),
            iterations=iterations,
            seed=seed,
        )
    return out


def bootstrap(
    samples: Sequence,
    statistic: Callable,
    iterations: int = 1000,
    seed: int = 0,
) -> BootstrapSummary:
    """Case-level bootstrap of a single statistic (see :func:`bootstrap_multi`)."""
    return bootstrap_multi(samples, {"stat": statistic}, iterations, seed)["stat"]


# ---------------------------------------------------------------------------
# Regression
# ---------------------------------------------------------------------------


@dataclass
class LogisticFit:
    beta: float
    intercept: float
    se_beta: float
    log_likelihood: float
    or_per_decade: float
    or_ci: tuple[float, float]
    converged: bool
    iterations: int
    n: int

    def to_dict(self) -> dict:
        return {
            "beta": self.beta,
            "intercept": self.intercept,
            "se_beta": self.se_beta,
            "log_likelihood": self.log_likelihood,
            "or_per_decade": self.or_per_decade,
            "or_ci": list(self.or_ci),
            "converged": self.converged,
            "iterations": self.iterations,
            "n": self.n,
        }


def fit_logistic(
    detected: Sequence[bool], volumes_cm3: Sequence[float]
) -> LogisticFit:
    """Fit detected ~ beta * log10(volume) + intercept by IRLS.

    Standard errors come from the inverse observed information at the
    optimum; the odds ratio per 10-fold volume increase is exp(beta) with a
    1.96-standard-error Wald interval.
    """
    y = np.asarray(detected, dtype=np.float64)
    v = np.asarray(volumes_cm3, dtype=np.float64)
    if y.shape != v.shape or y.ndim != 1:
        raise ValidationError("detected and volumes must be equal-length vectors")
    n = len(y)
    if n < 10:
        raise DegenerateStatisticsError(f"logistic fit needs n >= 10, got {n}")
    if not (v > 0).all():
        raise ValidationError("volumes must be positive for log10 transform")
    if y.min() == y.max():
        raise DegenerateStatisticsError("outcome has a single class; fit undefined")

    x = np.log10(v)
    design = np.column_stack([np.ones(n), x])
    coef = np.zeros(2)
    converged = False
    iterations = 0
    for iterations in range(1, 101):
        eta = np.clip(design @ coef, -35.0, 35.0)
        p = 1.0 / (1.0 + np.exp(-eta))
        w = p * (1.0 - p)
        info = design.T @ (design * w[:, None]) + 1e-10 * np.eye(2)
        grad = design.T @ (y - p)
        step = np.linalg.solve(info, grad)
        coef = coef + step
        if abs(coef[1]) > 50.0 or abs(coef[0]) > 200.0:
            raise SeparationError(
                "coefficients diverging; data are (quasi-)separated"
            )
        if np.max(np.abs(step)) < 1e-8:
            converged = True
            break

    eta = np.clip(design @ coef, -35.0, 35.0)
    p = 1.0 / (1.0 + np.exp(-eta))
    w = p * (1.0 - p)
    info = design.T @ (design * w[:, None]) + 1e-10 * np.eye(2)
    cov = np.linalg.inv(info)
    se_beta = float(np.sqrt(cov[1, 1]))
    ll = float(np.sum(y * np.log(p) + (1.0 - y) * np.log1p(-p)))
    beta = float(coef[1])
    return LogisticFit(
        beta=beta,
        intercept=float(coef[0]),
        se_beta=se_beta,
        log_likelihood=ll,
        or_per_decade=math.exp(beta),
        or_ci=(
            math.exp(beta - 1.96 * se_beta),
            math.exp(beta + 1.96 * se_beta),
        ),
        converged=converged,
        iterations=iterations,
        n=n,
    )


def ols_r2(x: Sequence[float], y: Sequence[float]) -> tuple[float, float, float]:
    """Least-squares line fit: returns (slope, intercept, r2)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValidationError("ols_r2 needs two equal-length vectors of n >= 2")
    xm, ym = x.mean(), y.mean()
    sxx = float(((x - xm) ** 2).sum())
    if sxx == 0.0:
        raise DegenerateStatisticsError("zero variance in x; slope undefined")
    slope = float(((x - xm) * (y - ym)).sum()) / sxx
    intercept = ym - slope * xm
    ss_res = float(((y - (slope * x + intercept)) ** 2).sum())
    ss_tot = float(((y - ym) ** 2).sum())
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return slope, float(intercept), r2


def bland_altman(
    pred: Sequence[float], truth: Sequence[float]
) -> tuple[float, float, float]:
    """Agreement summary: (mean difference, lower limit, upper limit).

    Limits of agreement are mean +/- 1.96 sample standard deviations of the
    differences pred - truth.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 1 or len(pred) < 2:
        raise ValidationError("bland_altman needs two equal-length vectors of n >= 2")
    d = pred - truth
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    return mean, mean - 1.96 * sd, mean + 1.96 * sd


# ---------------------------------------------------------------------------
# Classical tests
# ---------------------------------------------------------------------------


@dataclass
class TestResult:
    test_name: str
    statistic: float
    p: float
    df: float | tuple[float, float]
    p_bonferroni: float | None = None
    family_size: int | None = None
    attribute: str | None = None

    def to_dict(self) -> dict:
        return {
            "test_name": self.test_name,
            "statistic": self.statistic,
            "p": self.p,
            "df": list(self.df) if isinstance(self.df, tuple) else self.df,
            "p_bonferroni": self.p_bonferroni,
            "family_size": self.family_size,
            "attribute": self.attribute,
        }


def _check_groups(groups: Sequence[Sequence[float]], min_groups: int = 2):
    if len(groups) < min_groups:
        raise DegenerateStatisticsError(
            f"need >= {min_groups} groups, got {len(groups)}"
        )
    out = [np.asarray(g, dtype=np.float64) for g in groups]
    for g in out:
        if g.ndim != 1 or len(g) < 2:
            raise DegenerateStatisticsError("every group needs n >= 2")
    return out


def _oneway_f(groups: list[np.ndarray], test_name: str) -> TestResult:
    k = len(groups)
    n_total = sum(len(g) for g in groups)
    grand = np.concatenate(groups).mean()
    ss_between = sum(len(g) * (g.mean() - grand) ** 2 for g in groups)
    ss_within = sum(((g - g.mean()) ** 2).sum() for g in groups)
    df1, df2 = k - 1, n_total - k
    if ss_within == 0.0:
        if ss_between == 0.0:
            raise DegenerateStatisticsError(
                "all values identical across groups; F undefined"
            )
        return TestResult(test_name, float("inf"), 0.0, (df1, df2))
    f_stat = float((ss_between / df1) / (ss_within / df2))
    return TestResult(test_name, f_stat, float(f_sf(f_stat, df1, df2)), (df1, df2))


def anova_oneway(groups: Sequence[Sequence[float]]) -> TestResult:
    """Classic one-way ANOVA F test."""
    return _oneway_f(_check_groups(groups), "anova_oneway")


def levene(groups: Sequence[Sequence[float]]) -> TestResult:
    """Levene's test for equality of variances (classic mean-centered variant)."""
    groups = _check_groups(groups)
    z = [np.abs(g - g.mean()) for g in groups]
    result = _oneway_f(z, "levene")
    return result


def welch_t(a: Sequence[float], b: Sequence[float]) -> TestResult:
    """Welch's two-sample t test with Welch-Satterthwaite degrees of freedom."""
    a, b = _check_groups([a, b])
    va, vb = a.var(ddof=1), b.var(ddof=1)
    na, nb = len(a), len(b)
    se_sq = va / na + vb / nb
    diff = a.mean() - b.mean()
    if se_sq == 0.0:
        if diff == 0.0:
            raise DegenerateStatisticsError(
                "zero variance and equal means; t undefined"
            )
        return TestResult("welch_t", math.copysign(float("inf"), diff), 0.0, float("inf"))
    t_stat = float(diff / math.sqrt(se_sq))
    df = float(
        se_sq**2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    )
    return TestResult("welch_t", t_stat, float(t_sf_two_sided(t_stat, df)), df)


def chi_square_2xk(table: Sequence[Sequence[float]]) -> TestResult:
    """Pearson chi-square test of independence on a 2 x k count table."""
    obs = np.asarray(table, dtype=np.float64)
    if obs.ndim != 2 or obs.shape[0] != 2 or obs.shape[1] < 2:
        raise ValidationError(f"need a 2 x k table with k >= 2, got {obs.shape}")
    if (obs < 0).any():
        raise ValidationError("counts must be non-negative")
    row = obs.sum(axis=1)
    col = obs.sum(axis=0)
    total = obs.sum()
    if total == 0 or (row == 0).any() or (col == 0).any():
        raise DegenerateStatisticsError("zero marginal; chi-square undefined")
    expected = np.outer(row, col) / total
    stat = float(((obs - expected) ** 2 / expected).sum())
    df = obs.shape[1] - 1
    return TestResult("chi_square_2xk", stat, chi2_sf(stat, df), float(df))


def bonferroni(p: float, family_size: int) -> float:
    """Bonferroni correction: min(1, m * p)."""
    if not (0.0 <= p <= 1.0):
        raise ValidationError(f"p must be in [0, 1], got {p}")
    if family_size < 1:
        raise ValidationError(f"family size must be >= 1, got {family_size}")
    return min(1.0, family_size * p)


def apply_bonferroni(results: list[TestResult]) -> list[TestResult]:
    """Set p_bonferroni on each result with the family size = len(results)."""
    m = len(results)
    for r in results:
        r.family_size = m
        r.p_bonferroni = bonferroni(r.p, m)
    return results
