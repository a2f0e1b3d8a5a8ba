"""Statistical core: logistic MLE, least squares, two-way demeaning,
cluster-robust covariance and the chi-square homogeneity test.

Everything here is plain numpy so the cell estimators can call it in a
tight loop. Nothing in this module touches the panel data model.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np
import pandas as pd

from .errors import RankDeficientError

RANK_TOL = 1e-10
_SATURATION = 30.0  # |linear index| beyond which a fitted probability is numerically 0/1


class SeparationWarning(UserWarning):
    """Logistic likelihood has no finite maximiser (complete or quasi separation)."""


@dataclass(frozen=True)
class DesignMatrix:
    """Named regressor matrix. ``row_keys`` optionally carries unit ids."""

    values: np.ndarray
    columns: tuple[str, ...]
    row_keys: np.ndarray | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise ValueError("design values must be 2-dimensional")
        if values.shape[1] != len(self.columns):
            raise ValueError("column count does not match values")
        if len(set(self.columns)) != len(self.columns):
            raise ValueError("column names must be unique")
        if not np.isfinite(values).all():
            raise ValueError("design matrix contains non-finite entries")
        if self.row_keys is not None and len(self.row_keys) != values.shape[0]:
            raise ValueError("row_keys length does not match rows")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "columns", tuple(self.columns))

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, columns=None, intercept=True, row_keys=None):
        columns = list(frame.columns if columns is None else columns)
        values = frame[columns].to_numpy(dtype=float)
        if intercept:
            values = np.column_stack([np.ones(len(frame)), values])
            columns = ["intercept"] + columns
        return cls(values, tuple(columns), row_keys)

    @property
    def shape(self):
        return self.values.shape


def _as_design(X) -> DesignMatrix:
    if isinstance(X, DesignMatrix):
        return X
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return DesignMatrix(X, tuple(f"x{j}" for j in range(X.shape[1])))


@dataclass
class FitResult:
    coefficients: pd.Series
    converged: bool
    iterations: int
    covariance: np.ndarray | None = None
    loglik: float | None = None
    rss: float | None = None
    fitted: np.ndarray | None = field(default=None, repr=False)
    kind: str = "ols"

    @property
    def params(self) -> np.ndarray:
        return self.coefficients.to_numpy()

    def predict(self, X) -> np.ndarray:
        """Linear prediction for OLS, fitted probability for logistic fits."""
        index = _as_design(X).values @ self.params
        if self.kind == "logistic":
            return _expit(index)
        return index


def _expit(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _collinear_columns(vt, s, columns, tol):
    null = vt[s <= tol * s[0]] if s.size and s[0] > 0 else vt
    involved = np.any(np.abs(null) > 1e-8, axis=0)
    return [c for c, flag in zip(columns, involved) if flag]


def _check_rank(values, columns):
    if values.shape[0] < values.shape[1]:
        raise RankDeficientError(columns)
    _, s, vt = np.linalg.svd(values, full_matrices=False)
    if s[0] == 0 or s[-1] <= RANK_TOL * s[0]:
        raise RankDeficientError(_collinear_columns(vt, s, columns, RANK_TOL))


def fit_ols(X, y, weights=None) -> FitResult:
    """Least squares via SVD.

    Singular values below ``1e-10`` times the largest are treated as zero and
    raise :class:`RankDeficientError` naming the columns spanning the null
    space. ``weights`` are analytic (precision) weights.
    """
    design = _as_design(X)
    A = design.values
    y = np.asarray(y, dtype=float).ravel()
    n, k = A.shape
    if y.shape[0] != n:
        raise ValueError("y length does not match design rows")
    if n < k:
        raise RankDeficientError(design.columns)
    if weights is not None:
        w = np.asarray(weights, dtype=float).ravel()
        if np.any(w < 0):
            raise ValueError("weights must be non-negative")
        sw = np.sqrt(w)
        Aw, yw = A * sw[:, None], y * sw
    else:
        Aw, yw = A, y
    u, s, vt = np.linalg.svd(Aw, full_matrices=False)
    if s[0] == 0 or s[-1] <= RANK_TOL * s[0]:
        raise RankDeficientError(_collinear_columns(vt, s, design.columns, RANK_TOL))
    beta = vt.T @ ((u.T @ yw) / s)
    resid_w = yw - Aw @ beta
    rss = float(resid_w @ resid_w)
    cov = None
    if n > k:
        inv_xtx = (vt.T / s**2) @ vt
        cov = rss / (n - k) * inv_xtx
        cov = 0.5 * (cov + cov.T)
    return FitResult(
        coefficients=pd.Series(beta, index=list(design.columns)),
        converged=True,
        iterations=1,
        covariance=cov,
        rss=rss,
        fitted=A @ beta,
        kind="ols",
    )


def _loglik(eta, y):
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def fit_logistic(X, y, max_iter=100, tol=1e-8) -> FitResult:
    """Bernoulli maximum likelihood by Newton/IRLS with step halving.

    Columns are rescaled to unit root-mean-square internally so the
    convergence test ``max |score| / n < tol`` means the same thing for
    income in DKK and for 0/1 indicators. Coefficients are reported on the
    original scale.

    Separation is reported, not raised: ``converged`` is False, a
    :class:`SeparationWarning` is emitted and the last iterate is returned.
    """
    design = _as_design(X)
    A = design.values
    y = np.asarray(y, dtype=float).ravel()
    n, k = A.shape
    if y.shape[0] != n:
        raise ValueError("y length does not match design rows")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("logistic response must be 0/1")
    if y.min() == y.max():
        raise ValueError("logistic response has a single class")
    _check_rank(A, design.columns)

    scale = np.sqrt(np.mean(A * A, axis=0))
    Z = A / scale
    beta = np.zeros(k)
    eta = np.zeros(n)
    ll = _loglik(eta, y)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        p = _expit(eta)
        score = Z.T @ (y - p)
        if np.max(np.abs(score)) / n < tol:
            converged = True
            it -= 1
            break
        w = p * (1.0 - p)
        H = (Z * w[:, None]).T @ Z
        try:
            step = np.linalg.solve(H, score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, score, rcond=None)[0]
        t = 1.0
        for _ in range(40):
            cand = beta + t * step
            cand_eta = Z @ cand
            cand_ll = _loglik(cand_eta, y)
            if cand_ll >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        beta, eta, ll = cand, cand_eta, cand_ll
    else:
        p = _expit(eta)
        converged = np.max(np.abs(Z.T @ (y - p))) / n < tol

    separated = np.max(np.abs(eta)) > _SATURATION
    if separated:
        converged = False
    if not converged:
        warnings.warn(
            "logistic fit did not converge; the data may be (quasi) separated",
            SeparationWarning,
            stacklevel=2,
        )

    coef = beta / scale
    p = _expit(eta)
    w = p * (1.0 - p)
    cov = None
    H = (A * w[:, None]).T @ A
    try:
        cov = np.linalg.inv(H)
        cov = 0.5 * (cov + cov.T)
    except np.linalg.LinAlgError:
        cov = None
    return FitResult(
        coefficients=pd.Series(coef, index=list(design.columns)),
        converged=bool(converged),
        iterations=it,
        covariance=cov,
        loglik=ll,
        fitted=p,
        kind="logistic",
    )


def _factorize(index):
    _, codes = np.unique(np.asarray(index), return_inverse=True)
    return codes.ravel()


def within_transform(values, unit_index, year_index, tol=1e-10, max_iter=10_000, dense_limit=500):
    """Two-way (unit and year) demeaning.

    When one factor has at most ``dense_limit`` levels the result is exact:
    demean by the larger factor, then remove the projection on the
    likewise-demeaned dummies of the smaller one. Otherwise unit and year
    demeaning alternate until both sets of group means are below ``tol``
    (relative to the input scale). ``values`` may be a vector or an
    ``(n, k)`` matrix whose columns are transformed independently.
    """
    v = np.array(values, dtype=float, copy=True)
    squeeze = v.ndim == 1
    if squeeze:
        v = v[:, None]
    u = _factorize(unit_index)
    t = _factorize(year_index)
    nu, nt = u.max() + 1, t.max() + 1
    cu = np.bincount(u, minlength=nu).astype(float)
    ct = np.bincount(t, minlength=nt).astype(float)
    scale = max(1.0, float(np.max(np.abs(v))) if v.size else 1.0)

    def group_means(codes, counts, m):
        out = np.empty((m, v.shape[1]))
        for j in range(v.shape[1]):
            out[:, j] = np.bincount(codes, weights=v[:, j], minlength=m) / counts
        return out

    if min(nu, nt) <= dense_limit:
        big, cb, nb, small, ns = (u, cu, nu, t, nt) if nu >= nt else (t, ct, nt, u, nu)
        v -= group_means(big, cb, nb)[big]
        Z = np.zeros((v.shape[0], ns))
        Z[np.arange(v.shape[0]), small] = 1.0
        for j in range(ns):
            Z[:, j] -= (np.bincount(big, weights=Z[:, j], minlength=nb) / cb)[big]
        coef, *_ = np.linalg.lstsq(Z, v, rcond=None)
        v -= Z @ coef
        return v[:, 0] if squeeze else v

    for _ in range(max_iter):
        v -= group_means(u, cu, nu)[u]
        tm = group_means(t, ct, nt)
        v -= tm[t]
        um = group_means(u, cu, nu)
        if np.max(np.abs(um), initial=0.0) < tol * scale and np.max(np.abs(tm), initial=0.0) < tol * scale:
            break
    return v[:, 0] if squeeze else v


def cluster_robust_cov(X, residuals, clusters, df_model=None) -> np.ndarray:
    """Sandwich covariance with cluster-summed scores.

    Small-sample factor ``G/(G-1) * (n-1)/(n-k)`` where ``k`` defaults to the
    number of columns of ``X`` (pass ``df_model`` when absorbed effects
    should count).
    """
    A = _as_design(X).values
    e = np.asarray(residuals, dtype=float).ravel()
    n, k = A.shape
    codes = _factorize(clusters)
    G = int(codes.max()) + 1 if n else 0
    if G < 2:
        raise ValueError("cluster-robust covariance needs at least two clusters")
    k_eff = k if df_model is None else df_model
    scores = A * e[:, None]
    S = np.empty((G, k))
    for j in range(k):
        S[:, j] = np.bincount(codes, weights=scores[:, j], minlength=G)
    meat = S.T @ S
    bread = np.linalg.pinv(A.T @ A)
    factor = G / (G - 1) * (n - 1) / (n - k_eff)
    V = factor * bread @ meat @ bread
    return 0.5 * (V + V.T)


# -- chi-square ---------------------------------------------------------------


def _gamma_series(a, x):
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(10_000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * 1e-16:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_cont_frac(a, x):
    # modified Lentz
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def gamma_q(a: float, x: float) -> float:
    """Regularized upper incomplete gamma function Q(a, x)."""
    if a <= 0:
        raise ValueError("a must be positive")
    if x <= 0:
        return 1.0
    if x < a + 1.0:
        return max(0.0, 1.0 - _gamma_series(a, x))
    return _gamma_cont_frac(a, x)


def chi2_sf(stat: float, dof: int) -> float:
    return gamma_q(dof / 2.0, stat / 2.0)


@dataclass(frozen=True)
class ChiSquareResult:
    statistic: float
    p_value: float
    dof: int


def chi_square_homogeneity(counts) -> ChiSquareResult:
    """Pearson test that the rows of a contingency table share one distribution."""
    table = np.asarray(counts, dtype=float)
    if table.ndim != 2 or min(table.shape) < 2:
        raise ValueError("need at least a 2 x 2 table")
    if np.any(table < 0):
        raise ValueError("counts must be non-negative")
    rows = table.sum(axis=1)
    cols = table.sum(axis=0)
    if np.any(rows == 0) or np.any(cols == 0):
        raise ValueError("table has a zero marginal")
    expected = np.outer(rows, cols) / table.sum()
    stat = float(np.sum((table - expected) ** 2 / expected))
    dof = (table.shape[0] - 1) * (table.shape[1] - 1)
    return ChiSquareResult(stat, chi2_sf(stat, dof), dof)


# -- normal helpers -------------------------------------------------------------

_STD_NORMAL = NormalDist()


def normal_quantile(q: float) -> float:
    return _STD_NORMAL.inv_cdf(q)


_erfc = np.frompyfunc(math.erfc, 1, 1)


def normal_two_sided_p(z):
    """Two-sided standard normal tail probability, elementwise."""
    z = np.abs(np.asarray(z, dtype=float))
    return np.asarray(_erfc(z / math.sqrt(2.0)), dtype=float)
