"""ARMA-GARCH log-return models with constant-correlation Gaussian innovations.

Conventions: ``alpha`` holds the ARCH coefficients on lagged squared
innovations, ``beta`` the GARCH coefficients on lagged conditional variances,
``ar`` the weights on lagged returns and ``ma`` the weights on lagged
innovations. Lag buffers store the most recent value first.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import optimize, signal, stats

from .errors import DomainError, GarchFitError, ValidationError

DEFAULT_STEP_SECONDS = 50
DEFAULT_HORIZON_STEPS = 1728  # one day of 50-second steps


@dataclass(frozen=True)
class GarchSpec:
    mu: float = 0.0
    ar: tuple[float, ...] = ()
    ma: tuple[float, ...] = ()
    alpha0: float = 1e-6
    alpha: tuple[float, ...] = (0.05,)
    beta: tuple[float, ...] = (0.9,)

    def __post_init__(self):
        for name in ("ar", "ma", "alpha", "beta"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        object.__setattr__(self, "mu", float(self.mu))
        object.__setattr__(self, "alpha0", float(self.alpha0))
        values = (self.mu, self.alpha0) + self.ar + self.ma + self.alpha + self.beta
        if not all(math.isfinite(v) for v in values):
            raise DomainError("GARCH coefficients must be finite")
        if self.alpha0 <= 0:
            raise DomainError("alpha0 must be > 0")
        if any(a < 0 for a in self.alpha) or any(b < 0 for b in self.beta):
            raise DomainError("alpha and beta coefficients must be >= 0")
        if self.persistence >= 1:
            raise DomainError(f"sum(alpha) + sum(beta) = {self.persistence} violates stationarity")

    @property
    def persistence(self) -> float:
        return sum(self.alpha) + sum(self.beta)

    @property
    def unconditional_variance(self) -> float:
        return self.alpha0 / (1.0 - self.persistence)

    def to_dict(self) -> dict:
        return {
            "mu": self.mu,
            "ar": list(self.ar),
            "ma": list(self.ma),
            "alpha0": self.alpha0,
            "alpha": list(self.alpha),
            "beta": list(self.beta),
        }


@dataclass(frozen=True)
class GarchState:
    returns: tuple[float, ...]
    eps: tuple[float, ...]
    sigma2: tuple[float, ...]

    @classmethod
    def initial(cls, spec: GarchSpec) -> GarchState:
        """Start at the unconditional variance with zero lagged innovations."""
        n_eps = max(len(spec.alpha), len(spec.ma))
        return cls(
            returns=(0.0,) * len(spec.ar),
            eps=(0.0,) * n_eps,
            sigma2=(spec.unconditional_variance,) * len(spec.beta),
        )


def garch_step(spec: GarchSpec, state: GarchState, z: float) -> tuple[float, GarchState]:
    s2 = spec.alpha0
    for a, e in zip(spec.alpha, state.eps):
        s2 += a * e * e
    for b, v in zip(spec.beta, state.sigma2):
        s2 += b * v
    eps = math.sqrt(s2) * z
    r = spec.mu
    for phi, x in zip(spec.ar, state.returns):
        r += phi * x
    for theta, e in zip(spec.ma, state.eps):
        r += theta * e
    r += eps
    new = GarchState(
        returns=((r,) + state.returns)[: len(state.returns)],
        eps=((eps,) + state.eps)[: len(state.eps)],
        sigma2=((s2,) + state.sigma2)[: len(state.sigma2)],
    )
    return r, new


def simulate_returns(spec: GarchSpec, z: np.ndarray, state: GarchState | None = None) -> np.ndarray:
    """Univariate return series driven by the given standard-normal draws."""
    state = state or GarchState.initial(spec)
    out = np.empty(len(z))
    # Inlined GARCH(1,1)/ARMA(0,0) loop; the general case goes through garch_step.
    if len(spec.alpha) == 1 and len(spec.beta) == 1 and not spec.ar and not spec.ma:
        a0, a1, b1, mu = spec.alpha0, spec.alpha[0], spec.beta[0], spec.mu
        e_prev, s2_prev = state.eps[0], state.sigma2[0]
        sqrt = math.sqrt
        for t, zt in enumerate(z.tolist()):
            s2_prev = a0 + a1 * e_prev * e_prev + b1 * s2_prev
            e_prev = sqrt(s2_prev) * zt
            out[t] = mu + e_prev
        return out
    for t, zt in enumerate(z.tolist()):
        out[t], state = garch_step(spec, state, zt)
    return out


def log_returns(prices) -> np.ndarray:
    p = np.asarray(prices, dtype=float)
    if p.ndim != 1 or len(p) < 2:
        raise DomainError("need at least two prices")
    if np.any(~np.isfinite(p)) or np.any(p <= 0):
        raise DomainError("prices must be finite and > 0")
    return np.diff(np.log(p))


# ---------------------------------------------------------------------------
# Quasi-maximum-likelihood fitting
# ---------------------------------------------------------------------------


def _unpack(theta, p, q, ar_p, ma_q, mean, scale2):
    k = 0
    mu = mean + theta[k] * math.sqrt(scale2)
    k += 1
    phi = tuple(theta[k : k + ar_p])
    k += ar_p
    ma = tuple(theta[k : k + ma_q])
    k += ma_q
    alpha0 = scale2 * math.exp(theta[k])
    k += 1
    logits = np.append(theta[k : k + p + q], 0.0)
    w = np.exp(logits - logits.max())
    w /= w.sum()
    return mu, phi, ma, alpha0, tuple(w[:p]), tuple(w[p : p + q])


def _innovations(r, mu, phi, ma):
    k = len(phi)
    y = r[k:] - mu
    for i, c in enumerate(phi, start=1):
        y = y - c * r[k - i : len(r) - i]
    if ma:
        y = signal.lfilter([1.0], np.r_[1.0, ma], y)
    return y


def _conditional_variance(eps, alpha0, alpha, beta, backcast):
    e2 = eps * eps
    x = np.full(len(e2), alpha0)
    for i, a in enumerate(alpha, start=1):
        lagged = np.r_[np.full(i, backcast), e2[:-i]]
        x += a * lagged
    if beta:
        den = np.r_[1.0, -np.asarray(beta)]
        zi = signal.lfiltic([1.0], den, y=[backcast] * len(beta))
        s2, _ = signal.lfilter([1.0], den, x, zi=zi)
        return s2
    return x


def garch_nll(r, mu, phi, ma, alpha0, alpha, beta) -> float:
    """Gaussian negative log-likelihood, conditional on the first AR lags."""
    eps = _innovations(r, mu, phi, ma)
    backcast = float(np.mean(eps * eps))
    s2 = _conditional_variance(eps, alpha0, alpha, beta, backcast)
    if not np.all(np.isfinite(s2)) or np.any(s2 <= 0):
        return math.inf
    return 0.5 * float(np.sum(np.log(2 * math.pi) + np.log(s2) + eps * eps / s2))


def fit_garch(
    returns,
    p: int = 1,
    q: int = 1,
    arma_p: int = 0,
    arma_q: int = 0,
    max_iter: int = 2000,
    tol: float = 1e-8,
) -> GarchSpec:
    """Fit an ARMA(arma_p, arma_q)-GARCH(p, q) model by Gaussian quasi-MLE.

    The search runs a Nelder-Mead simplex over an unconstrained
    reparameterisation: log intercept and softmax weights (with a slack
    component) for the ARCH/GARCH terms, so every candidate is stationary.
    The series is rescaled to unit variance first and the result mapped back.
    If a likelihood-ratio test at the 5% level cannot reject constant
    variance, the returned spec has zero ARCH and GARCH coefficients.

    Raises ``GarchFitError`` (carrying the best spec found) if the simplex
    has not converged within ``max_iter`` iterations.
    """
    r = np.asarray(returns, dtype=float)
    if p < 1 or q < 0 or arma_p < 0 or arma_q < 0:
        raise DomainError("invalid model orders")
    if r.ndim != 1 or len(r) < 50 * (p + q + 1):
        raise DomainError(f"need at least {50 * (p + q + 1)} observations")
    if not np.all(np.isfinite(r)):
        raise DomainError("returns must be finite")
    scale = float(np.std(r))
    if scale == 0.0:
        raise DomainError("returns have zero variance")
    x = r / scale
    mean = float(np.mean(x))

    def objective(theta):
        mu, phi, ma, a0, alpha, beta = _unpack(theta, p, q, arma_p, arma_q, mean, 1.0)
        return garch_nll(x, mu, phi, ma, a0, alpha, beta)

    starts = []
    for persistence in (0.95, 0.5):
        a_tot = 0.05
        b_tot = persistence - a_tot if q else 0.0
        a_tot = a_tot if q else persistence
        slack = 1.0 - a_tot - b_tot
        w = [a_tot / p] * p + ([b_tot / q] * q if q else [])
        starts.append(
            np.r_[0.0, [0.0] * arma_p, [0.0] * arma_q, math.log(slack), np.log(np.array(w) / slack)]
        )

    best = None
    used = 0
    for x0 in starts:
        res = optimize.minimize(
            objective,
            x0,
            method="Nelder-Mead",
            options={"maxiter": max_iter, "xatol": 1e-7, "fatol": tol, "adaptive": True},
        )
        used = max(used, res.nit)
        if best is None or res.fun < best.fun:
            best = res
    # Restart from the optimum; a collapsed simplex can stall short of it.
    res = optimize.minimize(
        objective,
        best.x,
        method="Nelder-Mead",
        options={"maxiter": max_iter, "xatol": 1e-7, "fatol": tol, "adaptive": True},
    )
    if res.fun <= best.fun:
        best = res

    mu, phi, ma, a0, alpha, beta = _unpack(best.x, p, q, arma_p, arma_q, mean, 1.0)
    # Without significant ARCH effects beta is unidentified and drifts toward
    # one; fall back to the constant-variance model the data cannot reject.
    eps = _innovations(x, mu, phi, ma)
    a0_flat = float(np.mean(eps * eps))
    nll_flat = garch_nll(x, mu, phi, ma, a0_flat, (0.0,) * p, (0.0,) * q)
    if 2.0 * (nll_flat - best.fun) < stats.chi2.ppf(0.95, p + q):
        a0, alpha, beta = a0_flat, (0.0,) * p, (0.0,) * q
    spec = GarchSpec(
        mu=mu * scale, ar=phi, ma=ma, alpha0=a0 * scale * scale, alpha=alpha, beta=beta
    )
    if not best.success:
        raise GarchFitError(
            f"quasi-MLE did not converge in {max_iter} iterations: {best.message}",
            best=spec,
            nll=float(best.fun),
        )
    return spec


# ---------------------------------------------------------------------------
# Correlation
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CorrelationMatrix:
    assets: tuple[str, ...]
    matrix: np.ndarray = field(repr=False)

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        object.__setattr__(self, "assets", tuple(self.assets))
        n = len(self.assets)
        if m.shape != (n, n):
            raise ValidationError([f"correlation matrix shape {m.shape} does not match {n} assets"])
        if not np.all(np.isfinite(m)):
            raise ValidationError(["correlation matrix has non-finite entries"])
        if not np.allclose(m, m.T, atol=1e-12, rtol=0):
            raise ValidationError(["correlation matrix is not symmetric"])
        if not np.allclose(np.diag(m), 1.0, atol=1e-12, rtol=0):
            raise ValidationError(["correlation matrix diagonal must be 1"])
        if np.any(np.abs(m) > 1.0 + 1e-12):
            raise ValidationError(["correlation entries must lie in [-1, 1]"])
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls, assets: Sequence[str]) -> CorrelationMatrix:
        return cls(tuple(assets), np.eye(len(assets)))


def estimate_correlation(returns: Mapping[str, Sequence[float]]) -> CorrelationMatrix:
    """Pearson correlation of equal-length return series keyed by asset."""
    assets = tuple(returns)
    data = np.array([np.asarray(returns[a], dtype=float) for a in assets])
    if data.ndim != 2 or data.shape[1] < 2:
        raise DomainError("need equal-length series with at least two observations")
    for a, row in zip(assets, data):
        if np.std(row) == 0:
            raise DomainError(f"series for {a} has zero variance")
    corr = np.corrcoef(data)
    corr = np.clip((corr + corr.T) / 2, -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    return CorrelationMatrix(assets, corr)


def psd_factor(corr) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T`` equal to the (repaired) correlation.

    Matrices that are not positive definite get their eigenvalues clipped at
    1e-10 and are rescaled back to a unit diagonal before factoring.
    """
    m = np.array(corr.matrix if isinstance(corr, CorrelationMatrix) else corr, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValidationError(["correlation matrix must be square"])
    if not np.allclose(m, m.T, atol=1e-12, rtol=0):
        raise ValidationError(["correlation matrix is not symmetric"])
    try:
        return np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        pass
    floor = 1e-10
    for _ in range(20):
        w, v = np.linalg.eigh(m)
        m = (v * np.maximum(w, floor)) @ v.T
        d = np.sqrt(np.diag(m))
        m = m / np.outer(d, d)
        m = (m + m.T) / 2
        try:
            return np.linalg.cholesky(m)
        except np.linalg.LinAlgError:
            floor *= 10
    raise DomainError("could not repair correlation matrix")


# ---------------------------------------------------------------------------
# Path simulation
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class PricePathSet:
    assets: tuple[str, ...]
    path_indices: np.ndarray
    prices: np.ndarray  # (n_paths, n_steps + 1, n_assets); step 0 is the origin
    step_seconds: int = DEFAULT_STEP_SECONDS
    log_returns: np.ndarray | None = None
    innovations: np.ndarray | None = None  # correlated standard-normal shocks

    @property
    def origin(self) -> np.ndarray:
        return self.prices[0, 0]


def path_rng(master_seed: int, path_index: int) -> np.random.Generator:
    """Counter-based stream for one path, keyed by (master_seed, path_index).

    Draws within the stream are consumed step-major then asset, so every
    (seed, path, step, asset) tuple maps to a fixed position.
    """
    if not 0 <= master_seed < 2**64 or not 0 <= path_index < 2**64:
        raise DomainError("seed and path index must fit in 64 bits")
    return np.random.Generator(np.random.Philox(key=(master_seed << 64) | path_index))


def path_shocks(master_seed: int, path_index: int, n_steps: int, n_assets: int) -> np.ndarray:
    return path_rng(master_seed, path_index).standard_normal((n_steps, n_assets))


def _pad(rows, width):
    out = np.zeros((len(rows), width))
    for i, row in enumerate(rows):
        out[i, : len(row)] = row
    return out


def simulate_paths(
    specs: Sequence[GarchSpec],
    corr: CorrelationMatrix,
    origin_prices: Sequence[float],
    n_steps: int,
    n_paths: int | None = None,
    seed: int = 0,
    path_indices: Sequence[int] | None = None,
    shocks: np.ndarray | None = None,
    step_seconds: int = DEFAULT_STEP_SECONDS,
    keep_details: bool = False,
) -> PricePathSet:
    """Simulate correlated ARMA-GARCH price paths.

    Each path's output depends only on ``(seed, path_index)``: shocks come
    from that path's own Philox stream and every array operation below is
    elementwise across paths, so batch composition never changes results.
    ``shocks`` (uncorrelated standard normals shaped
    ``(n_paths, n_steps, n_assets)``) overrides the generator.
    """
    specs = list(specs)
    n_assets = len(specs)
    if len(corr.assets) != n_assets or len(origin_prices) != n_assets:
        raise ValidationError(
            [f"dimension mismatch: {n_assets} specs, {len(corr.assets)} correlated assets, "
             f"{len(origin_prices)} origin prices"]
        )
    if n_steps < 1:
        raise DomainError("n_steps must be >= 1")
    origin = np.asarray(origin_prices, dtype=float)
    if np.any(origin <= 0):
        raise DomainError("origin prices must be > 0")
    for s in specs:
        if not isinstance(s, GarchSpec):
            raise ValidationError(["specs must be GarchSpec instances"])

    if path_indices is None:
        if n_paths is None:
            n_paths = len(shocks) if shocks is not None else 1
        path_indices = np.arange(n_paths)
    path_indices = np.asarray(path_indices, dtype=np.int64)
    n_paths = len(path_indices)
    if n_paths < 1:
        raise DomainError("n_paths must be >= 1")

    if shocks is None:
        z = np.stack([path_shocks(seed, int(i), n_steps, n_assets) for i in path_indices])
    else:
        z = np.asarray(shocks, dtype=float)
        if z.shape != (n_paths, n_steps, n_assets):
            raise ValidationError([f"shocks shape {z.shape} != {(n_paths, n_steps, n_assets)}"])

    chol = psd_factor(corr)
    zc = np.zeros_like(z)
    for i in range(n_assets):
        for j in range(i + 1):
            if chol[i, j] != 0.0:
                zc[:, :, i] += chol[i, j] * z[:, :, j]

    n_alpha = max(len(s.alpha) for s in specs)
    n_beta = max(len(s.beta) for s in specs)
    n_ar = max(len(s.ar) for s in specs)
    n_ma = max(len(s.ma) for s in specs)
    n_eps = max(n_alpha, n_ma, 1)
    alpha = _pad([s.alpha for s in specs], n_alpha)
    beta = _pad([s.beta for s in specs], n_beta)
    ar = _pad([s.ar for s in specs], n_ar)
    ma = _pad([s.ma for s in specs], n_ma)
    alpha0 = np.array([s.alpha0 for s in specs])
    mu = np.array([s.mu for s in specs])

    eps_lags = np.zeros((n_paths, n_assets, n_eps))
    s2_lags = np.tile(np.array([s.unconditional_variance for s in specs])[:, None], (n_paths, 1, max(n_beta, 1)))
    r_lags = np.zeros((n_paths, n_assets, max(n_ar, 1)))
    r = np.empty((n_paths, n_steps, n_assets))

    for t in range(n_steps):
        s2 = np.broadcast_to(alpha0, (n_paths, n_assets)).copy()
        for k in range(n_alpha):
            e = eps_lags[:, :, k]
            s2 += alpha[:, k] * (e * e)
        for k in range(n_beta):
            s2 += beta[:, k] * s2_lags[:, :, k]
        eps = np.sqrt(s2) * zc[:, t, :]
        rt = mu + eps
        for k in range(n_ar):
            rt = rt + ar[:, k] * r_lags[:, :, k]
        for k in range(n_ma):
            rt = rt + ma[:, k] * eps_lags[:, :, k]
        r[:, t, :] = rt
        if n_eps > 1:
            eps_lags[:, :, 1:] = eps_lags[:, :, :-1]
        eps_lags[:, :, 0] = eps
        if n_beta > 1:
            s2_lags[:, :, 1:] = s2_lags[:, :, :-1]
        if n_beta:
            s2_lags[:, :, 0] = s2
        if n_ar:
            if n_ar > 1:
                r_lags[:, :, 1:] = r_lags[:, :, :-1]
            r_lags[:, :, 0] = rt

    prices = np.empty((n_paths, n_steps + 1, n_assets))
    prices[:, 0, :] = origin
    prices[:, 1:, :] = origin * np.exp(np.cumsum(r, axis=1))
    if not np.all(prices > 0):
        raise DomainError("simulated prices underflowed to zero")
    return PricePathSet(
        assets=tuple(corr.assets),
        path_indices=path_indices,
        prices=prices,
        step_seconds=step_seconds,
        log_returns=r if keep_details else None,
        innovations=zc if keep_details else None,
    )


def price_extremes(prices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Largest drop and largest rise relative to the origin, per path and asset.

    ``prices`` is ``(n_paths, n_steps + 1, n_assets)``; both outputs are
    ``(n_paths, n_assets)`` fractions (drop <= 0 <= rise).
    """
    rel = prices / prices[:, :1, :] - 1.0
    return rel.min(axis=1), rel.max(axis=1)


def load_price_csv(path) -> dict[str, np.ndarray]:
    """Read ``timestamp,asset,price`` rows into per-asset price series."""
    path = Path(path)
    rows: dict[str, list[tuple]] = {}
    errors = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["timestamp", "asset", "price"]:
            raise ValidationError([f"{path}:1: header must be timestamp,asset,price"])
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                errors.append(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
                continue
            ts, asset, price = (c.strip() for c in row)
            try:
                value = float(price)
            except ValueError:
                errors.append(f"{path}:{lineno}: price {price!r} is not a number")
                continue
            if not math.isfinite(value) or value <= 0:
                errors.append(f"{path}:{lineno}: price must be finite and > 0")
                continue
            try:
                key = (0, float(ts), "")
            except ValueError:
                key = (1, 0.0, ts)
            rows.setdefault(asset, []).append((key, value))
    if errors:
        raise ValidationError(errors)
    return {a: np.array([v for _, v in sorted(vals, key=lambda kv: kv[0])]) for a, vals in rows.items()}
