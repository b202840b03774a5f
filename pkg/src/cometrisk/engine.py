"""Monte Carlo orchestration: per-path market replicas, staged VaR, LaR.

Within a step the order is fixed: price update, accrue, absorb every
liquidatable account in ascending id order, then one liquidator pass.

``run_path`` does not literally scan every account at every step. Borrowers
are passive and prices are exogenous, so each account's absorb step is
known once the path's prices are: a float screen proposes candidate steps
and the exact ``market.is_liquidatable`` check confirms them. The market is
then only stepped while inventory or pending absorbs exist. The pre-event
accrual trajectory is shared by all paths and cached. ``run_path_reference``
is the literal loop and must agree with ``run_path`` bit for bit.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from fractions import Fraction
from functools import cached_property
from typing import Callable, Mapping, Sequence

import numpy as np

from . import agents
from . import market as mk
from .errors import DomainError, ValidationError
from .market import ZERO, MarketState, usd
from .price_model import (
    DEFAULT_HORIZON_STEPS,
    DEFAULT_STEP_SECONDS,
    CorrelationMatrix,
    GarchSpec,
    price_extremes,
    simulate_paths,
)
from .slippage import SlippageModel

PATHS_PER_ROUND = 5000
MAX_ROUNDS = 10
CHUNK = 250
# Float-screen slack: relative for summation error, plus an absolute term
# covering 1e-8 price quantization and per-asset rounding in the exact check.
_SCREEN_REL = 1e-11
_SCREEN_ABS = 1e-6


@dataclass(frozen=True, eq=False)
class Scenario:
    market: MarketState
    specs: tuple[GarchSpec, ...]
    corr: CorrelationMatrix
    origin_prices: tuple[float, ...]
    slippage: Mapping[str, SlippageModel]
    liquidator: agents.LiquidatorConfig = agents.LiquidatorConfig()
    horizon_steps: int = DEFAULT_HORIZON_STEPS
    step_seconds: int = DEFAULT_STEP_SECONDS
    master_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "specs", tuple(self.specs))
        object.__setattr__(self, "origin_prices", tuple(float(p) for p in self.origin_prices))
        symbols = self.market.params.symbols
        errors = []
        if tuple(self.corr.assets) != symbols:
            errors.append(f"correlation assets {self.corr.assets} != collateral order {symbols}")
        if len(self.specs) != len(symbols):
            errors.append(f"{len(self.specs)} GARCH specs for {len(symbols)} collateral assets")
        if len(self.origin_prices) != len(symbols) or any(p <= 0 for p in self.origin_prices):
            errors.append("need one positive origin price per collateral asset")
        missing = [s for s in symbols if s not in self.slippage]
        if missing:
            errors.append(f"no slippage model for {missing}")
        if self.horizon_steps < 1 or self.step_seconds < 1:
            errors.append("horizon_steps and step_seconds must be >= 1")
        if not 0 <= self.master_seed < 2**64:
            errors.append("master_seed must be an unsigned 64-bit integer")
        if errors:
            raise ValidationError(errors)

    @property
    def symbols(self) -> tuple[str, ...]:
        return self.market.params.symbols

    @cached_property
    def _compiled(self) -> _Compiled:
        return _Compiled(self)

    def __getstate__(self):
        state = dict(self.__dict__)
        state.pop("_compiled", None)
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)


class _Compiled:
    """Float views of the borrower book plus the cached accrual trajectory."""

    def __init__(self, sc: Scenario):
        params = sc.market.params
        self.ids = sorted(aid for aid, a in sc.market.accounts.items() if a.base_borrowed > 0)
        accounts = [sc.market.accounts[i] for i in self.ids]
        n_assets = len(params.symbols)
        self.weights = np.zeros((n_assets, len(accounts)))
        for j, acc in enumerate(accounts):
            for sym, units in acc.collateral.items():
                cfg = params.collateral(sym)
                k = params.symbols.index(sym)
                self.weights[k, j] = float(cfg.asset.tokens(units) * cfg.lcf)
        self.debts = np.array([float(a.base_borrowed) for a in accounts])
        self.slack = self.weights.sum(axis=0) * 1e-8 + _SCREEN_ABS
        self._accrual = None
        self._market = sc.market
        self._dt = sc.step_seconds
        self._horizon = sc.horizon_steps

    def closed_until_horizon(self, state: MarketState, remaining: int) -> bool:
        """True if accrual alone cannot pull the reserve under target in ``remaining`` steps.

        Per step the reserve falls by at most the supply interest, which is
        bounded by the top of the supply curve applied to a growing supply.
        """
        if remaining <= 0:
            return True
        rate = float(mk.supply_rate(1, state.params.supply_ir)) * self._dt
        supply = float(state.total_base_supplied) * (1.0 + rate) ** remaining
        bound = remaining * (rate * supply + 1e-8)
        return float(state.base_reserve - state.params.target_reserve) > 2.0 * bound + 1.0

    def state_after(self, n_steps: int) -> MarketState:
        """Initial market after ``n_steps`` event-free accruals."""
        if self._accrual is None:
            s = self._market.clone()
            traj = [(s.total_base_borrowed, s.total_base_supplied, s.base_reserve)]
            for _ in range(self._horizon):
                mk.accrue(s, self._dt)
                traj.append((s.total_base_borrowed, s.total_base_supplied, s.base_reserve))
            self._accrual = traj
        state = self._market.clone()
        state.total_base_borrowed, state.total_base_supplied, state.base_reserve = self._accrual[n_steps]
        return state


@dataclass(frozen=True)
class PathOutcome:
    path_index: int
    protocol_loss_usd: Decimal
    liquidated_usd: Mapping[str, Decimal]
    liquidated_total_usd: Decimal
    absorb_count: int
    final_prices: Mapping[str, float]
    max_drop: Mapping[str, float]
    max_rise: Mapping[str, float]


def _decimal_prices(symbols, row) -> dict[str, Decimal]:
    return {s: usd(float(p)) for s, p in zip(symbols, row)}


def absorb_schedule(sc: Scenario, prices: np.ndarray) -> dict[int, list[str]]:
    """Step -> account ids (ascending) that first become liquidatable at that step."""
    comp = sc._compiled
    if not comp.ids:
        return {}
    path = prices[1:]
    floor = path.min(axis=0) @ comp.weights
    cand = np.flatnonzero(comp.debts > floor * (1 - _SCREEN_REL) - comp.slack)
    if cand.size == 0:
        return {}
    limits = path @ comp.weights[:, cand]
    hits = comp.debts[cand] > limits * (1 - _SCREEN_REL) - comp.slack[cand]
    params = sc.market.params
    cache: dict[int, dict] = {}
    schedule: dict[int, list[str]] = {}
    for j, col in enumerate(cand):
        acc = sc.market.accounts[comp.ids[col]]
        for s in np.flatnonzero(hits[:, j]):
            t = int(s) + 1
            pv = cache.get(t)
            if pv is None:
                pv = cache[t] = _decimal_prices(sc.symbols, prices[t])
            if mk.is_liquidatable(acc, pv, params):
                schedule.setdefault(t, []).append(acc.id)
                break
    for ids in schedule.values():
        ids.sort()
    return schedule


def _outcome(sc, path_index, prices, state, absorb_events, loss) -> PathOutcome:
    symbols = sc.symbols
    liquidated = {s: ZERO for s in symbols}
    for ev in absorb_events:
        for sym, v in ev.values_usd.items():
            liquidated[sym] += v
    drop, rise = price_extremes(prices[None])
    return PathOutcome(
        path_index=path_index,
        protocol_loss_usd=loss,
        liquidated_usd=liquidated,
        liquidated_total_usd=sum(liquidated.values(), ZERO),
        absorb_count=len(absorb_events),
        final_prices={s: float(p) for s, p in zip(symbols, prices[-1])},
        max_drop={s: float(v) for s, v in zip(symbols, drop[0])},
        max_rise={s: float(v) for s, v in zip(symbols, rise[0])},
    )


def evaluate_path(sc: Scenario, path_index: int, prices: np.ndarray) -> PathOutcome:
    """Run the market over one price path of shape ``(horizon + 1, n_assets)``."""
    prices = np.asarray(prices, dtype=float)
    if prices.shape != (sc.horizon_steps + 1, len(sc.symbols)):
        raise ValidationError([f"price path shape {prices.shape} does not match scenario"])
    schedule = absorb_schedule(sc, prices)
    if not schedule:
        return _outcome(sc, path_index, prices, None, [], ZERO)

    comp = sc._compiled
    symbols = sc.symbols
    horizon, dt = sc.horizon_steps, sc.step_seconds
    due_steps = sorted(schedule)
    state = comp.state_after(due_steps[0] - 1)
    target = state.params.target_reserve
    events = []
    k = 0
    t = due_steps[0]  # state has accrued through step t - 1
    while t <= horizon:
        nxt = due_steps[k] if k < len(due_steps) else horizon + 1
        if t == nxt:
            mk.accrue(state, dt)
            pv = _decimal_prices(symbols, prices[t])
            for aid in schedule[t]:
                events.append(mk.absorb(state, aid, pv, t))
            agents.run_liquidator(state, pv, sc.slippage, sc.liquidator, t)
            k += 1
            t += 1
            continue
        # idle stretch: only the liquidator could act, and only once the
        # reserve sits below target while inventory is held
        holding = any(state.for_sale.values())
        if k == len(due_steps) and (not holding or comp.closed_until_horizon(state, horizon - t + 1)):
            break
        if not holding:
            mk.accrue_steps(state, dt, nxt - t)
            t = nxt
            continue
        t += mk.accrue_steps(state, dt, nxt - t, floor=target) - 1
        if state.base_reserve < target:
            agents.run_liquidator(state, _decimal_prices(symbols, prices[t]), sc.slippage, sc.liquidator, t)
        t += 1
    if any(state.lots.values()):
        mk.settle_horizon(state, _decimal_prices(symbols, prices[-1]), sc.horizon_steps)
    return _outcome(sc, path_index, prices, state, events, mk.total_loss(state))


def run_path_reference(sc: Scenario, path_index: int, prices: np.ndarray | None = None) -> PathOutcome:
    """Literal step loop; slow, kept as an independent check on ``run_path``."""
    if prices is None:
        prices = simulate_path_prices(sc, [path_index])[0]
    state = sc.market.clone()
    params = state.params
    events = []
    ids = sorted(state.accounts)
    for t in range(1, sc.horizon_steps + 1):
        mk.accrue(state, sc.step_seconds)
        pv = _decimal_prices(sc.symbols, prices[t])
        for aid in ids:
            if mk.is_liquidatable(state.accounts[aid], pv, params):
                events.append(mk.absorb(state, aid, pv, t))
        agents.run_liquidator(state, pv, sc.slippage, sc.liquidator, t)
    loss = mk.settle_horizon(state, _decimal_prices(sc.symbols, prices[-1]), sc.horizon_steps)
    return _outcome(sc, path_index, prices, state, events, loss)


def simulate_path_prices(sc: Scenario, path_indices: Sequence[int]) -> np.ndarray:
    return simulate_paths(
        sc.specs,
        sc.corr,
        sc.origin_prices,
        sc.horizon_steps,
        seed=sc.master_seed,
        path_indices=path_indices,
        step_seconds=sc.step_seconds,
    ).prices


def run_path(sc: Scenario, path_index: int, prices: np.ndarray | None = None) -> PathOutcome:
    if prices is None:
        prices = simulate_path_prices(sc, [path_index])[0]
    return evaluate_path(sc, path_index, prices)


# ---------------------------------------------------------------------------
# Parallel execution
# ---------------------------------------------------------------------------


def resolve_workers(workers: int | None = None) -> int:
    """Worker count: explicit value, else CPU count; ``RISKSIM_THREADS`` caps both."""
    n = workers if workers is not None else (os.cpu_count() or 1)
    cap = os.environ.get("RISKSIM_THREADS")
    if cap:
        try:
            n = min(n, int(cap))
        except ValueError:
            raise ValidationError([f"RISKSIM_THREADS={cap!r} is not an integer"]) from None
    return max(1, n)


def _run_chunk(sc: Scenario, indices: Sequence[int]) -> list[PathOutcome]:
    prices = simulate_path_prices(sc, indices)
    return [evaluate_path(sc, int(i), p) for i, p in zip(indices, prices)]


_WORKER_SCENARIO: Scenario | None = None


def _init_worker(sc: Scenario):
    global _WORKER_SCENARIO
    _WORKER_SCENARIO = sc


def _worker_chunk(indices):
    return _run_chunk(_WORKER_SCENARIO, indices)


class Runner:
    """Evaluates path ranges, serially or on a process pool.

    Results never depend on the worker count: every path draws from its own
    generator stream and outcomes are reassembled in path order.
    """

    def __init__(self, scenario: Scenario, workers: int | None = None):
        self.scenario = scenario
        self.workers = resolve_workers(workers)
        self._pool = None

    def __enter__(self):
        if self.workers > 1:
            self._pool = ProcessPoolExecutor(
                max_workers=self.workers, initializer=_init_worker, initargs=(self.scenario,)
            )
        return self

    def __exit__(self, *exc):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def run(self, path_indices: Sequence[int]) -> list[PathOutcome]:
        path_indices = list(path_indices)
        chunks = [path_indices[i : i + CHUNK] for i in range(0, len(path_indices), CHUNK)]
        if self._pool is None:
            results = [_run_chunk(self.scenario, c) for c in chunks]
        else:
            results = list(self._pool.map(_worker_chunk, chunks))
        out = [o for chunk in results for o in chunk]
        out.sort(key=lambda o: o.path_index)
        return out


def run_round(
    sc: Scenario, round_index: int, n: int = PATHS_PER_ROUND, workers: int | None = None, runner: Runner | None = None
) -> list[PathOutcome]:
    if n < 1:
        raise DomainError("n must be >= 1")
    indices = range(round_index * n, round_index * n + n)
    if runner is not None:
        return runner.run(indices)
    with Runner(sc, workers) as r:
        return r.run(indices)


# ---------------------------------------------------------------------------
# VaR
# ---------------------------------------------------------------------------


def percentile(samples: Sequence, q) -> Decimal:
    """Nearest-rank percentile: the ceil(q*n)-th smallest sample."""
    if not samples:
        raise DomainError("percentile of an empty sample")
    qf = Fraction(str(q))
    if not 0 < qf <= 1:
        raise DomainError("q must lie in (0, 1]")
    ordered = sorted(samples)
    rank = math.ceil(qf * len(ordered))
    return ordered[rank - 1]


@dataclass(frozen=True)
class Tolerance:
    """Convergence bound: absolute USD, or relative to the round-1 p95."""

    value: Decimal | None  # None = unbounded
    relative: bool = False

    @classmethod
    def parse(cls, text) -> Tolerance:
        if isinstance(text, Tolerance):
            return text
        s = str(text).strip().lower()
        if s in ("inf", "infinity", "none"):
            return cls(None)
        try:
            if s.endswith("%"):
                return cls(Decimal(s[:-1]) / 100, relative=True)
            v = Decimal(s)
        except InvalidOperation:
            raise ValidationError([f"invalid epsilon {text!r}"]) from None
        if v.is_infinite():
            return cls(None)
        if v < 0:
            raise ValidationError(["epsilon must be >= 0"])
        return cls(v)

    def resolve(self, reference: Decimal) -> Decimal | None:
        if self.value is None:
            return None
        return usd(self.value * reference) if self.relative else self.value

    def __str__(self):
        if self.value is None:
            return "inf"
        return f"{(self.value * 100).normalize():f}%" if self.relative else str(self.value)


@dataclass(frozen=True)
class RoundCheck:
    round_index: int
    n_samples: int
    p95_usd: Decimal
    gap_usd: Decimal | None  # vs the previous pooled p95
    within: bool | None


@dataclass(frozen=True)
class VarReport:
    var95_usd: Decimal
    converged: bool
    epsilon_usd: Decimal | None
    rounds: int
    n_samples: int
    checks: tuple[RoundCheck, ...]

    @property
    def percentiles(self) -> tuple[Decimal, ...]:
        return tuple(c.p95_usd for c in self.checks)


def staged_var(
    draw_round: Callable[[int], Sequence[Decimal]],
    tolerance,
    max_rounds: int = MAX_ROUNDS,
    q=Decimal("0.95"),
) -> tuple[VarReport, list]:
    """Grow a pooled loss sample round by round until its p95 settles.

    Round 0 gives the first p95; every further round adds its samples to the
    pool and compares the pooled p95 to the previous one. A gap within
    epsilon on the convergence check moves on to the final round; the final
    round must also land within epsilon, otherwise checking resumes. So
    convergence needs two consecutive in-bound gaps, with 3 rounds minimum.
    """
    tol = Tolerance.parse(tolerance)
    if max_rounds < 3:
        raise DomainError("max_rounds must be >= 3")
    pool = list(draw_round(0))
    p_prev = percentile(pool, q)
    eps = tol.resolve(p_prev)
    checks = [RoundCheck(0, len(pool), p_prev, None, None)]
    streak = 0
    converged = False
    for k in range(1, max_rounds):
        pool.extend(draw_round(k))
        p = percentile(pool, q)
        gap = abs(p - p_prev)
        within = eps is None or gap <= eps
        checks.append(RoundCheck(k, len(pool), p, gap, within))
        p_prev = p
        streak = streak + 1 if within else 0
        if streak == 2:
            converged = True
            break
    report = VarReport(
        var95_usd=p_prev,
        converged=converged,
        epsilon_usd=eps,
        rounds=len(checks),
        n_samples=len(pool),
        checks=tuple(checks),
    )
    return report, pool


def estimate_var(
    sc: Scenario,
    tolerance="1%",
    paths_per_round: int = PATHS_PER_ROUND,
    max_rounds: int = MAX_ROUNDS,
    workers: int | None = None,
) -> tuple[VarReport, list[PathOutcome]]:
    outcomes: list[PathOutcome] = []
    with Runner(sc, workers) as runner:

        def draw(k):
            batch = run_round(sc, k, paths_per_round, runner=runner)
            outcomes.extend(batch)
            return [o.protocol_loss_usd for o in batch]

        report, _ = staged_var(draw, tolerance, max_rounds)
    return report, outcomes


# ---------------------------------------------------------------------------
# LaR
# ---------------------------------------------------------------------------

LAR_QUANTILES = (("p50", Decimal("0.50")), ("p90", Decimal("0.90")), ("p95", Decimal("0.95")), ("p99", Decimal("0.99")))
TOTAL = "total"


@dataclass(frozen=True)
class Histogram:
    edges: tuple[float, ...]
    counts: tuple[int, ...]


@dataclass(frozen=True)
class LarReport:
    n_paths: int
    columns: tuple[str, ...]
    percentiles: Mapping[str, Mapping[str, Decimal]]
    histograms: Mapping[str, Histogram]


def histogram(values: Sequence[Decimal], bins: int = 100) -> Histogram:
    """Fixed-width bins spanning [0, max]; everything lands in bin 0 if max is 0."""
    if bins < 1:
        raise DomainError("bins must be >= 1")
    top = float(max(values)) if values else 0.0
    counts = [0] * bins
    if top <= 0:
        counts[0] = len(values)
        return Histogram(tuple([0.0] * (bins + 1)), tuple(counts))
    width = top / bins
    for v in values:
        counts[min(int(float(v) / width), bins - 1)] += 1
    return Histogram(tuple(width * i for i in range(bins)) + (top,), tuple(counts))


def estimate_lar(outcomes: Sequence[PathOutcome], bins: int = 100) -> LarReport:
    if not outcomes:
        raise DomainError("no outcomes to aggregate")
    columns = tuple(outcomes[0].liquidated_usd) + (TOTAL,)
    data = {c: [] for c in columns}
    for o in outcomes:
        for sym, v in o.liquidated_usd.items():
            data[sym].append(v)
        data[TOTAL].append(o.liquidated_total_usd)
    return LarReport(
        n_paths=len(outcomes),
        columns=columns,
        percentiles={c: {name: percentile(data[c], q) for name, q in LAR_QUANTILES} for c in columns},
        histograms={c: histogram(data[c], bins) for c in columns},
    )


def bootstrap_se(samples: Sequence, q=0.95, n_boot: int = 500, seed: int = 0) -> float:
    """Bootstrap standard error of the nearest-rank ``q`` percentile."""
    x = np.asarray([float(s) for s in samples])
    if x.size == 0:
        raise DomainError("empty sample")
    rng = np.random.Generator(np.random.Philox(key=seed))
    rank = math.ceil(Fraction(str(q)) * x.size) - 1
    stats = np.empty(n_boot)
    for b in range(n_boot):
        stats[b] = np.partition(x[rng.integers(0, x.size, x.size)], rank)[rank]
    return float(stats.std(ddof=1))
