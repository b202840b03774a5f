"""Config, snapshot and report files.

All three are JSON documents with a mandatory ``schema_version``. Parsing is
strict: unknown keys are rejected and every problem found is reported at
once, each message anchored to a line of the source file.
"""

from __future__ import annotations

import csv
import hashlib
import json
from decimal import Decimal
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic import ValidationError as PydanticValidationError

from . import agents
from . import market as mk
from .engine import LarReport, Scenario, Tolerance, VarReport
from .errors import CometRiskError, ValidationError
from .price_model import (
    DEFAULT_HORIZON_STEPS,
    DEFAULT_STEP_SECONDS,
    CorrelationMatrix,
    GarchSpec,
    fit_garch,
    load_price_csv,
    log_returns,
)
from .slippage import SlippageModel, default_model

SCHEMA_VERSION = 1
DEFAULT_SEED = 20240101

NonNeg = Annotated[Decimal, Field(ge=0)]
Positive = Annotated[Decimal, Field(gt=0)]
Units = Annotated[int, Field(ge=0)]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------


class AssetModel(_Strict):
    symbol: str = Field(min_length=1)
    decimals: int = Field(ge=0, le=18)


class CollateralModel(_Strict):
    symbol: str = Field(min_length=1)
    decimals: int = Field(ge=0, le=18)
    bcf: Decimal
    lcf: Decimal
    lf: Decimal
    supply_cap: NonNeg


class IRModel(_Strict):
    base: NonNeg
    slope_low: NonNeg
    slope_high: NonNeg
    kink: Decimal


class MarketModel(_Strict):
    base: AssetModel
    sfp: Decimal
    target_reserve: NonNeg
    supply_ir: IRModel
    borrow_ir: IRModel
    collaterals: list[CollateralModel] = Field(min_length=1)


class GarchModel(_Strict):
    mu: float = 0.0
    ar: list[float] = []
    ma: list[float] = []
    alpha0: float
    alpha: list[float] = [0.05]
    beta: list[float] = [0.9]


class GarchFitModel(_Strict):
    prices: str = Field(min_length=1, description="CSV with header timestamp,asset,price")
    p: int = Field(1, ge=0)
    q: int = Field(1, ge=0)
    arma_p: int = Field(0, ge=0)
    arma_q: int = Field(0, ge=0)


class CorrelationModel(_Strict):
    assets: list[str]
    matrix: list[list[float]]


class PriceModelModel(_Strict):
    garch: dict[str, GarchModel] = {}
    fit: dict[str, GarchFitModel] = {}
    correlation: Optional[CorrelationModel] = None


class SlippageCurveModel(_Strict):
    form: Literal["log_linear", "linear"]
    intercept: float
    slope: float


class SlippageConfigModel(_Strict):
    units: Literal["percent", "fraction"] = "percent"
    models: dict[str, SlippageCurveModel] = {}


class LiquidatorModel(_Strict):
    trading_fee: Decimal = Decimal("0.003")
    max_lot_usd: Positive = Decimal(1_000_000)
    min_lot_usd: NonNeg = Decimal(100)
    include_fee: bool = True


class BorrowerFilterModel(_Strict):
    min_borrow_usd: NonNeg = Decimal(1000)
    max_health_factor: Positive = Decimal(2)


class SimulationModel(_Strict):
    horizon_steps: int = Field(DEFAULT_HORIZON_STEPS, ge=1)
    step_seconds: int = Field(DEFAULT_STEP_SECONDS, ge=1)
    paths_per_round: int = Field(5000, ge=1)
    max_rounds: int = Field(10, ge=3)
    epsilon: str = "1%"
    seed: int = Field(DEFAULT_SEED, ge=0, lt=2**64)
    lar_bins: int = Field(100, ge=1)

    @field_validator("epsilon", mode="before")
    @classmethod
    def _epsilon(cls, v):
        if isinstance(v, (int, float)) and not isinstance(v, bool):
            v = repr(v) if isinstance(v, float) else str(v)
        Tolerance.parse(v)
        return v


class ConfigFile(_Strict):
    schema_version: Literal[1]
    snapshot: Optional[str] = Field(None, description="snapshot path, relative to this file")
    market: MarketModel
    price_model: PriceModelModel
    slippage: SlippageConfigModel = SlippageConfigModel()
    liquidator: LiquidatorModel = LiquidatorModel()
    borrower_filter: BorrowerFilterModel = BorrowerFilterModel()
    simulation: SimulationModel = SimulationModel()


# ---------------------------------------------------------------------------
# Snapshot
# ---------------------------------------------------------------------------


class SnapshotAccount(_Strict):
    id: str = Field(min_length=1)
    collateral: dict[str, Units] = Field({}, description="integer base units per asset")
    base_borrowed: NonNeg = Decimal(0)
    base_supplied: NonNeg = Decimal(0)

    @model_validator(mode="after")
    def _one_side(self):
        if self.base_borrowed > 0 and self.base_supplied > 0:
            raise ValueError("base_borrowed and base_supplied cannot both be positive")
        return self


class SupplierRow(_Strict):
    id: str = Field(min_length=1)
    amount: NonNeg


class SnapshotFile(_Strict):
    schema_version: Literal[1]
    block_height: int = Field(ge=0)
    prices: dict[str, Positive]
    base_reserve: Decimal
    accounts: list[SnapshotAccount] = []
    suppliers: list[SupplierRow] = []


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


class RoundCheckModel(_Strict):
    round: int
    n_samples: int
    p95_usd: Decimal
    gap_usd: Optional[Decimal]
    within: Optional[bool]


class VarModel(_Strict):
    var95_usd: Decimal
    converged: bool
    epsilon: str
    epsilon_usd: Optional[Decimal]
    rounds: int
    n_samples: int
    paths_per_round: int
    checks: list[RoundCheckModel]


class HistogramModel(_Strict):
    edges: list[float]
    counts: list[int]


class LarModel(_Strict):
    n_paths: int
    columns: list[str]
    percentiles: dict[str, dict[str, Decimal]]
    histograms: dict[str, HistogramModel]


class DiagnosticsModel(_Strict):
    horizon_steps: int
    step_seconds: int
    snapshot_accounts: int
    admitted_borrowers: int
    paths_with_absorb: int
    paths_with_loss: int
    absorb_count_total: int
    mean_loss_usd: Decimal
    max_loss_usd: Decimal
    max_drop: dict[str, float]
    max_rise: dict[str, float]


class ReportFile(_Strict):
    schema_version: Literal[1] = 1
    fingerprint: str
    seed: int
    var: VarModel
    lar: LarModel
    diagnostics: DiagnosticsModel


MODELS = {"config": ConfigFile, "snapshot": SnapshotFile, "report": ReportFile}


def json_schemas() -> dict[str, dict]:
    return {name: model.model_json_schema() for name, model in MODELS.items()}


# ---------------------------------------------------------------------------
# Loading with line-anchored errors
# ---------------------------------------------------------------------------


def _json_lines(text: str) -> dict[tuple, int]:
    """Map every JSON path (tuple of keys/indices) to the line its value starts on."""
    decoder = json.JSONDecoder()
    ws = " \t\n\r"
    lines: dict[tuple, int] = {}

    def skip(i):
        while i < len(text) and text[i] in ws:
            i += 1
        return i

    def value(i, path):
        i = skip(i)
        lines[path] = text.count("\n", 0, i) + 1
        c = text[i]
        if c == "{":
            i = skip(i + 1)
            if text[i] == "}":
                return i + 1
            while True:
                key, i = json.decoder.scanstring(text, skip(i) + 1)
                i = skip(i) + 1  # colon
                i = skip(value(i, path + (key,)))
                if text[i] == "}":
                    return i + 1
                i += 1
        if c == "[":
            i = skip(i + 1)
            if text[i] == "]":
                return i + 1
            k = 0
            while True:
                i = skip(value(i, path + (k,)))
                k += 1
                if text[i] == "]":
                    return i + 1
                i += 1
        _, end = decoder.raw_decode(text, i)
        return end

    value(0, ())
    return lines


def _read_json(path: Path):
    try:
        text = path.read_text()
    except OSError as exc:
        raise ValidationError([f"{path}: {exc.strerror or exc}"]) from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError([f"{path}:{exc.lineno}:{exc.colno}: malformed JSON: {exc.msg}"]) from None
    return text, data


def _line_for(lines, loc) -> int:
    loc = tuple(loc)
    while loc and loc not in lines:
        loc = loc[:-1]
    return lines.get(loc, 1)


def _describe(data, loc) -> str:
    parts = []
    node = data
    for key in loc:
        if isinstance(node, list) and isinstance(key, int):
            item = node[key] if key < len(node) else None
            label = f"[{key}]"
            if isinstance(item, dict) and isinstance(item.get("id"), str):
                label += f" (id {item['id']!r})"
            parts.append(label)
            node = item
        else:
            parts.append(f".{key}" if parts else str(key))
            node = node.get(key) if isinstance(node, dict) else None
    return "".join(parts) or "<root>"


def _parse(model, path, text, data, extra_checks=None):
    lines = _json_lines(text)
    errors: list[tuple[int, str]] = []
    obj = None
    try:
        obj = model.model_validate(data)
    except PydanticValidationError as exc:
        for err in exc.errors():
            loc = tuple(err["loc"])
            errors.append((_line_for(lines, loc), f"{_describe(data, loc)}: {err['msg']}"))
    if obj is not None and extra_checks is not None:
        for loc, msg in extra_checks(obj):
            errors.append((_line_for(lines, loc), f"{_describe(data, loc)}: {msg}"))
    if errors:
        errors.sort(key=lambda e: e[0])
        raise ValidationError([f"{path}:{line}: {msg}" for line, msg in errors])
    return obj


def _snapshot_checks(snap: SnapshotFile, config: ConfigFile | None):
    seen = {}
    for i, acc in enumerate(snap.accounts):
        if acc.id in seen:
            yield ("accounts", i, "id"), f"duplicate account id (first at accounts[{seen[acc.id]}])"
        seen.setdefault(acc.id, i)
    if config is None:
        return
    symbols = [c.symbol for c in config.market.collaterals]
    for sym in symbols:
        if sym not in snap.prices:
            yield ("prices",), f"missing price for collateral asset {sym}"
    for sym in snap.prices:
        if sym not in symbols and sym != config.market.base.symbol:
            yield ("prices", sym), f"asset {sym} is not configured in the market"
    for i, acc in enumerate(snap.accounts):
        for sym in acc.collateral:
            if sym not in symbols:
                yield ("accounts", i, "collateral", sym), f"collateral asset {sym} is not configured in the market"
    caps = {c.symbol: c for c in config.market.collaterals}
    for sym, cfg in caps.items():
        posted = sum(a.collateral.get(sym, 0) for a in snap.accounts)
        if Decimal(posted).scaleb(-cfg.decimals) > cfg.supply_cap:
            yield ("accounts",), f"posted {sym} exceeds supply cap {cfg.supply_cap}"
    supplied = sum((s.amount for s in snap.suppliers), Decimal(0))
    borrowed = sum((a.base_borrowed for a in snap.accounts), Decimal(0))
    if borrowed > supplied + snap.base_reserve:
        yield ("suppliers",), (
            f"total borrowed {borrowed} exceeds supplied {supplied} plus reserve {snap.base_reserve}"
        )


def load_config(path) -> ConfigFile:
    path = Path(path)
    text, data = _read_json(path)
    return _parse(ConfigFile, path, text, data)


def load_snapshot(path, config: ConfigFile | None = None) -> SnapshotFile:
    """Validate a snapshot; with ``config``, also cross-check assets, caps and solvency."""
    path = Path(path)
    text, data = _read_json(path)
    return _parse(SnapshotFile, path, text, data, lambda s: _snapshot_checks(s, config))


def load_report(path) -> ReportFile:
    path = Path(path)
    text, data = _read_json(path)
    return _parse(ReportFile, path, text, data)


# ---------------------------------------------------------------------------
# Scenario assembly
# ---------------------------------------------------------------------------


def market_params(m: MarketModel) -> mk.MarketParams:
    def ir(x: IRModel):
        return mk.IRParams(x.base, x.slope_low, x.slope_high, x.kink)

    return mk.MarketParams(
        base=mk.AssetId(m.base.symbol, m.base.decimals),
        sfp=m.sfp,
        target_reserve=m.target_reserve,
        supply_ir=ir(m.supply_ir),
        borrow_ir=ir(m.borrow_ir),
        collaterals=tuple(
            mk.CollateralConfig(mk.AssetId(c.symbol, c.decimals), c.bcf, c.lcf, c.lf, c.supply_cap)
            for c in m.collaterals
        ),
    )


def garch_spec(g: GarchModel) -> GarchSpec:
    return GarchSpec(g.mu, tuple(g.ar), tuple(g.ma), g.alpha0, tuple(g.alpha), tuple(g.beta))


def garch_model(spec: GarchSpec) -> GarchModel:
    return GarchModel(**spec.to_dict())


def _fit_spec(sym: str, fit: GarchFitModel, base_dir: Path) -> GarchSpec:
    series = load_price_csv(base_dir / fit.prices)
    if sym not in series:
        raise ValidationError([f"{fit.prices}: no rows for asset {sym}"])
    return fit_garch(log_returns(series[sym]), p=fit.p, q=fit.q, arma_p=fit.arma_p, arma_q=fit.arma_q)


def correlation(cfg: ConfigFile, symbols) -> CorrelationMatrix:
    c = cfg.price_model.correlation
    if c is None:
        return CorrelationMatrix.identity(symbols)
    if sorted(c.assets) != sorted(symbols):
        raise ValidationError([f"correlation assets {c.assets} must match collaterals {list(symbols)}"])
    m = np.asarray(c.matrix, dtype=float)
    order = [c.assets.index(s) for s in symbols]
    return CorrelationMatrix(tuple(symbols), m[np.ix_(order, order)])


def snapshot_state(cfg: ConfigFile, snap: SnapshotFile) -> tuple[mk.MarketState, int]:
    """Initial market: admitted borrowers only, pool totals over the whole snapshot."""
    params = market_params(cfg.market)
    prices = {s: snap.prices[s] for s in params.symbols}
    accounts = [
        mk.Account(a.id, {k: v for k, v in a.collateral.items() if v}, a.base_borrowed, a.base_supplied)
        for a in snap.accounts
    ]
    flt = agents.BorrowerFilter(cfg.borrower_filter.min_borrow_usd, cfg.borrower_filter.max_health_factor)
    admitted = agents.init_borrowers(accounts, prices, params, flt)
    supply = agents.init_supplier_liquidity(snap.suppliers)
    state = mk.MarketState(
        params,
        accounts={a.id: a for a in admitted},
        total_base_supplied=sum(supply.values(), mk.ZERO),
        total_base_borrowed=sum((a.base_borrowed for a in accounts), mk.ZERO),
        base_reserve=snap.base_reserve,
    )
    return state, len(admitted)


def build_scenario(cfg: ConfigFile, snap: SnapshotFile, base_dir=".", seed: int | None = None) -> Scenario:
    base_dir = Path(base_dir)
    errors = list(m for _, m in _snapshot_checks(snap, cfg))
    if errors:
        raise ValidationError(errors)
    try:
        params = market_params(cfg.market)
    except (CometRiskError, ValueError) as exc:
        raise ValidationError([f"market: {exc}"]) from None
    symbols = params.symbols
    specs = []
    for sym in symbols:
        g, fit = cfg.price_model.garch.get(sym), cfg.price_model.fit.get(sym)
        if (g is None) == (fit is None):
            errors.append(f"price_model: give exactly one of garch/fit for {sym}")
            continue
        try:
            specs.append(garch_spec(g) if g is not None else _fit_spec(sym, fit, base_dir))
        except (CometRiskError, ValueError) as exc:
            errors.append(f"price_model.{sym}: {exc}")
    extra = set(cfg.price_model.garch) | set(cfg.price_model.fit) | set(cfg.slippage.models)
    for sym in sorted(extra - set(symbols)):
        errors.append(f"{sym} is not a configured collateral asset")
    slip = {}
    for sym in symbols:
        m = cfg.slippage.models.get(sym)
        try:
            slip[sym] = SlippageModel(sym, m.form, m.intercept, m.slope) if m else default_model(sym)
        except CometRiskError as exc:
            errors.append(f"slippage.{sym}: {exc}")
    if errors:
        raise ValidationError(errors)
    try:
        state, _ = snapshot_state(cfg, snap)
        liq = cfg.liquidator
        return Scenario(
            market=state,
            specs=tuple(specs),
            corr=correlation(cfg, symbols),
            origin_prices=tuple(float(snap.prices[s]) for s in symbols),
            slippage=slip,
            liquidator=agents.LiquidatorConfig(
                liq.trading_fee, liq.max_lot_usd, liq.min_lot_usd, liq.include_fee, cfg.slippage.units
            ),
            horizon_steps=cfg.simulation.horizon_steps,
            step_seconds=cfg.simulation.step_seconds,
            master_seed=cfg.simulation.seed if seed is None else seed,
        )
    except ValidationError:
        raise
    except (CometRiskError, ValueError) as exc:
        raise ValidationError([str(exc)]) from None


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def fingerprint(cfg: ConfigFile, snap: SnapshotFile, seed: int, options: dict) -> str:
    payload = {
        "config": cfg.model_dump(mode="json", exclude={"snapshot"}),
        "snapshot": snap.model_dump(mode="json"),
        "seed": seed,
        "options": options,
    }
    return hashlib.sha256(_canonical(payload).encode()).hexdigest()


def var_model(rep: VarReport, epsilon, paths_per_round: int) -> VarModel:
    return VarModel(
        var95_usd=rep.var95_usd,
        converged=rep.converged,
        epsilon=str(Tolerance.parse(epsilon)),
        epsilon_usd=rep.epsilon_usd,
        rounds=rep.rounds,
        n_samples=rep.n_samples,
        paths_per_round=paths_per_round,
        checks=[
            RoundCheckModel(round=c.round_index + 1, n_samples=c.n_samples, p95_usd=c.p95_usd, gap_usd=c.gap_usd, within=c.within)
            for c in rep.checks
        ],
    )


def lar_model(rep: LarReport) -> LarModel:
    return LarModel(
        n_paths=rep.n_paths,
        columns=list(rep.columns),
        percentiles={c: dict(v) for c, v in rep.percentiles.items()},
        histograms={c: HistogramModel(edges=list(h.edges), counts=list(h.counts)) for c, h in rep.histograms.items()},
    )


def diagnostics(sc: Scenario, outcomes, snapshot_accounts: int) -> DiagnosticsModel:
    symbols = sc.symbols
    losses = [o.protocol_loss_usd for o in outcomes]
    return DiagnosticsModel(
        horizon_steps=sc.horizon_steps,
        step_seconds=sc.step_seconds,
        snapshot_accounts=snapshot_accounts,
        admitted_borrowers=sum(1 for a in sc.market.accounts.values() if a.base_borrowed > 0),
        paths_with_absorb=sum(1 for o in outcomes if o.absorb_count),
        paths_with_loss=sum(1 for x in losses if x > 0),
        absorb_count_total=sum(o.absorb_count for o in outcomes),
        mean_loss_usd=mk.usd(sum(losses, mk.ZERO) / len(losses)),
        max_loss_usd=max(losses),
        max_drop={s: min(o.max_drop[s] for o in outcomes) for s in symbols},
        max_rise={s: max(o.max_rise[s] for o in outcomes) for s in symbols},
    )


def write_report(report: ReportFile, path, fmt: str = "json") -> list[Path]:
    """Write ``report`` as one JSON file, or as a directory of CSV tables."""
    path = Path(path)
    try:
        if fmt == "json":
            if path.parent and not path.parent.exists():
                path.parent.mkdir(parents=True)
            path.write_text(report.model_dump_json(indent=2) + "\n")
            return [path]
        if fmt == "csv":
            return _write_csv(report, path)
    except OSError as exc:
        raise CometRiskError(f"{exc.filename or path}: {exc.strerror or exc}") from None
    raise ValidationError([f"unknown report format {fmt!r}"])


def _write_rows(path: Path, header, rows):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _write_csv(report: ReportFile, out_dir: Path) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    v = report.var
    written = [
        _write_rows(
            out_dir / "var.csv",
            ["fingerprint", "seed", "var95_usd", "converged", "epsilon", "epsilon_usd", "rounds", "n_samples"],
            [[report.fingerprint, report.seed, v.var95_usd, v.converged, v.epsilon, _blank(v.epsilon_usd), v.rounds, v.n_samples]],
        ),
        _write_rows(
            out_dir / "var_rounds.csv",
            ["round", "n_samples", "p95_usd", "gap_usd", "within"],
            [[c.round, c.n_samples, c.p95_usd, _blank(c.gap_usd), _blank(c.within)] for c in v.checks],
        ),
    ]
    lar = report.lar
    names = list(next(iter(lar.percentiles.values())))
    written.append(
        _write_rows(
            out_dir / "lar_percentiles.csv",
            ["column"] + names,
            [[c] + [lar.percentiles[c][n] for n in names] for c in lar.columns],
        )
    )
    for c in lar.columns:
        h = lar.histograms[c]
        rows = [[i, repr(h.edges[i]), repr(h.edges[i + 1]), n] for i, n in enumerate(h.counts)]
        written.append(_write_rows(out_dir / f"lar_histogram_{c}.csv", ["bin", "lower_usd", "upper_usd", "count"], rows))
    return written


def _blank(v):
    return "" if v is None else v


def write_json(data, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(data, indent=2) + "\n")
    return path
