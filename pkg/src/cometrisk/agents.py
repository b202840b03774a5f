"""Actor policies: borrower admission, the liquidator bot, supplier liquidity.

Policies are functions of (market state, prices, config). The only
mutation happens through ``market.buy_collateral`` on the caller's state.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_FLOOR, Decimal, localcontext
from typing import Iterable, Literal, Mapping

from . import market as mk
from .market import FIXED, ZERO, Account, MarketParams, MarketState, TradeRecord, dec, usd
from .slippage import SlippageModel, eval_slippage

HUNDRED = Decimal(100)


@dataclass(frozen=True)
class BorrowerFilter:
    min_borrow_usd: Decimal = Decimal(1000)
    max_health_factor: Decimal = Decimal(2)

    def __post_init__(self):
        object.__setattr__(self, "min_borrow_usd", dec(self.min_borrow_usd))
        object.__setattr__(self, "max_health_factor", dec(self.max_health_factor))
        if self.min_borrow_usd < 0 or self.max_health_factor <= 0:
            raise ValueError("min_borrow_usd must be >= 0 and max_health_factor > 0")


@dataclass(frozen=True)
class LiquidatorConfig:
    trading_fee: Decimal = Decimal("0.003")
    max_lot_usd: Decimal = Decimal(1_000_000)
    min_lot_usd: Decimal = Decimal(100)
    # Count the trading fee against the LP*SFP discount (False: slippage only).
    include_fee: bool = True
    slippage_units: Literal["percent", "fraction"] = "percent"

    def __post_init__(self):
        for name in ("trading_fee", "max_lot_usd", "min_lot_usd"):
            object.__setattr__(self, name, dec(getattr(self, name)))
        if not ZERO <= self.trading_fee < 1:
            raise ValueError("trading_fee must lie in [0, 1)")
        if self.max_lot_usd <= 0 or self.min_lot_usd < 0:
            raise ValueError("lot bounds must be positive")
        if self.slippage_units not in ("percent", "fraction"):
            raise ValueError("slippage_units must be 'percent' or 'fraction'")


@dataclass(frozen=True)
class ProfitReport:
    asset: str
    qty: int
    sale_proceeds: Decimal  # S_C: market value of the lot
    purchase_cost: Decimal  # P_C: storefront price paid to the protocol
    fee_paid: Decimal
    slippage_pct: Decimal
    slippage_cost: Decimal
    profit: Decimal
    trade: TradeRecord


def init_borrowers(
    accounts: Iterable[Account], prices, params: MarketParams, flt: BorrowerFilter = BorrowerFilter()
) -> list[Account]:
    """Admit significant, at-risk borrowers: debt >= min and HF <= max (both inclusive)."""
    admitted = []
    for acc in accounts:
        if acc.base_borrowed < flt.min_borrow_usd or acc.base_borrowed <= 0:
            continue
        if mk.health_factor(acc, prices, params) <= flt.max_health_factor:
            admitted.append(acc)
    return admitted


def init_supplier_liquidity(rows: Iterable) -> dict[str, Decimal]:
    """Merge supplier rows ``(id, amount)`` into a per-supplier ledger, summing duplicates."""
    ledger: dict[str, Decimal] = {}
    for row in rows:
        sid, amount = (row.id, row.amount) if hasattr(row, "id") else row
        ledger[sid] = ledger.get(sid, ZERO) + usd(amount)
    return ledger


def slippage_percent(model: SlippageModel, sale_usd: Decimal, cfg: LiquidatorConfig) -> Decimal:
    y = dec(eval_slippage(model, float(sale_usd)))
    return y * HUNDRED if cfg.slippage_units == "fraction" else y


def _lot_value(state: MarketState, symbol: str, qty: int, prices) -> Decimal:
    cfg = state.params.collateral(symbol)
    with localcontext(FIXED):
        return usd(cfg.asset.tokens(qty) * dec(prices[symbol]))


def should_buy(
    state: MarketState,
    symbol: str,
    qty: int,
    prices,
    model: SlippageModel,
    cfg: LiquidatorConfig,
) -> bool:
    if qty <= 0 or qty > state.for_sale.get(symbol, 0):
        return False
    if not mk.sales_open(state):
        return False
    coll = state.params.collateral(symbol)
    with localcontext(FIXED):
        cost = slippage_percent(model, _lot_value(state, symbol, qty, prices), cfg)
        if cfg.include_fee:
            cost += HUNDRED * cfg.trading_fee
        return cost <= HUNDRED * coll.lp * state.params.sfp


def size_lot(
    state: MarketState, symbol: str, prices, model: SlippageModel, cfg: LiquidatorConfig
) -> int:
    """Largest acceptable lot: full inventory capped at ``max_lot_usd``, halved
    until the buy condition holds. Returns 0 once halving would drop below
    ``min_lot_usd``."""
    inventory = state.for_sale.get(symbol, 0)
    if inventory <= 0:
        return 0
    qty = inventory
    full = _lot_value(state, symbol, inventory, prices)
    if full > cfg.max_lot_usd:
        with localcontext(FIXED):
            qty = int((Decimal(inventory) * cfg.max_lot_usd / full).to_integral_value(rounding=ROUND_FLOOR))
    while qty > 0:
        if should_buy(state, symbol, qty, prices, model, cfg):
            return qty
        half = qty // 2
        if half == 0 or _lot_value(state, symbol, half, prices) < cfg.min_lot_usd:
            return 0
        qty = half
    return 0


def execute_liquidation(
    state: MarketState,
    symbol: str,
    prices,
    model: SlippageModel,
    cfg: LiquidatorConfig,
    step: int | None = None,
) -> ProfitReport | None:
    """Flash-swap purchase of absorbed collateral and resale on a DEX.

    The flash loan costs nothing and always fills; gas is not modelled.
    Returns ``None`` (leaving the state untouched) when no lot qualifies.
    """
    if not mk.sales_open(state):
        return None
    qty = size_lot(state, symbol, prices, model, cfg)
    if qty == 0:
        return None
    with localcontext(FIXED):
        sale = _lot_value(state, symbol, qty, prices)
        slip_pct = slippage_percent(model, sale, cfg)
        slip_cost = usd(slip_pct / HUNDRED * sale)
        fee = usd(cfg.trading_fee * sale)
        trade = mk.buy_collateral(state, symbol, qty, prices, step)
        profit = sale - trade.proceeds_usd - fee - slip_cost
    return ProfitReport(
        asset=symbol,
        qty=qty,
        sale_proceeds=sale,
        purchase_cost=trade.proceeds_usd,
        fee_paid=fee,
        slippage_pct=slip_pct,
        slippage_cost=slip_cost,
        profit=profit,
        trade=trade,
    )


def run_liquidator(
    state: MarketState,
    prices,
    models: Mapping[str, SlippageModel],
    cfg: LiquidatorConfig,
    step: int | None = None,
) -> list[ProfitReport]:
    """One liquidator pass: at most one lot per asset, in configured asset order."""
    reports = []
    for symbol in state.params.symbols:
        if state.for_sale.get(symbol, 0) > 0 and mk.sales_open(state):
            rep = execute_liquidation(state, symbol, prices, models[symbol], cfg, step)
            if rep is not None:
                reports.append(rep)
    return reports
