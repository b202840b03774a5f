"""Deterministic state machine for a single-base-asset lending market.

Every USD amount is a ``Decimal`` carrying 8 fractional digits, rounded
half-even inside a 38-digit context (enough for 128-bit fixed point).
Collateral is held as integer base units of each token; prices are USD per
whole token.

Operations are module-level functions. Functions that take a
``MarketState`` mutate it in place; nothing here touches global state, so a
cloned state can be driven independently on any thread or process.
"""

from __future__ import annotations

import copy
import enum
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_EVEN, Context, Decimal, localcontext
from typing import Mapping

from .errors import (
    AccountNotFoundError,
    ConfigurationError,
    DomainError,
    InsufficientInventoryError,
    NotLiquidatableError,
    SaleClosedError,
    SupplyCapExceededError,
)

FIXED = Context(prec=38, rounding=ROUND_HALF_EVEN)
USD_QUANTUM = Decimal("1e-8")
ZERO = Decimal(0)
ONE = Decimal(1)
INFINITY = Decimal("Infinity")


def dec(x) -> Decimal:
    """Convert ``x`` to Decimal; floats go through ``repr`` so 0.92 stays 0.92."""
    if isinstance(x, Decimal):
        return x
    if isinstance(x, float):
        return Decimal(repr(x))
    return Decimal(x)


def usd(x) -> Decimal:
    return dec(x).quantize(USD_QUANTUM, rounding=ROUND_HALF_EVEN, context=FIXED)


# ---------------------------------------------------------------------------
# Parameter types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AssetId:
    symbol: str
    decimals: int

    def __post_init__(self):
        if not self.symbol:
            raise ConfigurationError("asset symbol must be nonempty")
        if not 0 <= int(self.decimals) <= 18:
            raise ConfigurationError(f"{self.symbol}: decimals must lie in [0, 18]")

    def tokens(self, units: int) -> Decimal:
        """Whole-token quantity for an integer amount of base units."""
        return Decimal(units).scaleb(-self.decimals)

    def units(self, tokens) -> int:
        return int(dec(tokens).scaleb(self.decimals).to_integral_value(rounding=ROUND_HALF_EVEN))


@dataclass(frozen=True)
class CollateralConfig:
    asset: AssetId
    bcf: Decimal
    lcf: Decimal
    lf: Decimal
    supply_cap: Decimal  # whole tokens

    def __post_init__(self):
        for name in ("bcf", "lcf", "lf", "supply_cap"):
            object.__setattr__(self, name, dec(getattr(self, name)))
        sym = self.asset.symbol
        if not ZERO < self.bcf < self.lcf <= ONE:
            raise ConfigurationError(f"{sym}: need 0 < bcf < lcf <= 1")
        if not ZERO < self.lf <= ONE:
            raise ConfigurationError(f"{sym}: need 0 < lf <= 1")
        if self.supply_cap < 0:
            raise ConfigurationError(f"{sym}: supply_cap must be >= 0")

    @property
    def lp(self) -> Decimal:
        return ONE - self.lf


@dataclass(frozen=True)
class IRParams:
    """One side (supply or borrow) of the kinked rate curve; rates per second."""

    base: Decimal
    slope_low: Decimal
    slope_high: Decimal
    kink: Decimal

    def __post_init__(self):
        for name in ("base", "slope_low", "slope_high", "kink"):
            object.__setattr__(self, name, dec(getattr(self, name)))
        if min(self.base, self.slope_low, self.slope_high) < 0:
            raise ConfigurationError("interest rate parameters must be >= 0")
        if self.slope_high < self.slope_low:
            raise ConfigurationError("slope_high must be >= slope_low")
        if not ZERO < self.kink < ONE:
            raise ConfigurationError("kink must lie in (0, 1)")


@dataclass(frozen=True)
class MarketParams:
    base: AssetId
    sfp: Decimal
    target_reserve: Decimal
    supply_ir: IRParams
    borrow_ir: IRParams
    collaterals: tuple[CollateralConfig, ...]

    def __post_init__(self):
        object.__setattr__(self, "sfp", dec(self.sfp))
        object.__setattr__(self, "target_reserve", dec(self.target_reserve))
        object.__setattr__(self, "collaterals", tuple(self.collaterals))
        if not ZERO <= self.sfp <= ONE:
            raise ConfigurationError("sfp must lie in [0, 1]")
        if self.target_reserve < 0:
            raise ConfigurationError("target_reserve must be >= 0")
        index = {}
        for cfg in self.collaterals:
            sym = cfg.asset.symbol
            if sym in index:
                raise ConfigurationError(f"duplicate collateral asset {sym}")
            if sym == self.base.symbol:
                raise ConfigurationError(f"{sym} is both base and collateral")
            index[sym] = cfg
        object.__setattr__(self, "_index", index)
        object.__setattr__(self, "_symbols", tuple(index))

    def collateral(self, symbol: str) -> CollateralConfig:
        try:
            return self._index[symbol]
        except KeyError:
            raise ConfigurationError(f"unknown collateral asset {symbol!r}") from None

    @property
    def symbols(self) -> tuple[str, ...]:
        return self._symbols


# ---------------------------------------------------------------------------
# State types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Account:
    """A borrower or supplier position. Immutable; absorb swaps in a new one."""

    id: str
    collateral: Mapping[str, int] = field(default_factory=dict)
    base_borrowed: Decimal = ZERO
    base_supplied: Decimal = ZERO

    def __post_init__(self):
        object.__setattr__(self, "base_borrowed", usd(self.base_borrowed))
        object.__setattr__(self, "base_supplied", usd(self.base_supplied))
        for sym, units in self.collateral.items():
            if units < 0:
                raise DomainError(f"account {self.id}: negative {sym} collateral")
        if self.base_borrowed < 0 or self.base_supplied < 0:
            raise DomainError(f"account {self.id}: negative base balance")
        if self.base_borrowed > 0 and self.base_supplied > 0:
            raise DomainError(f"account {self.id}: both borrowing and supplying base")


class LossCause(str, enum.Enum):
    PRICE_DECAY_BEFORE_SALE = "price_decay_before_sale"
    UNSOLD_AT_HORIZON = "unsold_at_horizon"
    BAD_DEBT = "bad_debt"


@dataclass(frozen=True)
class LossRecord:
    asset: str
    loss_usd: Decimal
    cause: LossCause
    step: int | None = None


@dataclass(frozen=True)
class AbsorbEvent:
    account_id: str
    seized: Mapping[str, int]
    values_usd: Mapping[str, Decimal]
    collateral_value_usd: Decimal
    payment_usd: Decimal
    debt_usd: Decimal
    credit_usd: Decimal
    step: int


@dataclass(frozen=True)
class TradeRecord:
    asset: str
    qty: int
    price: Decimal
    proceeds_usd: Decimal
    basis_usd: Decimal
    loss_usd: Decimal
    step: int | None = None


@dataclass
class InventoryLot:
    """Absorbed collateral still held, with the cost basis it carries."""

    asset: str
    qty: int
    basis_usd: Decimal
    absorb_index: int


@dataclass
class MarketState:
    params: MarketParams
    accounts: dict[str, Account] = field(default_factory=dict)
    total_base_supplied: Decimal = ZERO
    total_base_borrowed: Decimal = ZERO
    base_reserve: Decimal = ZERO
    for_sale: dict[str, int] = field(default_factory=dict)
    loss_ledger: list[LossRecord] = field(default_factory=list)
    absorbed_book: list[AbsorbEvent] = field(default_factory=list)
    lots: dict[str, list[InventoryLot]] = field(default_factory=dict)

    def __post_init__(self):
        self.total_base_supplied = usd(self.total_base_supplied)
        self.total_base_borrowed = usd(self.total_base_borrowed)
        self.base_reserve = usd(self.base_reserve)
        for sym in self.params.symbols:
            self.for_sale.setdefault(sym, 0)
            self.lots.setdefault(sym, [])
        for sym in self.params.symbols:
            _check_cap(self, sym, 0)

    def clone(self) -> MarketState:
        # Accounts are immutable, so a shallow dict copy is a full copy.
        other = copy.copy(self)
        other.accounts = dict(self.accounts)
        other.for_sale = dict(self.for_sale)
        other.loss_ledger = list(self.loss_ledger)
        other.absorbed_book = list(self.absorbed_book)
        other.lots = {k: [replace(lot) for lot in v] for k, v in self.lots.items()}
        return other

    def account(self, account_id: str) -> Account:
        try:
            return self.accounts[account_id]
        except KeyError:
            raise AccountNotFoundError(account_id) from None


def price_vector(prices: Mapping[str, object]) -> dict[str, Decimal]:
    """Normalise a price mapping to 8-digit Decimals, rejecting nonpositive prices."""
    out = {}
    for sym, p in prices.items():
        q = usd(p)
        if q <= 0:
            raise DomainError(f"price of {sym} must be > 0")
        out[sym] = q
    return out


def _price(prices, symbol) -> Decimal:
    try:
        p = prices[symbol]
    except KeyError:
        raise ConfigurationError(f"no price for {symbol!r}") from None
    return dec(p)


def _weighted_value(account: Account, prices, params: MarketParams, factor: str) -> Decimal:
    total = ZERO
    with localcontext(FIXED):
        for sym, units in account.collateral.items():
            cfg = params.collateral(sym)
            if units:
                total += usd(cfg.asset.tokens(units) * _price(prices, sym) * getattr(cfg, factor))
    return total


# ---------------------------------------------------------------------------
# Position arithmetic
# ---------------------------------------------------------------------------


def borrowing_capacity(account: Account, prices, params: MarketParams) -> Decimal:
    return _weighted_value(account, prices, params, "bcf")


def liquidation_limit(account: Account, prices, params: MarketParams) -> Decimal:
    return _weighted_value(account, prices, params, "lcf")


def collateral_value(account: Account, prices, params: MarketParams) -> Decimal:
    """Unweighted USD value of all posted collateral."""
    total = ZERO
    with localcontext(FIXED):
        for sym, units in account.collateral.items():
            cfg = params.collateral(sym)
            if units:
                total += usd(cfg.asset.tokens(units) * _price(prices, sym))
    return total


def is_liquidatable(account: Account, prices, params: MarketParams) -> bool:
    if account.base_borrowed <= 0:
        return False
    return account.base_borrowed > liquidation_limit(account, prices, params)


def health_factor(account: Account, prices, params: MarketParams) -> Decimal:
    """Liquidation limit over debt; ``Decimal('Infinity')`` when debt is zero."""
    if account.base_borrowed <= 0:
        return INFINITY
    with localcontext(FIXED):
        return liquidation_limit(account, prices, params) / account.base_borrowed


# ---------------------------------------------------------------------------
# Interest
# ---------------------------------------------------------------------------


def utilization(state: MarketState) -> Decimal:
    if state.total_base_supplied <= 0:
        return ZERO
    with localcontext(FIXED):
        u = state.total_base_borrowed / state.total_base_supplied
    return min(max(u, ZERO), ONE)


def _rate(u: Decimal, ir: IRParams) -> Decimal:
    # caller holds the FIXED context
    if u <= ir.kink:
        return ir.base + ir.slope_low * u
    return ir.base + ir.slope_low * ir.kink + ir.slope_high * (u - ir.kink)


def _kinked_rate(u, ir: IRParams) -> Decimal:
    u = dec(u)
    if not ZERO <= u <= ONE:
        raise DomainError(f"utilization {u} outside [0, 1]")
    with localcontext(FIXED):
        return _rate(u, ir)


def supply_rate(u, ir: IRParams) -> Decimal:
    return _kinked_rate(u, ir)


def borrow_rate(u, ir: IRParams) -> Decimal:
    return _kinked_rate(u, ir)


def accrue(state: MarketState, dt_seconds: int) -> MarketState:
    """Simple (non-compounding) accrual over ``dt_seconds``.

    Borrow interest lands on total borrows, supply interest on total supply,
    and the spread between them on the reserve.
    """
    accrue_steps(state, dt_seconds, 1)
    return state


def accrue_steps(state: MarketState, dt_seconds: int, n: int, floor: Decimal | None = None) -> int:
    """Apply ``n`` successive accruals of ``dt_seconds`` each.

    With ``floor`` set, stops right after the first step that leaves the
    reserve below it. Returns the number of steps applied.
    """
    if dt_seconds < 0:
        raise DomainError("dt_seconds must be >= 0")
    if n <= 0:
        return 0
    if dt_seconds == 0:
        return 1 if floor is not None and state.base_reserve < floor else n
    bir, sir = state.params.borrow_ir, state.params.supply_ir
    borrowed, supplied, reserve = state.total_base_borrowed, state.total_base_supplied, state.base_reserve
    done = 0
    with localcontext(FIXED):
        while done < n:
            u = ZERO if supplied <= 0 else min(max(borrowed / supplied, ZERO), ONE)
            b_int = (_rate(u, bir) * dt_seconds * borrowed).quantize(USD_QUANTUM)
            s_int = (_rate(u, sir) * dt_seconds * supplied).quantize(USD_QUANTUM)
            borrowed += b_int
            supplied += s_int
            reserve += b_int - s_int
            done += 1
            if floor is not None and reserve < floor:
                break
    state.total_base_borrowed, state.total_base_supplied, state.base_reserve = borrowed, supplied, reserve
    return done


# ---------------------------------------------------------------------------
# Collateral supply
# ---------------------------------------------------------------------------


def posted_collateral(state: MarketState, symbol: str) -> int:
    return sum(a.collateral.get(symbol, 0) for a in state.accounts.values())


def _check_cap(state: MarketState, symbol: str, extra_units: int):
    cfg = state.params.collateral(symbol)
    posted = posted_collateral(state, symbol) + extra_units
    if cfg.asset.tokens(posted) > cfg.supply_cap:
        raise SupplyCapExceededError(
            f"{symbol}: posted {cfg.asset.tokens(posted)} exceeds supply cap {cfg.supply_cap}"
        )


def add_account(state: MarketState, account: Account) -> None:
    if account.id in state.accounts:
        raise DomainError(f"duplicate account {account.id}")
    for sym, units in account.collateral.items():
        _check_cap(state, sym, units)
    state.accounts[account.id] = account


def supply_collateral(state: MarketState, account_id: str, symbol: str, units: int) -> Account:
    if units < 0:
        raise DomainError("units must be >= 0")
    acc = state.account(account_id)
    _check_cap(state, symbol, units)
    coll = dict(acc.collateral)
    coll[symbol] = coll.get(symbol, 0) + units
    acc = replace(acc, collateral=coll)
    state.accounts[account_id] = acc
    return acc


# ---------------------------------------------------------------------------
# Liquidation
# ---------------------------------------------------------------------------


def absorb(state: MarketState, account_id: str, prices, step: int) -> AbsorbEvent:
    """Seize all collateral of an underwater account and settle its debt.

    The reserve funds the debt plus any credit owed back to the borrower, so
    it drops by ``max(debt, payment)`` and may go negative. That same amount
    becomes the cost basis of the inventory lots, split by per-asset payment.
    """
    acc = state.account(account_id)
    params = state.params
    if not is_liquidatable(acc, prices, params):
        raise NotLiquidatableError(f"account {account_id} is not liquidatable")

    seized = {s: u for s, u in acc.collateral.items() if u > 0}
    with localcontext(FIXED):
        values, payments = {}, {}
        for sym, units in seized.items():
            cfg = params.collateral(sym)
            values[sym] = usd(cfg.asset.tokens(units) * _price(prices, sym))
            payments[sym] = usd(values[sym] * cfg.lf)
        value = sum(values.values(), ZERO)
        payment = sum(payments.values(), ZERO)
        debt = acc.base_borrowed
        basis = max(debt, payment)
        credit = max(ZERO, payment - debt)

        state.total_base_borrowed = max(ZERO, state.total_base_borrowed - debt)
        state.total_base_supplied += credit
        state.base_reserve -= basis
        state.accounts[account_id] = replace(
            acc, collateral={}, base_borrowed=ZERO, base_supplied=acc.base_supplied + credit
        )

        index = len(state.absorbed_book)
        if payment > 0:
            allocated = ZERO
            syms = list(seized)
            for i, sym in enumerate(syms):
                if i == len(syms) - 1:
                    share = basis - allocated
                else:
                    share = usd(basis * payments[sym] / payment)
                allocated += share
                state.lots[sym].append(InventoryLot(sym, seized[sym], share, index))
        else:
            for sym, units in seized.items():
                state.lots[sym].append(InventoryLot(sym, units, ZERO, index))
            if debt > 0:
                state.loss_ledger.append(
                    LossRecord(params.base.symbol, debt, LossCause.BAD_DEBT, step)
                )
        for sym, units in seized.items():
            state.for_sale[sym] = state.for_sale.get(sym, 0) + units

    event = AbsorbEvent(
        account_id=account_id,
        seized=seized,
        values_usd=values,
        collateral_value_usd=value,
        payment_usd=payment,
        debt_usd=debt,
        credit_usd=credit,
        step=step,
    )
    state.absorbed_book.append(event)
    return event


def _discounted(cfg: CollateralConfig, units: int, price: Decimal, sfp: Decimal) -> Decimal:
    with localcontext(FIXED):
        return usd(cfg.asset.tokens(units) * price * (ONE - cfg.lp * sfp))


def quote_collateral(state: MarketState, symbol: str, qty: int, prices) -> Decimal:
    """Storefront ask for ``qty`` base units of absorbed collateral."""
    cfg = state.params.collateral(symbol)
    if qty < 0:
        raise DomainError("qty must be >= 0")
    if qty > state.for_sale.get(symbol, 0):
        raise InsufficientInventoryError(
            f"{symbol}: requested {qty} units, {state.for_sale.get(symbol, 0)} for sale"
        )
    return _discounted(cfg, qty, _price(prices, symbol), state.params.sfp)


def sales_open(state: MarketState) -> bool:
    return state.base_reserve < state.params.target_reserve


def buy_collateral(state: MarketState, symbol: str, qty: int, prices, step: int | None = None) -> TradeRecord:
    if not sales_open(state):
        raise SaleClosedError(
            f"reserve {state.base_reserve} is at or above target {state.params.target_reserve}"
        )
    if qty <= 0:
        raise DomainError("qty must be > 0")
    proceeds = quote_collateral(state, symbol, qty, prices)
    state.base_reserve += proceeds
    state.for_sale[symbol] -= qty

    lots = state.lots[symbol]
    remaining = qty
    basis_total = ZERO
    loss_total = ZERO
    allocated = ZERO
    with localcontext(FIXED):
        while remaining > 0:
            if lots:
                lot = lots[0]
                take = min(lot.qty, remaining)
                part_basis = lot.basis_usd if take == lot.qty else usd(lot.basis_usd * take / lot.qty)
            else:
                # Inventory that never came through absorb carries no basis.
                lot, take, part_basis = None, remaining, ZERO
            remaining -= take
            part_proceeds = proceeds - allocated if remaining == 0 else usd(proceeds * take / qty)
            allocated += part_proceeds
            loss = max(ZERO, part_basis - part_proceeds)
            state.loss_ledger.append(
                LossRecord(symbol, loss, LossCause.PRICE_DECAY_BEFORE_SALE, step)
            )
            basis_total += part_basis
            loss_total += loss
            if lot is not None:
                lot.qty -= take
                lot.basis_usd -= part_basis
                if lot.qty == 0:
                    lots.pop(0)
    return TradeRecord(
        asset=symbol,
        qty=qty,
        price=_price(prices, symbol),
        proceeds_usd=proceeds,
        basis_usd=basis_total,
        loss_usd=loss_total,
        step=step,
    )


def settle_horizon(state: MarketState, final_prices, step: int | None = None) -> Decimal:
    """Mark unsold lots at the final storefront price and return total loss."""
    params = state.params
    for symbol, lots in state.lots.items():
        cfg = params.collateral(symbol)
        for lot in lots:
            mark = _discounted(cfg, lot.qty, _price(final_prices, symbol), params.sfp)
            loss = max(ZERO, lot.basis_usd - mark)
            state.loss_ledger.append(LossRecord(symbol, loss, LossCause.UNSOLD_AT_HORIZON, step))
        lots.clear()
    return total_loss(state)


def total_loss(state: MarketState) -> Decimal:
    return sum((r.loss_usd for r in state.loss_ledger), ZERO)
