from decimal import Decimal as D

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cometrisk import agents
from cometrisk import market as mk
from cometrisk.slippage import SlippageModel

from conftest import ONE_ETH, eth_params, eth_state


def flat_slippage(pct):
    return SlippageModel("ETH", "linear", pct, 0.0)


def absorbed(**kw):
    s = eth_state(lcf="0.88", **kw)
    mk.absorb(s, "a", {"ETH": 2700}, 1)
    return s


def test_init_borrowers_filters():
    params = eth_params(lcf="0.8", bcf="0.7")
    prices = {"ETH": 5000}
    accounts = [
        mk.Account("small", {"ETH": ONE_ETH}, D(999)),
        mk.Account("edge", {"ETH": 2 * ONE_ETH}, D(4000)),  # HF exactly 2
        mk.Account("safe", {"ETH": 2 * ONE_ETH}, D("3980.09")),  # HF 2.01
        mk.Account("risky", {"ETH": ONE_ETH}, D(3500)),
        mk.Account("supplier", {}, 0, D(10**6)),
    ]
    admitted = [a.id for a in agents.init_borrowers(accounts, prices, params)]
    assert admitted == ["edge", "risky"]


def test_supplier_liquidity_merges_duplicates():
    ledger = agents.init_supplier_liquidity([("s1", 100), ("s2", D("50.5")), ("s1", 25)])
    assert ledger == {"s1": D(125), "s2": D("50.5")}
    assert agents.init_supplier_liquidity([]) == {}


def test_should_buy_threshold():
    s = absorbed()
    cfg = agents.LiquidatorConfig()
    prices = {"ETH": 2700}
    assert agents.should_buy(s, "ETH", ONE_ETH, prices, flat_slippage(2.4), cfg)  # 2.7 <= 3
    assert agents.should_buy(s, "ETH", ONE_ETH, prices, flat_slippage(2.7), cfg)  # 3.0 <= 3
    assert not agents.should_buy(s, "ETH", ONE_ETH, prices, flat_slippage(2.8), cfg)  # 3.1 > 3
    no_fee = agents.LiquidatorConfig(include_fee=False)
    assert agents.should_buy(s, "ETH", ONE_ETH, prices, flat_slippage(2.8), no_fee)


def test_should_buy_zero_penalty_and_gate():
    s = mk.MarketState(eth_params(lf="1", lcf="0.88"), total_base_supplied=D(10**5), total_base_borrowed=D(2400), base_reserve=D(10**4))
    mk.add_account(s, mk.Account("a", {"ETH": ONE_ETH}, D(2400)))
    mk.absorb(s, "a", {"ETH": 2700}, 1)
    assert not agents.should_buy(s, "ETH", ONE_ETH, {"ETH": 2700}, flat_slippage(0.01), agents.LiquidatorConfig())
    closed = absorbed(reserve=10_000, target=1000)
    assert not agents.should_buy(closed, "ETH", ONE_ETH, {"ETH": 2700}, flat_slippage(0), agents.LiquidatorConfig())


def test_fraction_units_are_scaled():
    s = absorbed()
    frac = agents.LiquidatorConfig(slippage_units="fraction")
    assert agents.should_buy(s, "ETH", ONE_ETH, {"ETH": 2700}, flat_slippage(0.024), frac)
    assert not agents.should_buy(s, "ETH", ONE_ETH, {"ETH": 2700}, flat_slippage(0.028), frac)


def test_profit_example():
    s = absorbed()
    rep = agents.execute_liquidation(s, "ETH", {"ETH": 2700}, flat_slippage(1.0), agents.LiquidatorConfig())
    assert rep.sale_proceeds == D(2700) and rep.purchase_cost == D(2619)
    assert rep.fee_paid == D("8.10") and rep.slippage_cost == D(27)
    assert rep.profit == D("45.90")
    assert s.for_sale["ETH"] == 0


def test_zero_cost_profit_identity():
    s = mk.MarketState(eth_params(sfp="0", lcf="0.88"), total_base_supplied=D(10**5), total_base_borrowed=D(2400), base_reserve=D(10**4))
    mk.add_account(s, mk.Account("a", {"ETH": ONE_ETH}, D(2400)))
    mk.absorb(s, "a", {"ETH": 2700}, 1)
    rep = agents.execute_liquidation(
        s, "ETH", {"ETH": 2700}, flat_slippage(0), agents.LiquidatorConfig(trading_fee=0, include_fee=False)
    )
    assert rep.profit == 0


def test_declined_trade_changes_nothing():
    s = absorbed()
    before = (s.base_reserve, dict(s.for_sale), list(s.loss_ledger))
    assert agents.execute_liquidation(s, "ETH", {"ETH": 2700}, flat_slippage(5), agents.LiquidatorConfig()) is None
    assert (s.base_reserve, dict(s.for_sale), list(s.loss_ledger)) == before


def test_lot_sizing_caps_and_halves():
    s = absorbed()
    cfg = agents.LiquidatorConfig(max_lot_usd=D(1000), min_lot_usd=D(100))
    qty = agents.size_lot(s, "ETH", {"ETH": 2700}, flat_slippage(1), cfg)
    assert 0 < qty <= ONE_ETH and mk.usd(D(qty) / ONE_ETH * 2700) <= 1000
    # slippage grows with size: the full lot fails, a half passes
    model = SlippageModel("ETH", "linear", 0.0, 0.00105)  # 2.835% at $2700, 1.4175% at $1350
    qty = agents.size_lot(s, "ETH", {"ETH": 2700}, model, agents.LiquidatorConfig())
    assert qty == ONE_ETH // 2
    floor = agents.LiquidatorConfig(min_lot_usd=D(2000))
    assert agents.size_lot(s, "ETH", {"ETH": 2700}, model, floor) == 0


def test_run_liquidator_one_lot_per_asset():
    s = absorbed()
    cfg = agents.LiquidatorConfig(max_lot_usd=D(1000))
    reps = agents.run_liquidator(s, {"ETH": 2700}, {"ETH": flat_slippage(1)}, cfg, step=2)
    assert len(reps) == 1 and s.for_sale["ETH"] > 0


@settings(max_examples=50, deadline=None)
@given(
    price=st.decimals(100, 10000, places=2),
    slip=st.floats(0, 5),
    fee=st.decimals(0, "0.02", places=4),
)
def test_profit_identity_and_rationality(price, slip, fee):
    s = eth_state(lcf="0.88", debt=50)
    mk.absorb(s, "a", {"ETH": D(1)}, 1)
    cfg = agents.LiquidatorConfig(trading_fee=fee)
    rep = agents.execute_liquidation(s, "ETH", {"ETH": price}, flat_slippage(slip), cfg)
    if rep is None:
        return
    assert rep.profit == rep.sale_proceeds - rep.purchase_cost - rep.fee_paid - rep.slippage_cost
    if slip + float(100 * fee) < 3 - 1e-6:
        assert rep.profit >= 0


def test_config_validation():
    with pytest.raises(ValueError):
        agents.LiquidatorConfig(trading_fee=1)
    with pytest.raises(ValueError):
        agents.BorrowerFilter(max_health_factor=0)
