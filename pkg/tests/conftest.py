from decimal import Decimal as D

import numpy as np
import pytest

from cometrisk import agents, demo, engine, files
from cometrisk import market as mk
from cometrisk.price_model import CorrelationMatrix, GarchSpec
from cometrisk.slippage import SlippageModel

ETH = mk.AssetId("ETH", 18)
WBTC = mk.AssetId("WBTC", 8)
USDC = mk.AssetId("USDC", 6)
ONE_ETH = 10**18
FLAT_IR = mk.IRParams(0, 0, 0, D("0.5"))


def eth_params(lcf="0.88", lf="0.95", sfp="0.6", target=1_000_000, bcf="0.83", cap=1000):
    return mk.MarketParams(
        USDC, D(sfp), D(target), FLAT_IR, FLAT_IR, [mk.CollateralConfig(ETH, D(bcf), D(lcf), D(lf), D(cap))]
    )


def eth_state(debt=2400, reserve=10_000, **kw):
    state = mk.MarketState(eth_params(**kw), total_base_supplied=D(100_000), total_base_borrowed=D(debt), base_reserve=D(reserve))
    mk.add_account(state, mk.Account("a", {"ETH": ONE_ETH}, D(debt)))
    return state


def golden_scenario(horizon=2, **kw):
    """One ETH borrower; the liquidator declines a full lot at $2700 but takes it at $2538."""
    return engine.Scenario(
        eth_state(**kw),
        [GarchSpec(0, (), (), 1e-8, (0.0,), (0.0,))],
        CorrelationMatrix.identity(["ETH"]),
        [3000.0],
        {"ETH": SlippageModel("ETH", "linear", 0.1, 0.001)},
        agents.LiquidatorConfig(min_lot_usd=D(2000)),
        horizon_steps=horizon,
    )


GOLDEN_PRICES = np.array([[3000.0], [2700.0], [2538.0]])


@pytest.fixture(scope="session")
def demo_inputs():
    cfg = files.load_config(demo.bundled_path("demo_config.json"))
    snap = files.load_snapshot(demo.bundled_path("demo_snapshot.json"), cfg)
    return cfg, snap


@pytest.fixture(scope="session")
def demo_scenario(demo_inputs):
    cfg, snap = demo_inputs
    return files.build_scenario(cfg, snap)


@pytest.fixture(scope="session")
def busy_scenario(demo_inputs):
    """Demo market with reserves just over target, so absorbs reopen sales."""
    cfg, snap = demo_inputs
    return files.build_scenario(cfg, snap.model_copy(update={"base_reserve": D("5010000")}))


# one line per acceptance check, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
