"""Synthetic four-collateral USDC market used by the demo and the test suite.

Everything is generated from a fixed seed, so ``demo_config()`` and
``demo_snapshot()`` always return the same documents; the copies under
``data/`` are those documents written to disk.
"""

from __future__ import annotations

import json
from decimal import Decimal
from importlib import resources
from pathlib import Path

import numpy as np

SECONDS_PER_YEAR = 31_536_000
STEPS_PER_DAY = 1728

# symbol, decimals, bcf, lcf, lf, supply cap (tokens), price, daily vol
COLLATERALS = [
    ("WETH", 18, "0.83", "0.90", "0.95", 100_000, 3000.0, 0.045),
    ("WBTC", 8, "0.70", "0.77", "0.95", 5_000, 60000.0, 0.035),
    ("ARB", 18, "0.55", "0.60", "0.93", 60_000_000, 0.8, 0.065),
    ("GMX", 18, "0.40", "0.45", "0.90", 600_000, 25.0, 0.060),
]
CORRELATION = [
    [1.00, 0.80, 0.60, 0.55],
    [0.80, 1.00, 0.50, 0.45],
    [0.60, 0.50, 1.00, 0.65],
    [0.55, 0.45, 0.65, 1.00],
]
ALPHA, BETA = 0.06, 0.92
N_BORROWERS = 240
N_SUPPLIERS = 40
SEED = 7


def _per_second(yearly: str) -> str:
    return f"{Decimal(yearly) / SECONDS_PER_YEAR:.6e}"


def demo_config() -> dict:
    def ir(base, low, high, kink):
        return {
            "base": _per_second(base),
            "slope_low": _per_second(low),
            "slope_high": _per_second(high),
            "kink": kink,
        }

    garch = {}
    for sym, *_, vol in COLLATERALS:
        step_var = vol**2 / STEPS_PER_DAY
        garch[sym] = {
            "mu": 0.0,
            "ar": [],
            "ma": [],
            "alpha0": float(f"{step_var * (1 - ALPHA - BETA):.6e}"),
            "alpha": [ALPHA],
            "beta": [BETA],
        }
    return {
        "schema_version": 1,
        "snapshot": "demo_snapshot.json",
        "market": {
            "base": {"symbol": "USDC", "decimals": 6},
            "sfp": "0.6",
            "target_reserve": "5000000",
            "supply_ir": ir("0", "0.059", "2.9", "0.9"),
            "borrow_ir": ir("0.015", "0.07", "3.4", "0.9"),
            "collaterals": [
                {"symbol": s, "decimals": d, "bcf": b, "lcf": l, "lf": f, "supply_cap": str(cap)}
                for s, d, b, l, f, cap, _, _ in COLLATERALS
            ],
        },
        "price_model": {
            "garch": garch,
            "correlation": {"assets": [c[0] for c in COLLATERALS], "matrix": CORRELATION},
        },
        "slippage": {
            "units": "percent",
            "models": {
                "WETH": {"form": "log_linear", "intercept": 0.057, "slope": 0.0023},
                "WBTC": {"form": "log_linear", "intercept": 0.0421, "slope": 0.0129},
                "ARB": {"form": "log_linear", "intercept": -0.124, "slope": 0.0244},
                "GMX": {"form": "linear", "intercept": 0.186, "slope": 0.0002},
            },
        },
        "liquidator": {"trading_fee": "0.003", "max_lot_usd": "1000000", "min_lot_usd": "100", "include_fee": True},
        "borrower_filter": {"min_borrow_usd": "1000", "max_health_factor": "2"},
        "simulation": {
            "horizon_steps": STEPS_PER_DAY,
            "step_seconds": 50,
            "paths_per_round": 5000,
            "max_rounds": 10,
            "epsilon": "1%",
            "seed": 20240101,
            "lar_bins": 100,
        },
    }


def _units(tokens: float, decimals: int) -> int:
    return int(Decimal(repr(tokens)).scaleb(decimals).to_integral_value())


def _borrower(rng, idx, debt, hf):
    """Collateral sized so that liquidation-weighted value / debt == hf."""
    k = 1 if rng.random() < 0.6 else 2
    picks = sorted(rng.choice(len(COLLATERALS), size=k, replace=False, p=[0.45, 0.25, 0.18, 0.12]))
    weights = rng.dirichlet(np.ones(k)) if k > 1 else np.ones(1)
    collateral = {}
    for w, i in zip(weights, picks):
        sym, dec, _, lcf, _, _, price, _ = COLLATERALS[i]
        tokens = round(float(w) * hf * debt / (price * float(lcf)), 6)
        collateral[sym] = _units(tokens, dec)
    return {
        "id": f"0x{idx:04x}",
        "collateral": collateral,
        "base_borrowed": f"{debt:.2f}",
        "base_supplied": "0",
    }


def demo_snapshot() -> dict:
    rng = np.random.Generator(np.random.Philox(key=SEED))
    accounts = []
    for i in range(N_BORROWERS):
        debt = float(np.clip(np.exp(rng.normal(9.5, 1.4)), 1000.0, 1_500_000.0))
        hf = float(rng.uniform(1.01, 2.0))
        accounts.append(_borrower(rng, i, debt, round(hf, 4)))
    # accounts the borrower filter turns away: dust debt, or comfortably safe
    for i in range(N_BORROWERS, N_BORROWERS + 15):
        accounts.append(_borrower(rng, i, float(rng.uniform(50, 999)), round(float(rng.uniform(1.05, 1.9)), 4)))
    for i in range(N_BORROWERS + 15, N_BORROWERS + 30):
        accounts.append(_borrower(rng, i, float(rng.uniform(5e3, 5e5)), round(float(rng.uniform(2.05, 6.0)), 4)))
    accounts.sort(key=lambda a: a["id"])
    borrowed = sum(Decimal(a["base_borrowed"]) for a in accounts)
    amounts = rng.dirichlet(np.full(N_SUPPLIERS, 0.8)) * float(borrowed) / 0.78
    suppliers = [{"id": f"s{i:03d}", "amount": f"{a:.2f}"} for i, a in enumerate(amounts)]
    return {
        "schema_version": 1,
        "block_height": 175_000_000,
        "prices": {"USDC": "1", **{c[0]: repr(c[6]) for c in COLLATERALS}},
        "base_reserve": "5150000",
        "accounts": accounts,
        "suppliers": suppliers,
    }


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("cometrisk") / "data" / name))


def write_demo(out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg, snap = out_dir / "demo_config.json", out_dir / "demo_snapshot.json"
    cfg.write_text(json.dumps(demo_config(), indent=2) + "\n")
    snap.write_text(json.dumps(demo_snapshot(), indent=2) + "\n")
    return cfg, snap
