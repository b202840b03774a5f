"""Acceptance checks. Each test prints exactly one PASS/FAIL line."""

import json
import math
import time
from decimal import Decimal as D
from fractions import Fraction

import numpy as np
import pytest
from scipy.stats import norm

from cometrisk import cli, demo, engine, files
from cometrisk import market as mk
from cometrisk.price_model import CorrelationMatrix, GarchSpec, fit_garch, simulate_paths, simulate_returns
from cometrisk.slippage import SlippageSample, default_model, eval_slippage, fit_slippage

from conftest import ACCEPTANCE_LINES, GOLDEN_PRICES, ONE_ETH, eth_state, golden_scenario


def verdict(name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def nearest_rank(values, q):
    x = np.sort(np.asarray(values, dtype=float))
    return x[math.ceil(Fraction(str(q)) * len(x)) - 1]


def test_golden_liquidation():
    t0 = time.perf_counter()
    s = eth_state(debt=2400, reserve=10_000, lcf="0.88", lf="0.95", sfp="0.6")
    ev = mk.absorb(s, "a", {"ETH": 2700}, step=1)  # -10%
    quote = mk.quote_collateral(s, "ETH", ONE_ETH, {"ETH": 2700})
    trade = mk.buy_collateral(s, "ETH", ONE_ETH, {"ETH": 2538}, 2)  # a further -6%
    path = engine.run_path(golden_scenario(), 0, GOLDEN_PRICES)
    elapsed = time.perf_counter() - t0
    got = (ev.payment_usd, quote, trade.proceeds_usd, trade.loss_usd, path.protocol_loss_usd)
    want = (D("2565.00"), D("2619.00"), D("2461.86"), D("103.14"), D("103.14"))
    ok = all(abs(g - w) <= D("0.01") for g, w in zip(got, want)) and elapsed < 1
    verdict(
        "golden liquidation",
        ok,
        "payment {} quote {} post-drop {} loss {} (full path {}); ".format(*(g.quantize(D("0.01")) for g in got))
        + 
        f"tol $0.01; {elapsed * 1000:.0f} ms < 1 s",
    )


def test_borrowing_capacity():
    acc = mk.Account("a", {"ETH": 3 * ONE_ETH})
    cap = mk.borrowing_capacity(acc, {"ETH": 3000}, eth_state(bcf="0.75").params)
    verdict("borrowing capacity", cap == D("6750.00"), f"3 ETH @ $3000, bcf 0.75 -> ${cap:.2f} (exact $6750.00)")


def test_rate_curves():
    t0 = time.perf_counter()
    params = files.market_params(files.ConfigFile.model_validate(demo.demo_config()).market)
    worst_gap, monotone = D(0), True
    grid = [D(i) / 10_000 for i in range(10_001)]
    for fn, ir in ((mk.supply_rate, params.supply_ir), (mk.borrow_rate, params.borrow_ir)):
        left = ir.base + ir.slope_low * ir.kink  # lower branch extended to the kink
        for u in (ir.kink, ir.kink - D("1e-20"), ir.kink + D("1e-20")):
            worst_gap = max(worst_gap, abs(fn(u, ir) - left))
        rates = [fn(u, ir) for u in grid]
        monotone &= all(b >= a for a, b in zip(rates, rates[1:]))
    elapsed = time.perf_counter() - t0
    ok = worst_gap <= D("1e-12") and monotone and elapsed < 1
    verdict(
        "rate curves",
        ok,
        f"kink gap {worst_gap:.1e} <= 1e-12; monotone over 10,001 points: {monotone}; {elapsed:.2f} s < 1 s",
    )


def test_garch_statistics():
    t0 = time.perf_counter()
    true = GarchSpec(alpha0=1e-6, alpha=(0.1,), beta=(0.85,))
    rng = np.random.default_rng(2024)

    fit = fit_garch(simulate_returns(true, rng.standard_normal(50_000)))
    errs = (abs(fit.alpha0 - true.alpha0), abs(fit.alpha[0] - 0.1), abs(fit.beta[0] - 0.85))
    ok_a = max(errs) <= 0.05

    long = simulate_returns(true, rng.standard_normal(1_000_000))
    rel = abs(long.var() / (true.alpha0 / (1 - 0.1 - 0.85)) - 1)
    ok_b = rel <= 0.05

    corr = CorrelationMatrix(("A", "B"), np.array([[1.0, 0.9], [0.9, 1.0]]))
    paths = simulate_paths([true, true], corr, [100.0, 100.0], 100_000, seed=9, keep_details=True)
    z = paths.innovations[0]
    rho = float(np.corrcoef(z[:, 0], z[:, 1])[0, 1])
    ok_c = 0.85 <= rho <= 0.95

    elapsed = time.perf_counter() - t0
    verdict(
        "GARCH statistics",
        ok_a and ok_b and ok_c and elapsed < 60,
        f"(a) fit alpha {fit.alpha[0]:.4f} beta {fit.beta[0]:.4f} max err {max(errs):.4f} <= 0.05; "
        f"(b) 1e6-step variance off by {rel:.2%} <= 5%; (c) innovation rho {rho:.4f} in [0.85, 0.95]; "
        f"{elapsed:.1f} s < 60 s",
    )


def test_slippage_defaults():
    # the four published curves, written out by hand
    curves = {
        "WETH": lambda s: 0.057 + 0.0023 * math.log(s),
        "WBTC": lambda s: 0.0421 + 0.0129 * math.log(s),
        "ARB": lambda s: -0.124 + 0.0244 * math.log(s),
        "GMX": lambda s: 0.186 + 2e-4 * s,
    }
    probes = [1.0, 10.0, 1e3, 5e4, 1e6]
    worst_eval = max(
        abs(eval_slippage(default_model(sym), s) - max(0.0, f(s))) for sym, f in curves.items() for s in probes
    )
    worst_fit = 0.0
    for sym, f in curves.items():
        m = default_model(sym)
        sells = [1e4, 3e4, 1e5, 3e5, 1e6]  # every curve positive here, so no clamping
        refit = fit_slippage([SlippageSample(s, f(s)) for s in sells], m.form, sym)
        worst_fit = max(worst_fit, abs(refit.intercept - m.intercept), abs(refit.slope - m.slope))
    ok = worst_eval <= 1e-9 and worst_fit <= 1e-9
    verdict(
        "slippage defaults",
        ok,
        f"4 curves x 5 probes max error {worst_eval:.1e} <= 1e-9; noiseless refit max error {worst_fit:.1e} <= 1e-9",
    )


def test_var_lognormal_oracle(monkeypatch):
    t0 = time.perf_counter()
    mu, sigma, n = math.log(1000.0), 0.25, 5000
    exact = math.exp(mu + norm.ppf(0.95) * sigma)

    def losses(k):
        rng = np.random.Generator(np.random.Philox(key=k))
        return [D(f"{x:.2f}") for x in rng.lognormal(mu, sigma, n)]

    def fake_round(sc, k, n, workers=None, runner=None):
        return [
            engine.PathOutcome(k * n + i, loss, {}, D(0), 0, {}, {}, {}) for i, loss in enumerate(losses(k))
        ]

    class NoRunner:
        def __init__(self, *a, **kw):
            pass

        def __enter__(self):
            return self

        def __exit__(self, *exc):
            pass

    monkeypatch.setattr(engine, "run_round", fake_round)
    monkeypatch.setattr(engine, "Runner", NoRunner)

    report, outcomes = engine.estimate_var(None, "inf", n, max_rounds=3)
    rel = abs(float(report.var95_usd) / exact - 1)
    ok_q = report.n_samples == 15_000 and len(outcomes) == 15_000 and rel <= 0.02

    r0, r1 = losses(0), losses(1)
    gap = abs(nearest_rank(r0 + r1, 0.95) - nearest_rank(r0, 0.95))
    above, _ = engine.estimate_var(None, f"{gap * 1.01:.2f}", n, max_rounds=3)
    below, _ = engine.estimate_var(None, f"{gap * 0.99:.2f}", n, max_rounds=3)
    ok_gap = (
        float(above.checks[1].gap_usd) == pytest.approx(gap, abs=1e-9)
        and above.checks[1].within is True
        and below.checks[1].within is False
    )
    elapsed = time.perf_counter() - t0
    verdict(
        "VaR lognormal oracle",
        ok_q and ok_gap and elapsed < 30,
        f"15,000-sample p95 {report.var95_usd} vs exact {exact:.2f} ({rel:.2%} <= 2%); "
        f"5000->10000 gap {gap:.2f}: within at 1.01x, outside at 0.99x: {ok_gap}; {elapsed:.1f} s < 30 s",
    )


@pytest.mark.slow
def test_demo_determinism_across_workers(tmp_path, monkeypatch):
    monkeypatch.delenv("RISKSIM_THREADS", raising=False)
    cfg = demo.bundled_path("demo_config.json")
    snap = json.loads(demo.bundled_path("demo_snapshot.json").read_text())
    t0 = time.perf_counter()
    blobs, timings = {}, {}
    for w in (1, 4, 8):
        out = tmp_path / f"w{w}"
        start = time.perf_counter()
        code = cli.main(
            ["simulate", "--config", str(cfg), "--epsilon", "inf", "--paths-per-round", "5000",
             "--workers", str(w), "--out", str(out / "report.json")]
        )
        assert code == 0
        files.write_report(files.load_report(out / "report.json"), out / "csv", "csv")
        timings[w] = time.perf_counter() - start
        blobs[w] = {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}
    elapsed = time.perf_counter() - t0
    rep = files.load_report(tmp_path / "w1" / "report.json")
    identical = blobs[1] == blobs[4] == blobs[8]
    ok = identical and rep.var.n_samples == 15_000 and len(snap["accounts"]) >= 200 and elapsed < 600
    verdict(
        "demo determinism",
        ok,
        f"{rep.var.n_samples} paths x {rep.diagnostics.horizon_steps} steps, 4 assets, "
        f"{len(snap['accounts'])} accounts; {len(blobs[1])} report files byte-identical at 1/4/8 workers: "
        f"{identical}; VaR95 ${rep.var.var95_usd:.2f}; "
        + ", ".join(f"{w}w {t:.0f} s" for w, t in timings.items()),
    )


@pytest.mark.slow
def test_lar_seed_consistency_and_price_envelope(demo_scenario):
    """Per-asset LaR p95 agrees across three seeds; daily price extremes stay within +/-45%."""
    import dataclasses

    n = 15_000
    per_seed = []
    for i in range(3):
        sc = dataclasses.replace(demo_scenario, master_seed=demo_scenario.master_seed + i)
        with engine.Runner(sc, 1) as runner:
            per_seed.append(runner.run(range(n)))
    cols = list(demo_scenario.market.params.symbols)
    worst, details = 0.0, []
    for sym in cols:
        samples = [[float(o.liquidated_usd[sym]) for o in outs] for outs in per_seed]
        p95 = [nearest_rank(s, 0.95) for s in samples]
        se = [engine.bootstrap_se(s, 0.95, seed=7) for s in samples]
        for a in range(3):
            for b in range(a + 1, 3):
                bound = 3 * math.hypot(se[a], se[b])
                diff = abs(p95[a] - p95[b])
                ratio = diff / bound if bound > 0 else (0.0 if diff == 0 else math.inf)
                worst = max(worst, ratio)
        details.append(f"{sym} " + "/".join(f"{p:.0f}" for p in p95))
    drop = min(min(o.max_drop.values()) for outs in per_seed for o in outs)
    rise = max(max(o.max_rise.values()) for outs in per_seed for o in outs)
    ok = worst < 1 and drop >= -0.45 and rise <= 0.45
    verdict(
        "LaR seed consistency",
        ok,
        f"p95 per seed {'; '.join(details)}; worst pairwise |diff| / (3 x combined bootstrap SE) = {worst:.2f} < 1; "
        f"max drop {drop:.1%} and rise {rise:.1%} within +/-45% over {3 * n} paths",
    )
