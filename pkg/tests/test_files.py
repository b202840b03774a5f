import csv
import json
from decimal import Decimal as D

import numpy as np
import pytest

from cometrisk import cli, demo, files
from cometrisk.errors import ValidationError
from cometrisk.price_model import GarchSpec, simulate_returns


def minimal_snapshot(**over):
    snap = {
        "schema_version": 1,
        "block_height": 1,
        "prices": {"WETH": 3000, "WBTC": 60000, "ARB": 0.8, "GMX": 25},
        "base_reserve": "100",
        "accounts": [{"id": "b1", "collateral": {"WETH": 10**18}, "base_borrowed": "2500"}],
        "suppliers": [{"id": "s1", "amount": "10000"}],
    }
    snap.update(over)
    return snap


def write(tmp_path, name, data):
    p = tmp_path / name
    p.write_text(json.dumps(data, indent=2))
    return p


@pytest.fixture
def cfg():
    return files.ConfigFile.model_validate(demo.demo_config())


def test_bundled_demo_matches_generator():
    for name, make in (("demo_config.json", demo.demo_config), ("demo_snapshot.json", demo.demo_snapshot)):
        assert demo.bundled_path(name).read_text() == json.dumps(make(), indent=2) + "\n"


def test_shipped_schemas_match_models():
    for name, schema in files.json_schemas().items():
        shipped = json.loads(demo.bundled_path(f"../schemas/{name}.schema.json").read_text())
        assert shipped == schema


def test_demo_snapshot_shape(demo_inputs, demo_scenario):
    _, snap = demo_inputs
    assert len(snap.accounts) >= 200
    assert len(demo_scenario.market.accounts) == 240
    # turned-away accounts still count toward pool borrows
    assert demo_scenario.market.total_base_borrowed == sum(a.base_borrowed for a in snap.accounts)


def test_minimal_snapshot_loads(tmp_path, cfg):
    snap = files.load_snapshot(write(tmp_path, "s.json", minimal_snapshot()), cfg)
    sc = files.build_scenario(cfg, snap)
    assert list(sc.market.accounts) == ["b1"]
    assert sc.market.total_base_supplied == D(10000)


def test_negative_quantity_names_account_and_asset(tmp_path):
    bad = minimal_snapshot(accounts=[{"id": "alice", "collateral": {"WETH": -5}, "base_borrowed": "1"}])
    with pytest.raises(ValidationError) as info:
        files.load_snapshot(write(tmp_path, "s.json", bad))
    (msg,) = info.value.errors
    assert "alice" in msg and "WETH" in msg and "s.json:" in msg
    line = int(msg.split(":")[1])
    assert '"WETH": -5' in (tmp_path / "s.json").read_text().splitlines()[line - 1]


def test_unknown_asset_is_cross_referenced(tmp_path, cfg):
    bad = minimal_snapshot(accounts=[{"id": "bob", "collateral": {"DOGE": 1}, "base_borrowed": "1"}])
    with pytest.raises(ValidationError) as info:
        files.load_snapshot(write(tmp_path, "s.json", bad), cfg)
    assert any("DOGE" in e and "bob" in e for e in info.value.errors)


def test_all_errors_are_reported(tmp_path, cfg):
    bad = minimal_snapshot(
        block_height=-1,
        extra_field=1,
        accounts=[
            {"id": "x", "collateral": {"WETH": -1}},
            {"id": "x", "collateral": {}, "base_borrowed": "-3"},
        ],
    )
    with pytest.raises(ValidationError) as info:
        files.load_snapshot(write(tmp_path, "s.json", bad), cfg)
    text = "\n".join(info.value.errors)
    assert len(info.value.errors) >= 4
    assert "block_height" in text and "extra_field" in text and "base_borrowed" in text


def test_missing_price_and_insolvent_pool(tmp_path, cfg):
    prices = {"WETH": 3000, "WBTC": 60000, "ARB": 0.8}
    bad = minimal_snapshot(prices=prices, suppliers=[])
    with pytest.raises(ValidationError) as info:
        files.load_snapshot(write(tmp_path, "s.json", bad), cfg)
    text = "\n".join(info.value.errors)
    assert "GMX" in text and "exceeds supplied" in text


def test_malformed_json_is_line_anchored(tmp_path):
    p = tmp_path / "s.json"
    p.write_text('{\n  "schema_version": 1,\n  "block_height": \n}')
    with pytest.raises(ValidationError) as info:
        files.load_snapshot(p)
    assert info.value.errors[0].startswith(f"{p}:4:")


def test_config_rejects_unknown_keys_and_bad_epsilon(tmp_path):
    data = demo.demo_config()
    data["market"]["colour"] = "blue"
    data["simulation"]["epsilon"] = "lots"
    with pytest.raises(ValidationError) as info:
        files.load_config(write(tmp_path, "c.json", data))
    assert len(info.value.errors) == 2


def test_config_invariants_are_revalidated(tmp_path):
    data = demo.demo_config()
    data["market"]["collaterals"][0]["bcf"] = "0.95"  # above lcf
    cfg = files.load_config(write(tmp_path, "c.json", data))
    snap = files.load_snapshot(demo.bundled_path("demo_snapshot.json"), cfg)
    with pytest.raises(ValidationError, match="bcf"):
        files.build_scenario(cfg, snap)


def test_garch_fit_instructions(tmp_path):
    rng = np.random.default_rng(4)
    lines = ["timestamp,asset,price"]
    for sym, spec in (("WETH", GarchSpec(alpha0=1e-6, alpha=(0.08,), beta=(0.9,))),):
        r = simulate_returns(spec, rng.standard_normal(3000))
        prices = 3000 * np.exp(np.cumsum(np.r_[0.0, r]))
        lines += [f"{t},{sym},{float(p)!r}" for t, p in enumerate(prices)]
    (tmp_path / "hist.csv").write_text("\n".join(lines) + "\n")
    data = demo.demo_config()
    del data["price_model"]["garch"]["WETH"]
    data["price_model"]["fit"] = {"WETH": {"prices": "hist.csv"}}
    cfg = files.load_config(write(tmp_path, "c.json", data))
    snap = files.load_snapshot(demo.bundled_path("demo_snapshot.json"), cfg)
    sc = files.build_scenario(cfg, snap, tmp_path)
    assert sc.specs[0].persistence < 1 and sc.specs[0].beta[0] > 0.5


def small_report(demo_inputs, seed=5, epsilon="inf"):
    cfg, snap = demo_inputs
    sc = files.build_scenario(cfg, snap, seed=seed)
    opts = {"seed": seed, "epsilon": epsilon, "paths_per_round": 8, "max_rounds": 3, "lar_bins": 100}
    return cli.build_report(cfg, snap, sc, opts, workers=1)


def test_report_json_round_trip(tmp_path, demo_inputs):
    rep = small_report(demo_inputs)
    p = tmp_path / "r.json"
    files.write_report(rep, p)
    assert files.load_report(p) == rep
    assert rep.var.n_samples == 24 and rep.var.converged and rep.var.epsilon_usd is None


def test_report_csv_tables(tmp_path, demo_inputs):
    rep = small_report(demo_inputs)
    written = files.write_report(rep, tmp_path / "out", "csv")
    names = sorted(p.name for p in written)
    assert "var.csv" in names and "lar_percentiles.csv" in names and "lar_histogram_total.csv" in names
    with open(tmp_path / "out" / "lar_histogram_WETH.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["bin", "lower_usd", "upper_usd", "count"] and len(rows) == 101
    with open(tmp_path / "out" / "lar_percentiles.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["column", "p50", "p90", "p95", "p99"]
    assert [r[0] for r in rows[1:]] == ["WETH", "WBTC", "ARB", "GMX", "total"]


def test_empty_liquidation_report(tmp_path, demo_inputs):
    cfg, snap = demo_inputs
    calm = snap.model_copy(update={"accounts": []})
    sc = files.build_scenario(cfg, calm)
    opts = {"seed": 1, "epsilon": "1%", "paths_per_round": 5, "max_rounds": 3, "lar_bins": 100}
    rep = cli.build_report(cfg, calm, sc, opts, workers=1)
    assert rep.var.var95_usd == 0 and rep.var.converged
    files.write_report(rep, tmp_path / "csv", "csv")
    with open(tmp_path / "csv" / "lar_histogram_total.csv") as fh:
        counts = [int(r[3]) for r in list(csv.reader(fh))[1:]]
    assert counts[0] == 15 and sum(counts[1:]) == 0


def test_fingerprint(demo_inputs):
    cfg, snap = demo_inputs
    opts = {"epsilon": "1%"}
    a = files.fingerprint(cfg, snap, 1, opts)
    assert a == files.fingerprint(cfg, snap.model_validate_json(snap.model_dump_json()), 1, opts)
    assert a != files.fingerprint(cfg, snap, 2, opts)
    other = cfg.model_copy(update={"liquidator": files.LiquidatorModel(trading_fee=D("0.004"))})
    assert a != files.fingerprint(other, snap, 1, opts)
    assert a != files.fingerprint(cfg, snap, 1, {"epsilon": "2%"})


def test_write_report_surfaces_io_errors(tmp_path, demo_inputs):
    rep = small_report(demo_inputs)
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(Exception, match="file"):
        files.write_report(rep, blocker / "r.json")
