"""Order-size to slippage-percentage curves.

Two regression forms are supported: ``log_linear`` (``a + b*ln(sell)``) and
``linear`` (``a + b*sell``). The shipped defaults are fitted curves for the
Arbitrum USDC market collaterals.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Literal

import numpy as np

from .errors import DomainError, ValidationError

Form = Literal["log_linear", "linear"]


@dataclass(frozen=True)
class SlippageModel:
    asset: str
    form: Form
    intercept: float
    slope: float

    def __post_init__(self):
        if self.form not in ("log_linear", "linear"):
            raise DomainError(f"unknown slippage form {self.form!r}")
        if not (math.isfinite(self.intercept) and math.isfinite(self.slope)):
            raise DomainError("slippage coefficients must be finite")

    def __call__(self, sell_usd: float) -> float:
        return eval_slippage(self, sell_usd)


@dataclass(frozen=True)
class SlippageSample:
    sell_usd: float
    slippage_pct: float

    def __post_init__(self):
        if not self.sell_usd > 0:
            raise DomainError("sell_usd must be > 0")


DEFAULT_MODELS = {
    "WBTC": SlippageModel("WBTC", "log_linear", 0.0421, 0.0129),
    "ETH": SlippageModel("ETH", "log_linear", 0.057, 0.0023),
    "ARB": SlippageModel("ARB", "log_linear", -0.124, 0.0244),
    "GMX": SlippageModel("GMX", "linear", 0.186, 2e-4),
}
_ALIASES = {"WETH": "ETH"}


def default_model(symbol: str) -> SlippageModel:
    key = _ALIASES.get(symbol, symbol)
    try:
        m = DEFAULT_MODELS[key]
    except KeyError:
        raise DomainError(f"no default slippage curve for {symbol!r}") from None
    return SlippageModel(symbol, m.form, m.intercept, m.slope)


def eval_slippage(model: SlippageModel, sell_usd: float) -> float:
    """Predicted slippage for an order of ``sell_usd``; never negative."""
    sell = float(sell_usd)
    if not sell > 0:
        raise DomainError("sell_usd must be > 0")
    x = math.log(sell) if model.form == "log_linear" else sell
    return max(0.0, model.intercept + model.slope * x)


def fit_slippage(samples: Iterable[SlippageSample], form: Form, asset: str = "") -> SlippageModel:
    """Ordinary least squares of slippage on ``ln(sell)`` or ``sell``."""
    samples = list(samples)
    if len(samples) < 3:
        raise DomainError("need at least 3 samples")
    sell = np.array([s.sell_usd for s in samples], dtype=float)
    y = np.array([s.slippage_pct for s in samples], dtype=float)
    x = np.log(sell) if form == "log_linear" else sell
    if form not in ("log_linear", "linear"):
        raise DomainError(f"unknown slippage form {form!r}")
    xm, ym = x.mean(), y.mean()
    dx = x - xm
    sxx = float(dx @ dx)
    if sxx == 0.0:
        raise DomainError("degenerate design: all regressor values are equal")
    slope = float(dx @ (y - ym)) / sxx
    return SlippageModel(asset, form, float(ym - slope * xm), slope)


def clean_samples(samples: Iterable[SlippageSample], whale_quantile: float | None = 0.995) -> list[SlippageSample]:
    """Drop negative-slippage rows, merge exact duplicates, trim whale orders.

    Whale orders are those whose sell value exceeds the nearest-rank
    ``whale_quantile`` of the remaining sell values; pass ``None`` to keep them.
    """
    kept = []
    seen = set()
    for s in samples:
        if s.slippage_pct < 0:
            continue
        key = (s.sell_usd, s.slippage_pct)
        if key in seen:
            continue
        seen.add(key)
        kept.append(s)
    if whale_quantile is None or not kept:
        return kept
    ordered = sorted(s.sell_usd for s in kept)
    rank = math.ceil(Fraction(str(whale_quantile)) * len(ordered))
    cutoff = ordered[max(rank, 1) - 1]
    return [s for s in kept if s.sell_usd <= cutoff]


def load_samples(path) -> list[SlippageSample]:
    """Read a JSON array of ``{"sell": ..., "slippagePercent": ...}`` objects."""
    path = Path(path)
    try:
        rows = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError([f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}"]) from None
    if not isinstance(rows, list):
        raise ValidationError([f"{path}: expected a JSON array"])
    out, errors = [], []
    for i, row in enumerate(rows):
        try:
            out.append(SlippageSample(float(row["sell"]), float(row["slippagePercent"])))
        except (KeyError, TypeError, ValueError, DomainError) as exc:
            errors.append(f"{path}: row {i}: {exc!r}")
    if errors:
        raise ValidationError(errors)
    return out
