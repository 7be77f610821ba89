"""Post-training evaluation, heatmap grids, and revenue tables.

Evaluation draws a fresh profile set from the ``evaluation`` stream,
reports revenue and unfairness on the full set, and runs the expensive
misreport search (1000 ascent steps, 10 restarts) on a deterministic
subsample.  All statistics are population statistics: std divides by N.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .diffcore import Tape
from .fairness import FairnessSpec, unfairness
from .model import AuctionModel
from .regret import evaluation_regret
from .valuations import (
    SettingSpec,
    itemwise_myerson_revenue,
    rng_stream,
    sample_profiles,
)

__all__ = [
    "EvalReport",
    "evaluate",
    "heatmap_sweep",
    "heatmap_csv",
    "emit_tables",
    "report_csv",
    "rows_to_csv",
]

EVAL_COLUMNS = [
    "setting_id", "bidder_type", "n", "m", "d", "shift", "n_samples",
    "regret_samples", "seed", "revenue_mean", "revenue_std", "regret_mean",
    "regret_max", "unfairness_mean", "unfairness_max", "utility_min",
    "myerson_revenue", "myerson_stderr",
]


@dataclass
class EvalReport:
    setting_id: str
    bidder_type: str
    n: int
    m: int
    d: float | None
    shift: float
    n_samples: int
    regret_samples: int
    seed: int
    revenue_mean: float
    revenue_std: float
    regret_mean: float
    regret_max: float
    unfairness_mean: float
    unfairness_max: float
    utility_min: float
    myerson_revenue: float | None = None
    myerson_stderr: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _forward_chunks(model: AuctionModel, profiles, chunk=512):
    """Yield (bids, z, payments) per chunk via the recorded graph."""
    for lo in range(0, len(profiles), chunk):
        part = profiles[lo:lo + chunk]
        tape = Tape()
        nodes = model.forward_nodes(tape, tape.constant(part))
        yield part, tape.value(nodes.z), tape.value(nodes.payment)


def evaluate(model: AuctionModel, setting: SettingSpec, fspec: FairnessSpec,
             n_samples: int = 10000, seed: int = 0,
             misreport_steps: int = 1000, restarts: int = 10,
             regret_samples: int | None = None, myerson_samples: int = 0,
             d: float | None = None) -> EvalReport:
    """Full held-out evaluation of a trained mechanism."""
    model.validate()
    setting.validate()
    fspec.validate(setting.n, setting.m)
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if regret_samples is None:
        regret_samples = min(n_samples, 2000)
    if not 1 <= regret_samples <= n_samples:
        raise ValueError("regret_samples must be in [1, n_samples]")
    if (model.bidder_type, model.n, model.m) != \
            (setting.bidder_type, setting.n, setting.m):
        raise ValueError("bidder_type mismatch between model and setting")

    profiles = sample_profiles(setting, n_samples,
                               rng_stream(seed, "evaluation"))
    revenue = np.empty(n_samples)
    unf_rows = []
    utility_min = np.inf
    for lo, (part, z, pay) in zip(range(0, n_samples, 512),
                                  _forward_chunks(model, profiles)):
        revenue[lo:lo + len(part)] = pay.sum(axis=1)
        per_item, _ = unfairness(z, fspec)
        unf_rows.append(per_item)
        util = (z * part).sum(axis=2) - pay
        utility_min = min(utility_min, float(util.min()))
    unf = np.concatenate(unf_rows)

    if utility_min < 0:
        raise RuntimeError(
            f"negative truthful utility {utility_min!r}: the payment head "
            "must keep every truthful bidder at nonnegative utility")

    rgt = evaluation_regret(model, profiles[:regret_samples], setting,
                            steps=misreport_steps, restarts=restarts,
                            seed=seed)

    myr_mean = myr_err = None
    if myerson_samples:
        myr_mean, myr_err = itemwise_myerson_revenue(
            setting, myerson_samples, rng_stream(seed, "baseline"))

    return EvalReport(
        setting_id=setting.setting_id, bidder_type=setting.bidder_type,
        n=setting.n, m=setting.m, d=d, shift=setting.shift,
        n_samples=n_samples, regret_samples=regret_samples, seed=seed,
        revenue_mean=float(revenue.mean()), revenue_std=float(revenue.std()),
        regret_mean=float(rgt.mean()), regret_max=float(rgt.max()),
        unfairness_mean=float(unf.mean()), unfairness_max=float(unf.max()),
        utility_min=utility_min,
        myerson_revenue=myr_mean, myerson_stderr=myr_err)


def heatmap_sweep(model: AuctionModel, setting: SettingSpec,
                  step: float | None = None):
    """Allocation probabilities on a dense bid grid (single bidder,
    two items).  Returns (points (K, 2), z (K, 2)) in row-major grid
    order; ``step`` defaults to 1% of each item's support width.
    """
    if setting.n != 1 or setting.m != 2:
        raise ValueError("heatmap requires a 1-bidder, 2-item setting")
    if (model.n, model.m) != (1, 2):
        raise ValueError("bidder_type mismatch between model and setting")
    low, high = setting.low, setting.high

    axes = []
    for j in range(2):
        h = step if step is not None else 0.01 * (high[j] - low[j])
        if h <= 0:
            raise ValueError("step must be > 0")
        count = int(round((high[j] - low[j]) / h))
        axes.append(low[j] + h * np.arange(count + 1))
    b1, b2 = np.meshgrid(axes[0], axes[1], indexing="ij")
    points = np.stack([b1.ravel(), b2.ravel()], axis=1)

    zs = np.empty_like(points)
    for lo in range(0, len(points), 2048):
        part = points[lo:lo + 2048]
        zs[lo:lo + len(part)] = model.allocate(
            part.reshape(-1, 1, 2))[:, 0, :]
    return points, zs


def heatmap_csv(points, zs) -> str:
    lines = ["b1,b2,z_item1,z_item2"]
    for (b1, b2), (z1, z2) in zip(points, zs):
        lines.append(",".join(_fmt(v) for v in (b1, b2, z1, z2)))
    return "\n".join(lines) + "\n"


def _cell(report: EvalReport) -> str:
    return f"{report.revenue_mean:.3f} ({report.revenue_std:.3f})"


def emit_tables(reports, layout: str = "d") -> str:
    """Revenue grid as CSV: one row per size (layout "d") or per base
    shift (layout "bd"), one column per fairness distance, each cell
    ``mean (std)`` at 3 decimals.
    """
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to tabulate")
    ids = {r.setting_id for r in reports}
    if len(ids) != 1:
        raise ValueError(f"mixed settings in one table: {sorted(ids)}")
    if any(r.d is None for r in reports):
        raise ValueError("every report needs a fairness distance d")

    ds = sorted({r.d for r in reports}, reverse=True)
    if layout == "d":
        keys = sorted({(r.n, r.m) for r in reports})
        label = lambda k: f"{k[0]}x{k[1]}"
        locate = lambda r: (r.n, r.m)
        head = "n x m"
    elif layout == "bd":
        keys = sorted({r.shift for r in reports}, reverse=True)
        label = lambda k: f"b={k:.2f}"
        locate = lambda r: r.shift
        head = "base shift"
    else:
        raise ValueError(f"unknown table layout {layout!r}")

    cells = {}
    for r in reports:
        pos = (locate(r), r.d)
        if pos in cells:
            raise ValueError(f"duplicate table cell for {pos}")
        cells[pos] = _cell(r)

    lines = [",".join([head] + [f"d={d:.2f}" for d in ds])]
    for k in keys:
        lines.append(",".join([label(k)] +
                              [cells.get((k, d), "") for d in ds]))
    return "\n".join(lines) + "\n"


def report_csv(report: EvalReport) -> str:
    """Single-report CSV with the stable evaluation column set."""
    return rows_to_csv(EVAL_COLUMNS, [report.to_dict()])


def rows_to_csv(columns, rows) -> str:
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(row[c]) for c in columns))
    return "\n".join(lines) + "\n"


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))
