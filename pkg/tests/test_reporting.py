"""Evaluation report, heatmap grid, and revenue table tests."""

import numpy as np
import pytest

from fairauction.fairness import setting_fairness
from fairauction.model import AuctionModel
from fairauction.reporting import (
    EVAL_COLUMNS,
    EvalReport,
    emit_tables,
    evaluate,
    heatmap_csv,
    heatmap_sweep,
    report_csv,
    rows_to_csv,
)
from fairauction.valuations import make_setting, rng_stream, sample_profiles


def make_model(setting, seed=0, width=8, layers=2):
    return AuctionModel.init(setting.bidder_type, setting.n, setting.m,
                             layers, rng_stream(seed, "weight-init"),
                             hidden_width=width)


def zeroed(setting, pay_bias=0.0, width=8, layers=2):
    model = make_model(setting, width=width, layers=layers)
    model.alloc_weights = [np.zeros_like(a) for a in model.alloc_weights]
    model.pay_weights = [np.zeros_like(a) for a in model.pay_weights]
    model.pay_weights[-1] = model.pay_weights[-1] + pay_bias
    return model


def straight_line_payments(model, bids):
    """Hand-rolled forward pass, mirroring the published architecture."""
    def softmax(x, axis):
        e = np.exp(x - x.max(axis=axis, keepdims=True))
        return e / e.sum(axis=axis, keepdims=True)

    def sigmoid(x):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    def run(ws, x):
        for k in range(0, len(ws) - 2, 2):
            x = np.tanh(np.matmul(x, ws[k]) + ws[k + 1])
        return np.matmul(x, ws[-2]) + ws[-1]

    flat = bids.reshape(len(bids), model.n * model.m)
    raw = run(model.alloc_weights, flat)
    z = softmax(raw.reshape(len(bids), model.n + 1, model.m),
                axis=1)[:, :model.n, :]
    frac = sigmoid(run(model.pay_weights, flat))
    return frac * np.sum(z * bids, axis=2)


def test_evaluate_matches_straight_line_recomputation_exactly():
    setting = make_setting("A")
    model = make_model(setting, seed=5)
    fspec = setting_fairness(setting, d=1.0)
    report = evaluate(model, setting, fspec, n_samples=700, seed=3,
                      misreport_steps=2, restarts=1)

    profiles = sample_profiles(setting, 700, rng_stream(3, "evaluation"))
    revenue = np.empty(700)
    for lo in range(0, 700, 512):
        part = profiles[lo:lo + 512]
        revenue[lo:lo + len(part)] = \
            straight_line_payments(model, part).sum(axis=1)
    assert report.revenue_mean == revenue.mean()
    assert report.revenue_std == revenue.std()


def test_evaluate_fields_and_invariants():
    setting = make_setting("A")
    model = make_model(setting, seed=1)
    fspec = setting_fairness(setting, d=1.0)
    report = evaluate(model, setting, fspec, n_samples=300, seed=0,
                      misreport_steps=5, restarts=2, d=1.0)
    assert report.n_samples == 300
    assert report.regret_samples == 300
    assert report.utility_min >= 0.0
    assert 0.0 <= report.regret_mean <= report.regret_max
    # uniform item distance makes the fairness bound slack everywhere
    assert report.unfairness_mean == 0.0
    assert report.unfairness_max == 0.0
    assert report.d == 1.0
    assert report.myerson_revenue is None
    as_dict = report.to_dict()
    assert set(as_dict) == set(EVAL_COLUMNS)


def test_evaluate_zero_regret_for_bid_independent_mechanism():
    setting = make_setting("A")
    model = zeroed(setting, pay_bias=-50.0)
    fspec = setting_fairness(setting, d=0.0)
    report = evaluate(model, setting, fspec, n_samples=200, seed=2,
                      misreport_steps=20, restarts=3)
    assert report.regret_mean == 0.0
    assert report.regret_max == 0.0
    # constant half allocation: identical columns, zero violation
    assert report.unfairness_max == 0.0


def test_evaluate_myerson_baseline_attached():
    setting = make_setting("A")
    model = make_model(setting)
    fspec = setting_fairness(setting, d=1.0)
    report = evaluate(model, setting, fspec, n_samples=100, seed=1,
                      misreport_steps=1, restarts=1, myerson_samples=200000)
    # two items sold separately at reserve 1/2: 2 * 1/4
    assert report.myerson_revenue == pytest.approx(
        0.5, abs=5 * report.myerson_stderr + 1e-6)


def test_evaluate_subsamples_regret():
    setting = make_setting("A")
    model = make_model(setting)
    fspec = setting_fairness(setting, d=1.0)
    report = evaluate(model, setting, fspec, n_samples=2500, seed=1,
                      misreport_steps=1, restarts=1)
    assert report.regret_samples == 2000
    report = evaluate(model, setting, fspec, n_samples=100, seed=1,
                      misreport_steps=1, restarts=1, regret_samples=7)
    assert report.regret_samples == 7


def test_evaluate_rejects_mismatches():
    setting = make_setting("A")
    other = make_setting("C", n=2, m=2)
    model = make_model(setting)
    fspec = setting_fairness(setting, d=1.0)
    with pytest.raises(ValueError, match="mismatch"):
        evaluate(model, other, setting_fairness(other, d=1.0), n_samples=10)
    with pytest.raises(ValueError):
        evaluate(model, setting, fspec, n_samples=10, regret_samples=50)
    with pytest.raises(ValueError):
        evaluate(model, setting, fspec, n_samples=0)


def test_heatmap_grid_and_symmetry():
    setting = make_setting("A")
    model = zeroed(setting)
    points, zs = heatmap_sweep(model, setting)
    assert points.shape == (101 * 101, 2)
    assert zs.shape == (101 * 101, 2)
    assert points.min() == 0.0 and points.max() == 1.0
    # bid-independent symmetric model: both items exactly half
    assert np.all(zs == 0.5)

    text = heatmap_csv(points, zs)
    lines = text.strip().split("\n")
    assert lines[0] == "b1,b2,z_item1,z_item2"
    assert len(lines) == 1 + 101 * 101
    assert lines[1] == "0.0,0.0,0.5,0.5"


def test_heatmap_respects_support_and_step():
    setting = make_setting("B")
    model = AuctionModel.init("unit-demand", 1, 2, 2,
                              rng_stream(4, "weight-init"), hidden_width=8)
    points, zs = heatmap_sweep(model, setting, step=0.25)
    assert points.shape == (25, 2)
    assert points.min() == 2.0 and points.max() == 3.0
    assert np.all(zs >= 0) and np.all(zs <= 1 + 1e-12)


def test_heatmap_rejects_other_shapes():
    setting = make_setting("C", n=2, m=2)
    model = make_model(setting)
    with pytest.raises(ValueError, match="1-bidder, 2-item"):
        heatmap_sweep(model, setting)
    a = make_setting("A")
    with pytest.raises(ValueError, match="mismatch"):
        heatmap_sweep(model, a)
    with pytest.raises(ValueError, match="step"):
        heatmap_sweep(zeroed(a), a, step=-0.1)


def fake_report(setting_id="C", n=1, m=2, d=1.0, shift=0.0,
                rev=0.546, std=0.369):
    return EvalReport(
        setting_id=setting_id, bidder_type="additive", n=n, m=m, d=d,
        shift=shift, n_samples=10, regret_samples=10, seed=0,
        revenue_mean=rev, revenue_std=std, regret_mean=0.0, regret_max=0.0,
        unfairness_mean=0.0, unfairness_max=0.0, utility_min=0.0)


def test_emit_tables_size_by_distance():
    reports = [
        fake_report(n=1, m=2, d=1.0, rev=0.546, std=0.369),
        fake_report(n=1, m=2, d=0.0, rev=0.538, std=0.2),
        fake_report(n=2, m=2, d=1.0, rev=0.865, std=0.349),
        fake_report(n=2, m=2, d=0.0, rev=0.85, std=0.3),
    ]
    text = emit_tables(reports, layout="d")
    lines = text.strip().split("\n")
    assert lines[0] == "n x m,d=1.00,d=0.00"
    assert lines[1] == "1x2,0.546 (0.369),0.538 (0.200)"
    assert lines[2] == "2x2,0.865 (0.349),0.850 (0.300)"


def test_emit_tables_shift_by_distance():
    reports = [
        fake_report(setting_id="D", n=3, m=4, d=d, shift=b,
                    rev=4.0 + b - d, std=0.1)
        for b in (1.0, 0.5) for d in (1.0, 0.0)
    ]
    text = emit_tables(reports, layout="bd")
    lines = text.strip().split("\n")
    assert lines[0] == "base shift,d=1.00,d=0.00"
    assert lines[1].startswith("b=1.00,4.000")
    assert lines[2].startswith("b=0.50,3.500")


def test_emit_tables_rejections():
    with pytest.raises(ValueError, match="no reports"):
        emit_tables([])
    mixed = [fake_report(setting_id="C"), fake_report(setting_id="D")]
    with pytest.raises(ValueError, match="mixed settings"):
        emit_tables(mixed)
    with pytest.raises(ValueError, match="duplicate"):
        emit_tables([fake_report(), fake_report()])
    with pytest.raises(ValueError, match="layout"):
        emit_tables([fake_report()], layout="q")
    bad = fake_report()
    bad.d = None
    with pytest.raises(ValueError, match="distance"):
        emit_tables([bad])
    # empty cells render as blanks rather than failing
    sparse = [fake_report(n=1, m=2, d=1.0), fake_report(n=2, m=2, d=0.0)]
    lines = emit_tables(sparse, layout="d").strip().split("\n")
    assert lines[1].endswith(",")
    assert lines[2].startswith("2x2,,")


def test_report_csv_round_trip():
    report = fake_report()
    text = report_csv(report)
    lines = text.strip().split("\n")
    assert lines[0] == ",".join(EVAL_COLUMNS)
    cells = dict(zip(EVAL_COLUMNS, lines[1].split(",")))
    assert cells["setting_id"] == "C"
    assert cells["myerson_revenue"] == ""
    assert float(cells["revenue_mean"]) == 0.546


def test_rows_to_csv_formats():
    text = rows_to_csv(["a", "b"], [{"a": 1, "b": 0.5}, {"a": None, "b": "x"}])
    assert text == "a,b\n1,0.5\n,x\n"
