"""Samplers, RNG streams, and the itemwise Myerson baseline."""

import numpy as np
import pytest

from fairauction.valuations import (
    SettingSpec,
    itemwise_myerson_revenue,
    make_setting,
    myerson_reserve,
    rng_stream,
    sample_profiles,
)


def analytic_item_revenue_u01(n):
    """Second price with reserve 0.5 on one U[0,1] item, n bidders.

    Revenue equals expected clipped virtual value of the winner:
    integral_r^1 (2v - 1) n v^(n-1) dv with r = 0.5.
    """
    r = 0.5
    upper = 2.0 * n / (n + 1) - 1.0
    lower = 2.0 * n / (n + 1) * r ** (n + 1) - r ** n
    return upper - lower


def test_setting_supports():
    a = sample_profiles(make_setting("A"), 500, 0)
    assert a.shape == (500, 1, 2)
    assert a.min() >= 0.0 and a.max() <= 1.0

    b = sample_profiles(make_setting("B"), 500, 0)
    assert b.min() >= 2.0 and b.max() <= 3.0

    d = sample_profiles(make_setting("D", shift=1.0), 500, 0)
    assert d.shape == (500, 3, 4)
    assert d[:, :, :2].min() >= 0.0 and d[:, :, :2].max() <= 1.0
    assert d[:, :, 2:].min() >= 1.0 and d[:, :, 2:].max() <= 2.0


def test_setting_features():
    d = make_setting("D")
    assert d.f1 == (0, 0, 1, 1) and d.f2 == (0, 1, 0, 1)
    e = make_setting("E")
    assert e.f1 == (0, 0, 1, 1) and e.f2 == (1, 1, 0, 1)
    f = make_setting("F")
    assert (f.f1, f.f2) == (d.f1, d.f2)
    assert d.bidder_type == "additive" and (d.n, d.m) == (3, 4)


def test_sampler_determinism():
    spec = make_setting("C", n=2, m=3)
    x = sample_profiles(spec, 100, 123)
    y = sample_profiles(spec, 100, 123)
    z = sample_profiles(spec, 100, 124)
    assert np.array_equal(x, y)
    assert not np.array_equal(x, z)


def test_rng_streams_are_independent_and_reproducible():
    a1 = rng_stream(7, "train-data").uniform(size=8)
    a2 = rng_stream(7, "train-data").uniform(size=8)
    b = rng_stream(7, "evaluation").uniform(size=8)
    c = rng_stream(7, "train-data", index=1).uniform(size=8)
    assert np.array_equal(a1, a2)
    assert not np.array_equal(a1, b)
    assert not np.array_equal(a1, c)
    with pytest.raises(ValueError):
        rng_stream(7, "lottery")


def test_sample_mean_matches_support_midpoint():
    spec = make_setting("A")
    x = sample_profiles(spec, 100_000, 5).reshape(-1)
    sigma_mean = 1.0 / np.sqrt(12.0) / np.sqrt(x.size)
    assert abs(x.mean() - 0.5) <= 3.0 * sigma_mean


def test_myerson_reserve():
    assert myerson_reserve(0.0, 1.0) == 0.5
    assert myerson_reserve(2.0, 3.0) == 2.0  # high/2 below support: no exclusion
    assert myerson_reserve(1.0, 2.0) == 1.0


def test_myerson_single_item_single_bidder_analytic():
    spec = make_setting("C", n=1, m=1)
    est, err = itemwise_myerson_revenue(spec, 1_000_000, seed=11)
    assert abs(analytic_item_revenue_u01(1) - 0.25) < 1e-15
    assert abs(est - 0.25) <= 0.005
    assert 0 < err < 0.001


def test_myerson_reproduces_published_small_cells():
    est, _ = itemwise_myerson_revenue(make_setting("A"), 1_000_000, seed=3)
    assert abs(est - 0.50) <= 0.01
    est, _ = itemwise_myerson_revenue(make_setting("C", n=2, m=2),
                                      1_000_000, seed=4)
    assert abs(est - 2 * 5.0 / 12.0) <= 0.01
    assert abs(2 * analytic_item_revenue_u01(2) - 2 * 5.0 / 12.0) < 1e-12


def test_myerson_shifted_support_matches_analytic():
    # D with b=1: items 1,2 are U[0,1] with 3 bidders; items 3,4 are
    # U[1,2], reserve 1, so revenue is the expected second-highest bid,
    # 1 + (n-1)/(n+1).
    expect = 2 * analytic_item_revenue_u01(3) + 2 * 1.5
    est, err = itemwise_myerson_revenue(make_setting("D", shift=1.0),
                                        400_000, seed=9)
    assert abs(est - expect) <= max(0.01, 5 * err)


def test_myerson_degenerate_support_is_exact():
    # U[2,3] with one bidder: reserve 2 always trades at the reserve
    est, err = itemwise_myerson_revenue(make_setting("B"), 10_000, seed=1)
    assert est == pytest.approx(4.0, abs=1e-12)  # two items at price 2
    assert err == pytest.approx(0.0, abs=1e-12)


def test_invalid_specs_rejected():
    with pytest.raises(ValueError):
        make_setting("G")
    with pytest.raises(ValueError):
        make_setting("C")  # needs n and m
    with pytest.raises(ValueError):
        SettingSpec("custom", 1, 2, "additive", (0.0, 0.0), (1.0, 1.0),
                    (0, 0), (0, 0), shift=-1.0).validate()
    with pytest.raises(ValueError):
        SettingSpec("custom", 1, 2, "additive", (0.0, 0.0), (1.0, 1.0),
                    (0, 0, 0), (0, 0), shift=0.0).validate()
    with pytest.raises(ValueError):
        sample_profiles(make_setting("A"), 0, 1)
