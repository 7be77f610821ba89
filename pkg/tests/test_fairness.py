"""Distance matrices and the total-variation unfairness metric."""

import numpy as np
import pytest

from fairauction.diffcore import Tape, backward
from fairauction.fairness import (
    FairnessSpec,
    feature_distance,
    setting_fairness,
    unfairness,
    unfairness_nodes,
    uniform_distance,
)
from fairauction.valuations import make_setting


def brute_force_unfairness(z, spec):
    """Direct triple loop over (j, j', category, agent)."""
    n, m = z.shape
    per = np.zeros(m)
    for j in range(m):
        for jp in range(m):
            for cat, dist in zip(spec.categories, spec.distances):
                gap = sum(max(0.0, z[i, j] - z[i, jp]) for i in cat)
                per[j] += max(0.0, gap - np.asarray(dist)[j, jp])
    return per, per.sum()


def random_feasible_z(rng, n, m):
    """Column-feasible allocation via softmax with a dummy row."""
    logits = rng.normal(size=(n + 1, m)) * 2.0
    e = np.exp(logits - logits.max(axis=0))
    return (e / e.sum(axis=0))[:n]


def random_spec(rng, n, m):
    # random partition into 1..n categories with random symmetric distances
    order = rng.permutation(n)
    k = int(rng.integers(1, n + 1))
    cuts = sorted(rng.choice(range(1, n), size=k - 1, replace=False)) if k > 1 else []
    cats, start = [], 0
    for c in list(cuts) + [n]:
        cats.append(tuple(int(x) for x in order[start:c]))
        start = c
    dists = []
    for _ in cats:
        raw = rng.uniform(0, 1, size=(m, m))
        d = (raw + raw.T) / 2.0
        np.fill_diagonal(d, 0.0)
        dists.append(d)
    return FairnessSpec(tuple(cats), tuple(dists))


def test_uniform_distance_examples():
    np.testing.assert_array_equal(uniform_distance(2, 1.0), [[0, 1], [1, 0]])
    np.testing.assert_array_equal(uniform_distance(2, 0.0), np.zeros((2, 2)))
    d3 = uniform_distance(3, 0.25)
    assert d3[0, 1] == d3[2, 0] == 0.25 and np.all(np.diag(d3) == 0)
    with pytest.raises(ValueError):
        uniform_distance(2, 1.5)


def test_feature_distance_examples():
    d = feature_distance((0, 1, 0, 1), 0.0)
    assert d[0, 2] == 0.0   # same feature, d=0: forced identical service
    assert d[0, 1] == 1.0   # different feature: unconstrained
    assert np.array_equal(d, d.T) and np.all(np.diag(d) == 0)

    d = feature_distance((0, 1, 1, 0), 1.0)
    off = d[~np.eye(4, dtype=bool)]
    assert np.all(off == 1.0)

    d = feature_distance((1, 1), 0.5)
    assert d[0, 1] == 0.5

    with pytest.raises(ValueError):
        feature_distance((0, 2, 1), 0.5)


def test_unfairness_frozen_example():
    z = np.array([[1.0, 0.0], [0.0, 1.0]])
    spec = FairnessSpec.single_category(2, uniform_distance(2, 0.0))
    per, total = unfairness(z, spec)
    np.testing.assert_array_equal(per, [1.0, 1.0])
    assert total == 2.0
    bper, btotal = brute_force_unfairness(z, spec)
    np.testing.assert_array_equal(bper, per)


def test_unfairness_zero_cases():
    rng = np.random.default_rng(0)
    spec_d1 = FairnessSpec.single_category(3, uniform_distance(4, 1.0))
    for _ in range(50):
        z = random_feasible_z(rng, 3, 4)
        per, total = unfairness(z, spec_d1)
        assert np.all(per == 0.0) and total == 0.0  # exact, not approximate

    # identical columns: every pairwise gap is zero
    z = np.repeat(rng.uniform(0, 0.3, size=(3, 1)), 4, axis=1)
    per, _ = unfairness(z, FairnessSpec.single_category(3, uniform_distance(4, 0.0)))
    assert np.all(per == 0.0)


def test_unfairness_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        n = int(rng.integers(1, 5))
        m = int(rng.integers(2, 5))
        z = random_feasible_z(rng, n, m)
        spec = random_spec(rng, n, m)
        per, total = unfairness(z, spec)
        bper, btotal = brute_force_unfairness(z, spec)
        assert np.max(np.abs(per - bper)) <= 1e-12
        assert abs(total - btotal) <= 1e-12


def test_unfairness_monotone_in_distance():
    rng = np.random.default_rng(2)
    for _ in range(200):
        n, m = 2, 3
        z = random_feasible_z(rng, n, m)
        spec = random_spec(rng, n, m)
        _, total = unfairness(z, spec)
        # bump one symmetric pair of one matrix upward
        k = int(rng.integers(0, len(spec.categories)))
        j, jp = rng.choice(m, size=2, replace=False)
        bumped = [np.array(d) for d in spec.distances]
        bumped[k][j, jp] = min(1.0, bumped[k][j, jp] + rng.uniform(0, 0.5))
        bumped[k][jp, j] = bumped[k][j, jp]
        _, total2 = unfairness(z, FairnessSpec(spec.categories, tuple(bumped)))
        assert total2 <= total + 1e-15


def test_unfairness_batched():
    rng = np.random.default_rng(3)
    spec = FairnessSpec.single_category(2, uniform_distance(3, 0.2))
    zs = np.stack([random_feasible_z(rng, 2, 3) for _ in range(6)])
    per, total = unfairness(zs, spec)
    assert per.shape == (6, 3) and total.shape == (6,)
    for b in range(6):
        pb, tb = unfairness(zs[b], spec)
        np.testing.assert_array_equal(per[b], pb)


def test_unfairness_nodes_match_numpy_and_gradients():
    rng = np.random.default_rng(4)
    for trial in range(20):
        n = int(rng.integers(1, 4))
        m = int(rng.integers(2, 5))
        zs = np.stack([random_feasible_z(rng, n, m) for _ in range(5)])
        spec = random_spec(rng, n, m)

        per, _ = unfairness(zs, spec)
        tape = Tape()
        z_node = tape.leaf(zs)
        nodes = unfairness_nodes(tape, z_node, spec)
        got = np.array([tape.value(nd) for nd in nodes])
        np.testing.assert_allclose(got, per.mean(axis=0), atol=1e-12)

        # finite-difference check on the total, skipping near-kink points
        total_node = nodes[0]
        for nd in nodes[1:]:
            total_node = tape.add(total_node, nd)
        g = backward(tape, total_node)[z_node]
        step = 1e-6
        flat = zs.reshape(-1)
        for idx in rng.choice(flat.size, size=5, replace=False):
            if _near_kink(zs, spec, step * 2):
                continue
            up = zs.copy()
            up.reshape(-1)[idx] += step
            down = zs.copy()
            down.reshape(-1)[idx] -= step
            fd = (_total_mean(up, spec) - _total_mean(down, spec)) / (2 * step)
            assert abs(g.reshape(-1)[idx] - fd) / max(1.0, abs(fd)) <= 1e-4


def _total_mean(zs, spec):
    per, _ = unfairness(zs, spec)
    return per.mean(axis=0).sum()


def _near_kink(zs, spec, margin):
    for cat, dist in zip(spec.categories, spec.distances):
        zk = zs[..., list(cat), :]
        diff = zk[..., :, :, None] - zk[..., :, None, :]
        if np.any(np.abs(diff) < margin):
            return True
        gap = np.clip(diff, 0, None).sum(axis=-3)
        if np.any(np.abs(gap - np.asarray(dist)) < margin):
            return True
    return False


def test_setting_fairness_shapes():
    a = setting_fairness(make_setting("A"), 0.5)
    assert a.categories == ((0,),)
    np.testing.assert_array_equal(a.distances[0], uniform_distance(2, 0.5))

    d = setting_fairness(make_setting("D"), 0.0)
    assert d.categories == ((0, 1, 2),)
    np.testing.assert_array_equal(d.distances[0],
                                  feature_distance((0, 1, 0, 1), 0.0))

    e = setting_fairness(make_setting("E"), 0.25)
    np.testing.assert_array_equal(e.distances[0],
                                  feature_distance((1, 1, 0, 1), 0.25))

    f = setting_fairness(make_setting("F"), 0.0)
    assert f.categories == ((0, 1), (2,))
    np.testing.assert_array_equal(f.distances[0],
                                  feature_distance((0, 1, 0, 1), 0.0))
    np.testing.assert_array_equal(f.distances[1],
                                  feature_distance((0, 0, 1, 1), 0.0))


def test_bad_specs_rejected():
    with pytest.raises(ValueError):
        FairnessSpec(((0,),), (uniform_distance(2, 0.5),)).validate(2, 2)
    asym = uniform_distance(2, 0.5)
    asym[0, 1] = 0.7
    with pytest.raises(ValueError):
        FairnessSpec.single_category(1, asym).validate(1, 2)
    diag = uniform_distance(2, 0.5)
    diag[0, 0] = 0.1
    with pytest.raises(ValueError):
        FairnessSpec.single_category(1, diag).validate(1, 2)
