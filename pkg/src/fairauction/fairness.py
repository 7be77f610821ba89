"""Total-variation fairness: distance matrices and the unfairness metric.

A :class:`FairnessSpec` partitions the agents into categories and gives
each category an m-by-m item distance matrix.  The unfairness of item j
under allocation z is

    unf_j = sum_{j'} sum_k max(0, (sum_{i in C_k} max(0, z_ij - z_ij'))
                                  - d_k(j, j'))

a hinge on the one-sided total-variation gap between how two items are
served within a category.  unf_j = 0 for every item exactly when the
allocation satisfies the distance constraints.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import Tape, as_tensor

__all__ = [
    "FairnessSpec",
    "uniform_distance",
    "feature_distance",
    "setting_fairness",
    "unfairness",
    "unfairness_nodes",
]


def uniform_distance(m: int, d: float) -> np.ndarray:
    """Constant off-diagonal distance d, zero diagonal."""
    if not 0.0 <= d <= 1.0:
        raise ValueError(f"d must be in [0,1], got {d}")
    mat = np.full((m, m), float(d))
    np.fill_diagonal(mat, 0.0)
    return mat


def feature_distance(features, d: float) -> np.ndarray:
    """Distance 1 - (1-d)(1 - |f_j - f_j'|) from one binary feature.

    Items sharing the feature sit at distance d; items that differ are
    unconstrained (distance 1) regardless of d.
    """
    if not 0.0 <= d <= 1.0:
        raise ValueError(f"d must be in [0,1], got {d}")
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 1 or not np.all((f == 0) | (f == 1)):
        raise ValueError(f"features must be binary flags, got {features!r}")
    gap = np.abs(f[:, None] - f[None, :])
    mat = 1.0 - (1.0 - d) * (1.0 - gap)
    np.fill_diagonal(mat, 0.0)
    return mat


@dataclass(frozen=True)
class FairnessSpec:
    """Agent partition plus one item distance matrix per category."""

    categories: tuple          # tuple of tuples of agent indices
    distances: tuple           # tuple of m x m arrays, aligned with categories

    def validate(self, n: int, m: int):
        seen = [i for cat in self.categories for i in cat]
        if sorted(seen) != list(range(n)):
            raise ValueError(f"categories {self.categories} are not a "
                             f"partition of the {n} agents")
        if len(self.distances) != len(self.categories):
            raise ValueError("need one distance matrix per category")
        for k, dm in enumerate(self.distances):
            dm = np.asarray(dm)
            if dm.shape != (m, m):
                raise ValueError(f"distance matrix {k} has shape {dm.shape}, "
                                 f"expected ({m}, {m})")
            if not np.array_equal(dm, dm.T):
                raise ValueError(f"distance matrix {k} is not symmetric")
            if np.any(np.diag(dm) != 0):
                raise ValueError(f"distance matrix {k} has nonzero diagonal")
            if dm.min() < 0 or dm.max() > 1:
                raise ValueError(f"distance matrix {k} entries outside [0,1]")

    @classmethod
    def single_category(cls, n: int, distance: np.ndarray) -> "FairnessSpec":
        return cls((tuple(range(n)),), (np.asarray(distance, dtype=np.float64),))


def setting_fairness(setting, d: float) -> FairnessSpec:
    """The fairness constraint each named setting is evaluated under.

    A/B/C: one category over all agents with the uniform distance d.
    D/E: one category, feature distance on f2.
    F: agents 1-2 constrained via f2, agent 3 via f1.
    """
    sid = setting.setting_id
    if sid in ("D", "E"):
        spec = FairnessSpec.single_category(
            setting.n, feature_distance(setting.f2, d))
    elif sid == "F":
        spec = FairnessSpec(
            categories=((0, 1), (2,)),
            distances=(feature_distance(setting.f2, d),
                       feature_distance(setting.f1, d)))
    else:
        spec = FairnessSpec.single_category(
            setting.n, uniform_distance(setting.m, d))
    spec.validate(setting.n, setting.m)
    return spec


def unfairness(alloc, spec: FairnessSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-item unfairness and its total; batched over leading dims.

    Returns ``(per_item, total)`` with shapes ``(..., m)`` and ``(...)``.
    """
    z = as_tensor(alloc)
    n, m = z.shape[-2], z.shape[-1]
    spec.validate(n, m)
    per_item = np.zeros(z.shape[:-2] + (m,))
    for cat, dist in zip(spec.categories, spec.distances):
        zk = z[..., list(cat), :]
        # gap[..., j, j'] = sum_i max(0, z_ij - z_ij')
        gap = np.clip(zk[..., :, :, None] - zk[..., :, None, :], 0.0,
                      None).sum(axis=-3)
        hinge = np.clip(gap - np.asarray(dist), 0.0, None)
        per_item += hinge.sum(axis=-1)
    return per_item, per_item.sum(axis=-1)


def unfairness_nodes(tape: Tape, z: int, spec: FairnessSpec) -> list:
    """Record per-item batch-mean unfairness scalars on a tape.

    ``z`` is a (batch, n, m) allocation node.  Returns m node ids; node j
    holds the batch mean of unf_j.  Built from hinge primitives so the
    subgradient convention matches :func:`unfairness`.
    """
    batch, n, m = tape.value(z).shape
    spec.validate(n, m)
    # per category: mask out the member agents, then hinge each item pair
    pair_terms = {j: [] for j in range(m)}
    for cat, dist in zip(spec.categories, spec.distances):
        mask = np.zeros((n, m))
        mask[list(cat), :] = 1.0
        mask_node = tape.constant(mask)
        zmasked = tape.mul(z, mask_node)  # non-members contribute nothing
        cols = [tape.index(zmasked, axis=2, i=j) for j in range(m)]
        for j in range(m):
            for jp in range(m):
                if jp == j:
                    continue
                gap = tape.sum(tape.relu(tape.sub(cols[j], cols[jp])), axis=1)
                slack = tape.constant(np.asarray(float(dist[j, jp])))
                pair_terms[j].append(tape.relu(tape.sub(gap, slack)))
    out = []
    for j in range(m):
        if not pair_terms[j]:  # single item: no pairs, no unfairness
            out.append(tape.constant(np.zeros(())))
            continue
        acc = pair_terms[j][0]
        for term in pair_terms[j][1:]:
            acc = tape.add(acc, term)
        out.append(tape.mean(acc))
    return out
