"""Seeded valuation samplers and the itemwise Myerson revenue baseline.

Experiment settings:

* A: 1 bidder, 2 items, additive, values U[0,1].
* B: 1 bidder, 2 items, unit-demand, values U[2,3].
* C: n bidders, m items, additive, values U[0,1].
* D/E/F: 3 bidders, 4 items, additive; item j valued U[0,1] + b*f1(j),
  with binary item features f1, f2 used by the fairness constraints
  (D, F: f1=(0,0,1,1), f2=(0,1,0,1); E: f1=(0,0,1,1), f2=(1,1,0,1)).

All randomness flows through :func:`rng_stream`, which derives one
independent generator per documented purpose from a root seed, so a run
is reproducible and its streams do not alias.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "SettingSpec",
    "make_setting",
    "rng_stream",
    "sample_profiles",
    "itemwise_myerson_revenue",
    "myerson_reserve",
]

# Purpose tags for derived RNG streams.  The integer id enters the seed
# material, so renumbering would silently change every sampled dataset.
STREAM_PURPOSES = {
    "train-data": 0,
    "holdout-data": 1,
    "misreport-init": 2,
    "weight-init": 3,
    "evaluation": 4,
    "baseline": 5,
    "batch-order": 6,
    "fuzz": 7,
}


def rng_stream(seed: int, purpose: str, index: int = 0) -> np.random.Generator:
    """Independent generator for (seed, purpose, index)."""
    pid = STREAM_PURPOSES.get(purpose)
    if pid is None:
        raise ValueError(f"unknown rng purpose {purpose!r}; known: "
                         f"{sorted(STREAM_PURPOSES)}")
    ss = np.random.SeedSequence(entropy=(int(seed), pid, int(index)))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class SettingSpec:
    """One experiment setting: who bids on what, drawn from where."""

    setting_id: str
    n: int
    m: int
    bidder_type: str
    base_low: tuple
    base_high: tuple
    f1: tuple
    f2: tuple
    shift: float = 0.0

    def validate(self):
        if self.n < 1 or self.m < 1:
            raise ValueError("need n >= 1 and m >= 1")
        if self.bidder_type not in ("additive", "unit-demand"):
            raise ValueError(f"bad bidder_type {self.bidder_type!r}")
        for name, f in (("f1", self.f1), ("f2", self.f2)):
            if len(f) != self.m or any(x not in (0, 1) for x in f):
                raise ValueError(f"{name} must be {self.m} binary flags, "
                                 f"got {f}")
        if len(self.base_low) != self.m or len(self.base_high) != self.m:
            raise ValueError("per-item support lists must have length m")
        if self.shift < 0:
            raise ValueError(f"shift must be >= 0, got {self.shift}")
        if any(lo > hi for lo, hi in zip(self.base_low, self.base_high)):
            raise ValueError("support low exceeds high")

    @property
    def low(self) -> np.ndarray:
        """Effective per-item support lower bounds (shift applied)."""
        return np.asarray(self.base_low, dtype=np.float64) + \
            self.shift * np.asarray(self.f1, dtype=np.float64)

    @property
    def high(self) -> np.ndarray:
        return np.asarray(self.base_high, dtype=np.float64) + \
            self.shift * np.asarray(self.f1, dtype=np.float64)


def make_setting(setting_id: str, n: int | None = None, m: int | None = None,
                 shift: float = 0.0) -> SettingSpec:
    """Build one of the named settings; C needs n and m, D/E/F take shift."""
    sid = setting_id.upper()
    if sid == "A":
        spec = SettingSpec("A", 1, 2, "additive", (0.0, 0.0), (1.0, 1.0),
                           (0, 0), (0, 0))
    elif sid == "B":
        spec = SettingSpec("B", 1, 2, "unit-demand", (2.0, 2.0), (3.0, 3.0),
                           (0, 0), (0, 0))
    elif sid == "C":
        if n is None or m is None:
            raise ValueError("setting C needs explicit n and m")
        spec = SettingSpec("C", n, m, "additive", (0.0,) * m, (1.0,) * m,
                           (0,) * m, (0,) * m)
    elif sid in ("D", "E", "F"):
        f2 = (1, 1, 0, 1) if sid == "E" else (0, 1, 0, 1)
        spec = SettingSpec(sid, 3, 4, "additive", (0.0,) * 4, (1.0,) * 4,
                           (0, 0, 1, 1), f2, shift=float(shift))
    else:
        raise ValueError(f"unknown setting id {setting_id!r}")
    spec.validate()
    return spec


def sample_profiles(spec: SettingSpec, count: int, seed) -> np.ndarray:
    """(count, n, m) i.i.d. valuation profiles, deterministic per seed.

    ``seed`` may be an int (a private generator is derived from it) or an
    already-derived ``numpy.random.Generator``.
    """
    spec.validate()
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    rng = seed if isinstance(seed, np.random.Generator) else \
        np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))
    return rng.uniform(spec.low, spec.high, size=(count, spec.n, spec.m))


def myerson_reserve(low: float, high: float) -> float:
    """Optimal posted reserve for one U[low, high] item: high/2, clamped.

    The virtual value 2v - high crosses zero at high/2; below the support
    the reserve binds at low (never excludes anyone).
    """
    return float(min(max(high / 2.0, low), high))


def itemwise_myerson_revenue(spec: SettingSpec, mc_samples: int,
                             seed) -> tuple[float, float]:
    """Monte Carlo revenue of selling each item by second price + reserve.

    Returns (estimate, standard error).  Items are sold independently:
    the winner pays max(second-highest bid, reserve) when the highest
    bid clears the reserve, else the item is withheld.
    """
    spec.validate()
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else \
        rng_stream(int(seed), "baseline")
    low, high = spec.low, spec.high
    reserves = np.array([myerson_reserve(lo, hi)
                         for lo, hi in zip(low, high)])

    total = 0.0
    total_sq = 0.0
    done = 0
    chunk = min(mc_samples, max(1, 20_000_000 // (spec.n * spec.m)))
    while done < mc_samples:
        k = min(chunk, mc_samples - done)
        v = rng.uniform(low, high, size=(k, spec.n, spec.m))
        v.sort(axis=1)
        top = v[:, -1, :]
        second = v[:, -2, :] if spec.n > 1 else np.full_like(top, -np.inf)
        rev = np.where(top >= reserves, np.maximum(second, reserves), 0.0)
        per_sample = rev.sum(axis=1)
        total += per_sample.sum()
        total_sq += (per_sample ** 2).sum()
        done += k
    mean = total / mc_samples
    var = max(total_sq / mc_samples - mean ** 2, 0.0)
    return mean, float(np.sqrt(var / mc_samples))
