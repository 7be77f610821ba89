"""Misreport search and the empirical regret estimate.

Regret of agent i at profile v is the utility gained by the best
unilateral misreport: max_{v'_i} u_i(v_i; (v'_i, v_-i)) - u_i(v_i; v).
The maximization is approximated by projected gradient ascent on the
misreport, independently per (profile, agent): each step moves along
the utility gradient and clamps back into the valuation support box.
The iterate with the highest utility seen so far is kept, so longer
runs and extra restarts can only raise the estimate.

Training uses a short warm-started ascent (25 steps from the truthful
bid); evaluation uses the long protocol (1000 steps from each of 10
random restarts, best taken).

Any mechanism with a ``misreport_eval(profiles, misreports, need_grad)``
method can be searched; :class:`AuctionModel` instances are handled
natively, and :class:`SecondPriceAuction` is a hand-wired strategyproof
reference whose regret should be zero.
"""

from __future__ import annotations

import numpy as np

from .diffcore import Tape, backward
from .model import AuctionModel, utility_nodes
from .valuations import SettingSpec, rng_stream

__all__ = [
    "optimize_misreports",
    "misreport_utilities",
    "truthful_utilities",
    "regret_samples",
    "regret_estimate",
    "evaluation_regret",
    "SecondPriceAuction",
]


def _model_eval(model: AuctionModel, stacked_bids, stacked_values,
                need_grad: bool):
    """Utilities (and bid gradients) for a stacked (n*B, n, m) bid array."""
    nb, n, m = stacked_bids.shape
    batch = nb // n
    tape = Tape()
    bids = tape.leaf(stacked_bids, requires_grad=need_grad)
    nodes = model.forward_nodes(tape, bids)
    util = utility_nodes(tape, nodes, tape.constant(stacked_values))
    u_all = tape.value(util)
    # block i holds the variant where agent i misreports; pick (row i)
    u = u_all.reshape(n, batch, n)[np.arange(n), :, np.arange(n)].T.copy()
    if not need_grad:
        return u, None
    sel = np.zeros((nb, n))
    sel.reshape(n, batch, n)[np.arange(n), :, np.arange(n)] = 1.0
    target = tape.sum(tape.mul(util, tape.constant(sel)))
    g_all = backward(tape, target)[bids]
    g = g_all.reshape(n, batch, n, m)[np.arange(n), :, np.arange(n), :]
    return u, np.ascontiguousarray(g.transpose(1, 0, 2))


def _eval(mech, profiles, misreports, need_grad, scratch=None):
    """Dispatch one utility/gradient evaluation for a misreport set."""
    if hasattr(mech, "misreport_eval"):
        return mech.misreport_eval(profiles, misreports, need_grad)
    batch, n, m = profiles.shape
    if scratch is None:
        scratch = np.tile(profiles, (n, 1, 1))
    view = scratch.reshape(n, batch, n, m)
    view[np.arange(n), :, np.arange(n), :] = misreports.transpose(1, 0, 2)
    values = np.tile(profiles, (n, 1, 1))
    return _model_eval(mech, scratch, values, need_grad)


def optimize_misreports(mech, profiles, setting: SettingSpec,
                        steps: int = 25, rate: float = 0.1,
                        init: str = "truthful", rng=None) -> np.ndarray:
    """Best misreports found by projected gradient ascent.

    ``rate`` is a fraction of each item's support width.  ``init`` is
    ``"truthful"`` or ``"uniform"`` (random in support; needs ``rng``).
    A non-finite gradient or utility freezes that (profile, agent) pair
    at its last finite iterate.  Returns a (batch, n, m) array.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if rate <= 0:
        raise ValueError("rate must be > 0")
    profiles = np.asarray(profiles, dtype=np.float64)
    batch, n, m = profiles.shape
    low, high = setting.low, setting.high
    if init == "truthful":
        cur = profiles.copy()
    elif init == "uniform":
        if rng is None:
            raise ValueError("uniform init needs an rng")
        cur = rng.uniform(low, high, size=profiles.shape)
    else:
        raise ValueError(f"unknown init {init!r}")

    step_size = rate * (high - low)  # per-item absolute step
    scratch = np.tile(profiles, (n, 1, 1)) if not hasattr(mech, "misreport_eval") else None
    best = cur.copy()
    best_u = np.full((batch, n), -np.inf)
    active = np.ones((batch, n), dtype=bool)
    for step in range(steps + 1):
        last = step == steps
        u, g = _eval(mech, profiles, cur, need_grad=not last, scratch=scratch)
        ok = np.isfinite(u)
        improved = ok & (u > best_u)
        best_u = np.where(improved, u, best_u)
        best = np.where(improved[:, :, None], cur, best)
        if last:
            break
        finite = ok & np.isfinite(g).all(axis=2)
        active &= finite
        cand = np.clip(cur + step_size * g, low, high)
        cur = np.where(active[:, :, None], cand, cur)
    return best


def misreport_utilities(mech, profiles, misreports) -> np.ndarray:
    """u_i(v_i; (v'_i, v_-i)) per profile and agent, shape (batch, n)."""
    u, _ = _eval(mech, np.asarray(profiles, dtype=np.float64),
                 np.asarray(misreports, dtype=np.float64), need_grad=False)
    return u


def truthful_utilities(mech, profiles) -> np.ndarray:
    """u_i(v_i; v): everyone bids their valuation."""
    profiles = np.asarray(profiles, dtype=np.float64)
    return misreport_utilities(mech, profiles, profiles)


def regret_samples(mech, profiles, misreports) -> np.ndarray:
    """Per-(profile, agent) hinge max(0, u' - u), shape (batch, n)."""
    gain = misreport_utilities(mech, profiles, misreports) - \
        truthful_utilities(mech, profiles)
    return np.clip(gain, 0.0, None)


def regret_estimate(mech, profiles, misreports) -> np.ndarray:
    """Per-agent mean regret over the batch; never negative."""
    return regret_samples(mech, profiles, misreports).mean(axis=0)


def evaluation_regret(mech, profiles, setting: SettingSpec,
                         steps: int = 1000, restarts: int = 10,
                         rate: float = 0.1, seed: int = 0) -> np.ndarray:
    """Evaluation-grade regret: best of several random-restart ascents.

    Returns per-(profile, agent) regret, shape (batch, n).  Best-iterate
    tracking inside each ascent plus the max over restarts make the
    estimate monotone in both steps and restarts.
    """
    profiles = np.asarray(profiles, dtype=np.float64)
    batch, n, _ = profiles.shape
    u_truth = truthful_utilities(mech, profiles)
    best_u = np.full((batch, n), -np.inf)
    for r in range(restarts):
        rng = rng_stream(seed, "misreport-init", index=r)
        mis = optimize_misreports(mech, profiles, setting, steps=steps,
                                  rate=rate, init="uniform", rng=rng)
        best_u = np.maximum(best_u, misreport_utilities(mech, profiles, mis))
    return np.clip(best_u - u_truth, 0.0, None)


class SecondPriceAuction:
    """Single-item second-price auction with a reserve; strategyproof.

    Used as an analytic reference: its regret is exactly zero, so any
    positive estimate from the search protocol is estimator error.  The
    allocation is piecewise constant, hence the misreport gradient is
    zero almost everywhere and is reported as exactly zero.
    """

    def __init__(self, n: int, reserve: float, low: float = 0.0,
                 high: float = 1.0):
        if n < 1:
            raise ValueError("need at least one bidder")
        self.n = n
        self.m = 1
        self.reserve = float(reserve)
        self.low = float(low)
        self.high = float(high)

    def setting(self) -> SettingSpec:
        return SettingSpec("custom", self.n, 1, "additive",
                           (self.low,), (self.high,), (0,), (0,))

    def outcomes(self, bids):
        """Allocation (batch, n, 1) and payments (batch, n); ties to the
        lowest agent index."""
        b = np.asarray(bids, dtype=np.float64)
        batch, n, _ = b.shape
        flat = b[:, :, 0]
        winner = flat.argmax(axis=1)  # argmax takes the first maximum
        rows = np.arange(batch)
        wins = flat[rows, winner] >= self.reserve
        z = np.zeros_like(b)
        z[rows, winner, 0] = np.where(wins, 1.0, 0.0)
        masked = flat.copy()
        masked[rows, winner] = -np.inf
        second = masked.max(axis=1) if n > 1 else np.full(batch, -np.inf)
        price = np.maximum(second, self.reserve)
        p = np.zeros((batch, n))
        p[rows, winner] = np.where(wins, price, 0.0)
        return z, p

    def misreport_eval(self, profiles, misreports, need_grad=True):
        batch, n, m = profiles.shape
        u = np.empty((batch, n))
        for i in range(n):
            bids = profiles.copy()
            bids[:, i, :] = misreports[:, i, :]
            z, p = self.outcomes(bids)
            u[:, i] = profiles[:, i, 0] * z[:, i, 0] - p[:, i]
        g = np.zeros_like(profiles) if need_grad else None
        return u, g
