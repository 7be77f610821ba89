"""Learning revenue-maximizing, strategyproof, fair multi-item auctions.

The package trains neural-network auctions on sampled bidder valuations
under an augmented Lagrangian that trades revenue against ex-post regret
(strategyproofness) and a total-variation fairness constraint between
items.  See README.md for the experiment CLI.
"""

__version__ = "0.1.0"
