from __future__ import annotations

from dataclasses import dataclass

# baseline of 100 queries per parameter for equation-solving extraction
TRAMER_FACTOR = 100


@dataclass(frozen=True)
class QueryBudget:
    """Query counts for recovering one first layer.

    ``P`` parameters per neuron (inputs + 1), ``N`` neurons, ``S`` search
    depth, ``D`` calibration exponent bound. Extra equations add to ``P`` in
    the search term only.
    """

    P: int
    N: int
    S: int
    D: int
    extras: int = 0

    def __post_init__(self):
        for k in ("P", "N", "S", "D"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be a positive integer")
        if self.P < 2 or self.extras < 0:
            raise ValueError("P must be at least 2 and extras non-negative")

    @property
    def Q(self) -> int:
        return (self.P + self.extras) * self.N * self.S

    @property
    def C(self) -> int:
        return (self.P - 1) * self.D

    @property
    def total(self) -> int:
        return self.Q + self.C

    @property
    def tramer(self) -> int:
        return self.P * self.N * TRAMER_FACTOR

    def input_centric(self, per_equation: int) -> int:
        """Projection when one equation for every neuron costs ``per_equation`` executions."""
        return (self.P + self.extras) * per_equation + self.C


def query_budget_estimate(P: int, N: int, S: int, D: int, extras: int = 0) -> QueryBudget:
    return QueryBudget(P, N, S, D, extras)
