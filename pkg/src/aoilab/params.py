"""Scheme parameters shared by the analytic and simulation layers."""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class SchemeParams:
    """Parameters of the three-phase cooperative update scheme.

    ``n`` nodes are partitioned into ``n // m`` cells of ``m`` nodes each.
    In-cell transmission delays are i.i.d. exponential with rate
    ``lambda_intra``; cell-to-cell delays are i.i.d. exponential with rate
    ``lambda_inter``.
    """

    n: int
    m: int
    lambda_intra: float = 1.0
    lambda_inter: float = 1.0

    def __post_init__(self) -> None:
        if not isinstance(self.n, int) or self.n < 1:
            raise ValueError(f"n must be a positive integer, got {self.n!r}")
        if not isinstance(self.m, int) or self.m < 1:
            raise ValueError(f"m must be a positive integer, got {self.m!r}")
        if self.m > self.n:
            raise ValueError(f"m={self.m} exceeds n={self.n}")
        if self.n % self.m != 0:
            raise ValueError(
                f"n={self.n} is not divisible by m={self.m}; the model uses "
                f"exactly n/m cells of m nodes each"
            )
        if not self.lambda_intra > 0:
            raise ValueError(f"lambda_intra must be > 0, got {self.lambda_intra}")
        if not self.lambda_inter > 0:
            raise ValueError(f"lambda_inter must be > 0, got {self.lambda_inter}")

    @property
    def cells(self) -> int:
        return self.n // self.m

    @property
    def b(self) -> float:
        """Cell-size exponent: the b solving m = n**b (1.0 when n == m)."""
        if self.n == self.m:
            return 1.0
        return math.log(self.m) / math.log(self.n)
