"""Monte Carlo estimates with standard errors."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

CAP_FRACTION_LIMIT = 0.01


class InvalidEstimateError(RuntimeError):
    """Too many replicas were truncated by the population cap."""


@dataclass(frozen=True)
class Estimate:
    mean: float
    stderr: float
    replicas: int
    capped: int = 0

    @classmethod
    def from_samples(cls, values, capped: int = 0) -> "Estimate":
        v = np.asarray(values, dtype=float)
        if v.size == 0:
            return cls(math.nan, math.nan, 0, capped)
        mean = math.fsum(v) / v.size
        if v.size < 2 or np.all(v == v[0]):
            se = 0.0  # constant samples: avoid round-off noise from the mean
        else:
            se = float(np.std(v, ddof=1) / math.sqrt(v.size))
        return cls(mean, se, int(v.size), int(capped))

    @property
    def valid(self) -> bool:
        total = self.replicas + self.capped
        return total > 0 and self.capped <= CAP_FRACTION_LIMIT * total

    def check(self) -> "Estimate":
        if not self.valid:
            raise InvalidEstimateError(
                f"{self.capped} of {self.replicas + self.capped} replicas hit the population cap"
            )
        return self

    def scaled(self, factor: float) -> "Estimate":
        return Estimate(self.mean * factor, self.stderr * abs(factor), self.replicas, self.capped)

    def within(self, reference: float, n_se: float = 3.0, slack: float = 0.0) -> bool:
        return abs(self.mean - reference) <= n_se * self.stderr + slack

    def to_dict(self) -> dict:
        return {"mean": self.mean, "stderr": self.stderr,
                "replicas": self.replicas, "capped": self.capped}
