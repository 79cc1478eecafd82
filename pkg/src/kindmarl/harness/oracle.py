"""Matrix-game check: learned-path intentions vs. brute-force enumeration."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..eicm import ExactMatrixModel, intentions_all
from ..gridworlds import MatrixGame, MatrixGameSpec, matrix_game_oracle_intentions

TOLERANCE = 1e-9


@dataclass
class OracleReport:
    cases: int
    max_error: float
    out_of_range: int  # inclusive-denominator entries outside [0, 1]

    @property
    def passed(self) -> bool:
        return self.max_error <= TOLERANCE and self.out_of_range == 0


def run_oracle_suite(cases: int = 100, seed: int = 0, max_actions: int = 6) -> OracleReport:
    """Random tables, every joint action, both references and both denominators."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    bad = 0
    for _ in range(cases):
        m = int(rng.integers(2, max_actions + 1))
        spec = MatrixGameSpec.random(rng, m, n_features=int(rng.integers(1, 6)))
        env = MatrixGame(spec)
        for a1 in range(m):
            for a2 in range(m):
                env.reset(0)
                tr = env.step((a1, a2))
                for reference in ("previous", "current"):
                    model = ExactMatrixModel(spec, reference)
                    for literal in (False, True):
                        got = np.array([intentions_all(model, tr, k, eq4_literal=literal) for k in range(2)])
                        want = matrix_game_oracle_intentions(spec, (a1, a2), reference, literal)
                        worst = max(worst, float(np.max(np.abs(got - want))))
                        if not literal:
                            bad += int(np.sum((got < 0) | (got > 1)))
    return OracleReport(cases, worst, bad)
