"""Ranking metrics: AC@k, Avg@5 and MRR."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

from .errors import EmptyInput, RootNotRanked
from .types import ServiceId

KS = (1, 2, 3, 4, 5)


@dataclass
class EvalReport:
    ac: dict            # k -> AC@k for k in 1..5
    avg5: float
    mrr: float
    per_case: list = field(default_factory=list)   # (case_id, rank of true root)

    def summary(self) -> dict:
        return {"AC@1": self.ac[1], "AC@3": self.ac[3], "AC@5": self.ac[5],
                "Avg@5": self.avg5, "MRR": self.mrr}

    def to_json(self) -> dict:
        return {
            "metrics": self.summary(),
            "ac_by_k": {str(k): v for k, v in sorted(self.ac.items())},
            "n_cases": len(self.per_case),
            "per_case": [{"case_id": cid, "rank": int(r)} for cid, r in self.per_case],
        }

    def render(self) -> str:
        head = "| AC@1 | AC@3 | AC@5 | Avg@5 | MRR |"
        vals = " | ".join(f"{v:.3f}" for v in self.summary().values())
        return f"{head}\n|---|---|---|---|---|\n| {vals} |"


def _key(s):
    return s.name if isinstance(s, ServiceId) else s


def rank_of(ranking, root) -> int:
    """1-based position of ``root`` in ``ranking``."""
    target = _key(root)
    for pos, s in enumerate(ranking, start=1):
        if _key(s) == target:
            return pos
    raise RootNotRanked(f"true root {target!r} missing from ranking")


def evaluate(rankings) -> EvalReport:
    """Metrics over ``(ranking, root)`` or ``(case_id, ranking, root)`` items."""
    items = list(rankings)
    if not items:
        raise EmptyInput("evaluate needs at least one ranking")
    per_case = []
    for n, item in enumerate(items):
        if len(item) == 3:
            cid, ranking, root = item
        else:
            (ranking, root), cid = item, str(n)
        per_case.append((cid, rank_of(ranking, root)))
    # exact rational arithmetic, rounded once: results do not depend on summation order
    n = len(per_case)
    hits = {k: sum(1 for _, r in per_case if r <= k) for k in KS}
    ac = {k: float(Fraction(hits[k], n)) for k in KS}
    avg5 = float(Fraction(sum(hits.values()), len(KS) * n))
    mrr = float(sum(Fraction(1, r) for _, r in per_case) / n)
    return EvalReport(ac, avg5, mrr, per_case)
