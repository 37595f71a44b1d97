"""Group-level evaluation: within-group correlations, best-of-K selection
with Random/Oracle baselines and gap-closed accounting, the overall/text
quality decomposition, and the throughput benchmark protocol.

A group is one (generator, prompt) pair holding K seeded samples with
paired text-quality and overall-quality MOS values and, optionally, a
predicted score per sample.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from statistics import median
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from .metrics import UndefinedCorrelationError, plcc, srocc

TARGETS = ("tq", "oq")


class EvaluationError(ValueError):
    """The group set cannot support the requested evaluation."""


class MissingScoreError(KeyError):
    """A group member lacks the predicted score needed for selection."""


@dataclass
class Member:
    sample_id: str
    tq_mos: float
    oq_mos: float
    score: Optional[float] = None

    def mos(self, target: str) -> float:
        if target == "tq":
            return self.tq_mos
        if target == "oq":
            return self.oq_mos
        raise ValueError(f"unknown target {target!r}")


@dataclass
class GroupRecord:
    generator: str
    prompt: str
    members: List[Member] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.members)


def _member_scores(group: GroupRecord, scores: Optional[Dict[str, float]]):
    out = []
    for m in group.members:
        s = scores.get(m.sample_id) if scores is not None else m.score
        if s is None:
            raise MissingScoreError(
                f"no score for sample {m.sample_id!r} in group "
                f"({group.generator}, {group.prompt})")
        out.append(float(s))
    return np.asarray(out)


# ---------------------------------------------------------------------------
# within-group correlation
# ---------------------------------------------------------------------------

@dataclass
class WithinGroupReport:
    target: str
    plcc_values: List[float]
    srocc_values: List[float]
    n_skipped: int

    @property
    def n_used(self) -> int:
        return len(self.srocc_values)

    def summary(self) -> dict:
        p = np.asarray(self.plcc_values)
        s = np.asarray(self.srocc_values)
        return {
            "target": self.target,
            "n_groups": self.n_used,
            "n_skipped": self.n_skipped,
            "plcc_mean": float(p.mean()), "plcc_std": float(p.std()),
            "plcc_median": float(np.median(p)),
            "srocc_mean": float(s.mean()), "srocc_std": float(s.std()),
            "srocc_median": float(np.median(s)),
        }


def within_group_corr(groups: Sequence[GroupRecord], target: str = "tq",
                      scores: Optional[Dict[str, float]] = None) -> WithinGroupReport:
    """Per-group PLCC/SROCC of predictions against MOS, with aggregates.

    Groups where either the MOS or the prediction is constant are skipped
    and counted in the report.
    """
    if target not in TARGETS:
        raise ValueError(f"target must be one of {TARGETS}")
    pv, sv, skipped = [], [], 0
    for g in groups:
        if g.k < 2:
            raise EvaluationError(
                f"group ({g.generator}, {g.prompt}) has K={g.k}; need K >= 2")
        pred = _member_scores(g, scores)
        mos = np.asarray([m.mos(target) for m in g.members])
        try:
            pv.append(plcc(pred, mos))
            sv.append(srocc(pred, mos))
        except UndefinedCorrelationError:
            skipped += 1
    if not pv:
        raise EvaluationError("every group was degenerate (constant MOS or scores)")
    return WithinGroupReport(target=target, plcc_values=pv, srocc_values=sv,
                             n_skipped=skipped)


# ---------------------------------------------------------------------------
# best-of-K selection
# ---------------------------------------------------------------------------

@dataclass
class SelectionResult:
    tq_mean: float
    oq_mean: float
    picked_ids: List[str]

    def mean(self, target: str) -> float:
        return self.tq_mean if target == "tq" else self.oq_mean


def best_of_k(groups: Sequence[GroupRecord],
              scores: Optional[Dict[str, float]] = None,
              tiebreak_seed: int = 0) -> SelectionResult:
    """Pick the top-scored member of every group; report mean selected MOS.

    Ties on the maximum score break by a seeded uniform choice among the
    tied members, so results are deterministic given the seed. Selection
    is invariant under strictly increasing transforms of the scorer.
    """
    rng = np.random.default_rng(tiebreak_seed)
    tq, oq, ids = [], [], []
    for g in groups:
        s = _member_scores(g, scores)
        best = np.flatnonzero(s == s.max())
        pick = int(best[0]) if len(best) == 1 else int(rng.choice(best))
        m = g.members[pick]
        tq.append(m.tq_mos)
        oq.append(m.oq_mos)
        ids.append(m.sample_id)
    if not ids:
        raise EvaluationError("no groups to select from")
    return SelectionResult(tq_mean=float(np.mean(tq)), oq_mean=float(np.mean(oq)),
                           picked_ids=ids)


@dataclass
class SelectionBaselines:
    """Random and Oracle reference rows for best-of-K accounting."""
    tq_random: float
    oq_random: float
    tq_oracle: float
    oq_oracle: float
    n_random_runs: int
    tq_random_se: float
    oq_random_se: float

    def random_mean(self, target: str) -> float:
        return self.tq_random if target == "tq" else self.oq_random

    def oracle_mean(self, target: str) -> float:
        return self.tq_oracle if target == "tq" else self.oq_oracle

    def gap_closed(self, selected_mean: float, target: str) -> Optional[float]:
        """(selected - random) / (oracle - random); None when undefined."""
        rand = self.random_mean(target)
        orac = self.oracle_mean(target)
        if orac == rand:
            return None
        return (selected_mean - rand) / (orac - rand)


def baselines_and_gap(groups: Sequence[GroupRecord], n_random_runs: int = 1000,
                      seed: int = 0) -> SelectionBaselines:
    """Monte Carlo Random baseline plus per-target Oracle.

    Random draws one member per group per run and averages the run means;
    Oracle takes the per-group maximum of the respective target.
    """
    if not groups:
        raise EvaluationError("no groups")
    rng = np.random.default_rng(seed)
    tq = np.asarray([[m.tq_mos for m in g.members] for g in groups], dtype=object)
    run_tq = np.empty(n_random_runs)
    run_oq = np.empty(n_random_runs)
    for r in range(n_random_runs):
        pick_tq = []
        pick_oq = []
        for g in groups:
            i = int(rng.integers(g.k))
            pick_tq.append(g.members[i].tq_mos)
            pick_oq.append(g.members[i].oq_mos)
        run_tq[r] = np.mean(pick_tq)
        run_oq[r] = np.mean(pick_oq)
    return SelectionBaselines(
        tq_random=float(run_tq.mean()),
        oq_random=float(run_oq.mean()),
        tq_oracle=float(np.mean([max(m.tq_mos for m in g.members) for g in groups])),
        oq_oracle=float(np.mean([max(m.oq_mos for m in g.members) for g in groups])),
        n_random_runs=n_random_runs,
        tq_random_se=float(run_tq.std(ddof=1) / np.sqrt(n_random_runs)) if n_random_runs > 1 else 0.0,
        oq_random_se=float(run_oq.std(ddof=1) / np.sqrt(n_random_runs)) if n_random_runs > 1 else 0.0,
    )


# ---------------------------------------------------------------------------
# overall-vs-text quality decomposition
# ---------------------------------------------------------------------------

@dataclass
class DecompositionReport:
    """Three-level association between overall and text MOS: pooled over
    all samples, across per-generator means, and within groups."""
    pooled_plcc: float
    pooled_srocc: float
    generator_plcc: Optional[float]
    generator_srocc: Optional[float]
    generator_note: Optional[str]
    within_mean: float
    within_std: float
    within_median: float
    n_within_used: int
    n_within_skipped: int

    def to_dict(self) -> dict:
        return {
            "pooled": {"plcc": self.pooled_plcc, "srocc": self.pooled_srocc},
            "between_generators": (
                None if self.generator_plcc is None
                else {"plcc": self.generator_plcc, "srocc": self.generator_srocc}),
            "note": self.generator_note,
            "within_group_srocc": {
                "mean": self.within_mean, "std": self.within_std,
                "median": self.within_median,
                "n_used": self.n_within_used, "n_skipped": self.n_within_skipped},
        }


def oq_tq_decomposition(groups: Sequence[GroupRecord]) -> DecompositionReport:
    """Correlate overall MOS with text MOS at pool, generator and group level."""
    if not groups:
        raise EvaluationError("no groups")
    oq_all = np.asarray([m.oq_mos for g in groups for m in g.members])
    tq_all = np.asarray([m.tq_mos for g in groups for m in g.members])

    by_gen: Dict[str, list] = {}
    for g in groups:
        by_gen.setdefault(g.generator, []).extend(g.members)
    gen_note = None
    gen_p = gen_s = None
    if len(by_gen) >= 2:
        gens = sorted(by_gen)
        oq_g = [float(np.mean([m.oq_mos for m in by_gen[k]])) for k in gens]
        tq_g = [float(np.mean([m.tq_mos for m in by_gen[k]])) for k in gens]
        try:
            gen_p = plcc(oq_g, tq_g)
            gen_s = srocc(oq_g, tq_g)
        except UndefinedCorrelationError:
            gen_note = "generator-level means are constant; level omitted"
    else:
        gen_note = "single generator; between-generator level omitted"

    within = []
    skipped = 0
    for g in groups:
        oq = [m.oq_mos for m in g.members]
        tq = [m.tq_mos for m in g.members]
        try:
            within.append(srocc(oq, tq))
        except (UndefinedCorrelationError, ValueError):
            skipped += 1
    if not within:
        raise EvaluationError("no group supported a within-group correlation")

    return DecompositionReport(
        pooled_plcc=plcc(oq_all, tq_all),
        pooled_srocc=srocc(oq_all, tq_all),
        generator_plcc=gen_p,
        generator_srocc=gen_s,
        generator_note=gen_note,
        within_mean=float(np.mean(within)),
        within_std=float(np.std(within)),
        within_median=float(median(within)),
        n_within_used=len(within),
        n_within_skipped=skipped,
    )


# ---------------------------------------------------------------------------
# throughput protocol
# ---------------------------------------------------------------------------

@dataclass
class FpsReport:
    runs: int
    warmup: int
    min_s: float
    median_s: float
    mean_s: float

    @property
    def fps(self) -> float:
        return 1.0 / self.min_s

    def to_dict(self) -> dict:
        return {"runs": self.runs, "warmup": self.warmup, "min_s": self.min_s,
                "median_s": self.median_s, "mean_s": self.mean_s, "fps": self.fps}


def fps_benchmark(scorer: Callable[[], object], runs: int = 500,
                  warmup: int = 10) -> FpsReport:
    """Time repeated invocations of a scorer on the same input.

    FPS is reported from the minimum elapsed time over the measured runs;
    warm-up invocations are excluded. Runs strictly serially on the
    calling thread.
    """
    if runs < 1:
        raise ValueError("need at least one measured run")
    for _ in range(warmup):
        scorer()
    times = np.empty(runs)
    for i in range(runs):
        t0 = time.perf_counter()
        scorer()
        times[i] = time.perf_counter() - t0
    return FpsReport(runs=runs, warmup=warmup,
                     min_s=float(times.min()),
                     median_s=float(np.median(times)),
                     mean_s=float(times.mean()))
