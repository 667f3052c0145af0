"""Question difficulty and interval performance statistics.

Difficulty of a question is the reciprocal of its smoothed correct rate:
``P = (C + 1) / (M + 2)`` over the attempts in the reference data,
``D = 1 / P``.  The normalized form ``d = 1 - P`` lives in (0, 1) and is
what the detection thresholds compare against; ``D`` is kept for
reporting.

Interval performance between two positions of one student is

    T = R1 / (skn + mu) + R2 / L + skn / L

where the interval is the strictly interior stretch between the two
positions, ``R1`` counts correct answers on the relevant skill inside it,
``R2`` correct answers on any skill, ``skn`` the relevant-skill questions
and ``L`` the position gap.
"""

from __future__ import annotations

import bisect
import csv
from dataclasses import dataclass, field

from .ingest import Dataset, StudentSequence

__all__ = [
    "DEFAULT_MU",
    "DifficultyTable",
    "IntervalContext",
    "StateEntry",
    "StateDifficultySeq",
    "compute_difficulty",
    "interval_performance",
    "interval_context",
    "SequenceIndex",
    "extract_skill_subsequences",
]

DEFAULT_MU = 1.0


@dataclass
class DifficultyTable:
    """Per-question attempt counts and derived difficulty values.

    ``rows[qid] = (M, C, P, D, d)``.  Questions absent from the reference
    data fall back to the mean smoothed correct rate of the table.
    """

    rows: dict[int, tuple[int, int, float, float, float]]

    def __post_init__(self):
        if not self.rows:
            raise ValueError("difficulty table must cover at least one question")

    @property
    def default_p(self) -> float:
        return sum(r[2] for r in self.rows.values()) / len(self.rows)

    def p(self, question_id: int) -> float:
        row = self.rows.get(question_id)
        return row[2] if row is not None else self.default_p

    def d(self, question_id: int) -> float:
        return 1.0 - self.p(question_id)

    def reciprocal(self, question_id: int) -> float:
        return 1.0 / self.p(question_id)

    def apply(self, dataset: Dataset) -> None:
        """Write normalized difficulty onto every interaction."""
        for seq in dataset.students:
            for it in seq.interactions:
                it.difficulty = self.d(it.question_id)

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["question_id", "attempts", "correct", "p", "reciprocal", "d"])
            for qid in sorted(self.rows):
                m, c, p, big_d, d = self.rows[qid]
                w.writerow([qid, m, c, repr(p), repr(big_d), repr(d)])


def compute_difficulty(dataset: Dataset) -> DifficultyTable:
    """Count observed attempts per question and derive smoothed difficulty.

    Counting uses the observed responses (never corrected ones) and every
    interaction exactly once, then writes ``d`` back onto the dataset.
    """
    attempts: dict[int, int] = {}
    correct: dict[int, int] = {}
    for seq in dataset.students:
        for it in seq.interactions:
            attempts[it.question_id] = attempts.get(it.question_id, 0) + 1
            correct[it.question_id] = correct.get(it.question_id, 0) + it.observed
    if not attempts:
        raise ValueError("dataset has no interactions")
    rows = {}
    for qid, m in attempts.items():
        c = correct[qid]
        p = (c + 1) / (m + 2)
        rows[qid] = (m, c, p, 1.0 / p, 1.0 - p)
    table = DifficultyTable(rows=rows)
    table.apply(dataset)
    return table


@dataclass
class IntervalContext:
    """Counts for one interval between two answered questions."""

    r1: int
    r2: int
    skn: int
    gap: int
    mu: float = DEFAULT_MU

    def __post_init__(self):
        if self.gap < 1:
            raise ValueError(f"position gap must be >= 1, got {self.gap}")
        if self.mu <= 0:
            raise ValueError(f"mu must be positive, got {self.mu}")
        if not 0 <= self.r1 <= self.skn:
            raise ValueError("r1 must lie in [0, skn]")
        if self.r2 < self.r1:
            raise ValueError("r2 counts all skills and cannot be below r1")
        if max(self.skn, self.r2) > self.gap - 1:
            raise ValueError("interval counts exceed the interior size")


def interval_performance(ctx: IntervalContext) -> float:
    return ctx.r1 / (ctx.skn + ctx.mu) + ctx.r2 / ctx.gap + ctx.skn / ctx.gap


@dataclass
class StateEntry:
    """One element of a same-skill subsequence."""

    state: int
    difficulty: float
    position: int

    def __post_init__(self):
        if self.state not in (0, 1):
            raise ValueError(f"state must be 0 or 1, got {self.state}")
        if not 0.0 <= self.difficulty < 1.0:
            raise ValueError(f"normalized difficulty must be in [0, 1), got {self.difficulty}")
        if self.position < 0:
            raise ValueError("position must be non-negative")


@dataclass
class StateDifficultySeq:
    """States and difficulties of one skill's questions, in answer order."""

    skill_id: int
    entries: list[StateEntry] = field(default_factory=list)

    def __post_init__(self):
        pos = [e.position for e in self.entries]
        if any(b <= a for a, b in zip(pos, pos[1:])):
            raise ValueError("entry positions must be strictly increasing")

    def __len__(self) -> int:
        return len(self.entries)

    def states(self) -> list[int]:
        return [e.state for e in self.entries]


class SequenceIndex:
    """Prefix-sum index over one student's observed responses.

    Interval counts come from the observed answers so that corrections of
    the representation never shift the performance measurements that
    justified them.
    """

    def __init__(self, seq: StudentSequence, mu: float = DEFAULT_MU):
        self.mu = mu
        n = len(seq.interactions)
        self._all_correct = [0] * (n + 1)
        for i, it in enumerate(seq.interactions):
            self._all_correct[i + 1] = self._all_correct[i] + it.observed
        self._skill_pos: dict[int, list[int]] = {}
        self._skill_correct: dict[int, list[int]] = {}
        for i, it in enumerate(seq.interactions):
            for k in it.all_skills():
                self._skill_pos.setdefault(k, []).append(i)
                pref = self._skill_correct.setdefault(k, [0])
                pref.append(pref[-1] + it.observed)

    def context(self, skill_id: int, early: int, late: int) -> IntervalContext:
        if late <= early:
            raise ValueError(f"late position {late} must exceed early {early}")
        r2 = self._all_correct[late] - self._all_correct[early + 1]
        pos = self._skill_pos.get(skill_id, [])
        lo = bisect.bisect_right(pos, early)
        hi = bisect.bisect_left(pos, late)
        skn = hi - lo
        pref = self._skill_correct.get(skill_id, [0])
        r1 = pref[hi] - pref[lo]
        return IntervalContext(r1=r1, r2=r2, skn=skn, gap=late - early, mu=self.mu)

    def performance(self, skill_id: int, early: int, late: int) -> float:
        return interval_performance(self.context(skill_id, early, late))


def interval_context(seq: StudentSequence, skill_id: int, early: int,
                     late: int, mu: float = DEFAULT_MU) -> IntervalContext:
    """Interval counts between two positions of a student sequence."""
    return SequenceIndex(seq, mu=mu).context(skill_id, early, late)


def extract_skill_subsequences(seq: StudentSequence,
                               limit: int | None = None) -> list[StateDifficultySeq]:
    """Project a student's sequence onto each skill practiced at least twice.

    Interactions must already carry difficulties.  ``limit`` restricts
    extraction to positions below it, which is how prefix-only correction
    runs are realized.  Subsequences are returned ordered by skill id;
    skills with a single occurrence are omitted.
    """
    by_skill: dict[int, list[StateEntry]] = {}
    for pos, it in enumerate(seq.interactions):
        if limit is not None and pos >= limit:
            break
        if it.difficulty is None:
            raise ValueError(f"interaction at position {pos} has no difficulty")
        for k in it.all_skills():
            by_skill.setdefault(k, []).append(
                StateEntry(state=it.response, difficulty=it.difficulty, position=pos))
    return [StateDifficultySeq(skill_id=k, entries=entries)
            for k, entries in sorted(by_skill.items()) if len(entries) >= 2]
