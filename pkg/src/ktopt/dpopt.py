"""Correction of recorded answers by discounted-cost minimization.

Detected violations mark earlier answers of contradictory same-skill
pairs as candidates for flipping.  A flip at subsequence position ``q``
costs ``gamma ** q``; every violation still present in the corrected
states costs ``beta * gamma ** early`` on top.  The solver returns the
flip set minimizing the total, with ties broken by fewest flips and then
by the lexicographically earliest flip set.  Because ``beta > 1`` a flip
that resolves at least one violation without creating new ones always
pays off, while needless flips never do.

A position is considered flippable when some reachable assignment of the
other candidates makes it the early element of a violating pair; this
closure is what both the solver and the exhaustive oracle search over.
Pairs never interact across connected components of the resulting
conflict graph, so components are solved independently and exactly (by
bounded depth-first search) unless a component exceeds ``max_exact``
positions, in which case a deterministic single-flip descent takes over.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

from .detect import CoherenceParams, ContinuityParams, ControlDecision, PairContext, control_value
from .ingest import Interaction, StudentSequence
from .stats import DEFAULT_MU, SequenceIndex, StateDifficultySeq, StateEntry

__all__ = [
    "InvalidControlError",
    "DpParams",
    "PartitionParams",
    "Violation",
    "OptimizedSeq",
    "CorrectionRecord",
    "step",
    "stage_cost",
    "violations",
    "solve_bellman",
    "brute_force_oracle",
    "partition",
    "optimize_student",
    "corrections_to_csv",
]

PerfFn = Callable[[int, int], float]


class InvalidControlError(ValueError):
    """A control would push a state outside {0, 1}."""


@dataclass(frozen=True)
class DpParams:
    """Cost weights and predicate thresholds for one optimization run."""

    gamma: float = 1.0
    beta: float = 2.0
    coh: CoherenceParams = field(default_factory=CoherenceParams)
    con: ContinuityParams = field(default_factory=ContinuityParams)
    use_perf: bool = True
    max_exact: int = 24

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.beta <= 1.0:
            raise ValueError(f"beta must exceed 1, got {self.beta}")
        if self.max_exact < 1:
            raise ValueError("max_exact must be positive")


@dataclass(frozen=True)
class PartitionParams:
    """Length of the index ranges used by partition-local optimization."""

    p: int = 50

    def __post_init__(self):
        if self.p < 1:
            raise ValueError(f"partition length must be positive, got {self.p}")


@dataclass(frozen=True)
class Violation:
    early: int
    late: int
    v: int
    fired: tuple[str, ...] = ()


@dataclass(frozen=True)
class OptimizedSeq:
    """Result of one solve: corrected states and the cost breakdown."""

    corrected_states: tuple[int, ...]
    flips: tuple[int, ...]
    total_cost: float
    residual_violations: int

    def __post_init__(self):
        if any(s not in (0, 1) for s in self.corrected_states):
            raise ValueError("corrected states must be binary")
        if any(not 0 <= q < len(self.corrected_states) for q in self.flips):
            raise ValueError("flip positions out of range")


@dataclass(frozen=True)
class CorrectionRecord:
    student_id: int
    position: int
    skill_id: int
    old_state: int
    new_state: int
    fired: str
    cost: float


def step(state: int, u: int) -> int:
    """Apply a control to a binary state."""
    if state not in (0, 1):
        raise InvalidControlError(f"state must be 0 or 1, got {state}")
    if u not in (-1, 0, 1):
        raise InvalidControlError(f"control must be -1, 0 or 1, got {u}")
    nxt = state + u
    if nxt not in (0, 1):
        raise InvalidControlError(f"control {u} leaves state {state} out of range")
    return nxt


def stage_cost(u: int) -> float:
    """A correction costs its magnitude; leaving the record alone is free."""
    if u not in (-1, 0, 1):
        raise InvalidControlError(f"control must be -1, 0 or 1, got {u}")
    return float(abs(u))


def _orientations(seq: StateDifficultySeq, perf_fn: PerfFn,
                  params: DpParams) -> dict[tuple[int, int], dict[tuple[int, int], ControlDecision]]:
    """For every ordered pair, the decisions its two contrasting state
    assignments would trigger.  Pairs that can never fire are dropped."""
    entries = seq.entries
    table: dict[tuple[int, int], dict[tuple[int, int], ControlDecision]] = {}
    for i in range(len(entries)):
        for j in range(i + 1, len(entries)):
            gap = entries[j].position - entries[i].position
            perf = perf_fn(i, j)
            per_orient = {}
            for se, sl in ((0, 1), (1, 0)):
                ctx = PairContext(
                    state_early=se, state_late=sl,
                    df_early=entries[i].difficulty, df_late=entries[j].difficulty,
                    perf=perf, gap=gap)
                dec = control_value(ctx, params.coh, params.con, use_perf=params.use_perf)
                if dec.v != 0:
                    per_orient[(se, sl)] = dec
            if per_orient:
                table[(i, j)] = per_orient
    return table


def violations(seq: StateDifficultySeq, perf_fn: PerfFn,
               params: DpParams) -> list[Violation]:
    """All pairs violating under the sequence's current states."""
    states = seq.states()
    out = []
    for (i, j), orient in sorted(_orientations(seq, perf_fn, params).items()):
        dec = orient.get((states[i], states[j]))
        if dec is not None:
            out.append(Violation(early=i, late=j, v=dec.v, fired=dec.fired))
    return out


def _closure(states: list[int], orient_table) -> list[int]:
    """Positions that can appear as the early element of a violation in
    some assignment reachable by flipping already-flippable positions."""
    flippable: set[int] = set()
    changed = True
    while changed:
        changed = False
        for (i, j), orient in orient_table.items():
            if i in flippable:
                continue
            si = (states[i],) if i not in flippable else (0, 1)
            sj = (states[j],) if j not in flippable else (0, 1)
            if any((a, b) in orient for a in si for b in sj):
                flippable.add(i)
                changed = True
    return sorted(flippable)


def _evaluate(states: list[int], flips: tuple[int, ...], orient_table,
              gamma: float, beta: float) -> tuple[float, list[tuple[int, int]]]:
    """Canonical cost of a flip set: flip terms in ascending position
    order, then residual terms in ascending pair order."""
    corrected = list(states)
    for q in flips:
        corrected[q] ^= 1
    cost = 0.0
    for q in flips:
        cost += gamma ** q
    residual = []
    for (i, j) in sorted(orient_table):
        if (corrected[i], corrected[j]) in orient_table[(i, j)]:
            residual.append((i, j))
    for (i, j) in residual:
        cost += beta * gamma ** i
    return cost, residual


def _better(a: tuple[float, int, tuple[int, ...]],
            b: tuple[float, int, tuple[int, ...]] | None) -> bool:
    return b is None or a < b


def _solve_component(nodes: list[int], states: list[int], rel_pairs, orient_table,
                     gamma: float, beta: float, max_exact: int) -> tuple[int, ...]:
    if len(nodes) > max_exact:
        return _descend_component(nodes, states, rel_pairs, orient_table, gamma, beta)

    node_index = {q: t for t, q in enumerate(nodes)}
    # pairs become decidable once their last in-component endpoint is assigned
    determined_at: list[list[tuple[int, int]]] = [[] for _ in nodes]
    for (i, j) in rel_pairs:
        last = max(node_index.get(i, -1), node_index.get(j, -1))
        determined_at[last].append((i, j))

    best: list[tuple[float, int, tuple[int, ...]] | None] = [None]
    assignment = dict()

    def leaf_candidate(flipped: set[int]):
        flips = tuple(sorted(flipped))
        cost = 0.0
        for q in flips:
            cost += gamma ** q
        corrected = {q: states[q] ^ (1 if q in flipped else 0) for q in nodes}
        for (i, j) in rel_pairs:
            si = corrected.get(i, states[i])
            sj = corrected.get(j, states[j])
            if (si, sj) in orient_table[(i, j)]:
                cost += beta * gamma ** i
        return (cost, len(flips), flips)

    def dfs(t: int, flipped: set[int], partial: float):
        if best[0] is not None and partial > best[0][0]:
            return
        if t == len(nodes):
            cand = leaf_candidate(flipped)
            if _better(cand, best[0]):
                best[0] = cand
            return
        q = nodes[t]
        for do_flip in (False, True):
            add = gamma ** q if do_flip else 0.0
            assignment[q] = states[q] ^ (1 if do_flip else 0)
            if do_flip:
                flipped.add(q)
            for (i, j) in determined_at[t]:
                si = assignment.get(i, states[i])
                sj = assignment.get(j, states[j])
                if (si, sj) in orient_table[(i, j)]:
                    add += beta * gamma ** i
            dfs(t + 1, flipped, partial + add)
            if do_flip:
                flipped.discard(q)
        del assignment[q]

    dfs(0, set(), 0.0)
    return best[0][2]


def _descend_component(nodes, states, rel_pairs, orient_table, gamma, beta):
    """Single-flip descent for components too large to enumerate."""
    def comp_cost(flipped: frozenset):
        flips = tuple(sorted(flipped))
        cost = 0.0
        for q in flips:
            cost += gamma ** q
        for (i, j) in rel_pairs:
            si = states[i] ^ (1 if i in flipped else 0)
            sj = states[j] ^ (1 if j in flipped else 0)
            if (si, sj) in orient_table[(i, j)]:
                cost += beta * gamma ** i
        return (cost, len(flips), flips)

    current = frozenset()
    score = comp_cost(current)
    while True:
        best_move = None
        for q in nodes:
            cand = current ^ {q}
            cand_score = comp_cost(cand)
            if cand_score < score and (best_move is None or cand_score < best_move[0]):
                best_move = (cand_score, cand)
        if best_move is None:
            return tuple(sorted(current))
        score, current = best_move


def solve_bellman(seq: StateDifficultySeq, perf_fn: PerfFn,
                  params: DpParams) -> OptimizedSeq:
    """Find the cost-minimizing flip set for one subsequence.

    Exact whenever no conflict component exceeds ``params.max_exact``
    flippable positions; in particular it always agrees with
    :func:`brute_force_oracle` on inputs that oracle accepts.
    """
    states = seq.states()
    orient_table = _orientations(seq, perf_fn, params)
    flippable = _closure(states, orient_table)

    if flippable:
        comp_of = {q: q for q in flippable}

        def find(q):
            while comp_of[q] != q:
                comp_of[q] = comp_of[comp_of[q]]
                q = comp_of[q]
            return q

        flippable_set = set(flippable)
        for (i, j) in orient_table:
            if i in flippable_set and j in flippable_set:
                ri, rj = find(i), find(j)
                if ri != rj:
                    comp_of[ri] = rj

        comps: dict[int, list[int]] = {}
        for q in flippable:
            comps.setdefault(find(q), []).append(q)

        all_flips: list[int] = []
        for root in sorted(comps):
            nodes = sorted(comps[root])
            node_set = set(nodes)
            rel_pairs = sorted(p for p in orient_table if p[0] in node_set)
            all_flips.extend(_solve_component(nodes, states, rel_pairs, orient_table,
                                              params.gamma, params.beta, params.max_exact))
        flips = tuple(sorted(all_flips))
    else:
        flips = ()

    cost, residual = _evaluate(states, flips, orient_table, params.gamma, params.beta)
    corrected = list(states)
    for q in flips:
        corrected[q] ^= 1
    return OptimizedSeq(corrected_states=tuple(corrected), flips=flips,
                        total_cost=cost, residual_violations=len(residual))


def brute_force_oracle(seq: StateDifficultySeq, perf_fn: PerfFn,
                       params: DpParams, max_positions: int = 20) -> OptimizedSeq:
    """Exhaustively enumerate every flip subset and keep the best.

    Refuses inputs with more than ``max_positions`` flippable positions.
    Deliberately straight-line: per-pair decisions are recomputed from the
    predicates, candidates are compared by (cost, flip count, flip set).
    """
    entries = seq.entries
    states = seq.states()
    n = len(entries)

    orient: dict[tuple[int, int], dict[tuple[int, int], ControlDecision]] = {}
    for i in range(n):
        for j in range(i + 1, n):
            per = {}
            for se, sl in ((0, 1), (1, 0)):
                ctx = PairContext(
                    state_early=se, state_late=sl,
                    df_early=entries[i].difficulty, df_late=entries[j].difficulty,
                    perf=perf_fn(i, j), gap=entries[j].position - entries[i].position)
                dec = control_value(ctx, params.coh, params.con, use_perf=params.use_perf)
                if dec.v != 0:
                    per[(se, sl)] = dec
            if per:
                orient[(i, j)] = per

    flippable: set[int] = set()
    while True:
        added = False
        for (i, j), per in orient.items():
            if i in flippable:
                continue
            for si in ((states[i],) if i not in flippable else (0, 1)):
                for sj in ((states[j],) if j not in flippable else (0, 1)):
                    if (si, sj) in per:
                        flippable.add(i)
                        added = True
        if not added:
            break
    nodes = sorted(flippable)
    if len(nodes) > max_positions:
        raise ValueError(f"{len(nodes)} flippable positions exceed the "
                         f"oracle limit of {max_positions}")

    pair_order = sorted(orient)
    best = None
    for mask in range(1 << len(nodes)):
        flips = tuple(nodes[t] for t in range(len(nodes)) if mask >> t & 1)
        corrected = list(states)
        for q in flips:
            corrected[q] ^= 1
        cost = 0.0
        for q in flips:
            cost += params.gamma ** q
        residual = 0
        for (i, j) in pair_order:
            if (corrected[i], corrected[j]) in orient[(i, j)]:
                cost += params.beta * params.gamma ** i
                residual += 1
        cand = (cost, len(flips), flips, residual, tuple(corrected))
        if best is None or cand[:3] < best[:3]:
            best = cand
    return OptimizedSeq(corrected_states=best[4], flips=best[2],
                        total_cost=best[0], residual_violations=best[3])


def partition(n: int, p: int) -> list[tuple[int, int]]:
    """Index ranges of length ``p`` covering [0, n), remainder merged into
    the last range."""
    if p < 1:
        raise ValueError(f"partition length must be positive, got {p}")
    if n <= 0:
        return []
    t = max(1, n // p)
    ranges = [(k * p, (k + 1) * p) for k in range(t)]
    ranges[-1] = (ranges[-1][0], n)
    return ranges


def optimize_student(seq: StudentSequence, params: DpParams,
                     part: PartitionParams | None = None,
                     ov: bool = True, su: bool = False,
                     mu: float = DEFAULT_MU,
                     limit: int | None = None,
                     ) -> tuple[StudentSequence, list[CorrectionRecord]]:
    """Correct one student's record.

    With ``su`` the sequence is first optimized partition by partition;
    with ``ov`` a whole-sequence pass follows over the already-corrected
    states.  Interval performance always comes from the observed answers,
    so repeating the call cannot find anything new.  ``limit`` restricts
    correction to the leading positions.  The input is never modified.
    """
    work = StudentSequence(
        student_id=seq.student_id,
        interactions=[Interaction(
            question_id=it.question_id, skill_id=it.skill_id,
            response=it.response, observed=it.observed,
            extra_skills=it.extra_skills, difficulty=it.difficulty,
        ) for it in seq.interactions])

    index = SequenceIndex(seq, mu=mu)
    records: list[CorrectionRecord] = []
    n = len(work.interactions) if limit is None else min(limit, len(work.interactions))

    def run_window(start: int, end: int) -> None:
        skills = sorted({k for pos in range(start, end)
                         for k in work.interactions[pos].all_skills()})
        # one skill at a time, re-reading states so earlier flips stay visible
        for skill_id in skills:
            entries = []
            for pos in range(start, end):
                it = work.interactions[pos]
                if skill_id not in it.all_skills():
                    continue
                if it.difficulty is None:
                    raise ValueError(f"interaction at position {pos} has no difficulty")
                entries.append(StateEntry(state=it.response, difficulty=it.difficulty,
                                          position=pos))
            if len(entries) < 2:
                continue
            sub = StateDifficultySeq(skill_id=skill_id, entries=entries)

            def perf_fn(i: int, j: int, _sub=sub) -> float:
                return index.performance(_sub.skill_id, _sub.entries[i].position,
                                         _sub.entries[j].position)

            found = violations(sub, perf_fn, params)
            fired_at: dict[int, set[str]] = {}
            for viol in found:
                fired_at.setdefault(viol.early, set()).update(viol.fired)
            solved = solve_bellman(sub, perf_fn, params)
            for q in solved.flips:
                pos = sub.entries[q].position
                it = work.interactions[pos]
                old = it.response
                it.response ^= 1
                names = "|".join(sorted(fired_at.get(q, {"closure"})))
                records.append(CorrectionRecord(
                    student_id=seq.student_id, position=pos, skill_id=skill_id,
                    old_state=old, new_state=it.response, fired=names,
                    cost=params.gamma ** q))

    if su and n > 0:
        p = (part or PartitionParams()).p
        for start, end in partition(n, p):
            run_window(start, end)
    if ov and n > 0:
        run_window(0, n)

    return work, records


def corrections_to_csv(records: list[CorrectionRecord], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["student_id", "position", "skill", "old_state",
                    "new_state", "fired_predicate", "cost"])
        for r in records:
            w.writerow([r.student_id, r.position, r.skill_id, r.old_state,
                        r.new_state, r.fired, repr(r.cost)])
