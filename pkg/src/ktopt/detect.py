"""Violation predicates over ordered same-skill answer pairs.

Each predicate looks at two answers to the same skill: the earlier state
``state_early``, the later state ``state_late``, their normalized
difficulties, the interval performance ``perf`` between them and their
position gap.  Two coherence patterns catch answers that contradict the
difficulty ordering by a wide margin; two continuity patterns catch
state jumps over a moderate gap whose interval performance makes the
recorded answer implausible.  The control value maps fired predicates to
a correction direction for the earlier answer.

All threshold comparisons are strict, so pairs sitting exactly on a
threshold never fire.
"""

from __future__ import annotations

from dataclasses import dataclass

__all__ = [
    "CoherenceParams",
    "ContinuityParams",
    "PairContext",
    "ControlDecision",
    "coh1",
    "coh2",
    "con1",
    "con2",
    "control_value",
]


@dataclass(frozen=True)
class CoherenceParams:
    """Thresholds for the difficulty-contradiction predicates."""

    alpha: float = 0.8
    h: float = 0.7
    H: float = 2.8

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.h < 0:
            raise ValueError(f"h must be non-negative, got {self.h}")
        if self.H <= self.h:
            raise ValueError(f"H ({self.H}) must exceed h ({self.h})")


@dataclass(frozen=True)
class ContinuityParams:
    """Thresholds for the state-jump predicates.

    ``e`` is the minimum gap (exclusive) and ``l_max`` the maximum gap
    (inclusive); ``Y`` and ``y`` are the high and low performance cutoffs.
    """

    e: int = 2
    l_max: int = 7
    Y: float = 2.0
    y: float = 0.9

    def __post_init__(self):
        if not 1 <= self.e < self.l_max:
            raise ValueError(f"need 1 <= e < l_max, got e={self.e}, l_max={self.l_max}")
        if self.y <= 0:
            raise ValueError(f"y must be positive, got {self.y}")
        if self.Y <= self.y:
            raise ValueError(f"Y ({self.Y}) must exceed y ({self.y})")


@dataclass(frozen=True)
class PairContext:
    """Everything a predicate needs to know about one ordered pair."""

    state_early: int
    state_late: int
    df_early: float
    df_late: float
    perf: float
    gap: int

    def __post_init__(self):
        if self.state_early not in (0, 1) or self.state_late not in (0, 1):
            raise ValueError("states must be 0 or 1")
        if self.gap < 1:
            raise ValueError(f"gap must be >= 1, got {self.gap}")
        if self.perf < 0:
            raise ValueError(f"perf must be non-negative, got {self.perf}")


@dataclass(frozen=True)
class ControlDecision:
    """Correction direction for the earlier answer plus the evidence."""

    v: int
    fired: tuple[str, ...]

    def __post_init__(self):
        if self.v not in (-1, 0, 1):
            raise ValueError(f"control value must be -1, 0 or 1, got {self.v}")


def coh1(ctx: PairContext, params: CoherenceParams, use_perf: bool = True) -> bool:
    """Wrong on the much easier question, right on the harder one later,
    with interval performance above the slip floor."""
    return (ctx.state_early < ctx.state_late
            and ctx.df_early < ctx.df_late
            and abs(ctx.df_early - ctx.df_late) >= params.alpha
            and (not use_perf or ctx.perf > params.h))


def coh2(ctx: PairContext, params: CoherenceParams, use_perf: bool = True) -> bool:
    """Right on the much harder question, wrong on the easier one later,
    with interval performance below the guess ceiling."""
    return (ctx.state_early > ctx.state_late
            and ctx.df_early > ctx.df_late
            and abs(ctx.df_early - ctx.df_late) >= params.alpha
            and (not use_perf or ctx.perf < params.H))


def con1(ctx: PairContext, params: ContinuityParams, use_perf: bool = True) -> bool:
    """Wrong then right over a moderate gap despite high performance."""
    return (ctx.state_early < ctx.state_late
            and (not use_perf or ctx.perf > params.Y)
            and params.e < ctx.gap <= params.l_max)


def con2(ctx: PairContext, params: ContinuityParams, use_perf: bool = True) -> bool:
    """Right then wrong over a moderate gap despite poor performance."""
    return (ctx.state_early > ctx.state_late
            and (not use_perf or ctx.perf < params.y)
            and params.e < ctx.gap <= params.l_max)


def control_value(ctx: PairContext, coh: CoherenceParams,
                  con: ContinuityParams,
                  use_perf: bool = True) -> ControlDecision:
    """Evaluate all four predicates and decide the correction direction.

    +1 raises the earlier answer, -1 lowers it, 0 leaves it alone.  The
    raising patterns require ``state_early < state_late`` and the lowering
    ones the opposite, so the two directions can never fire together.
    With ``use_perf`` off every performance comparison counts as
    satisfied: coherence reduces to the difficulty contradiction alone
    and continuity to the bare state jump over its gap window.
    """
    fired = [name for name, hit in (
        ("coh1", coh1(ctx, coh, use_perf)),
        ("coh2", coh2(ctx, coh, use_perf)),
        ("con1", con1(ctx, con, use_perf)),
        ("con2", con2(ctx, con, use_perf)),
    ) if hit]

    if "coh1" in fired or "con1" in fired:
        v = 1
    elif "coh2" in fired or "con2" in fired:
        v = -1
    else:
        v = 0
    return ControlDecision(v=v, fired=tuple(fired))
