"""Synthetic interaction logs with known latent answers.

Students hold a per-skill mastery level drawn uniformly from [0, 1].  A
question is latently solved exactly when mastery reaches its difficulty;
the observed answer then flips with the question's slip rate (right to
wrong) or guess rate (wrong to right).  Nonzero ``slip_spread`` and
``guess_spread`` give each question its own rate around the base values,
so questions differ in how noisy their records run.  Because the latent
answers are known, a corrected dataset can be scored for how much
injected noise it actually undid.

By default every skill concentrates its questions in one narrow
difficulty band, with band centers spread evenly across skills.  A
student is then either above or below everything a skill asks, so within
that skill the latent answers are constant and injected noise stands out
as a local anomaly.  Setting ``n_spread_skills`` makes the last skills
ladder their questions over the whole difficulty range instead, which
produces wide same-skill difficulty contrasts but also genuine mixed
answer patterns that corrections can flatten.  Skills arrive in bursts
controlled by ``persistence``; shorter bursts leave more isolated noise
that only wide-window evidence can reach.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .ingest import Dataset, Interaction, StudentSequence

__all__ = ["SynthConfig", "RecoveryReport", "generate", "score_recovery"]


@dataclass(frozen=True)
class SynthConfig:
    n_students: int = 500
    n_questions: int = 450
    n_skills: int = 10
    seq_len: int = 100
    slip: float = 0.10
    guess: float = 0.10
    mastery_model: str = "static"
    drift_step: float = 0.01
    slip_spread: float = 0.0
    guess_spread: float = 0.0
    persistence: float = 0.94
    band_width: float = 0.008
    center_lo: float = 0.12
    center_hi: float = 0.88
    n_spread_skills: int = 0
    spread_lo: float = 0.06
    spread_hi: float = 0.94
    seed: int = 0

    def __post_init__(self):
        if self.n_students < 1 or self.n_questions < 1 or self.n_skills < 1:
            raise ValueError("sizes must be positive")
        if self.n_questions < self.n_skills:
            raise ValueError("need at least one question per skill")
        if self.seq_len < 1:
            raise ValueError("seq_len must be positive")
        if not 0.0 <= self.slip < 1.0 or not 0.0 <= self.guess < 1.0:
            raise ValueError("slip and guess must lie in [0, 1)")
        if self.slip_spread < 0.0 or self.guess_spread < 0.0:
            raise ValueError("noise spreads must be non-negative")
        if self.slip - self.slip_spread < 0.0 or self.slip + self.slip_spread >= 1.0:
            raise ValueError("slip_spread must keep per-question rates in [0, 1)")
        if self.guess - self.guess_spread < 0.0 or self.guess + self.guess_spread >= 1.0:
            raise ValueError("guess_spread must keep per-question rates in [0, 1)")
        if self.mastery_model not in ("static", "drifting"):
            raise ValueError(f"unknown mastery model {self.mastery_model!r}")
        if not 0.0 <= self.persistence < 1.0:
            raise ValueError("persistence must lie in [0, 1)")
        if not 0.0 < self.band_width <= 0.25:
            raise ValueError("band width must lie in (0, 0.25]")
        if not 0.0 < self.center_lo < self.center_hi < 1.0:
            raise ValueError("band centers must satisfy 0 < lo < hi < 1")
        if not 0 <= self.n_spread_skills <= self.n_skills:
            raise ValueError("spread skill count must not exceed the skill count")
        if not 0.0 < self.spread_lo < self.spread_hi < 1.0:
            raise ValueError("spread range must satisfy 0 < lo < hi < 1")


_SPREAD_RUNGS = 4


def _question_bank(cfg: SynthConfig, rng: random.Random):
    """Assign each question a skill, a banded difficulty and noise rates.

    The first skills are polar: each keeps its questions within
    ``band_width`` of one center, centers evenly spaced over
    [center_lo, center_hi].  The last ``n_spread_skills`` ladder their
    questions over rungs spanning [spread_lo, spread_hi] instead.
    Per-question slip and guess rates sit uniformly within the
    configured spread around the base rates; zero spread draws nothing
    so the stream stays compatible with spreadless configs.
    """
    skills = [q % cfg.n_skills for q in range(cfg.n_questions)]
    by_skill: dict[int, list[int]] = {}
    for q, k in enumerate(skills):
        by_skill.setdefault(k, []).append(q)
    n_polar = cfg.n_skills - cfg.n_spread_skills
    span = cfg.center_hi - cfg.center_lo
    centers = [cfg.center_lo + (span * j / (n_polar - 1) if n_polar > 1 else span / 2)
               for j in range(n_polar)]
    rungs = [cfg.spread_lo + (cfg.spread_hi - cfg.spread_lo) * r / (_SPREAD_RUNGS - 1)
             for r in range(_SPREAD_RUNGS)]
    difficulty = [0.0] * cfg.n_questions
    for k, pool in by_skill.items():
        for t, q in enumerate(pool):
            c = centers[k] if k < n_polar else rungs[t % _SPREAD_RUNGS]
            difficulty[q] = rng.uniform(max(0.01, c - cfg.band_width),
                                        min(0.99, c + cfg.band_width))
    slip_q = [cfg.slip] * cfg.n_questions
    guess_q = [cfg.guess] * cfg.n_questions
    if cfg.slip_spread or cfg.guess_spread:
        for q in range(cfg.n_questions):
            slip_q[q] = cfg.slip + rng.uniform(-cfg.slip_spread,
                                               cfg.slip_spread)
            guess_q[q] = cfg.guess + rng.uniform(-cfg.guess_spread,
                                                 cfg.guess_spread)
    return skills, difficulty, by_skill, slip_q, guess_q


def generate(cfg: SynthConfig) -> tuple[Dataset, list[list[int]]]:
    """Build a dataset and the latent answers behind its observations."""
    rng = random.Random(cfg.seed)
    skills, difficulty, by_skill, slip_q, guess_q = _question_bank(cfg, rng)

    students = []
    latent_all = []
    for sid in range(cfg.n_students):
        mastery = [rng.random() for _ in range(cfg.n_skills)]
        inters = []
        latent_seq = []
        skill = rng.randrange(cfg.n_skills)
        for _ in range(cfg.seq_len):
            if inters and rng.random() >= cfg.persistence:
                if cfg.n_skills > 1:
                    other = rng.randrange(cfg.n_skills - 1)
                    skill = other if other < skill else other + 1
            q = rng.choice(by_skill[skill])
            latent = 1 if mastery[skill] >= difficulty[q] else 0
            observed = latent
            if latent == 1 and rng.random() < slip_q[q]:
                observed = 0
            elif latent == 0 and rng.random() < guess_q[q]:
                observed = 1
            inters.append(Interaction(question_id=q, skill_id=skill,
                                      response=observed, observed=observed))
            latent_seq.append(latent)
            if cfg.mastery_model == "drifting":
                mastery[skill] = min(1.0, mastery[skill] + cfg.drift_step)
        students.append(StudentSequence(student_id=sid, interactions=inters))
        latent_all.append(latent_seq)

    dataset = Dataset(
        students=students,
        num_questions=cfg.n_questions,
        num_skills=cfg.n_skills,
        question_key=[str(q) for q in range(cfg.n_questions)],
        skill_key=[str(k) for k in range(cfg.n_skills)],
        student_key={s: str(s) for s in range(cfg.n_students)},
    )
    return dataset, latent_all


@dataclass(frozen=True)
class RecoveryReport:
    """How a corrected dataset compares against the latent answers."""

    total: int
    injected: int
    flips: int
    recovered: int
    false_corrections: int
    agree_raw_count: int
    agree_opt_count: int

    def __post_init__(self):
        if self.recovered + self.false_corrections != self.flips:
            raise ValueError("every flip either recovers noise or injects it")
        if self.agree_opt_count - self.agree_raw_count != \
                self.recovered - self.false_corrections:
            raise ValueError("agreement gain must equal net recoveries")

    @property
    def agreement_raw(self) -> float:
        return self.agree_raw_count / self.total

    @property
    def agreement_opt(self) -> float:
        return self.agree_opt_count / self.total

    @property
    def gain(self) -> float:
        return (self.agree_opt_count - self.agree_raw_count) / self.total

    @property
    def false_rate(self) -> float:
        return self.false_corrections / self.flips if self.flips else 0.0

    def to_json(self) -> dict:
        return {
            "total": self.total,
            "injected": self.injected,
            "flips": self.flips,
            "recovered": self.recovered,
            "false_corrections": self.false_corrections,
            "agreement_raw": self.agreement_raw,
            "agreement_opt": self.agreement_opt,
            "gain": self.gain,
            "false_rate": self.false_rate,
        }


def score_recovery(observed: Dataset, optimized: Dataset,
                   latent: list[list[int]]) -> RecoveryReport:
    """Compare a corrected dataset against the generator's latent answers.

    A flip at a position where observation and latent answer disagreed is
    a recovery; a flip anywhere else manufactures a new error.
    """
    if len(observed.students) != len(optimized.students) or \
            len(observed.students) != len(latent):
        raise ValueError("datasets and latent answers must align")
    total = injected = flips = recovered = false = raw_ok = opt_ok = 0
    for obs_seq, opt_seq, lat in zip(observed.students, optimized.students, latent):
        if len(obs_seq) != len(opt_seq) or len(obs_seq) != len(lat):
            raise ValueError(f"student {obs_seq.student_id}: length mismatch")
        for o, c, z in zip(obs_seq.interactions, opt_seq.interactions, lat):
            total += 1
            corrupted = o.observed != z
            injected += corrupted
            raw_ok += o.observed == z
            opt_ok += c.response == z
            if c.response != o.observed:
                flips += 1
                if corrupted:
                    recovered += 1
                else:
                    false += 1
    if total == 0:
        raise ValueError("empty datasets cannot be scored")
    return RecoveryReport(total=total, injected=injected, flips=flips,
                          recovered=recovered, false_corrections=false,
                          agree_raw_count=raw_ok, agree_opt_count=opt_ok)
