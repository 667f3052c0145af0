"""Loading and splitting of student interaction logs.

Raw logs arrive either as CSV (one row per answered question, optionally
repeated per tagged skill) or as JSON lines.  Parsing produces a
:class:`Dataset` with dense integer ids and per-student sequences ordered
by the original answer order.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

__all__ = [
    "DatasetError",
    "EmptyDatasetError",
    "Interaction",
    "StudentSequence",
    "Dataset",
    "parse_dataset",
    "split_train_test",
    "dataset_to_json",
    "dataset_from_json",
    "save_dataset",
    "load_dataset",
]

DEFAULT_COLUMNS = {
    "student": "user_id",
    "question": "problem_id",
    "skill": "skill_id",
    "correct": "correct",
    "order": "order_id",
}


class DatasetError(ValueError):
    """Raised when an input log cannot be turned into a usable dataset."""


class EmptyDatasetError(DatasetError):
    """Raised when parsing finds no valid rows at all."""


@dataclass
class Interaction:
    """One answered question.

    ``response`` is the representation fed to downstream consumers and may
    be rewritten by the correction stage; ``observed`` keeps what the
    student actually answered and is never modified after parsing.
    Questions tagged with several skills keep the first tag in
    ``skill_id`` and the rest in ``extra_skills`` so the row is counted
    once but participates in every tagged skill's subsequence.
    """

    question_id: int
    skill_id: int
    response: int
    observed: int
    extra_skills: tuple[int, ...] = ()
    difficulty: float | None = None

    def __post_init__(self):
        if self.response not in (0, 1):
            raise ValueError(f"response must be 0 or 1, got {self.response!r}")
        if self.observed not in (0, 1):
            raise ValueError(f"observed must be 0 or 1, got {self.observed!r}")
        if self.question_id < 0:
            raise ValueError("question_id must be non-negative")
        if self.skill_id < 0:
            raise ValueError("skill_id must be non-negative")
        if self.skill_id in self.extra_skills:
            raise ValueError("extra_skills must not repeat the primary skill")

    def all_skills(self) -> tuple[int, ...]:
        return (self.skill_id,) + self.extra_skills


@dataclass
class StudentSequence:
    """All interactions of one student, position-ordered."""

    student_id: int
    interactions: list[Interaction] = field(default_factory=list)

    def __post_init__(self):
        if self.student_id < 0:
            raise ValueError("student_id must be non-negative")

    def __len__(self) -> int:
        return len(self.interactions)


@dataclass
class Dataset:
    """A collection of student sequences over a shared question/skill space.

    ``question_key`` and ``skill_key`` map dense ids back to the labels
    found in the source log (index == dense id).  Splits derived from a
    dataset keep the full id space so model dimensions stay comparable.
    """

    students: list[StudentSequence]
    num_questions: int
    num_skills: int
    question_key: list[str] = field(default_factory=list)
    skill_key: list[str] = field(default_factory=list)
    student_key: dict[int, str] = field(default_factory=dict)
    dropped_rows: int = 0

    def __post_init__(self):
        for seq in self.students:
            for it in seq.interactions:
                if it.question_id >= self.num_questions:
                    raise ValueError(
                        f"question_id {it.question_id} out of range "
                        f"(num_questions={self.num_questions})"
                    )
                for k in it.all_skills():
                    if k >= self.num_skills:
                        raise ValueError(
                            f"skill_id {k} out of range (num_skills={self.num_skills})"
                        )

    @property
    def num_records(self) -> int:
        return sum(len(s) for s in self.students)

    def student(self, student_id: int) -> StudentSequence:
        for seq in self.students:
            if seq.student_id == student_id:
                return seq
        raise KeyError(f"no student {student_id}")


def _sort_key(label: str):
    # numeric labels sort numerically so dense ids are stable across row order
    try:
        return (0, float(label), label)
    except ValueError:
        return (1, 0.0, label)


def _parse_rows_csv(path: str, columns: dict[str, str]):
    with open(path, newline="", encoding="utf-8-sig") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DatasetError(f"{path}: no header row")
        missing = [c for c in (columns["student"], columns["question"],
                               columns["correct"]) if c not in reader.fieldnames]
        if missing:
            raise DatasetError(f"{path}: missing columns {missing}")
        has_skill = columns["skill"] in reader.fieldnames
        has_order = columns["order"] in reader.fieldnames
        for idx, row in enumerate(reader):
            skill = row.get(columns["skill"], "") if has_skill else ""
            order = row.get(columns["order"], "") if has_order else str(idx)
            yield idx, row.get(columns["student"]), row.get(columns["question"]), \
                skill, row.get(columns["correct"]), order


def _parse_rows_jsonl(path: str):
    with open(path, encoding="utf-8") as fh:
        for idx, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{idx + 1}: bad JSON ({exc})") from exc
            skill = rec.get("skill", "")
            if isinstance(skill, list):
                skill = ",".join(str(s) for s in skill)
            yield idx, rec.get("student"), rec.get("question"), \
                str(skill), rec.get("correct"), str(rec.get("order", idx))


def parse_dataset(path: str, fmt: str = "csv",
                  columns: dict[str, str] | None = None) -> Dataset:
    """Parse a raw log into a dataset.

    Rows with a missing skill tag or a non-binary correctness value are
    dropped and counted in ``dropped_rows``.  Rows that share student,
    order and question but differ in skill are merged into a single
    interaction carrying all the tags.
    """
    if fmt not in ("csv", "jsonl"):
        raise DatasetError(f"unknown format {fmt!r}")
    cols = dict(DEFAULT_COLUMNS)
    if columns:
        cols.update(columns)
    rows = _parse_rows_csv(path, cols) if fmt == "csv" else _parse_rows_jsonl(path)

    dropped = 0
    # merged[(student, order_key, question)] = [row_idx, student, question, set(skills), correct]
    merged: dict[tuple, list] = {}
    for idx, student, question, skill, correct, order in rows:
        if student is None or question is None or correct is None:
            dropped += 1
            continue
        skills = [s for s in str(skill).split(",") if s.strip() != ""]
        if not skills:
            dropped += 1
            continue
        c = str(correct).strip()
        if c in ("0", "1"):
            cval = int(c)
        elif c.lower() in ("true", "false"):
            cval = 1 if c.lower() == "true" else 0
        else:
            dropped += 1
            continue
        try:
            okey = float(order)
        except (TypeError, ValueError):
            okey = float(idx)
        key = (str(student), okey, str(question))
        if key in merged:
            merged[key][3].extend(s for s in skills if s not in merged[key][3])
        else:
            merged[key] = [idx, str(student), str(question), list(skills), cval]

    if not merged:
        raise EmptyDatasetError(f"{path}: no valid rows")

    q_labels = sorted({m[2] for m in merged.values()}, key=_sort_key)
    k_labels = sorted({s for m in merged.values() for s in m[3]}, key=_sort_key)
    s_labels = sorted({m[1] for m in merged.values()}, key=_sort_key)
    qmap = {lab: i for i, lab in enumerate(q_labels)}
    kmap = {lab: i for i, lab in enumerate(k_labels)}
    smap = {lab: i for i, lab in enumerate(s_labels)}

    by_student: dict[int, list] = {smap[lab]: [] for lab in s_labels}
    for (student, okey, _q), (idx, _s, question, skills, cval) in merged.items():
        by_student[smap[student]].append((okey, idx, question, skills, cval))

    students = []
    for sid in sorted(by_student):
        rows_s = sorted(by_student[sid], key=lambda r: (r[0], r[1]))
        inters = []
        for _okey, _idx, question, skills, cval in rows_s:
            dense = [kmap[s] for s in skills]
            inters.append(Interaction(
                question_id=qmap[question],
                skill_id=dense[0],
                response=cval,
                observed=cval,
                extra_skills=tuple(dense[1:]),
            ))
        students.append(StudentSequence(student_id=sid, interactions=inters))

    return Dataset(
        students=students,
        num_questions=len(q_labels),
        num_skills=len(k_labels),
        question_key=q_labels,
        skill_key=k_labels,
        student_key={smap[lab]: lab for lab in s_labels},
        dropped_rows=dropped,
    )


def split_train_test(dataset: Dataset, test_fraction: float,
                     seed: int) -> tuple[Dataset, Dataset]:
    """Split by student: ``max(1, floor(n * test_fraction))`` go to test.

    Deterministic for a given seed; the two halves partition the input and
    keep the full question/skill id space.
    """
    import random

    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    n = len(dataset.students)
    if n < 2:
        raise DatasetError(f"need at least 2 students to split, got {n}")
    n_test = max(1, int(n * test_fraction))
    order = sorted(s.student_id for s in dataset.students)
    random.Random(seed).shuffle(order)
    test_ids = set(order[:n_test])

    def subset(keep_test: bool) -> Dataset:
        kept = [s for s in dataset.students if (s.student_id in test_ids) == keep_test]
        return Dataset(
            students=kept,
            num_questions=dataset.num_questions,
            num_skills=dataset.num_skills,
            question_key=list(dataset.question_key),
            skill_key=list(dataset.skill_key),
            student_key={s.student_id: dataset.student_key.get(s.student_id, str(s.student_id))
                         for s in kept},
            dropped_rows=0,
        )

    return subset(False), subset(True)


def dataset_to_json(dataset: Dataset) -> dict:
    """Canonical JSON form; ``dataset_from_json`` inverts it exactly."""
    return {
        "num_questions": dataset.num_questions,
        "num_skills": dataset.num_skills,
        "num_records": dataset.num_records,
        "dropped_rows": dataset.dropped_rows,
        "question_key": list(dataset.question_key),
        "skill_key": list(dataset.skill_key),
        "students": [
            {
                "student_id": seq.student_id,
                "key": dataset.student_key.get(seq.student_id, str(seq.student_id)),
                "interactions": [
                    {
                        "question": it.question_id,
                        "skill": it.skill_id,
                        "extra_skills": list(it.extra_skills),
                        "response": it.response,
                        "observed": it.observed,
                        "difficulty": it.difficulty,
                    }
                    for it in seq.interactions
                ],
            }
            for seq in dataset.students
        ],
    }


def dataset_from_json(doc: dict) -> Dataset:
    students = []
    student_key = {}
    for s in doc["students"]:
        inters = [
            Interaction(
                question_id=i["question"],
                skill_id=i["skill"],
                extra_skills=tuple(i.get("extra_skills", ())),
                response=i["response"],
                observed=i.get("observed", i["response"]),
                difficulty=i.get("difficulty"),
            )
            for i in s["interactions"]
        ]
        students.append(StudentSequence(student_id=s["student_id"], interactions=inters))
        student_key[s["student_id"]] = s.get("key", str(s["student_id"]))
    return Dataset(
        students=students,
        num_questions=doc["num_questions"],
        num_skills=doc["num_skills"],
        question_key=list(doc.get("question_key", [])),
        skill_key=list(doc.get("skill_key", [])),
        student_key=student_key,
        dropped_rows=doc.get("dropped_rows", 0),
    )


def save_dataset(dataset: Dataset, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(dataset_to_json(dataset), fh, sort_keys=True)


def load_dataset(path: str) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        return dataset_from_json(json.load(fh))
