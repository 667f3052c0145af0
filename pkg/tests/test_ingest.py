import json

import pytest

from ktopt.ingest import (
    DatasetError,
    EmptyDatasetError,
    Interaction,
    dataset_from_json,
    dataset_to_json,
    load_dataset,
    parse_dataset,
    save_dataset,
    split_train_test,
)

CSV_BASIC = """user_id,problem_id,skill_id,correct,order_id
10,100,7,1,1
10,101,7,0,2
10,102,8,1,3
11,100,7,1,1
11,103,8,x,2
11,101,7,0,3
"""

CSV_MULTI_SKILL = """user_id,problem_id,skill_id,correct,order_id
5,200,1,1,1
5,200,2,1,1
5,201,1,0,2
"""


@pytest.fixture
def basic(tmp_path):
    path = tmp_path / "log.csv"
    path.write_text(CSV_BASIC)
    return parse_dataset(str(path))


class TestParse:
    def test_counts(self, basic):
        assert len(basic.students) == 2
        assert basic.num_records == 5
        assert basic.dropped_rows == 1  # the non-binary correctness row

    def test_dense_ids(self, basic):
        # question 103 only occurs in the dropped row and gets no id
        assert basic.num_questions == 3
        assert basic.num_skills == 2
        assert basic.question_key == ["100", "101", "102"]

    def test_order_preserved(self, basic):
        seq = basic.students[0]
        assert [it.response for it in seq.interactions] == [1, 0, 1]

    def test_observed_mirrors_response(self, basic):
        for seq in basic.students:
            for it in seq.interactions:
                assert it.observed == it.response

    def test_multi_skill_merged(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text(CSV_MULTI_SKILL)
        ds = parse_dataset(str(path))
        assert ds.num_records == 2  # duplicated row counted once
        first = ds.students[0].interactions[0]
        assert set(first.all_skills()) == {0, 1}

    def test_missing_skill_dropped(self, tmp_path):
        path = tmp_path / "s.csv"
        path.write_text("user_id,problem_id,skill_id,correct,order_id\n"
                        "1,10,,1,1\n1,11,3,0,2\n")
        ds = parse_dataset(str(path))
        assert ds.num_records == 1
        assert ds.dropped_rows == 1

    def test_all_rows_invalid(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("user_id,problem_id,skill_id,correct,order_id\n1,10,,1,1\n")
        with pytest.raises(EmptyDatasetError):
            parse_dataset(str(path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            parse_dataset(str(tmp_path / "nope.csv"))

    def test_missing_columns(self, tmp_path):
        path = tmp_path / "cols.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(DatasetError):
            parse_dataset(str(path))

    def test_unknown_format(self, tmp_path):
        with pytest.raises(DatasetError):
            parse_dataset(str(tmp_path / "x"), fmt="parquet")

    def test_custom_columns(self, tmp_path):
        path = tmp_path / "c.csv"
        path.write_text("s,q,k,ok\n1,5,2,1\n1,6,2,0\n")
        ds = parse_dataset(str(path), columns={
            "student": "s", "question": "q", "skill": "k",
            "correct": "ok", "order": "t"})
        assert ds.num_records == 2

    def test_jsonl(self, tmp_path):
        path = tmp_path / "log.jsonl"
        recs = [
            {"student": 1, "question": "a", "skill": 4, "correct": 1, "order": 0},
            {"student": 1, "question": "b", "skill": [4, 5], "correct": 0, "order": 1},
            {"student": 2, "question": "a", "skill": 4, "correct": 1, "order": 0},
        ]
        path.write_text("\n".join(json.dumps(r) for r in recs))
        ds = parse_dataset(str(path), fmt="jsonl")
        assert ds.num_records == 3
        assert ds.num_skills == 2
        multi = ds.students[0].interactions[1]
        assert len(multi.all_skills()) == 2


class TestSplit:
    def students(self, n):
        rows = [[(0, 0, 1), (1, 0, 0)]] * n
        from tests_helpers import build_dataset
        return build_dataset(rows)

    def test_fraction_floor(self):
        from tests_helpers import build_dataset
        ds = build_dataset([[(0, 0, 1)]] * 10)
        train, test = split_train_test(ds, 0.2, seed=1)
        assert len(test.students) == 2
        assert len(train.students) == 8

    def test_at_least_one_test_student(self):
        from tests_helpers import build_dataset
        ds = build_dataset([[(0, 0, 1)]] * 3)
        train, test = split_train_test(ds, 0.05, seed=1)
        assert len(test.students) == 1
        assert len(train.students) == 2

    def test_partition_property(self):
        from tests_helpers import build_dataset
        ds = build_dataset([[(0, 0, 1)]] * 25)
        train, test = split_train_test(ds, 0.2, seed=3)
        train_ids = {s.student_id for s in train.students}
        test_ids = {s.student_id for s in test.students}
        assert train_ids & test_ids == set()
        assert train_ids | test_ids == {s.student_id for s in ds.students}

    def test_deterministic(self):
        from tests_helpers import build_dataset
        ds = build_dataset([[(0, 0, 1)]] * 25)
        a = split_train_test(ds, 0.2, seed=9)
        b = split_train_test(ds, 0.2, seed=9)
        assert [s.student_id for s in a[1].students] == \
               [s.student_id for s in b[1].students]
        c = split_train_test(ds, 0.2, seed=10)
        assert [s.student_id for s in a[1].students] != \
               [s.student_id for s in c[1].students]

    def test_id_space_shared(self):
        from tests_helpers import build_dataset
        ds = build_dataset([[(0, 0, 1)], [(1, 1, 0)], [(2, 2, 1)]])
        train, test = split_train_test(ds, 0.34, seed=2)
        assert train.num_questions == test.num_questions == 3
        assert train.num_skills == test.num_skills == 3

    def test_too_few_students(self):
        from tests_helpers import build_dataset
        ds = build_dataset([[(0, 0, 1)]])
        with pytest.raises(DatasetError):
            split_train_test(ds, 0.2, seed=1)

    def test_bad_fraction(self):
        from tests_helpers import build_dataset
        ds = build_dataset([[(0, 0, 1)]] * 4)
        with pytest.raises(ValueError):
            split_train_test(ds, 1.0, seed=1)


class TestRoundTrip:
    def test_json_round_trip(self, basic):
        # a correction plus difficulty annotation must survive the trip
        basic.students[0].interactions[0].response = 0
        basic.students[0].interactions[0].difficulty = 0.375
        doc = dataset_to_json(basic)
        back = dataset_from_json(json.loads(json.dumps(doc)))
        assert dataset_to_json(back) == doc
        it = back.students[0].interactions[0]
        assert it.response == 0 and it.observed == 1
        assert it.difficulty == 0.375

    def test_file_round_trip(self, basic, tmp_path):
        path = tmp_path / "ds.json"
        save_dataset(basic, str(path))
        back = load_dataset(str(path))
        assert dataset_to_json(back) == dataset_to_json(basic)


class TestInteraction:
    def test_response_validation(self):
        with pytest.raises(ValueError):
            Interaction(question_id=0, skill_id=0, response=2, observed=0)

    def test_duplicate_extra_skill(self):
        with pytest.raises(ValueError):
            Interaction(question_id=0, skill_id=3, response=1, observed=1,
                        extra_skills=(3,))
