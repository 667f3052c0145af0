"""Relation graphs, embedding losses and their gradients, training."""

import math
import random

import numpy as np
import pytest

from ktopt.ingest import Dataset, Interaction, StudentSequence
from ktopt.optim import Adam, TrainingDivergedError
from ktopt.pretrain import (EmbeddingSet, PretrainParams, RelationGraphs,
                            attr_loss, build_graphs, joint_loss,
                            load_embeddings, pair_loss, problem_embedding,
                            save_embeddings, train_embeddings)
from tests_helpers import build_dataset


class TestAdam:
    def test_quadratic_descent(self):
        params = {"x": np.array([5.0, -3.0])}
        opt = Adam(params, lr=0.05)
        for _ in range(2000):
            opt.step({"x": 2.0 * params["x"]})
        assert np.all(np.abs(params["x"]) < 1e-3)

    def test_updates_in_place(self):
        x = np.ones(3)
        opt = Adam({"x": x}, lr=0.1)
        opt.step({"x": np.ones(3)})
        assert x is opt.params["x"]
        assert np.all(x < 1.0)

    def test_unknown_parameter(self):
        opt = Adam({"x": np.ones(2)})
        with pytest.raises(KeyError):
            opt.step({"y": np.ones(2)})

    def test_bad_lr(self):
        with pytest.raises(ValueError):
            Adam({"x": np.ones(1)}, lr=0.0)

    def test_first_step_magnitude_is_lr(self):
        # bias correction makes the first update exactly lr * sign(g)
        x = np.array([0.0])
        Adam({"x": x}, lr=0.01).step({"x": np.array([123.4])})
        assert x[0] == pytest.approx(-0.01, rel=1e-6)


def multi_skill_dataset():
    rows = [
        [Interaction(question_id=0, skill_id=0, response=1, observed=1,
                     extra_skills=(1,)),
         Interaction(question_id=1, skill_id=1, response=0, observed=0),
         Interaction(question_id=2, skill_id=2, response=1, observed=1)],
    ]
    students = [StudentSequence(student_id=0, interactions=rows[0])]
    return Dataset(students=students, num_questions=3, num_skills=3)


class TestBuildGraphs:
    def test_multi_skill_tags(self):
        g = build_graphs(multi_skill_dataset())
        assert g.qs == {(0, 0), (0, 1), (1, 1), (2, 2)}
        assert g.qq == {(0, 1)}
        # skills 0 and 1 share question 0; no window rule on multi-skill data
        assert g.ss == {(0, 1)}
        assert g.question_skills == {0: (0, 1), 1: (1,), 2: (2,)}

    def test_single_skill_window(self):
        ds = build_dataset([[(0, 0, 1), (1, 1, 0), (2, 2, 1), (3, 0, 1)]])
        g = build_graphs(ds)
        assert g.qs == {(0, 0), (1, 1), (2, 2), (3, 0)}
        # questions 0 and 3 share skill 0
        assert g.qq == {(0, 3)}
        # windows of three: {0,1,2}, {1,2,0}, {2,0}, {0}
        assert g.ss == {(0, 1), (0, 2), (1, 2)}

    def test_window_does_not_cross_students(self):
        ds = build_dataset([[(0, 0, 1)], [(1, 1, 1)]])
        g = build_graphs(ds)
        assert g.ss == set()
        assert g.qq == set()

    def test_validation(self):
        with pytest.raises(ValueError):
            RelationGraphs(num_questions=2, num_skills=2, qq={(1, 1)})
        with pytest.raises(ValueError):
            RelationGraphs(num_questions=2, num_skills=2, qs={(2, 0)})
        with pytest.raises(ValueError):
            RelationGraphs(num_questions=2, num_skills=2, ss={(1, 0)})

    def test_tagged_questions_sorted(self):
        g = build_graphs(multi_skill_dataset())
        assert g.tagged_questions == [0, 1, 2]


class TestPairLoss:
    def test_frozen_values(self):
        u = np.array([1.0, 2.0])
        w = np.array([0.5, 0.25])
        # u.w = 1.0, sigmoid = 0.731058578630...; the clamp epsilon is
        # part of the loss definition, so it shows in the 13th decimal
        loss1, _, _ = pair_loss(u, w, 1)
        loss0, _, _ = pair_loss(u, w, 0)
        assert loss1 == pytest.approx(0.31326168751685496, abs=1e-15)
        assert loss0 == pytest.approx(1.3132616875145047, abs=1e-15)

    def test_orthogonal_vectors_give_log2(self):
        loss, _, _ = pair_loss(np.array([1.0, 0.0]), np.array([0.0, 1.0]), 1)
        assert loss == pytest.approx(math.log(2.0), abs=1e-9)

    def test_symmetry(self):
        rng = np.random.default_rng(0)
        u = rng.normal(size=4)
        w = rng.normal(size=4)
        l1, gu, gw = pair_loss(u, w, 1)
        l2, gw2, gu2 = pair_loss(w, u, 1)
        assert l1 == l2
        assert np.allclose(gu, gu2)
        assert np.allclose(gw, gw2)

    def test_bad_label(self):
        with pytest.raises(ValueError):
            pair_loss(np.zeros(2), np.zeros(2), 2)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(11)
        h = 1e-6
        for _ in range(25):
            u = rng.normal(scale=1.5, size=6)
            w = rng.normal(scale=1.5, size=6)
            r = int(rng.integers(2))
            _, gu, gw = pair_loss(u, w, r)
            for vec, grad in ((u, gu), (w, gw)):
                k = int(rng.integers(6))
                bump = np.zeros(6)
                bump[k] = h
                if vec is u:
                    hi, _, _ = pair_loss(u + bump, w, r)
                    lo, _, _ = pair_loss(u - bump, w, r)
                else:
                    hi, _, _ = pair_loss(u, w + bump, r)
                    lo, _, _ = pair_loss(u, w - bump, r)
                fd = (hi - lo) / (2 * h)
                assert fd == pytest.approx(grad[k], rel=1e-5, abs=1e-8)


class TestAttrLoss:
    def test_frozen_example(self):
        q = np.array([0.5, -1.0])
        theta = np.array([0.2, 0.4, 0.1])
        loss, gq, gtheta = attr_loss(q, theta, 0.3)
        # prediction 0.1 - 0.4 + 0.1 = -0.2, error -0.5
        assert loss == pytest.approx(0.25, abs=1e-12)
        assert np.allclose(gq, [-0.2, -0.4])
        assert np.allclose(gtheta, [-0.5, 1.0, -1.0])

    def test_zero_at_exact_fit(self):
        q = np.array([1.0, 1.0])
        theta = np.array([0.25, 0.25, 0.0])
        loss, gq, gtheta = attr_loss(q, theta, 0.5)
        assert loss == 0.0
        assert np.all(gq == 0.0) and np.all(gtheta == 0.0)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(13)
        h = 1e-6
        for _ in range(25):
            q = rng.normal(size=5)
            theta = rng.normal(size=6)
            a = rng.uniform()
            _, gq, gtheta = attr_loss(q, theta, a)
            k = int(rng.integers(5))
            bump = np.zeros(5)
            bump[k] = h
            fd = (attr_loss(q + bump, theta, a)[0] -
                  attr_loss(q - bump, theta, a)[0]) / (2 * h)
            assert fd == pytest.approx(gq[k], rel=1e-5, abs=1e-8)
            k = int(rng.integers(6))
            bump = np.zeros(6)
            bump[k] = h
            fd = (attr_loss(q, theta + bump, a)[0] -
                  attr_loss(q, theta - bump, a)[0]) / (2 * h)
            assert fd == pytest.approx(gtheta[k], rel=1e-5, abs=1e-8)


def toy_training_setup(seed=0, n_students=12):
    rng = random.Random(seed)
    rows = []
    for _ in range(n_students):
        seq = []
        for _ in range(15):
            k = rng.randrange(4)
            q = k * 3 + rng.randrange(3)
            seq.append((q, k, rng.randrange(2)))
        rows.append(seq)
    ds = build_dataset(rows)
    g = build_graphs(ds)
    attrs = np.linspace(0.1, 0.9, ds.num_questions)
    return g, attrs


class TestJointLoss:
    def test_lambda_linearity(self):
        g, attrs = toy_training_setup()
        rng = np.random.default_rng(5)
        emb = EmbeddingSet(question=rng.normal(size=(g.num_questions, 6)),
                           skill=rng.normal(size=(g.num_skills, 6)),
                           theta=rng.normal(size=7), dim_final=8)
        pairs_only = joint_loss(emb, g, attrs, 1.0)
        attr_only = joint_loss(emb, g, attrs, 0.0)
        mixed = joint_loss(emb, g, attrs, 0.3)
        assert mixed == pytest.approx(0.3 * pairs_only + 0.7 * attr_only,
                                      rel=1e-10)

    def test_counts_all_pairs(self):
        # one question, one skill, no edges: the lone qs pair is a negative
        g = RelationGraphs(num_questions=1, num_skills=1)
        emb = EmbeddingSet(question=np.zeros((1, 2)), skill=np.zeros((1, 2)),
                           theta=np.zeros(3), dim_final=4)
        assert joint_loss(emb, g, np.zeros(1), 1.0) == \
            pytest.approx(math.log(2.0), abs=1e-9)


class TestTrainEmbeddings:
    def test_deterministic(self):
        g, attrs = toy_training_setup()
        params = PretrainParams(dim_vertex=8, dim_final=12, epochs=3, batch=64)
        a, ha = train_embeddings(g, attrs, params, seed=42)
        b, hb = train_embeddings(g, attrs, params, seed=42)
        assert ha == hb
        assert np.array_equal(a.question, b.question)
        assert np.array_equal(a.skill, b.skill)
        assert np.array_equal(a.theta, b.theta)
        c, _ = train_embeddings(g, attrs, params, seed=43)
        assert not np.array_equal(a.question, c.question)

    def test_loss_decreases(self):
        g, attrs = toy_training_setup()
        params = PretrainParams(dim_vertex=8, dim_final=12, epochs=60,
                                batch=512, lr=0.01, full_sum=True)
        emb, history = train_embeddings(g, attrs, params, seed=1)
        assert history[-1] < 0.5 * history[0]
        assert joint_loss(emb, g, attrs, params.lam) == \
            pytest.approx(history[-1], rel=0.2)

    def test_sampled_mode_improves_exact_loss(self):
        g, attrs = toy_training_setup()
        params = PretrainParams(dim_vertex=8, dim_final=12, epochs=40,
                                batch=128, lr=0.01)
        rng = np.random.default_rng(9)
        init = EmbeddingSet(
            question=rng.normal(0, 0.1, size=(g.num_questions, 8)),
            skill=rng.normal(0, 0.1, size=(g.num_skills, 8)),
            theta=rng.normal(0, 0.1, size=9), dim_final=12)
        before = joint_loss(init, g, attrs, params.lam)
        emb, _ = train_embeddings(g, attrs, params, seed=9)
        assert joint_loss(emb, g, attrs, params.lam) < before

    def test_divergence_raises(self):
        g, attrs = toy_training_setup()
        bad = np.full_like(attrs, np.nan)
        params = PretrainParams(dim_vertex=4, dim_final=4, epochs=2)
        with pytest.raises(TrainingDivergedError):
            train_embeddings(g, bad, params, seed=0)

    def test_unmentioned_rows_get_mean_fallback(self):
        g = RelationGraphs(num_questions=5, num_skills=3,
                           qs={(0, 0), (1, 1)}, qq={(0, 1)},
                           question_skills={0: (0,), 1: (1,)})
        attrs = np.full(5, 0.5)
        params = PretrainParams(dim_vertex=4, dim_final=4, epochs=2)
        emb, _ = train_embeddings(g, attrs, params, seed=0)
        mean_q = emb.question[[0, 1]].mean(axis=0)
        assert np.allclose(emb.question[2], mean_q)
        assert np.allclose(emb.question[3], mean_q)
        assert np.allclose(emb.question[4], mean_q)
        # skill 2 never appears either
        assert np.allclose(emb.skill[2], emb.skill[[0, 1]].mean(axis=0))
        assert emb.fallback_rows == 4

    def test_attribute_shape_checked(self):
        g, attrs = toy_training_setup()
        with pytest.raises(ValueError):
            train_embeddings(g, attrs[:-1], PretrainParams(epochs=1), seed=0)

    def test_params_validated(self):
        with pytest.raises(ValueError):
            PretrainParams(lam=1.5)
        with pytest.raises(ValueError):
            PretrainParams(dim_vertex=0)
        with pytest.raises(ValueError):
            PretrainParams(negative_ratio=-1)


class TestComposeAndPersist:
    def make_emb(self, seed=0, m=6, n=3, dv=5, d=7):
        rng = np.random.default_rng(seed)
        return EmbeddingSet(question=rng.normal(size=(m, dv)),
                            skill=rng.normal(size=(n, dv)),
                            theta=rng.normal(size=dv + 1), dim_final=d)

    def test_problem_embedding_shape_and_determinism(self):
        emb = self.make_emb()
        z1 = problem_embedding(emb, 2, (0, 1))
        z2 = problem_embedding(emb, 2, (0, 1))
        assert z1.shape == (7,)
        assert np.array_equal(z1, z2)

    def test_projection_is_linear_in_input(self):
        emb = self.make_emb()
        z_pair = problem_embedding(emb, 0, (0, 2))
        # mean of the two single-skill compositions differs from the pair
        # composition only through the skill half, which is itself a mean
        za = problem_embedding(emb, 0, (0,))
        zb = problem_embedding(emb, 0, (2,))
        assert np.allclose(z_pair, (za + zb) / 2.0)

    def test_unknown_ids_fall_back(self):
        emb = self.make_emb()
        z = problem_embedding(emb, 99, ())
        assert z.shape == (7,)
        assert np.all(np.isfinite(z))

    def test_round_trip(self, tmp_path):
        emb = self.make_emb(seed=3)
        path = tmp_path / "emb.bin"
        save_embeddings(emb, str(path))
        back = load_embeddings(str(path))
        assert back.dim_final == emb.dim_final
        assert np.array_equal(back.question,
                              emb.question.astype("<f4").astype(float))
        assert np.array_equal(back.skill,
                              emb.skill.astype("<f4").astype(float))
        assert np.array_equal(back.theta,
                              emb.theta.astype("<f4").astype(float))

    def test_round_trip_preserves_composition(self, tmp_path):
        emb = self.make_emb(seed=4)
        path = tmp_path / "emb.bin"
        save_embeddings(emb, str(path))
        back = load_embeddings(str(path))
        a = problem_embedding(emb, 1, (0,))
        b = problem_embedding(back, 1, (0,))
        assert np.allclose(a, b, atol=1e-5)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOTEMBED" + b"\0" * 32)
        with pytest.raises(ValueError, match="not an embedding"):
            load_embeddings(str(path))

    def test_truncated_file(self, tmp_path):
        emb = self.make_emb()
        path = tmp_path / "emb.bin"
        save_embeddings(emb, str(path))
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(ValueError, match="truncated"):
            load_embeddings(str(path))

    def test_embedding_set_validation(self):
        with pytest.raises(ValueError):
            EmbeddingSet(question=np.zeros((2, 3)), skill=np.zeros((2, 4)),
                         theta=np.zeros(4), dim_final=2)
        with pytest.raises(ValueError):
            EmbeddingSet(question=np.zeros((2, 3)), skill=np.zeros((2, 3)),
                         theta=np.zeros(3), dim_final=2)
