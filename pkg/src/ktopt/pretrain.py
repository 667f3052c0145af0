"""Pretraining of question and skill embeddings from relation graphs.

Three binary relations are read off the interaction log: question-skill
tags, question-question (sharing at least one skill) and skill-skill
(tagged on a common question; for single-skill logs, co-occurring within
a window of three consecutive interactions of some student).  Vertex
embeddings are trained so that the logistic product of a pair predicts
adjacency, while a linear head on each question embedding predicts its
normalized difficulty:

    loss = lam * (L_qs + L_qq + L_ss) + (1 - lam) * L_attr

Cross-entropy terms clamp their logs with a small epsilon; the analytic
gradients run through that epsilon so finite differences reproduce them
to machine precision.

The final problem representation concatenates a question's embedding
with the mean of its tagged skills' embeddings and projects the result
to ``dim_final`` through a fixed random matrix (regenerated from a
constant seed, so persisted files stay self-contained).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .ingest import Dataset
from .optim import Adam, TrainingDivergedError

__all__ = [
    "RelationGraphs",
    "PretrainParams",
    "EmbeddingSet",
    "build_graphs",
    "pair_loss",
    "attr_loss",
    "joint_loss",
    "train_embeddings",
    "problem_embedding",
    "save_embeddings",
    "load_embeddings",
]

EPS = 1e-12
MAGIC = b"CRDPEMB1"
_PROJECTION_SEED = 70717


@dataclass
class RelationGraphs:
    """Adjacency of the three relations over dense id spaces."""

    num_questions: int
    num_skills: int
    qs: set[tuple[int, int]] = field(default_factory=set)
    qq: set[tuple[int, int]] = field(default_factory=set)
    ss: set[tuple[int, int]] = field(default_factory=set)
    question_skills: dict[int, tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        for i, j in self.qq:
            if not 0 <= i < j < self.num_questions:
                raise ValueError(f"bad question pair ({i}, {j})")
        for i, j in self.ss:
            if not 0 <= i < j < self.num_skills:
                raise ValueError(f"bad skill pair ({i}, {j})")
        for q, s in self.qs:
            if not (0 <= q < self.num_questions and 0 <= s < self.num_skills):
                raise ValueError(f"bad tag pair ({q}, {s})")

    @property
    def tagged_questions(self) -> list[int]:
        return sorted({q for q, _ in self.qs})


def build_graphs(dataset: Dataset) -> RelationGraphs:
    """Derive the three relation graphs from a dataset's tags.

    Skill-skill edges use common-question tagging; when every question
    carries a single skill that relation would be empty, so skills seen
    within three consecutive interactions of one student are linked
    instead.
    """
    g = RelationGraphs(num_questions=dataset.num_questions,
                       num_skills=dataset.num_skills)
    tags: dict[int, set[int]] = {}
    single_skill = True
    for seq in dataset.students:
        for it in seq.interactions:
            ks = it.all_skills()
            if len(ks) > 1:
                single_skill = False
            tags.setdefault(it.question_id, set()).update(ks)
    for q, ks in tags.items():
        for k in ks:
            g.qs.add((q, k))
        for a in ks:
            for b in ks:
                if a < b:
                    g.ss.add((a, b))
    by_skill: dict[int, list[int]] = {}
    for q, ks in tags.items():
        for k in ks:
            by_skill.setdefault(k, []).append(q)
    for qs in by_skill.values():
        qs.sort()
        for x in range(len(qs)):
            for y in range(x + 1, len(qs)):
                g.qq.add((qs[x], qs[y]))
    if single_skill:
        for seq in dataset.students:
            ks = [it.skill_id for it in seq.interactions]
            for t in range(len(ks)):
                window = set(ks[t:t + 3])
                for a in window:
                    for b in window:
                        if a < b:
                            g.ss.add((a, b))
    g.question_skills = {q: tuple(sorted(ks)) for q, ks in tags.items()}
    return g


@dataclass(frozen=True)
class PretrainParams:
    dim_vertex: int = 64
    dim_final: int = 128
    lam: float = 0.5
    lr: float = 0.001
    epochs: int = 100
    batch: int = 256
    negative_ratio: int = 1
    full_sum: bool = False
    init_scale: float = 0.1

    def __post_init__(self):
        if self.dim_vertex < 1 or self.dim_final < 1:
            raise ValueError("embedding dimensions must be positive")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be positive")
        if self.negative_ratio < 0:
            raise ValueError("negative_ratio cannot be negative")


@dataclass
class EmbeddingSet:
    """Trained vertex embeddings plus the difficulty head."""

    question: np.ndarray
    skill: np.ndarray
    theta: np.ndarray
    dim_final: int
    fallback_rows: int = 0

    def __post_init__(self):
        if self.question.ndim != 2 or self.skill.ndim != 2:
            raise ValueError("embedding matrices must be 2-d")
        if self.question.shape[1] != self.skill.shape[1]:
            raise ValueError("question and skill embeddings must share width")
        if self.theta.shape != (self.question.shape[1] + 1,):
            raise ValueError("difficulty head must have dim_vertex + 1 entries")

    @property
    def dim_vertex(self) -> int:
        return self.question.shape[1]


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.clip(x, -500, 500))),
                    np.exp(np.clip(x, -500, 500)) /
                    (1.0 + np.exp(np.clip(x, -500, 500))))


def pair_loss(u: np.ndarray, w: np.ndarray, r: int,
              eps: float = EPS) -> tuple[float, np.ndarray, np.ndarray]:
    """Cross-entropy of the logistic pair score, with exact gradients."""
    if r not in (0, 1):
        raise ValueError(f"adjacency label must be 0 or 1, got {r}")
    s = float(_sigmoid(np.dot(u, w)))
    loss = -(r * np.log(s + eps) + (1 - r) * np.log(1.0 - s + eps))
    dl_ds = -r / (s + eps) + (1 - r) / (1.0 - s + eps)
    da = dl_ds * s * (1.0 - s)
    return float(loss), da * w, da * u


def attr_loss(q: np.ndarray, theta: np.ndarray,
              a: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Squared error of the linear difficulty head on one question."""
    pred = float(np.dot(theta[:-1], q) + theta[-1])
    diff = pred - a
    gq = 2.0 * diff * theta[:-1]
    gtheta = np.concatenate([2.0 * diff * q, [2.0 * diff]])
    return diff * diff, gq, gtheta


def _pair_block(U, W, labels, eps=EPS):
    """Vectorized pair losses: returns (losses, dU, dW)."""
    s = _sigmoid(np.einsum("ij,ij->i", U, W))
    losses = -(labels * np.log(s + eps) + (1 - labels) * np.log(1.0 - s + eps))
    da = (-labels / (s + eps) + (1 - labels) / (1.0 - s + eps)) * s * (1.0 - s)
    return losses, da[:, None] * W, da[:, None] * U


def joint_loss(emb: EmbeddingSet, graphs: RelationGraphs,
               attributes: np.ndarray, lam: float) -> float:
    """Exact joint loss over every pair of each relation (labels taken
    from adjacency) and every tagged question's attribute."""
    Q, S, theta = emb.question, emb.skill, emb.theta
    M, N = graphs.num_questions, graphs.num_skills
    total_pairs = 0.0
    qi, si = np.meshgrid(np.arange(M), np.arange(N), indexing="ij")
    labels = np.zeros((M, N))
    for q, s in graphs.qs:
        labels[q, s] = 1.0
    losses, _, _ = _pair_block(Q[qi.ravel()], S[si.ravel()], labels.ravel())
    total_pairs += losses.sum()
    for pairs, emb_mat, n in ((graphs.qq, Q, M), (graphs.ss, S, N)):
        ii, jj = np.triu_indices(n, k=1)
        lab = np.zeros(len(ii))
        member = pairs
        for t, (a, b) in enumerate(zip(ii, jj)):
            if (int(a), int(b)) in member:
                lab[t] = 1.0
        losses, _, _ = _pair_block(emb_mat[ii], emb_mat[jj], lab)
        total_pairs += losses.sum()
    attr_total = 0.0
    for q in graphs.tagged_questions:
        loss, _, _ = attr_loss(Q[q], theta, float(attributes[q]))
        attr_total += loss
    return float(lam * total_pairs + (1.0 - lam) * attr_total)


def _sample_negatives(rng, positives: set, n_rows: int, n_cols: int,
                      count: int, symmetric: bool) -> list[tuple[int, int]]:
    out = []
    for _ in range(count):
        for _try in range(100):
            i = int(rng.integers(n_rows))
            j = int(rng.integers(n_cols))
            if symmetric:
                if i == j:
                    continue
                i, j = min(i, j), max(i, j)
            if (i, j) not in positives:
                out.append((i, j))
                break
    return out


def train_embeddings(graphs: RelationGraphs, attributes: np.ndarray,
                     params: PretrainParams, seed: int = 0,
                     ) -> tuple[EmbeddingSet, list[float]]:
    """Train embeddings by mini-batch Adam; returns the per-epoch sampled
    loss trajectory alongside the result.

    With ``full_sum`` every pair of every relation enters each epoch
    (small graphs only); otherwise each positive pair is matched with
    ``negative_ratio`` freshly sampled non-edges.  Questions and skills
    that the graphs never mention keep no trained signal and are replaced
    by the mean trained row, so lookups of unseen ids degrade gracefully.
    """
    rng = np.random.default_rng(seed)
    M, N = graphs.num_questions, graphs.num_skills
    dv = params.dim_vertex
    Q = rng.normal(0.0, params.init_scale, size=(M, dv))
    S = rng.normal(0.0, params.init_scale, size=(N, dv))
    theta = rng.normal(0.0, params.init_scale, size=(dv + 1,))
    opt = Adam({"Q": Q, "S": S, "theta": theta}, lr=params.lr)

    qs_list = sorted(graphs.qs)
    qq_list = sorted(graphs.qq)
    ss_list = sorted(graphs.ss)
    attr_qs = graphs.tagged_questions
    attrs = np.asarray(attributes, dtype=float)
    if attrs.shape != (M,):
        raise ValueError(f"attributes must have shape ({M},), got {attrs.shape}")

    def epoch_terms():
        if params.full_sum:
            terms = [("qs", q, s, 1.0) if (q, s) in graphs.qs else ("qs", q, s, 0.0)
                     for q in range(M) for s in range(N)]
            for name, pairs, n in (("qq", graphs.qq, M), ("ss", graphs.ss, N)):
                for i in range(n):
                    for j in range(i + 1, n):
                        terms.append((name, i, j, 1.0 if (i, j) in pairs else 0.0))
        else:
            terms = [("qs", q, s, 1.0) for q, s in qs_list]
            terms += [("qq", i, j, 1.0) for i, j in qq_list]
            terms += [("ss", i, j, 1.0) for i, j in ss_list]
            if params.negative_ratio:
                terms += [("qs", i, j, 0.0) for i, j in _sample_negatives(
                    rng, graphs.qs, M, N, params.negative_ratio * len(qs_list), False)]
                terms += [("qq", i, j, 0.0) for i, j in _sample_negatives(
                    rng, graphs.qq, M, M, params.negative_ratio * len(qq_list), True)]
                terms += [("ss", i, j, 0.0) for i, j in _sample_negatives(
                    rng, graphs.ss, N, N, params.negative_ratio * len(ss_list), True)]
        terms += [("attr", q, -1, attrs[q]) for q in attr_qs]
        return terms

    history: list[float] = []
    for epoch in range(params.epochs):
        terms = epoch_terms()
        order = rng.permutation(len(terms))
        epoch_loss = 0.0
        for lo in range(0, len(terms), params.batch):
            batch = [terms[t] for t in order[lo:lo + params.batch]]
            gQ = np.zeros_like(Q)
            gS = np.zeros_like(S)
            gtheta = np.zeros_like(theta)
            for kind_name in ("qs", "qq", "ss"):
                sel = [t for t in batch if t[0] == kind_name]
                if not sel:
                    continue
                ii = np.array([t[1] for t in sel])
                jj = np.array([t[2] for t in sel])
                lab = np.array([t[3] for t in sel])
                if kind_name == "qs":
                    left, right = Q, S
                elif kind_name == "qq":
                    left, right = Q, Q
                else:
                    left, right = S, S
                losses, dU, dW = _pair_block(left[ii], right[jj], lab)
                epoch_loss += params.lam * losses.sum()
                gleft = gQ if left is Q else gS
                gright = gS if right is S else gQ
                np.add.at(gleft, ii, params.lam * dU)
                np.add.at(gright, jj, params.lam * dW)
            attr_sel = [t for t in batch if t[0] == "attr"]
            if attr_sel:
                qi = np.array([t[1] for t in attr_sel])
                target = np.array([t[3] for t in attr_sel])
                pred = Q[qi] @ theta[:-1] + theta[-1]
                diff = pred - target
                epoch_loss += (1.0 - params.lam) * float(np.square(diff).sum())
                np.add.at(gQ, qi, (1.0 - params.lam) * 2.0 * diff[:, None] * theta[:-1])
                gtheta[:-1] += (1.0 - params.lam) * 2.0 * (diff[:, None] * Q[qi]).sum(axis=0)
                gtheta[-1] += (1.0 - params.lam) * 2.0 * diff.sum()
            opt.step({"Q": gQ, "S": gS, "theta": gtheta})
        if not np.isfinite(epoch_loss):
            raise TrainingDivergedError(
                f"pretraining loss became non-finite at epoch {epoch} "
                f"(lr={params.lr}, batch={params.batch})")
        history.append(float(epoch_loss))

    trained_q = sorted({q for q, _ in graphs.qs} | {i for p in graphs.qq for i in p})
    trained_s = sorted({s for _, s in graphs.qs} | {i for p in graphs.ss for i in p})
    fallback = 0
    if trained_q and len(trained_q) < M:
        mean_row = Q[trained_q].mean(axis=0)
        for q in range(M):
            if q not in set(trained_q):
                Q[q] = mean_row
                fallback += 1
    if trained_s and len(trained_s) < N:
        mean_row = S[trained_s].mean(axis=0)
        missing = set(range(N)) - set(trained_s)
        for s_id in missing:
            S[s_id] = mean_row
            fallback += 1

    emb = EmbeddingSet(question=Q, skill=S, theta=theta,
                       dim_final=params.dim_final, fallback_rows=fallback)
    return emb, history


def _projection(dim_vertex: int, dim_final: int) -> np.ndarray:
    rng = np.random.default_rng(_PROJECTION_SEED + 1000003 * dim_vertex + dim_final)
    return rng.normal(0.0, 1.0 / np.sqrt(2 * dim_vertex),
                      size=(2 * dim_vertex, dim_final))


def problem_embedding(emb: EmbeddingSet, question_id: int,
                      skills: tuple[int, ...]) -> np.ndarray:
    """Compose the final fixed-width representation of one question."""
    dv = emb.dim_vertex
    if 0 <= question_id < emb.question.shape[0]:
        q = emb.question[question_id]
    else:
        q = emb.question.mean(axis=0)
    valid = [s for s in skills if 0 <= s < emb.skill.shape[0]]
    s_mean = emb.skill[valid].mean(axis=0) if valid else np.zeros(dv)
    return np.concatenate([q, s_mean]) @ _projection(dv, emb.dim_final)


def save_embeddings(emb: EmbeddingSet, path: str) -> None:
    M, dv = emb.question.shape
    N = emb.skill.shape[0]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<4i", dv, emb.dim_final, M, N))
        fh.write(emb.question.astype("<f4").tobytes())
        fh.write(emb.skill.astype("<f4").tobytes())
        fh.write(emb.theta.astype("<f4").tobytes())


def load_embeddings(path: str) -> EmbeddingSet:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise ValueError(f"{path}: not an embedding file")
        dv, d, M, N = struct.unpack("<4i", fh.read(16))
        want = (M * dv + N * dv + dv + 1) * 4
        blob = fh.read()
        if len(blob) != want:
            raise ValueError(f"{path}: truncated embedding file "
                             f"({len(blob)} payload bytes, expected {want})")
    flat = np.frombuffer(blob, dtype="<f4")
    q_end = M * dv
    s_end = q_end + N * dv
    return EmbeddingSet(
        question=flat[:q_end].astype(float).reshape(M, dv),
        skill=flat[q_end:s_end].astype(float).reshape(N, dv),
        theta=flat[s_end:].astype(float),
        dim_final=d,
    )
