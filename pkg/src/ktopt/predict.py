"""Sequential response predictor over (optionally corrected) records.

Each interaction is encoded as a sum of question, skill and response
rows projected into the hidden width; when pretrained embeddings are
supplied, that base encoding is blended with a linear map of the
composed problem embedding extended by the response bit:

    x = w * base + (1 - w) * W_e . [e ; r]

A single gated recurrence digests the inputs,

    z = sigmoid(x W_z + h U_z + b_z)
    c = tanh(x W_c + h U_c + b_c)
    h' = (1 - z) * h + z * c

and the answer to the next question is read out per question through a
logistic row, zero-initialized so an untrained model scores 0.5
everywhere.  Questions never predicted during training share a fallback
row, set to the mean of the trained rows when training finishes.

Training runs mini-batch Adam with truncated backpropagation (window 50)
and inverted dropout on the hidden state before readout.  All gradients
are hand-derived; `loss_and_grads` exposes the deterministic
no-dropout pass that finite-difference checks run against.

Prediction targets start at the second interaction of a sequence.  The
label read during training is the record's current response (corrected,
when the dataset went through optimization), while evaluation always
scores against the immutable observed answer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .ingest import Dataset, Interaction, StudentSequence
from .optim import Adam, TrainingDivergedError
from .pretrain import EmbeddingSet, problem_embedding

__all__ = [
    "FusionParams",
    "PredictorParams",
    "Metrics",
    "Model",
    "fuse",
    "recurrent_step",
    "readout",
    "train_predictor",
    "loss_and_grads",
    "evaluate",
    "auc_score",
    "save_model",
    "load_model",
]

EPS = 1e-12
MAGIC = b"CRDPMDL1"
TBPTT_WINDOW = 50


@dataclass(frozen=True)
class FusionParams:
    w: float = 0.5
    use_embeddings: bool = False

    def __post_init__(self):
        if not 0.0 <= self.w <= 1.0:
            raise ValueError(f"fusion weight must lie in [0, 1], got {self.w}")


@dataclass(frozen=True)
class PredictorParams:
    hidden_dim: int = 128
    lr: float = 0.001
    batch: int = 256
    dropout: float = 0.5
    epochs: int = 10
    tbptt: int = TBPTT_WINDOW
    init_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs cannot be negative")
        if self.batch < 1 or self.tbptt < 1:
            raise ValueError("batch and tbptt must be positive")


@dataclass
class Metrics:
    auc: float | None
    acc: float
    n_predictions: int
    note: str = ""

    def to_json(self, variant_name: str | None = None) -> dict:
        out = {"auc": self.auc, "acc": self.acc,
               "n_predictions": self.n_predictions}
        if self.note:
            out["note"] = self.note
        if variant_name is not None:
            out["variant_name"] = variant_name
        return out


class Model:
    """Parameter container for the gated recurrent predictor."""

    RECURRENT = ("W_z", "U_z", "b_z", "W_c", "U_c", "b_c")

    def __init__(self, num_questions: int, num_skills: int,
                 fusion: FusionParams, hidden_dim: int,
                 emb: EmbeddingSet | None = None,
                 init_scale: float = 0.1, seed: int = 0):
        if num_questions < 1 or num_skills < 1:
            raise ValueError("id spaces must be non-empty")
        if fusion.use_embeddings and emb is None:
            raise ValueError("fusion with embeddings needs an embedding set")
        self.num_questions = num_questions
        self.num_skills = num_skills
        self.fusion = fusion
        self.hidden_dim = hidden_dim
        self.emb = emb if fusion.use_embeddings else None
        rng = np.random.default_rng(seed)
        hid = hidden_dim

        def init(*shape):
            return rng.normal(0.0, init_scale, size=shape)

        self.params: dict[str, np.ndarray] = {
            "W_q": init(num_questions, hid),
            "W_s": init(num_skills, hid),
            "W_r": init(2, hid),
            "W_z": init(hid, hid),
            "U_z": init(hid, hid),
            "b_z": np.zeros(hid),
            "W_c": init(hid, hid),
            "U_c": init(hid, hid),
            "b_c": np.zeros(hid),
            "R": np.zeros((num_questions, hid)),
            "rb": np.zeros(num_questions),
            "R_f": np.zeros(hid),
            "rb_f": np.zeros(1),
        }
        if self.emb is not None:
            # zero like the readout: the fused path must start silent so an
            # unhelpful embedding cannot perturb the recurrence at init
            self.params["W_e"] = np.zeros((self.emb.dim_final + 1, hid))
        self.seen = np.zeros(num_questions, dtype=bool)
        self.fallback_misses = 0
        self._emb_cache: dict[tuple, np.ndarray] = {}

    def problem_vector(self, question_id: int,
                       skills: tuple[int, ...]) -> np.ndarray:
        key = (question_id, skills)
        vec = self._emb_cache.get(key)
        if vec is None:
            if not 0 <= question_id < self.emb.question.shape[0]:
                self.fallback_misses += 1
            vec = problem_embedding(self.emb, question_id, skills)
            self._emb_cache[key] = vec
        return vec


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.clip(x, -500, 500)))


def fuse(model: Model, interaction: Interaction) -> np.ndarray:
    """Encode one interaction as the predictor's input vector."""
    p = model.params
    q, r = interaction.question_id, interaction.response
    skills = interaction.all_skills()
    if 0 <= q < model.num_questions:
        q_row = p["W_q"][q]
    else:
        model.fallback_misses += 1
        q_row = p["W_q"].mean(axis=0)
    s_rows = [p["W_s"][k] for k in skills if 0 <= k < model.num_skills]
    s_row = np.mean(s_rows, axis=0) if s_rows else np.zeros(model.hidden_dim)
    base = q_row + s_row + p["W_r"][r]
    if model.emb is None:
        return base
    ext = np.concatenate([model.problem_vector(q, skills), [float(r)]])
    w = model.fusion.w
    return w * base + (1.0 - w) * ext @ p["W_e"]


def recurrent_step(model: Model, h_prev: np.ndarray,
                   x_prev: np.ndarray) -> np.ndarray:
    """Advance the hidden state by one consumed input."""
    p = model.params
    z = _sigmoid(x_prev @ p["W_z"] + h_prev @ p["U_z"] + p["b_z"])
    c = np.tanh(x_prev @ p["W_c"] + h_prev @ p["U_c"] + p["b_c"])
    h = (1.0 - z) * h_prev + z * c
    if not np.all(np.isfinite(h)):
        raise TrainingDivergedError("hidden state became non-finite")
    return h


def readout(model: Model, h: np.ndarray, question_id: int) -> float:
    """Probability that the given question is answered correctly."""
    p = model.params
    if 0 <= question_id < model.num_questions and model.seen[question_id]:
        row, bias = p["R"][question_id], p["rb"][question_id]
    else:
        row, bias = p["R_f"], p["rb_f"][0]
    y = float(_sigmoid(h @ row + bias))
    if not np.isfinite(y):
        raise TrainingDivergedError("readout became non-finite")
    return y


def _gather_inputs(model: Model, batch: list[StudentSequence], lo: int, hi: int):
    """Fixed per-window index arrays; everything except the parameter
    lookups, so the forward pass can rebuild X from current weights."""
    B = len(batch)
    T = hi - lo
    in_q = np.zeros((B, T), dtype=int)
    in_k = np.zeros((B, T), dtype=int)
    in_r = np.zeros((B, T), dtype=int)
    in_valid = np.zeros((B, T), dtype=bool)
    tgt_q = np.full((B, T), -1, dtype=int)
    tgt_y = np.zeros((B, T))
    multi: list[tuple[int, int, tuple[int, ...]]] = []
    ext = None
    if model.emb is not None:
        ext = np.zeros((B, T, model.emb.dim_final + 1))
    for b, seq in enumerate(batch):
        for i in range(T):
            pos = lo + i
            if pos >= len(seq):
                continue
            it = seq.interactions[pos]
            in_q[b, i] = it.question_id
            in_k[b, i] = it.skill_id
            in_r[b, i] = it.response
            in_valid[b, i] = True
            ks = it.all_skills()
            if len(ks) > 1:
                multi.append((b, i, ks))
            if ext is not None:
                e = model.problem_vector(it.question_id, ks)
                ext[b, i] = np.concatenate([e, [float(it.response)]])
            if pos + 1 < len(seq):
                nxt = seq.interactions[pos + 1]
                tgt_q[b, i] = nxt.question_id
                tgt_y[b, i] = nxt.response
    return in_q, in_k, in_r, in_valid, tgt_q, tgt_y, multi, ext


def _build_x(model: Model, in_q, in_k, in_r, in_valid, multi, ext):
    p = model.params
    base = p["W_q"][in_q] + p["W_s"][in_k] + p["W_r"][in_r]
    for b, i, ks in multi:
        base[b, i] = p["W_q"][in_q[b, i]] + p["W_r"][in_r[b, i]] + \
            p["W_s"][list(ks)].mean(axis=0)
    if model.emb is None:
        x = base
    else:
        w = model.fusion.w
        x = w * base + (1.0 - w) * ext @ p["W_e"]
    return x * in_valid[:, :, None]


def _scatter_input_grads(model: Model, grads, dX, in_q, in_k, in_r, in_valid,
                         multi, ext):
    coef = model.fusion.w if model.emb is not None else 1.0
    dX = dX * in_valid[:, :, None]
    flat = dX[in_valid]
    np.add.at(grads["W_q"], in_q[in_valid], coef * flat)
    np.add.at(grads["W_r"], in_r[in_valid], coef * flat)
    single = in_valid.copy()
    for b, i, _ in multi:
        single[b, i] = False
    np.add.at(grads["W_s"], in_k[single], coef * dX[single])
    for b, i, ks in multi:
        share = coef / len(ks)
        for k in ks:
            grads["W_s"][k] += share * dX[b, i]
    if model.emb is not None:
        w = model.fusion.w
        grads["W_e"] += (1.0 - w) * np.einsum("bte,bth->eh", ext, dX)


def _window_pass(model: Model, batch, lo, hi, h0, drop_masks=None,
                 mark_seen=False):
    """Forward and backward over one truncation window.

    Returns (loss_sum, n_terms, grads, h_out).  ``drop_masks`` carries
    pre-scaled inverted-dropout masks, or None for the deterministic
    pass used at evaluation and by gradient checks.
    """
    p = model.params
    in_q, in_k, in_r, in_valid, tgt_q, tgt_y, multi, ext = \
        _gather_inputs(model, batch, lo, hi)
    X = _build_x(model, in_q, in_k, in_r, in_valid, multi, ext)
    B, T = in_q.shape
    hid = model.hidden_dim
    hs = np.zeros((B, T + 1, hid))
    hs[:, 0] = h0
    zs = np.zeros((B, T, hid))
    cs = np.zeros((B, T, hid))
    for i in range(T):
        z = _sigmoid(X[:, i] @ p["W_z"] + hs[:, i] @ p["U_z"] + p["b_z"])
        c = np.tanh(X[:, i] @ p["W_c"] + hs[:, i] @ p["U_c"] + p["b_c"])
        h = (1.0 - z) * hs[:, i] + z * c
        # a padded step must not move the carried state
        h = np.where(in_valid[:, i, None], h, hs[:, i])
        zs[:, i], cs[:, i], hs[:, i + 1] = z, c, h
    h_drop = hs[:, 1:]
    if drop_masks is not None:
        h_drop = h_drop * drop_masks
    pred_mask = tgt_q >= 0
    rows = np.where(pred_mask[:, :, None],
                    np.where(model.seen[np.clip(tgt_q, 0, None)][:, :, None],
                             p["R"][np.clip(tgt_q, 0, None)], p["R_f"]),
                    0.0) if not mark_seen else p["R"][np.clip(tgt_q, 0, None)]
    bias = np.where(model.seen[np.clip(tgt_q, 0, None)], p["rb"][np.clip(tgt_q, 0, None)],
                    p["rb_f"][0]) if not mark_seen else p["rb"][np.clip(tgt_q, 0, None)]
    logits = np.einsum("bth,bth->bt", h_drop, rows) + bias
    ys = _sigmoid(logits)
    loss_terms = -(tgt_y * np.log(ys + EPS) +
                   (1.0 - tgt_y) * np.log(1.0 - ys + EPS))
    loss_sum = float(loss_terms[pred_mask].sum())
    n_terms = int(pred_mask.sum())

    grads = {k: np.zeros_like(v) for k, v in p.items()}
    dlogit = (-tgt_y / (ys + EPS) + (1.0 - tgt_y) / (1.0 - ys + EPS)) \
        * ys * (1.0 - ys)
    dlogit = dlogit * pred_mask
    if mark_seen:
        np.add.at(grads["R"], np.clip(tgt_q, 0, None),
                  dlogit[:, :, None] * h_drop)
        np.add.at(grads["rb"], np.clip(tgt_q, 0, None), dlogit)
        model.seen[tgt_q[pred_mask]] = True
    else:
        seen_t = model.seen[np.clip(tgt_q, 0, None)] & pred_mask
        fall_t = ~model.seen[np.clip(tgt_q, 0, None)] & pred_mask
        np.add.at(grads["R"], np.clip(tgt_q, 0, None),
                  (dlogit * seen_t)[:, :, None] * h_drop)
        np.add.at(grads["rb"], np.clip(tgt_q, 0, None), dlogit * seen_t)
        grads["R_f"] += ((dlogit * fall_t)[:, :, None] * h_drop).sum(axis=(0, 1))
        grads["rb_f"][0] += (dlogit * fall_t).sum()
    dh_drop = dlogit[:, :, None] * rows
    if drop_masks is not None:
        dh_next = dh_drop * drop_masks
    else:
        dh_next = dh_drop.copy()

    dX = np.zeros_like(X)
    dh = np.zeros((B, hid))
    for i in range(T - 1, -1, -1):
        dh = dh + dh_next[:, i]
        valid = in_valid[:, i, None]
        z, c, h_prev = zs[:, i], cs[:, i], hs[:, i]
        dz = dh * (c - h_prev) * valid
        dc = dh * z * valid
        dh_prev = dh * (1.0 - z) * valid + dh * (~valid[:, 0])[:, None]
        dc_pre = dc * (1.0 - c * c)
        dz_pre = dz * z * (1.0 - z)
        grads["b_c"] += dc_pre.sum(axis=0)
        grads["b_z"] += dz_pre.sum(axis=0)
        grads["W_c"] += X[:, i].T @ dc_pre
        grads["W_z"] += X[:, i].T @ dz_pre
        grads["U_c"] += h_prev.T @ dc_pre
        grads["U_z"] += h_prev.T @ dz_pre
        dX[:, i] = dc_pre @ p["W_c"].T + dz_pre @ p["W_z"].T
        dh = dh_prev + dc_pre @ p["U_c"].T + dz_pre @ p["U_z"].T
    _scatter_input_grads(model, grads, dX, in_q, in_k, in_r, in_valid,
                         multi, ext)
    return loss_sum, n_terms, grads, hs[:, -1], ys, pred_mask


def loss_and_grads(model: Model, batch: list[StudentSequence]
                   ) -> tuple[float, dict[str, np.ndarray]]:
    """Deterministic full-sequence loss with analytic gradients (no
    dropout, no truncation): the reference pass for gradient checks."""
    max_len = max(len(s) for s in batch)
    h0 = np.zeros((len(batch), model.hidden_dim))
    loss, _, grads, _, _, _ = _window_pass(model, batch, 0, max_len, h0,
                                           drop_masks=None, mark_seen=True)
    return loss, grads


def train_predictor(train: Dataset, emb: EmbeddingSet | None,
                    fp: FusionParams, pp: PredictorParams
                    ) -> tuple[Model, list[float]]:
    """Fit the predictor; returns it with the per-epoch mean loss log."""
    if not train.students:
        raise ValueError("training dataset is empty")
    model = Model(train.num_questions, train.num_skills, fp,
                  pp.hidden_dim, emb=emb, init_scale=pp.init_scale,
                  seed=pp.seed)
    opt = Adam(model.params, lr=pp.lr)
    rng = np.random.default_rng(pp.seed + 1)
    students = list(train.students)
    history: list[float] = []
    for epoch in range(pp.epochs):
        order = rng.permutation(len(students))
        total = 0.0
        count = 0
        for blo in range(0, len(students), pp.batch):
            batch = [students[k] for k in order[blo:blo + pp.batch]]
            max_len = max(len(s) for s in batch)
            h = np.zeros((len(batch), model.hidden_dim))
            for lo in range(0, max_len, pp.tbptt):
                hi = min(lo + pp.tbptt, max_len)
                if pp.dropout > 0.0:
                    keep = 1.0 - pp.dropout
                    masks = (rng.random((len(batch), hi - lo,
                                         model.hidden_dim)) < keep) / keep
                else:
                    masks = None
                loss, n, grads, h, _, _ = _window_pass(
                    model, batch, lo, hi, h, drop_masks=masks, mark_seen=True)
                if n:
                    opt.step(grads)
                    total += loss
                    count += n
        mean_loss = total / count if count else 0.0
        if not np.isfinite(mean_loss):
            raise TrainingDivergedError(
                f"training loss became non-finite at epoch {epoch} "
                f"(lr={pp.lr}, batch={pp.batch})")
        history.append(mean_loss)
    _finalize_fallback(model)
    return model, history


def _finalize_fallback(model: Model) -> None:
    """Unseen questions answer through the mean trained readout row."""
    if model.seen.any():
        model.params["R_f"] = model.params["R"][model.seen].mean(axis=0)
        model.params["rb_f"] = np.array([model.params["rb"][model.seen].mean()])


def predict_sequence(model: Model, seq: StudentSequence
                     ) -> list[tuple[int, float, int]]:
    """(position, score, observed label) for every position >= 1."""
    h = np.zeros(model.hidden_dim)
    out = []
    for t, it in enumerate(seq.interactions[:-1]):
        h = recurrent_step(model, h, fuse(model, it))
        nxt = seq.interactions[t + 1]
        out.append((t + 1, readout(model, h, nxt.question_id), nxt.observed))
    return out


def evaluate(model: Model, test: Dataset, batch: int = 256) -> Metrics:
    """Score every position >= 1 of every test sequence against the
    observed answers."""
    if not test.students:
        raise ValueError("test dataset is empty")
    scores: list[float] = []
    labels: list[int] = []
    for blo in range(0, len(test.students), batch):
        group = test.students[blo:blo + batch]
        max_len = max(len(s) for s in group)
        h = np.zeros((len(group), model.hidden_dim))
        lo = 0
        while lo < max_len:
            hi = min(lo + TBPTT_WINDOW, max_len)
            _, _, _, h, ys, pred_mask = _window_pass(
                model, group, lo, hi, h, drop_masks=None, mark_seen=False)
            for b, seq in enumerate(group):
                for i in range(hi - lo):
                    if pred_mask[b, i]:
                        scores.append(float(ys[b, i]))
                        labels.append(seq.interactions[lo + i + 1].observed)
            lo = hi
    if not scores:
        raise ValueError("no predictable positions in the test set")
    if not all(np.isfinite(scores)):
        raise TrainingDivergedError("evaluation produced non-finite scores")
    acc = float(np.mean([(s >= 0.5) == bool(y)
                         for s, y in zip(scores, labels)]))
    auc = auc_score(labels, scores)
    note = "" if auc is not None else "auc undefined: single-class labels"
    return Metrics(auc=auc, acc=acc, n_predictions=len(scores), note=note)


def auc_score(labels, scores) -> float | None:
    """Mann-Whitney statistic: concordant pairs count 1, ties 0.5."""
    labels = np.asarray(labels, dtype=int)
    scores = np.asarray(scores, dtype=float)
    if labels.shape != scores.shape or labels.ndim != 1:
        raise ValueError("labels and scores must be equal-length vectors")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(sorted_scores):
        j = i
        while j + 1 < len(sorted_scores) and \
                sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[labels == 1].sum() - 0.5 * n_pos * (n_pos + 1)
    return float(u / (n_pos * n_neg))


_HEADER = "<6i"


def save_model(model: Model, path: str) -> None:
    p = model.params
    emb_in = p["W_e"].shape[0] if "W_e" in p else 0
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack(_HEADER, model.hidden_dim, model.num_questions,
                             model.num_skills, 1 if model.emb is not None else 0,
                             emb_in, 0))
        fh.write(struct.pack("<f", model.fusion.w))
        fh.write(model.seen.astype(np.uint8).tobytes())
        for name in sorted(p):
            fh.write(p[name].astype("<f4").tobytes())


def load_model(path: str, emb: EmbeddingSet | None = None) -> Model:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ValueError(f"{path}: not a model checkpoint")
        hid, M, N, use_emb, emb_in, _ = struct.unpack(_HEADER, fh.read(24))
        w = struct.unpack("<f", fh.read(4))[0]
        seen = np.frombuffer(fh.read(M), dtype=np.uint8).astype(bool)
        blob = fh.read()
    if use_emb and emb is None:
        raise ValueError(f"{path}: checkpoint was trained with embeddings; "
                         "supply the matching embedding file")
    if use_emb and emb is not None and emb.dim_final + 1 != emb_in:
        raise ValueError(f"{path}: embedding width {emb.dim_final} does not "
                         f"match checkpoint input {emb_in - 1}")
    fusion = FusionParams(w=round(float(w), 6), use_embeddings=bool(use_emb))
    model = Model(M, N, fusion, hid, emb=emb if use_emb else None, seed=0)
    model.seen = seen.copy()
    sizes = {name: arr.size for name, arr in model.params.items()}
    want = sum(sizes.values()) * 4
    if len(blob) != want:
        raise ValueError(f"{path}: truncated checkpoint "
                         f"({len(blob)} payload bytes, expected {want})")
    flat = np.frombuffer(blob, dtype="<f4")
    off = 0
    for name in sorted(model.params):
        n = sizes[name]
        model.params[name] = flat[off:off + n].astype(float).reshape(
            model.params[name].shape)
        off += n
    return model
