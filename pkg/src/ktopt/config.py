"""Run configuration: sectioned key=value files, overrides, seeds.

The file format is a plain TOML-like text: ``[section]`` headers,
``key = value`` lines, ``#`` comments.  Every key has a typed default;
unknown sections or keys are rejected rather than ignored, so a typo in
a sweep script fails loudly instead of silently running defaults.

All stage randomness descends from one root seed.  Each stage hashes
``"{root}:{label}"`` so that, for example, changing predictor epochs
never perturbs the train/test split.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass

from .detect import CoherenceParams, ContinuityParams
from .dpopt import DpParams, PartitionParams
from .predict import FusionParams, PredictorParams
from .pretrain import PretrainParams
from .stats import DEFAULT_MU
from .synth import SynthConfig

__all__ = ["ConfigError", "RunConfig", "load_config", "parse_config",
           "set_value", "stage_seed", "SWEEP_PARAMS"]


class ConfigError(ValueError):
    pass


def stage_seed(root: int, label: str) -> int:
    """Derive a stage seed from the root seed and a fixed label."""
    digest = hashlib.sha256(f"{root}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


_COH = CoherenceParams()
_CON = ContinuityParams()
_DP = DpParams()
_PART = PartitionParams()
_PRE = PretrainParams()
_FUSE = FusionParams()
_PRED = PredictorParams()
_SYN = SynthConfig()


@dataclass(frozen=True)
class RunConfig:
    alpha: float = _COH.alpha
    h: float = _COH.h
    H: float = _COH.H
    e: int = _CON.e
    l_max: int = _CON.l_max
    Y: float = _CON.Y
    y: float = _CON.y

    gamma: float = _DP.gamma
    beta: float = _DP.beta
    max_exact: int = _DP.max_exact
    mu: float = DEFAULT_MU

    p: int = _PART.p

    dim_vertex: int = _PRE.dim_vertex
    dim_final: int = _PRE.dim_final
    lam: float = _PRE.lam
    pretrain_lr: float = _PRE.lr
    pretrain_epochs: int = _PRE.epochs
    pretrain_batch: int = _PRE.batch
    negative_ratio: int = _PRE.negative_ratio
    full_sum: bool = _PRE.full_sum
    pretrain_init_scale: float = _PRE.init_scale

    w: float = _FUSE.w

    hidden_dim: int = _PRED.hidden_dim
    predictor_lr: float = _PRED.lr
    predictor_batch: int = _PRED.batch
    dropout: float = _PRED.dropout
    predictor_epochs: int = _PRED.epochs
    tbptt: int = _PRED.tbptt
    predictor_init_scale: float = _PRED.init_scale

    n_students: int = _SYN.n_students
    n_questions: int = _SYN.n_questions
    n_skills: int = _SYN.n_skills
    seq_len: int = _SYN.seq_len
    slip: float = _SYN.slip
    guess: float = _SYN.guess
    slip_spread: float = _SYN.slip_spread
    guess_spread: float = _SYN.guess_spread
    mastery_model: str = _SYN.mastery_model
    drift_step: float = _SYN.drift_step
    persistence: float = _SYN.persistence
    band_width: float = _SYN.band_width
    center_lo: float = _SYN.center_lo
    center_hi: float = _SYN.center_hi
    n_spread_skills: int = _SYN.n_spread_skills
    spread_lo: float = _SYN.spread_lo
    spread_hi: float = _SYN.spread_hi

    seed: int = 0
    test_fraction: float = 0.2
    ov: bool = False
    su: bool = False
    per: bool = False
    be: bool = False

    @property
    def variant_name(self) -> str:
        name = "DKT"
        for flag, tag in ((self.be, "Be"), (self.ov, "ov"),
                          (self.su, "su"), (self.per, "per")):
            if flag:
                name += "+" + tag
        return name

    def coherence_params(self) -> CoherenceParams:
        return CoherenceParams(alpha=self.alpha, h=self.h, H=self.H)

    def continuity_params(self) -> ContinuityParams:
        return ContinuityParams(e=self.e, l_max=self.l_max, Y=self.Y, y=self.y)

    def dp_params(self) -> DpParams:
        return DpParams(gamma=self.gamma, beta=self.beta,
                        coh=self.coherence_params(),
                        con=self.continuity_params(),
                        use_perf=self.per, max_exact=self.max_exact)

    def partition_params(self) -> PartitionParams:
        return PartitionParams(p=self.p)

    def pretrain_params(self) -> PretrainParams:
        return PretrainParams(dim_vertex=self.dim_vertex,
                              dim_final=self.dim_final, lam=self.lam,
                              lr=self.pretrain_lr, epochs=self.pretrain_epochs,
                              batch=self.pretrain_batch,
                              negative_ratio=self.negative_ratio,
                              full_sum=self.full_sum,
                              init_scale=self.pretrain_init_scale)

    def fusion_params(self) -> FusionParams:
        return FusionParams(w=self.w, use_embeddings=self.be)

    def predictor_params(self) -> PredictorParams:
        return PredictorParams(hidden_dim=self.hidden_dim,
                               lr=self.predictor_lr,
                               batch=self.predictor_batch,
                               dropout=self.dropout,
                               epochs=self.predictor_epochs,
                               tbptt=self.tbptt,
                               init_scale=self.predictor_init_scale,
                               seed=stage_seed(self.seed, "predictor"))

    def synth_config(self) -> SynthConfig:
        return SynthConfig(n_students=self.n_students,
                           n_questions=self.n_questions,
                           n_skills=self.n_skills, seq_len=self.seq_len,
                           slip=self.slip, guess=self.guess,
                           slip_spread=self.slip_spread,
                           guess_spread=self.guess_spread,
                           mastery_model=self.mastery_model,
                           drift_step=self.drift_step,
                           persistence=self.persistence,
                           band_width=self.band_width,
                           center_lo=self.center_lo,
                           center_hi=self.center_hi,
                           n_spread_skills=self.n_spread_skills,
                           spread_lo=self.spread_lo,
                           spread_hi=self.spread_hi,
                           seed=self.seed)

    def validate(self) -> "RunConfig":
        """Build every parameter object once so range checks all fire."""
        self.dp_params()
        self.partition_params()
        self.pretrain_params()
        self.fusion_params()
        self.predictor_params()
        self.synth_config()
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError(
                f"test_fraction must lie in (0, 1), got {self.test_fraction}")
        if self.mu <= 0:
            raise ConfigError(f"mu must be positive, got {self.mu}")
        return self


# (section, file key) -> RunConfig field
_SCHEMA: dict[str, dict[str, str]] = {
    "detect": {"alpha": "alpha", "h": "h", "H": "H", "e": "e",
               "l_max": "l_max", "Y": "Y", "y": "y"},
    "dp": {"gamma": "gamma", "beta": "beta", "max_exact": "max_exact",
           "mu": "mu"},
    "partition": {"p": "p"},
    "pretrain": {"dim_vertex": "dim_vertex", "dim_final": "dim_final",
                 "lam": "lam", "lr": "pretrain_lr",
                 "epochs": "pretrain_epochs", "batch": "pretrain_batch",
                 "negative_ratio": "negative_ratio", "full_sum": "full_sum",
                 "init_scale": "pretrain_init_scale"},
    "fusion": {"w": "w"},
    "predictor": {"hidden_dim": "hidden_dim", "lr": "predictor_lr",
                  "batch": "predictor_batch", "dropout": "dropout",
                  "epochs": "predictor_epochs", "tbptt": "tbptt",
                  "init_scale": "predictor_init_scale"},
    "synth": {"n_students": "n_students", "n_questions": "n_questions",
              "n_skills": "n_skills", "seq_len": "seq_len", "slip": "slip",
              "guess": "guess", "slip_spread": "slip_spread",
              "guess_spread": "guess_spread",
              "mastery_model": "mastery_model",
              "drift_step": "drift_step", "persistence": "persistence",
              "band_width": "band_width", "center_lo": "center_lo",
              "center_hi": "center_hi", "n_spread_skills": "n_spread_skills",
              "spread_lo": "spread_lo", "spread_hi": "spread_hi"},
    "run": {"seed": "seed", "test_fraction": "test_fraction", "ov": "ov",
            "su": "su", "per": "per", "be": "be"},
}

# names accepted by the sweep subcommand
SWEEP_PARAMS: dict[str, tuple[str, str]] = {
    "alpha": ("detect", "alpha"),
    "h": ("detect", "h"),
    "H": ("detect", "H"),
    "e": ("detect", "e"),
    "Lmax": ("detect", "l_max"),
    "Y": ("detect", "Y"),
    "y": ("detect", "y"),
    "gamma": ("dp", "gamma"),
    "p": ("partition", "p"),
    "lambda": ("pretrain", "lam"),
    "w": ("fusion", "w"),
}


def _coerce(section: str, key: str, raw: str, line_no: int):
    field = _SCHEMA[section][key]
    default = getattr(RunConfig, field)
    raw = raw.strip()
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
        raw = raw[1:-1]
    try:
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        kind = type(default).__name__
        raise ConfigError(
            f"line {line_no}: {section}.{key} expects {kind}, got {raw!r}")


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    values: dict[str, object] = {}
    section = None
    for line_no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SCHEMA:
                raise ConfigError(f"line {line_no}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected key = value, got {raw!r}")
        if section is None:
            raise ConfigError(f"line {line_no}: key outside any [section]")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in _SCHEMA[section]:
            raise ConfigError(f"line {line_no}: unknown key {section}.{key}")
        values[_SCHEMA[section][key]] = _coerce(section, key, val, line_no)
    cfg = dataclasses.replace(base or RunConfig(), **values)
    return cfg.validate()


def load_config(path: str, base: RunConfig | None = None) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), base=base)


def set_value(cfg: RunConfig, section: str, key: str, raw: str) -> RunConfig:
    """Apply one ``section.key=value`` override with file-style coercion."""
    if section not in _SCHEMA or key not in _SCHEMA[section]:
        raise ConfigError(f"unknown config entry {section}.{key}")
    value = _coerce(section, key, raw, 0)
    return dataclasses.replace(cfg, **{_SCHEMA[section][key]: value}).validate()
