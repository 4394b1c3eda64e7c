"""Experiment specs and the end-to-end private -> shadow -> attack pipeline.

An :class:`ExperimentSpec` fully determines every artifact. It carries one
top-level seed; the corpus, fold, FL and attack seeds are derived from it so
that a spec file plus a seed is the whole story.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import rng as rng_mod
from .attack import AttackConfig, AttackEval, AttackModel, build_attack_dataset, eval_attack, fusion_weights, \
    run_shadow_training, train_attack
from .data import NUM_CLASSES, CorpusConfig, FoldPlan, Speaker, gender_probe_accuracy, load_corpus, make_folds, \
    select, shard_clients, synth_corpus, znormalize_per_speaker
from .errors import ConfigError
from .fl import Algorithm, FLConfig, TrainedRun, UpdateLog, train_federated
from .nn.mlp import MlpParams, init_mlp

PAPER_FEATURE_DIMS = (512, 768, 988)
PAPER_ROUNDS = 200
DESK_ROUNDS = 50
DEFAULT_LAYER_CONDITIONS = ((1, 2, 3), (1,), (2,), (3,))

# desk benchmark corpus: 50 speakers leave 40 training clients per fold
DESK_CORPUS = dict(profile="custom", num_speakers=50, num_male=25, feature_dim=88, utterances_per_speaker=300,
                   emotion_separation=3.0, attribute_separation=1.0, noise_std=0.5)
DESK_ATTACK = dict(epochs=2, standardize=True)


def _corpus_from(d: dict | None, prefix: str) -> CorpusConfig:
    d = d or {}
    base = dict(DESK_CORPUS, speaker_prefix=prefix)
    if d.get("profile", "custom") != "custom":
        # a named profile brings its own speaker and utterance counts
        for key in ("num_speakers", "num_male", "utterances_per_speaker"):
            base.pop(key)
    base.update(d)
    if "proportions" in base and base["proportions"] is not None:
        base["proportions"] = tuple(base["proportions"])
    unknown = set(base) - set(CorpusConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown corpus keys: {sorted(unknown)}")
    return CorpusConfig(**base)


def _check_keys(d: dict, cls, what: str):
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")


@dataclass
class ExperimentSpec:
    private: CorpusConfig = field(default_factory=lambda: _corpus_from(None, "p"))
    shadow: CorpusConfig = field(default_factory=lambda: _corpus_from(None, "s"))
    fl: FLConfig = field(default_factory=lambda: FLConfig(global_rounds=DESK_ROUNDS))
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(**DESK_ATTACK))
    algorithms: tuple[str, ...] = ("fedsgd",)
    folds: tuple[int, ...] = (0,)
    num_folds: int = 5
    shards_per_speaker: int = 1
    layer_conditions: tuple[tuple[int, ...], ...] = DEFAULT_LAYER_CONDITIONS
    znorm: str = "auto"  # "auto": z-normalise loaded corpora, leave synthetic ones as generated
    private_path: str | None = None
    shadow_path: str | None = None
    paper_scale: bool = False
    seed: int = 0

    def resolved(self) -> "ExperimentSpec":
        """Apply paper scale, derive sub-seeds and validate."""
        spec = replace(self)
        if spec.paper_scale:
            spec.fl = replace(spec.fl, global_rounds=PAPER_ROUNDS)
            spec.attack = replace(spec.attack, epochs=AttackConfig.epochs, standardize=False)
        spec.private = replace(spec.private, seed=rng_mod.derive(spec.seed, "corpus").integers(2**62).item())
        spec.shadow = replace(spec.shadow, seed=spec.private.seed)
        spec.fl = replace(spec.fl, seed=rng_mod.derive(spec.seed, "fl").integers(2**62).item())
        spec.attack = replace(spec.attack, seed=rng_mod.derive(spec.seed, "attack").integers(2**62).item())
        spec.algorithms = tuple(Algorithm(a).value for a in spec.algorithms)
        spec.folds = tuple(int(f) for f in spec.folds)
        spec.layer_conditions = tuple(tuple(sorted(set(int(i) for i in c))) for c in spec.layer_conditions)
        spec.validate()
        return spec

    def validate(self):
        self.fl.validate()
        self.attack.validate()
        if not self.algorithms:
            raise ConfigError("no algorithms selected")
        if not self.folds or any(not 0 <= f < self.num_folds for f in self.folds):
            raise ConfigError(f"folds must lie in [0, {self.num_folds})")
        if not self.layer_conditions:
            raise ConfigError("no layer conditions")
        for c in self.layer_conditions:
            if not c or any(i not in (1, 2, 3) for i in c):
                raise ConfigError(f"layer condition {c} must be a non-empty subset of {{1, 2, 3}}")
        if self.znorm not in ("auto", "on", "off"):
            raise ConfigError("znorm must be 'auto', 'on' or 'off'")
        if self.private_path is None:
            self.private.resolved()
        if self.shadow_path is None:
            self.shadow.resolved()
            if self.private_path is None and self.shadow.speaker_prefix == self.private.speaker_prefix:
                raise ConfigError("private and shadow corpora need distinct speaker prefixes")
        if self.private_path is None and self.shadow_path is None \
                and self.private.feature_dim != self.shadow.feature_dim:
            raise ConfigError("private and shadow feature_dim differ")
        if self.paper_scale and self.private_path is None and self.private.feature_dim not in PAPER_FEATURE_DIMS:
            raise ConfigError(f"paper scale feature_dim must be one of {PAPER_FEATURE_DIMS}")

    def to_dict(self) -> dict:
        return {
            "private": _corpus_dict(self.private),
            "shadow": _corpus_dict(self.shadow),
            "fl": self.fl.to_dict(),
            "attack": self.attack.to_dict(),
            "algorithms": list(self.algorithms),
            "folds": list(self.folds),
            "num_folds": self.num_folds,
            "shards_per_speaker": self.shards_per_speaker,
            "layer_conditions": [list(c) for c in self.layer_conditions],
            "znorm": self.znorm,
            "private_path": self.private_path,
            "shadow_path": self.shadow_path,
            "paper_scale": self.paper_scale,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        _check_keys(d, cls, "spec")
        kw = dict(d)
        paper = bool(kw.get("paper_scale", False))
        for name, prefix in (("private", "p"), ("shadow", "s")):
            sub = dict(kw.get(name) or {})
            if paper:
                sub.setdefault("feature_dim", 988)
            kw[name] = _corpus_from(sub, prefix)
        fl = dict(kw.get("fl") or {})
        _check_keys(fl, FLConfig, "fl")
        fl.setdefault("global_rounds", DESK_ROUNDS)
        kw["fl"] = FLConfig.from_dict(fl)
        at = dict(kw.get("attack") or {})
        _check_keys(at, AttackConfig, "attack")
        kw["attack"] = AttackConfig.from_dict({**DESK_ATTACK, **at})
        for key in ("algorithms", "folds"):
            if key in kw:
                kw[key] = tuple(kw[key])
        if "layer_conditions" in kw:
            kw["layer_conditions"] = tuple(tuple(c) for c in kw["layer_conditions"])
        try:
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad spec: {exc}") from exc

    @classmethod
    def from_file(cls, path) -> "ExperimentSpec":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)


def _corpus_dict(c: CorpusConfig) -> dict:
    d = {k: getattr(c, k) for k in CorpusConfig.__dataclass_fields__}
    if d["proportions"] is not None:
        d["proportions"] = list(d["proportions"])
    return d


# -- stages -----------------------------------------------------------------


def _maybe_znorm(speakers: list[Speaker], spec: ExperimentSpec, loaded: bool) -> list[Speaker]:
    if spec.znorm == "on" or (spec.znorm == "auto" and loaded):
        return znormalize_per_speaker(speakers)
    return speakers


def private_speakers(spec: ExperimentSpec) -> list[Speaker]:
    if spec.private_path:
        return _maybe_znorm(load_corpus(spec.private_path), spec, True)
    return _maybe_znorm(synth_corpus(spec.private), spec, False)


def shadow_speakers(spec: ExperimentSpec) -> list[Speaker]:
    if spec.shadow_path:
        return _maybe_znorm(load_corpus(spec.shadow_path), spec, True)
    return _maybe_znorm(synth_corpus(spec.shadow), spec, False)


def probe(speakers: list[Speaker], spec: ExperimentSpec) -> float:
    return gender_probe_accuracy(speakers, seed=spec.seed)


def fold_plans(spec: ExperimentSpec, speakers: list[Speaker]) -> list[FoldPlan]:
    return make_folds(speakers, spec.num_folds, seed=spec.seed)


def fl_config(spec: ExperimentSpec, algorithm: str, dropout_first: float | None = None) -> FLConfig:
    cfg = replace(spec.fl, algorithm=Algorithm(algorithm))
    if dropout_first is not None:
        cfg = replace(cfg, dropout_first=float(dropout_first))
    return cfg.validate()


def initial_model(spec: ExperimentSpec, feature_dim: int, config: FLConfig | None = None) -> MlpParams:
    """The private run's initial global model (shared by every fold)."""
    cfg = config or spec.fl
    return init_mlp((feature_dim, *cfg.hidden, NUM_CLASSES), rng_mod.derive(cfg.seed, "init"))


def train_private(spec: ExperimentSpec, speakers: list[Speaker], plan: FoldPlan, config: FLConfig,
                  threads: int = 1) -> TrainedRun:
    clients = shard_clients(select(speakers, plan.train_speaker_ids), spec.shards_per_speaker, seed=spec.seed)
    init = initial_model(spec, speakers[0].features.shape[1], config)
    return train_federated(clients, config, plan, select(speakers, plan.test_speaker_ids), threads=threads,
                           init=init)


def train_shadows(spec: ExperimentSpec, shadow: list[Speaker], config: FLConfig, init: MlpParams | None,
                  private_ids=(), threads: int = 1) -> list[UpdateLog]:
    return run_shadow_training(shadow, config, spec.attack, spec.shards_per_speaker, init=init,
                               private_speaker_ids=private_ids, threads=threads)


def attack_cell(spec: ExperimentSpec, shadow_logs: list[UpdateLog], private_logs: list[UpdateLog],
                layers, algorithm: str, progress=None) -> tuple[AttackModel, list[AttackEval]]:
    """Train one attack model for ``layers`` and evaluate it on each private log."""
    dataset = build_attack_dataset(shadow_logs, algorithm, seed=spec.attack.seed)
    model = train_attack(dataset, spec.attack, tuple(layers), progress=progress)
    return model, [eval_attack(model, log, algorithm) for log in private_logs]


def layer_label(layers) -> str:
    return "+".join(str(i) for i in layers)


def cell_record(algorithm: str, layers, fold: int, ev: AttackEval, ser_uar: float | None, ser_dims) -> dict:
    return {
        "algorithm": algorithm,
        "layers": layer_label(layers),
        "fold": fold,
        "ser_uar": ser_uar,
        "attack_uar": ev.metrics.uar,
        "attack_accuracy": ev.metrics.accuracy,
        "client_majority_uar": ev.client_metrics.uar,
        "n_updates": int(len(ev.labels)),
        "fusion_weights": fusion_weights(ser_dims, layers).tolist(),
        "per_branch_uar": {str(k): m.uar for k, m in sorted(ev.branch_metrics.items())},
        "confusion": ev.metrics.confusion.tolist(),
        "client_confusion": ev.client_metrics.confusion.tolist(),
    }


CSV_COLUMNS = ("algorithm", "layers", "fold", "ser_uar", "attack_uar", "attack_accuracy", "client_majority_uar",
               "n_updates")


def binomial_interval(n: int, p: float = 0.5, z: float = 2.5758293035489004) -> tuple[float, float]:
    """Central normal-approximation interval for a proportion (99% by default)."""
    half = z * np.sqrt(p * (1 - p) / n)
    return p - half, p + half


def run_dropout_sweep(spec: ExperimentSpec, rates, algorithm: str = "fedsgd", threads: int = 1,
                      progress=None) -> list[dict]:
    """Full pipeline per first-layer dropout rate, in private and shadow runs alike."""
    rates = [float(r) for r in rates]
    if not rates or any(not 0.0 <= r < 1.0 for r in rates):
        raise ConfigError("dropout rates must lie in [0, 1)")
    priv = private_speakers(spec)
    shadow = shadow_speakers(spec)
    plans = fold_plans(spec, priv)
    rows = []
    for rate in rates:
        cfg = fl_config(spec, algorithm, rate)
        runs = [train_private(spec, priv, plans[f], cfg, threads) for f in spec.folds]
        init = initial_model(spec, priv[0].features.shape[1], cfg)
        logs = train_shadows(spec, shadow, cfg, init, [s.speaker_id for s in priv], threads)
        _, evals = attack_cell(spec, logs, [r.log for r in runs], (1, 2, 3), algorithm, progress)
        rows.append({
            "dropout_first": rate,
            "fl_config": cfg.to_dict(),  # used verbatim by the private and the shadow runs
            "algorithm": algorithm,
            "ser_uar": float(np.mean([r.test_metrics.uar for r in runs])),
            "attack_uar": float(np.mean([e.metrics.uar for e in evals])),
            "client_majority_uar": float(np.mean([e.client_metrics.uar for e in evals])),
        })
    return rows
