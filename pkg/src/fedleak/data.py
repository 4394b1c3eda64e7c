"""Client-partitioned SER-style corpora.

Synthetic corpora follow a class-mean Gaussian model with a rank-1 gender
direction::

    x = mu[emotion] + delta * s_gender * u + noise_std * N(0, I)

``mu`` (four emotion means) and ``u`` (unit gender direction) form the
corpus "world" and depend only on ``CorpusConfig.seed``; each speaker's
draws come from a stream keyed by ``(seed, speaker_id)``. Corpora that share
a seed but use different speaker prefixes therefore sample disjoint speakers
from the same distribution, which is how private and shadow data are built.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import rng as rng_mod
from .errors import ConfigError, ShapeError

EMOTIONS = ("neutral", "happy", "sad", "angry")
NUM_CLASSES = len(EMOTIONS)
FORMAT_VERSION = 1

# label counts (neutral, happy, sad, angry), speaker counts and mean
# utterances per speaker for the three reference corpora
PROFILES = {
    "IEMOCAP-like": dict(counts=(1099, 947, 608, 289), num_male=5, num_female=5),
    "CREMAD-like": dict(counts=(1972, 1219, 588, 1019), num_male=48, num_female=43),
    "MSPIMPROV-like": dict(counts=(2072, 1184, 739, 585), num_male=6, num_female=6),
}


@dataclass
class Speaker:
    speaker_id: str
    gender: str  # "F" or "M"
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.gender not in ("F", "M"):
            raise ValueError(f"gender must be 'F' or 'M', got {self.gender!r}")
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ShapeError(f"speaker {self.speaker_id}: need a non-empty (n, dim) matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise ShapeError(f"speaker {self.speaker_id}: {self.labels.shape} labels for {self.features.shape[0]} rows")
        if self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES:
            raise ValueError(f"speaker {self.speaker_id}: labels outside [0, {NUM_CLASSES})")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def gender_label(self) -> int:
        """0 for F, 1 for M."""
        return int(self.gender == "M")


@dataclass
class ClientShard:
    client_id: str
    speaker_id: str
    gender: str
    features: np.ndarray
    labels: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray

    @property
    def gender_label(self) -> int:
        return int(self.gender == "M")

    @property
    def n_train(self) -> int:
        return len(self.train_idx)

    @property
    def x_train(self):
        return self.features[self.train_idx]

    @property
    def y_train(self):
        return self.labels[self.train_idx]

    @property
    def x_val(self):
        return self.features[self.val_idx]

    @property
    def y_val(self):
        return self.labels[self.val_idx]


@dataclass
class CorpusConfig:
    profile: str = "custom"
    num_speakers: int | None = None
    num_male: int | None = None
    feature_dim: int = 88
    utterances_per_speaker: int | None = None
    proportions: tuple[float, ...] | None = None
    attribute_separation: float = 1.0
    emotion_separation: float = 1.0
    noise_std: float = 0.5
    gender_in_emotion_span: bool = False
    speaker_prefix: str = "spk"
    seed: int = 0

    def resolved(self) -> "CorpusConfig":
        """Fill profile defaults and validate."""
        prof = PROFILES.get(self.profile)
        if prof is None and self.profile != "custom":
            raise ConfigError(f"unknown corpus profile {self.profile!r}")
        num_speakers, num_male = self.num_speakers, self.num_male
        proportions, upe = self.proportions, self.utterances_per_speaker
        if prof is not None:
            total = prof["num_male"] + prof["num_female"]
            if num_speakers is None:
                num_speakers = total
                num_male = prof["num_male"] if num_male is None else num_male
            if proportions is None:
                counts = np.asarray(prof["counts"], dtype=np.float64)
                proportions = tuple((counts / counts.sum()).tolist())
            if upe is None:
                upe = int(round(sum(prof["counts"]) / total))
        if num_speakers is None:
            num_speakers = 10
        if num_male is None:
            num_male = num_speakers // 2
        if proportions is None:
            proportions = (0.25, 0.25, 0.25, 0.25)
        if upe is None:
            upe = 60
        cfg = replace(self, num_speakers=int(num_speakers), num_male=int(num_male),
                      proportions=tuple(float(p) for p in proportions), utterances_per_speaker=int(upe))
        cfg.validate()
        return cfg

    def validate(self):
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be >= 1")
        if not self.proportions:
            raise ConfigError("emotion proportions are empty")
        if len(self.proportions) != NUM_CLASSES:
            raise ConfigError(f"need {NUM_CLASSES} emotion proportions")
        if any(p < 0 for p in self.proportions) or abs(sum(self.proportions) - 1.0) > 1e-9:
            raise ConfigError("emotion proportions must be non-negative and sum to 1")
        if self.attribute_separation < 0 or self.emotion_separation < 0 or self.noise_std < 0:
            raise ConfigError("separations and noise_std must be non-negative")
        if self.num_speakers is not None and self.num_speakers < 1:
            raise ConfigError("num_speakers must be >= 1")
        if self.num_male is not None and self.num_speakers is not None and not 0 <= self.num_male <= self.num_speakers:
            raise ConfigError("num_male must lie in [0, num_speakers]")
        if self.utterances_per_speaker is not None and self.utterances_per_speaker < 1:
            raise ConfigError("utterances_per_speaker must be >= 1")


def world_vectors(config: CorpusConfig):
    """Emotion means ``(4, dim)`` and the unit gender direction ``(dim,)``."""
    g = rng_mod.derive(config.seed, "world", config.feature_dim)
    mu = g.normal(size=(NUM_CLASSES, config.feature_dim))
    mu /= np.linalg.norm(mu, axis=1, keepdims=True)
    mu *= config.emotion_separation
    if config.gender_in_emotion_span:
        coef = g.normal(size=NUM_CLASSES)
        u = coef @ mu if config.emotion_separation > 0 else g.normal(size=config.feature_dim)
    else:
        u = g.normal(size=config.feature_dim)
    return mu, u / np.linalg.norm(u)


def gender_schedule(num_speakers: int, num_male: int) -> list[str]:
    """Interleave genders so that any prefix of speakers is roughly balanced."""
    out, m, f = [], num_male, num_speakers - num_male
    for i in range(num_speakers):
        # pick M when it is behind its target share
        want_m = m > 0 and (f == 0 or (num_male - m) * num_speakers <= i * num_male)
        out.append("M" if want_m else "F")
        if want_m:
            m -= 1
        else:
            f -= 1
    return out


def synth_corpus(config: CorpusConfig) -> list[Speaker]:
    cfg = config.resolved()
    mu, u = world_vectors(cfg)
    props = np.asarray(cfg.proportions)
    speakers = []
    for i, gender in enumerate(gender_schedule(cfg.num_speakers, cfg.num_male)):
        sid = f"{cfg.speaker_prefix}{i:03d}"
        g = rng_mod.derive(cfg.seed, "speaker", sid)
        n = cfg.utterances_per_speaker
        labels = g.choice(NUM_CLASSES, size=n, p=props)
        sign = 1.0 if gender == "M" else -1.0
        noise = g.normal(scale=cfg.noise_std, size=(n, cfg.feature_dim))
        x = mu[labels] + cfg.attribute_separation * sign * u + noise
        speakers.append(Speaker(sid, gender, x, labels))
    return speakers


def znormalize_per_speaker(speakers: list[Speaker], eps: float = 1e-8) -> list[Speaker]:
    """Standardise each speaker's features per dimension (population std).

    Dimensions whose std is below ``eps`` are only centred.
    """
    out = []
    for spk in speakers:
        if spk.n < 2:
            raise ConfigError(f"speaker {spk.speaker_id} has a single utterance; cannot estimate std")
        x = spk.features
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        scale = np.where(std < eps, 1.0, std)
        out.append(Speaker(spk.speaker_id, spk.gender, (x - mean) / scale, spk.labels.copy()))
    return out


def _split_rows(n: int, g: np.random.Generator, train_fraction: float = 0.8):
    perm = g.permutation(n)
    n_val = int(round((1.0 - train_fraction) * n))
    n_val = min(n_val, n - 1)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def shard_clients(speakers: list[Speaker], shards_per_speaker: int = 1, seed: int = 0) -> list[ClientShard]:
    """Round-robin each speaker's utterances into shards; 80/20 split per shard."""
    if shards_per_speaker < 1:
        raise ConfigError("shards_per_speaker must be >= 1")
    clients = []
    for spk in speakers:
        if spk.n < shards_per_speaker:
            raise ConfigError(f"speaker {spk.speaker_id} has {spk.n} utterances for {shards_per_speaker} shards")
        for s in range(shards_per_speaker):
            rows = np.arange(s, spk.n, shards_per_speaker)
            cid = spk.speaker_id if shards_per_speaker == 1 else f"{spk.speaker_id}-{s:02d}"
            tr, va = _split_rows(len(rows), rng_mod.derive(seed, "split", cid))
            clients.append(ClientShard(cid, spk.speaker_id, spk.gender, spk.features[rows],
                                       spk.labels[rows], tr, va))
    return clients


@dataclass
class FoldPlan:
    fold_index: int
    test_speaker_ids: list[str]
    train_speaker_ids: list[str] = field(default_factory=list)


def make_folds(speakers: list[Speaker], num_folds: int = 5, seed: int = 0) -> list[FoldPlan]:
    """Speaker-disjoint test folds, stratified by gender.

    Speakers of each gender are shuffled once and dealt round-robin, with the
    second gender's deal continuing where the first one stopped so fold sizes
    stay within one of each other.
    """
    if len(speakers) < num_folds:
        raise ConfigError(f"{len(speakers)} speakers cannot fill {num_folds} folds")
    g = rng_mod.derive(seed, "folds")
    groups: list[list[str]] = [[] for _ in range(num_folds)]
    pos = 0
    for gender in ("F", "M"):
        ids = [s.speaker_id for s in speakers if s.gender == gender]
        for i in g.permutation(len(ids)):
            groups[pos % num_folds].append(ids[i])
            pos += 1
    order = [s.speaker_id for s in speakers]
    plans = []
    for k, test in enumerate(groups):
        test_set = set(test)
        plans.append(FoldPlan(k, sorted(test, key=order.index), [s for s in order if s not in test_set]))
    return plans


def select(speakers: list[Speaker], ids) -> list[Speaker]:
    ids = set(ids)
    return [s for s in speakers if s.speaker_id in ids]


def save_corpus(speakers: list[Speaker], path, metadata: dict | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    dims = {s.features.shape[1] for s in speakers}
    if len(dims) != 1:
        raise ShapeError(f"speakers disagree on feature_dim: {sorted(dims)}")
    dim = dims.pop()
    manifest = {
        "format_version": FORMAT_VERSION,
        "feature_dim": dim,
        "num_classes": NUM_CLASSES,
        "speakers": [
            {"speaker_id": s.speaker_id, "gender": s.gender, "n_utterances": s.n,
             "feature_dim": dim, "labels": s.labels.tolist()}
            for s in speakers
        ],
    }
    if metadata:
        manifest["metadata"] = metadata
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    with open(path / "features.bin", "wb") as fh:
        for s in speakers:
            fh.write(np.ascontiguousarray(s.features, dtype="<f8").tobytes())


def load_corpus(path) -> list[Speaker]:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
        dim = int(manifest["feature_dim"])
        entries = manifest["speakers"]
        version = manifest.get("format_version")
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"malformed corpus manifest in {path}: {exc}") from exc
    if version != FORMAT_VERSION:
        raise ConfigError(f"unsupported corpus format_version {version!r}")
    payload = np.fromfile(path / "features.bin", dtype="<f8")
    try:
        expected = sum(int(e["n_utterances"]) * dim for e in entries)
        for e in entries:
            if int(e["feature_dim"]) != dim:
                raise ShapeError(f"speaker {e['speaker_id']}: feature_dim {e['feature_dim']} != {dim}")
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed speaker entry in {path}: {exc}") from exc
    nbytes = (path / "features.bin").stat().st_size
    if nbytes != 8 * expected:
        raise ShapeError(f"features.bin holds {nbytes} bytes, manifest implies {8 * expected}")
    speakers, off = [], 0
    for e in entries:
        n = int(e["n_utterances"])
        x = payload[off:off + n * dim].reshape(n, dim).astype(np.float64)
        off += n * dim
        speakers.append(Speaker(str(e["speaker_id"]), e["gender"], x, np.asarray(e["labels"], dtype=np.int64)))
    return speakers


def gender_probe_accuracy(speakers: list[Speaker], seed: int = 0, test_fraction: float = 0.3,
                          steps: int = 300, lr: float = 0.5) -> float:
    """Held-out accuracy of a logistic-regression gender probe on raw features.

    Train and test utterances come from disjoint speakers. Used as an oracle
    that the corpus carries attribute signal before any attack is run.
    """
    g = rng_mod.derive(seed, "probe")
    by_gender = {"F": [], "M": []}
    for s in speakers:
        by_gender[s.gender].append(s)
    test_ids = set()
    for group in by_gender.values():
        k = max(1, int(round(test_fraction * len(group)))) if len(group) > 1 else 0
        for i in g.permutation(len(group))[:k]:
            test_ids.add(group[i].speaker_id)
    tr = [s for s in speakers if s.speaker_id not in test_ids]
    te = [s for s in speakers if s.speaker_id in test_ids]
    if not tr or not te:
        raise ConfigError("probe needs at least two speakers per split")
    Xtr = np.concatenate([s.features for s in tr])
    ytr = np.concatenate([np.full(s.n, s.gender_label, dtype=np.float64) for s in tr])
    Xte = np.concatenate([s.features for s in te])
    yte = np.concatenate([np.full(s.n, s.gender_label) for s in te])
    mu, sd = Xtr.mean(axis=0), Xtr.std(axis=0)
    sd[sd < 1e-12] = 1.0
    Xtr, Xte = (Xtr - mu) / sd, (Xte - mu) / sd
    w, b = np.zeros(Xtr.shape[1]), 0.0
    for _ in range(steps):
        p = 1.0 / (1.0 + np.exp(-(Xtr @ w + b)))
        r = p - ytr
        w -= lr * (Xtr.T @ r / len(ytr) + 1e-3 * w)
        b -= lr * r.mean()
    return float(np.mean((Xte @ w + b > 0).astype(int) == yte))
