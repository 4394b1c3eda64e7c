"""Gender inference from shared SER model updates.

Pipeline: shadow FL runs on attacker-held speakers produce labelled updates;
FedAvg parameter deltas are turned into pseudo-gradients; a per-layer
CNN + MLP attack model is trained on them and evaluated on the private run's
update log.

The attack model has one branch per SER layer. Branch ``i`` reads
``dW_i`` as a one-channel image (rows = fan-in, cols = fan-out), runs the
three-stage conv extractor, appends ``db_i`` to the flattened features and
classifies with a 128-unit ReLU/dropout MLP. Branch probabilities are fused
with fixed weights proportional to each layer's parameter count.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import rng as rng_mod
from .data import Speaker, select, shard_clients
from .errors import ConfigError, NumericError, ShapeError
from .fl import Algorithm, FLConfig, LogEntry, UpdateLog, train_federated
from .nn.conv import ConvLayer, conv_stack_backward_batch, conv_stack_forward_batch, feature_length, init_conv_stack
from .nn.metrics import Metrics, compute_metrics
from .nn.mlp import MlpParams, ModelUpdate, UpdateKind, dropout_mask, glorot_uniform, softmax
from .nn.optim import sgd_update

BRANCH_HIDDEN = 128
ATTACK_DROPOUT = 0.2
GENDERS = ("F", "M")


@dataclass
class AttackConfig:
    num_shadow: int = 5
    shadow_subsample: float = 0.80
    lr: float = 0.0001
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 16
    standardize: bool = False
    branch_losses: bool = False
    shadow_init: str = "private"  # "private": start shadows from the private run's initial model
    seed: int = 0

    def validate(self):
        if self.num_shadow < 1:
            raise ConfigError("num_shadow must be >= 1")
        if not 0.0 < self.shadow_subsample <= 1.0:
            raise ConfigError("shadow_subsample must lie in (0, 1]")
        if self.lr <= 0 or not 0.0 <= self.momentum < 1.0:
            raise ConfigError("attack lr must be positive and momentum in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.shadow_init not in ("private", "random"):
            raise ConfigError("shadow_init must be 'private' or 'random'")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class AttackSample:
    update: ModelUpdate
    gender: int  # 0 = F, 1 = M
    source: str  # "shadow<m>" or "private"
    client_key: str = ""


# -- pseudo-gradients -------------------------------------------------------


def pseudo_gradient(theta_global: MlpParams, theta_client: MlpParams, T: int, eta: float) -> ModelUpdate:
    """``(theta_global - theta_client) / (T * eta)`` layer by layer."""
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if eta <= 0:
        raise ConfigError(f"eta must be positive, got {eta}")
    if theta_global.shapes != theta_client.shapes:
        raise ShapeError("global and client parameters differ in shape")
    scale = T * eta
    per_layer = [((W - Wk) / scale, (b - bk) / scale)
                 for (W, b), (Wk, bk) in zip(theta_global.layers, theta_client.layers)]
    return ModelUpdate(per_layer, kind=UpdateKind.PSEUDO_GRADIENT)


def entry_to_update(entry: LogEntry, log: UpdateLog) -> ModelUpdate:
    """Attack input for one log entry: raw gradient or pseudo-gradient."""
    upd = entry.update
    if upd.kind is UpdateKind.RAW_GRADIENT:
        return upd
    if upd.kind is UpdateKind.PARAM_DELTA:
        if entry.T < 1 or log.lr <= 0:
            raise ConfigError("FedAvg entry needs T >= 1 and a positive learning rate")
        scale = entry.T * log.lr
        per_layer = [(dW / scale, db / scale) for dW, db in upd.per_layer]
        return ModelUpdate(per_layer, upd.round, upd.client_id, UpdateKind.PSEUDO_GRADIENT)
    if upd.kind is UpdateKind.PSEUDO_GRADIENT:
        return upd
    raise ConfigError(f"unknown update kind {upd.kind!r}")


# -- shadow training and dataset --------------------------------------------


def run_shadow_training(shadow_speakers: list[Speaker], private_config: FLConfig, attack_config: AttackConfig,
                        shards_per_speaker: int = 1, init: MlpParams | None = None,
                        private_speaker_ids=(), threads: int = 1) -> list[UpdateLog]:
    """``num_shadow`` FL runs mimicking the private setup on attacker data.

    Each run trains on a speaker-level subsample of the pooled shadow
    speakers with the private FL hyper-parameters. ``init`` (the private
    run's initial global model) is used when ``shadow_init == "private"``.
    """
    attack_config.validate()
    if not shadow_speakers:
        raise ConfigError("no shadow speakers")
    dims = {s.features.shape[1] for s in shadow_speakers}
    if len(dims) != 1:
        raise ShapeError(f"shadow corpora disagree on feature_dim: {sorted(dims)}")
    dim = dims.pop()
    if init is not None and init.dims[0] != dim:
        raise ShapeError(f"shadow feature_dim {dim} != private feature_dim {init.dims[0]}")
    overlap = {s.speaker_id for s in shadow_speakers} & set(private_speaker_ids)
    if overlap:
        raise ConfigError(f"shadow and private speakers overlap: {sorted(overlap)[:3]}")
    ids = [s.speaker_id for s in shadow_speakers]
    k = max(1, int(round(attack_config.shadow_subsample * len(ids))))
    logs = []
    for m in range(attack_config.num_shadow):
        g = rng_mod.derive(attack_config.seed, "shadow-subsample", m)
        chosen = [ids[i] for i in sorted(g.choice(len(ids), size=k, replace=False))]
        clients = shard_clients(select(shadow_speakers, chosen), shards_per_speaker,
                                seed=_shadow_seed(attack_config.seed, m))
        cfg = replace(private_config, seed=_shadow_seed(attack_config.seed, m))
        start = init if attack_config.shadow_init == "private" else None
        run = train_federated(clients, cfg, threads=threads, init=start)
        logs.append(run.log)
    return logs


def _shadow_seed(seed: int, m: int) -> int:
    return int(rng_mod.derive(seed, "shadow-seed", m).integers(0, 2**63 - 1))


def log_samples(log: UpdateLog, source: str) -> list[AttackSample]:
    return [AttackSample(entry_to_update(e, log), e.gender, source, log.client_ids[e.client_index])
            for e in log.entries]


def build_attack_dataset(shadow_logs: list[UpdateLog], algorithm: Algorithm | str | None = None,
                         seed: int = 0, balance: bool = True) -> list[AttackSample]:
    """Labelled samples from all shadow logs, undersampled to equal genders."""
    if not shadow_logs:
        raise ConfigError("no shadow logs")
    samples: list[AttackSample] = []
    for m, log in enumerate(shadow_logs):
        if algorithm is not None and log.algorithm is not Algorithm(algorithm):
            raise ConfigError(f"shadow log {m} is {log.algorithm.value}, expected {Algorithm(algorithm).value}")
        samples.extend(log_samples(log, f"shadow{m}"))
    genders = np.array([s.gender for s in samples])
    counts = [int((genders == g).sum()) for g in (0, 1)]
    if min(counts) == 0:
        raise ConfigError(f"shadow updates contain a single gender (F={counts[0]}, M={counts[1]})")
    if not balance:
        return samples
    keep_n = min(counts)
    g = rng_mod.derive(seed, "balance")
    keep = np.zeros(len(samples), dtype=bool)
    for label in (0, 1):
        idx = np.flatnonzero(genders == label)
        if len(idx) > keep_n:
            idx = np.sort(g.choice(idx, size=keep_n, replace=False))
        keep[idx] = True
    return [s for s, k in zip(samples, keep) if k]


# -- the attack model -------------------------------------------------------


@dataclass
class Branch:
    conv: list[ConvLayer]
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        out = []
        for c in self.conv:
            out += [c.W, c.b]
        return out + [self.W1, self.b1, self.W2, self.b2]

    @classmethod
    def from_arrays(cls, arrays, n_conv: int = 3) -> "Branch":
        conv = [ConvLayer(arrays[2 * i], arrays[2 * i + 1]) for i in range(n_conv)]
        return cls(conv, *arrays[2 * n_conv:2 * n_conv + 4])


def fusion_weights(ser_dims, layer_mask=(1, 2, 3)) -> np.ndarray:
    """Weights proportional to ``numel(dW_i) + numel(db_i)``, zero outside the mask."""
    numel = np.array([ser_dims[i] * ser_dims[i + 1] + ser_dims[i + 1] for i in range(len(ser_dims) - 1)],
                     dtype=np.float64)
    mask = np.zeros_like(numel)
    for layer in layer_mask:
        if not 1 <= layer <= len(numel):
            raise ConfigError(f"layer {layer} outside 1..{len(numel)}")
        mask[layer - 1] = 1.0
    if not mask.any():
        raise ConfigError("layer_mask is empty")
    w = numel * mask
    return w / w.sum()


@dataclass
class AttackModel:
    ser_dims: tuple[int, ...]
    branches: list[Branch]
    layer_mask: tuple[int, ...] = (1, 2, 3)
    standardize: bool = False
    weights: np.ndarray = field(init=False)

    def __post_init__(self):
        self.ser_dims = tuple(int(d) for d in self.ser_dims)
        self.layer_mask = tuple(sorted(set(int(i) for i in self.layer_mask)))
        self.weights = fusion_weights(self.ser_dims, self.layer_mask)

    @property
    def base_weights(self) -> np.ndarray:
        """Fusion weights over all layers, before masking."""
        return fusion_weights(self.ser_dims)

    def arrays(self) -> list[np.ndarray]:
        return [a for br in self.branches for a in br.arrays()]

    def with_arrays(self, arrays) -> "AttackModel":
        n = len(self.branches[0].arrays())
        branches = [Branch.from_arrays(arrays[i * n:(i + 1) * n]) for i in range(len(self.branches))]
        return AttackModel(self.ser_dims, branches, self.layer_mask, self.standardize)


def init_attack_model(ser_dims, rng: np.random.Generator, layer_mask=(1, 2, 3), standardize=False,
                      zero=False) -> AttackModel:
    ser_dims = tuple(int(d) for d in ser_dims)
    branches = []
    for i in range(len(ser_dims) - 1):
        rows, cols = ser_dims[i], ser_dims[i + 1]
        conv = init_conv_stack(rng)
        width = feature_length(rows, cols) + cols
        W1 = glorot_uniform(rng, width, BRANCH_HIDDEN)
        W2 = glorot_uniform(rng, BRANCH_HIDDEN, 2)
        br = Branch(conv, W1, np.zeros(BRANCH_HIDDEN), W2, np.zeros(2))
        if zero:
            br = Branch.from_arrays([np.zeros_like(a) for a in br.arrays()])
        branches.append(br)
    return AttackModel(ser_dims, branches, layer_mask, standardize)


def _prepare(dW, db, standardize: bool):
    if not standardize:
        return dW, db
    both = np.concatenate([dW.ravel(), db])
    mean, std = both.mean(), both.std()
    if std < 1e-30:
        return dW - mean, db - mean
    return (dW - mean) / std, (db - mean) / std


@dataclass
class _BranchCache:
    conv_cache: object
    h_in: np.ndarray
    h_active: np.ndarray
    h_mask: np.ndarray | None
    hidden: np.ndarray
    probs: np.ndarray


def _branch_forward(br: Branch, dW, db, mode, rng):
    feats, ccache = conv_stack_forward_batch(dW[None, :, :, None], br.conv, ATTACK_DROPOUT, mode, rng)
    h_in = np.concatenate([feats[0], db])[None]
    z = h_in @ br.W1 + br.b1
    active = z > 0
    h = np.where(active, z, 0.0)
    mask = None
    if mode == "train" and ATTACK_DROPOUT > 0:
        mask = dropout_mask(rng, h.shape, ATTACK_DROPOUT)
        h = h * mask
    logits = h @ br.W2 + br.b2
    probs = softmax(logits)[0]
    return probs, _BranchCache(ccache, h_in, active, mask, h, probs)


def _branch_backward(br: Branch, cache: _BranchCache, dlogits):
    """Conv-stack grads plus the pieces of the dense grads.

    Returns ``(conv_grads, dz)``; the dense weight gradients are outer
    products ``h_in.T @ dz`` and ``hidden.T @ dlogits`` that the caller can
    form for a whole minibatch at once.
    """
    dlogits = dlogits[None]
    dh = dlogits @ br.W2.T
    if cache.h_mask is not None:
        dh = dh * cache.h_mask
    dz = np.where(cache.h_active, dh, 0.0)
    n_conv = int(np.prod(cache.conv_cache.out_shape[1:]))
    dfeat = dz @ br.W1[:n_conv].T  # bias-update columns are inputs, not parameters
    conv_grads, _ = conv_stack_backward_batch(cache.conv_cache, dfeat)
    return conv_grads, dz


def _branch_grads(br: Branch, cache: _BranchCache, dlogits) -> list[np.ndarray]:
    conv_grads, dz = _branch_backward(br, cache, dlogits)
    out = []
    for c in conv_grads:
        out += [c.W, c.b]
    return out + [cache.h_in.T @ dz, dz[0], cache.hidden.T @ dlogits[None], np.array(dlogits, dtype=np.float64)]


def _check_update(model: AttackModel, update: ModelUpdate):
    want = [((model.ser_dims[i], model.ser_dims[i + 1]), (model.ser_dims[i + 1],))
            for i in range(len(model.ser_dims) - 1)]
    if update.shapes != want:
        raise ShapeError(f"update shapes {update.shapes} do not match attack model dims {model.ser_dims}")


def attack_forward(model: AttackModel, sample: AttackSample | ModelUpdate, mode: str = "eval", rng=None,
                   _caches: list | None = None):
    """Per-branch gender probabilities and their fused average.

    Returns ``(branch_probs, fused)`` where ``branch_probs[i]`` is ``None``
    for layers outside the model's mask.
    """
    update = sample.update if isinstance(sample, AttackSample) else sample
    _check_update(model, update)
    branch_probs: list[np.ndarray | None] = [None] * len(model.branches)
    fused = np.zeros(2)
    for i, br in enumerate(model.branches):
        if i + 1 not in model.layer_mask:
            continue
        dW, db = _prepare(*update.per_layer[i], model.standardize)
        probs, cache = _branch_forward(br, dW, db, mode, rng)
        branch_probs[i] = probs
        fused = fused + model.weights[i] * probs
        if _caches is not None:
            _caches.append((i, cache))
    return branch_probs, fused


def predict_gender(fused) -> int:
    """Argmax over (F, M); an exact tie goes to F (index 0)."""
    return int(fused[1] > fused[0])


def _fused_dlogits(model: AttackModel, caches, fused, z: int, branch_losses: bool):
    """Loss and ``dL/dlogits`` per enabled branch for the fused cross-entropy."""
    loss = -np.log(max(fused[z], 1e-300))
    onehot = np.eye(2)[z]
    out = []
    for i, cache in caches:
        p = cache.probs
        # d(-log sum_j w_j p_j[z]) / d logits_i
        dlogits = -(model.weights[i] * p[z] / max(fused[z], 1e-300)) * (onehot - p)
        if branch_losses:
            dlogits = dlogits + (p - onehot)
            loss += -np.log(max(p[z], 1e-300))
        out.append((i, cache, dlogits))
    return float(loss), out


def _sample_grads(model: AttackModel, sample: AttackSample, rng, branch_losses: bool):
    """Loss and full gradient list (zeros for masked branches) for one sample."""
    caches: list = []
    _, fused = attack_forward(model, sample, "train", rng, caches)
    loss, parts = _fused_dlogits(model, caches, fused, sample.gender, branch_losses)
    n_per = len(model.branches[0].arrays())
    grads = [np.zeros_like(a) for a in model.arrays()]
    for i, cache, dlogits in parts:
        grads[i * n_per:(i + 1) * n_per] = _branch_grads(model.branches[i], cache, dlogits)
    return loss, grads


def _batch_grads(model: AttackModel, samples: list[AttackSample], rngs, branch_losses: bool):
    """Summed loss and mean gradient over a minibatch.

    Conv grads are summed sample by sample in batch order; the dense-layer
    outer products are formed once from the stacked per-sample rows.
    """
    n_per = len(model.branches[0].arrays())
    n_conv = n_per - 4
    grads: list[np.ndarray | None] = [None] * (n_per * len(model.branches))
    rows: dict[int, tuple[list, list, list, list]] = {}
    total = 0.0
    for s, rng in zip(samples, rngs):
        caches: list = []
        _, fused = attack_forward(model, s, "train", rng, caches)
        loss, parts = _fused_dlogits(model, caches, fused, s.gender, branch_losses)
        total += loss
        for i, cache, dlogits in parts:
            conv_grads, dz = _branch_backward(model.branches[i], cache, dlogits)
            base = i * n_per
            for c, layer in enumerate(conv_grads):
                for off, g in ((2 * c, layer.W), (2 * c + 1, layer.b)):
                    if grads[base + off] is None:
                        grads[base + off] = g
                    else:
                        grads[base + off] += g
            r = rows.setdefault(i, ([], [], [], []))
            r[0].append(cache.h_in[0])
            r[1].append(dz[0])
            r[2].append(cache.hidden[0])
            r[3].append(dlogits)
    for i, (h_in, dz, hidden, dlogits) in rows.items():
        base = i * n_per + n_conv
        dz_m, dl_m = np.array(dz), np.array(dlogits)
        grads[base:base + 4] = [np.array(h_in).T @ dz_m, dz_m.sum(axis=0), np.array(hidden).T @ dl_m, dl_m.sum(axis=0)]
    arrays = model.arrays()
    scale = 1.0 / len(samples)
    out = []
    for g, a in zip(grads, arrays):
        if g is None:
            out.append(np.zeros_like(a))
        else:
            g *= scale
            out.append(g)
    return total, out


def sample_key(sample: AttackSample) -> str:
    """Identity of a sample for its dropout stream; copies of a sample share masks."""
    return f"{sample.source}/{sample.client_key}/{sample.update.round}"


def attack_loss(model: AttackModel, samples: list[AttackSample]) -> float:
    """Mean fused cross-entropy in eval mode."""
    total = 0.0
    for s in samples:
        _, fused = attack_forward(model, s, "eval")
        total += -np.log(max(fused[s.gender], 1e-300))
    return total / len(samples)


def train_attack(dataset: list[AttackSample], config: AttackConfig, layer_mask=(1, 2, 3),
                 ser_dims=None, progress=None) -> AttackModel:
    """Minibatch momentum SGD on the fused cross-entropy.

    Dropout masks come from a stream keyed by (epoch, sample identity), so
    they do not depend on where a sample lands in the shuffle. Gradients
    are reduced over each minibatch in a fixed order, so results do not
    depend on memory layout or threads.
    """
    config.validate()
    if not dataset:
        raise ConfigError("empty attack dataset")
    genders = {s.gender for s in dataset}
    if genders != {0, 1}:
        raise ConfigError("attack training data must contain both genders")
    if not layer_mask:
        raise ConfigError("layer_mask is empty")
    if ser_dims is None:
        first = dataset[0].update
        ser_dims = (first.per_layer[0][0].shape[0],) + tuple(dW.shape[1] for dW, _ in first.per_layer)
    model = init_attack_model(ser_dims, rng_mod.derive(config.seed, "attack-init"), layer_mask, config.standardize)
    arrays = model.arrays()
    velocity = None
    shuffle_rng = rng_mod.derive(config.seed, "attack-shuffle")
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(dataset))
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = [dataset[j] for j in order[start:start + config.batch_size]]
            rngs = [rng_mod.derive(config.seed, "attack-dropout", epoch, sample_key(s)) for s in batch]
            loss, acc = _batch_grads(model, batch, rngs, config.branch_losses)
            epoch_loss += loss
            arrays, velocity = sgd_update(arrays, acc, config.lr, config.momentum, velocity)
            model = model.with_arrays(arrays)
        epoch_loss /= len(order)
        if not np.isfinite(epoch_loss):
            raise NumericError(f"attack training diverged in epoch {epoch}")
        if progress is not None:
            progress(epoch, epoch_loss)
    return model


# -- evaluation -------------------------------------------------------------


@dataclass
class AttackEval:
    metrics: Metrics  # per update, fused prediction
    client_metrics: Metrics  # majority vote per client
    branch_metrics: dict[int, Metrics]  # per enabled layer, branch argmax
    predictions: np.ndarray
    labels: np.ndarray

    def to_dict(self) -> dict:
        return {
            "fused": self.metrics.to_dict(),
            "per_client_majority": self.client_metrics.to_dict(),
            "per_branch": {str(k): m.to_dict() for k, m in sorted(self.branch_metrics.items())},
            "n_updates": int(len(self.labels)),
        }


def eval_attack(model: AttackModel, private_log: UpdateLog | list[UpdateLog], algorithm=None) -> AttackEval:
    """Predict the gender behind every update of the private run(s)."""
    logs = private_log if isinstance(private_log, list) else [private_log]
    samples = []
    for k, log in enumerate(logs):
        if algorithm is not None and log.algorithm is not Algorithm(algorithm):
            raise ConfigError(f"private log is {log.algorithm.value}, expected {Algorithm(algorithm).value}")
        for s in log_samples(log, "private"):
            s.client_key = f"{k}:{s.client_key}"
            samples.append(s)
    if not samples:
        raise ConfigError("empty private update log")
    preds, labels = [], []
    branch_preds: dict[int, list[int]] = {i + 1: [] for i in range(len(model.branches)) if i + 1 in model.layer_mask}
    votes: dict[str, list[int]] = {}
    truth: dict[str, int] = {}
    for s in samples:
        branch_probs, fused = attack_forward(model, s, "eval")
        p = predict_gender(fused)
        preds.append(p)
        labels.append(s.gender)
        for layer in branch_preds:
            branch_preds[layer].append(predict_gender(branch_probs[layer - 1]))
        votes.setdefault(s.client_key, []).append(p)
        truth[s.client_key] = s.gender
    keys = sorted(votes)
    # majority vote; a split vote goes to F like every other tie
    client_pred = [int(sum(votes[k]) * 2 > len(votes[k])) for k in keys]
    return AttackEval(
        metrics=compute_metrics(preds, labels, 2),
        client_metrics=compute_metrics(client_pred, [truth[k] for k in keys], 2),
        branch_metrics={layer: compute_metrics(bp, labels, 2) for layer, bp in branch_preds.items()},
        predictions=np.array(preds),
        labels=np.array(labels),
    )
