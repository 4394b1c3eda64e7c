"""Federated training of the SER model under FedSGD and FedAvg.

The server loop is sequential and owns the global parameters. Local work for
each participant is a pure function of ``(global params, shard, client
rng)``, so it can be fanned out to a thread pool; results are always
aggregated in (round, client index) order. Every shared update is appended
to an :class:`UpdateLog`, which is what the eavesdropping attacker sees.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from . import rng as rng_mod
from .data import NUM_CLASSES, ClientShard, FoldPlan, Speaker
from .errors import ConfigError, NumericError
from .nn.metrics import Metrics, compute_metrics
from .nn.mlp import SER_HIDDEN, MlpParams, ModelUpdate, UpdateKind, init_mlp, mlp_backward, mlp_forward
from .nn.optim import sgd_step


class Algorithm(str, Enum):
    FEDSGD = "fedsgd"
    FEDAVG = "fedavg"


@dataclass
class FLConfig:
    algorithm: Algorithm = Algorithm.FEDSGD
    global_rounds: int = 200
    client_fraction: float = 0.10
    local_epochs: int = 1
    batch_size: int = 20
    lr_fedavg: float = 0.0005
    lr_fedsgd: float = 0.05
    dropout_first: float = 0.2
    dropout_second: float = 0.2
    hidden: tuple[int, ...] = SER_HIDDEN
    seed: int = 0

    def __post_init__(self):
        self.algorithm = Algorithm(self.algorithm)
        self.hidden = tuple(int(h) for h in self.hidden)

    def validate(self):
        if not 0.0 < self.client_fraction <= 1.0:
            raise ConfigError("client_fraction must lie in (0, 1]")
        if self.global_rounds < 0 or self.local_epochs < 1 or self.batch_size < 1:
            raise ConfigError("rounds must be >= 0, local_epochs and batch_size >= 1")
        if self.lr_fedavg < 0 or self.lr_fedsgd < 0:
            raise ConfigError("learning rates must be non-negative")
        for p in (self.dropout_first, self.dropout_second):
            if not 0.0 <= p < 1.0:
                raise ConfigError("dropout rates must lie in [0, 1)")
        return self

    @property
    def lr(self) -> float:
        return self.lr_fedsgd if self.algorithm is Algorithm.FEDSGD else self.lr_fedavg

    @property
    def dropout(self) -> tuple[float, float]:
        return (self.dropout_first, self.dropout_second)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["algorithm"] = self.algorithm.value
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FLConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "hidden" in known:
            known["hidden"] = tuple(known["hidden"])
        return cls(**known)


@dataclass
class LogEntry:
    update: ModelUpdate
    client_index: int
    gender: int  # 0 = F, 1 = M
    n_k: int
    T: int  # local steps; 1 for FedSGD

    @property
    def round(self) -> int:
        return self.update.round


@dataclass
class UpdateLog:
    """Append-only record of shared updates plus the global snapshots.

    ``snapshots[t]`` is the global model broadcast at the start of round
    ``t`` (and ``snapshots[R]`` the final model when kept).
    """

    algorithm: Algorithm
    lr: float
    client_ids: list[str]
    entries: list[LogEntry] = field(default_factory=list)
    snapshots: dict[int, MlpParams] = field(default_factory=dict)

    def append(self, entry: LogEntry):
        if self.entries:
            last = self.entries[-1]
            if (entry.round, entry.client_index) <= (last.round, last.client_index):
                raise ValueError("log entries must be appended in (round, client) order")
        self.entries.append(entry)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def genders(self) -> np.ndarray:
        return np.array([e.gender for e in self.entries], dtype=np.int64)


@dataclass
class TrainedRun:
    params: MlpParams
    config: FLConfig
    log: UpdateLog
    history: list[dict]
    fold: int | None = None
    test_metrics: Metrics | None = None


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def sample_clients(clients, fraction: float, round_index: int, seed: int) -> list[int]:
    """Indices of this round's participants, sorted ascending."""
    n = len(clients)
    if n == 0:
        raise ConfigError("no clients to sample from")
    k = max(1, min(n, _round_half_up(fraction * n)))
    if k == n:
        return list(range(n))
    g = rng_mod.derive(seed, "sample", round_index)
    return sorted(int(i) for i in g.choice(n, size=k, replace=False))


def local_gradient(client: ClientShard, params: MlpParams, config: FLConfig, round_index: int = 0):
    """Raw gradient on one minibatch of the client's training rows.

    Returns ``(update, batch_size)``.
    """
    if client.n_train < 1:
        raise ConfigError(f"client {client.client_id} has no training rows")
    g = rng_mod.derive(config.seed, "fedsgd", client.client_id, round_index)
    bs = min(config.batch_size, client.n_train)
    rows = np.sort(g.choice(client.n_train, size=bs, replace=False)) if bs < client.n_train else np.arange(bs)
    x = client.x_train[rows]
    y = client.y_train[rows]
    _, cache = mlp_forward(params, x, config.dropout, "train", g)
    _, grads = mlp_backward(params, cache, y)
    grads.round, grads.client_id = round_index, client.client_id
    return grads, bs


def local_train(client: ClientShard, params: MlpParams, config: FLConfig, round_index: int = 0):
    """FedAvg local update: ``local_epochs`` passes of vanilla SGD.

    Returns ``(theta_k, T)`` with ``T`` the number of minibatch steps taken.
    The last partial minibatch of an epoch is kept.
    """
    if client.n_train < 1:
        raise ConfigError(f"client {client.client_id} has no training rows")
    g = rng_mod.derive(config.seed, "fedavg", client.client_id, round_index)
    theta = params
    x_all, y_all = client.x_train, client.y_train
    steps = 0
    for _ in range(config.local_epochs):
        order = g.permutation(client.n_train)
        for start in range(0, client.n_train, config.batch_size):
            rows = order[start:start + config.batch_size]
            _, cache = mlp_forward(theta, x_all[rows], config.dropout, "train", g)
            loss, grads = mlp_backward(theta, cache, y_all[rows])
            if not np.isfinite(loss):
                raise NumericError(f"local loss diverged at client {client.client_id}, round {round_index}")
            if config.lr_fedavg > 0:
                theta, _ = sgd_step(theta, grads, config.lr_fedavg)
            else:
                theta = theta.copy()
            steps += 1
    return theta, steps


def weighted_average(arrays_per_client, weights):
    """``sum_k (n_k / N) a_k`` written relative to the first client.

    ``a_1 + sum_k (n_k / N)(a_k - a_1)`` is algebraically the plain weighted
    average but returns ``a_1`` bit for bit when every client agrees.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0 or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be non-negative with a positive sum")
    frac = w / w.sum()
    ref = arrays_per_client[0]
    out = []
    for j in range(len(ref)):
        acc = ref[j].copy()
        for k in range(1, len(arrays_per_client)):
            acc = acc + frac[k] * (arrays_per_client[k][j] - ref[j])
        out.append(acc)
    return out


def fedsgd_apply(global_params: MlpParams, grads: list[ModelUpdate], n_k, lr: float) -> MlpParams:
    """``theta - lr * sum_k (n_k / N) g_k``."""
    n = np.asarray(n_k, dtype=np.float64)
    frac = n / n.sum()
    new = []
    for j, p in enumerate(global_params.arrays()):
        agg = np.zeros_like(p)
        for k, g in enumerate(grads):
            agg = agg + frac[k] * g.arrays()[j]
        if not np.all(np.isfinite(agg)):
            raise NumericError("non-finite aggregated gradient")
        new.append(p - lr * agg)
    return MlpParams.from_arrays(new)


def _map(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def run_fedsgd_round(global_params, clients, participants, config: FLConfig, log: UpdateLog | None,
                     round_index: int, threads: int = 1) -> MlpParams:
    if not participants:
        raise ConfigError("a round needs at least one participant")
    results = _map(lambda i: local_gradient(clients[i], global_params, config, round_index), participants, threads)
    grads = [r[0] for r in results]
    n_k = [r[1] for r in results]
    if log is not None:
        for i, (g, n) in zip(participants, results):
            log.append(LogEntry(g, i, clients[i].gender_label, n, 1))
    return fedsgd_apply(global_params, grads, n_k, config.lr_fedsgd)


def run_fedavg_round(global_params, clients, participants, config: FLConfig, log: UpdateLog | None,
                     round_index: int, threads: int = 1) -> MlpParams:
    if not participants:
        raise ConfigError("a round needs at least one participant")
    results = _map(lambda i: local_train(clients[i], global_params, config, round_index), participants, threads)
    n_k = [clients[i].n_train for i in participants]
    if log is not None:
        for i, (theta_k, steps), n in zip(participants, results, n_k):
            delta = [(W - Wk, b - bk) for (W, b), (Wk, bk) in zip(global_params.layers, theta_k.layers)]
            upd = ModelUpdate(delta, round_index, clients[i].client_id, UpdateKind.PARAM_DELTA)
            log.append(LogEntry(upd, i, clients[i].gender_label, n, steps))
    return MlpParams.from_arrays(weighted_average([r[0].arrays() for r in results], n_k))


def predict(params: MlpParams, x) -> np.ndarray:
    logits, _ = mlp_forward(params, x, mode="eval")
    return np.argmax(logits, axis=1)


def evaluate_ser(params: MlpParams, test_speakers: list[Speaker]) -> Metrics:
    if not test_speakers or sum(s.n for s in test_speakers) == 0:
        raise ConfigError("empty SER test set")
    x = np.concatenate([s.features for s in test_speakers])
    y = np.concatenate([s.labels for s in test_speakers])
    return compute_metrics(predict(params, x), y, NUM_CLASSES)


def _validation(params: MlpParams, clients: list[ClientShard]):
    xs = [c.x_val for c in clients if len(c.val_idx)]
    if not xs:
        return None
    x = np.concatenate(xs)
    y = np.concatenate([c.y_val for c in clients if len(c.val_idx)])
    logits, _ = mlp_forward(params, x, mode="eval")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(len(y)), y].mean())
    m = compute_metrics(np.argmax(logits, axis=1), y, NUM_CLASSES)
    return {"loss": loss, "accuracy": m.accuracy, "uar": m.uar}


def train_federated(clients: list[ClientShard], config: FLConfig, fold: FoldPlan | None = None,
                    test_speakers: list[Speaker] | None = None, threads: int = 1,
                    keep_snapshots: bool = True, init: MlpParams | None = None) -> TrainedRun:
    """Run ``global_rounds`` rounds and log every shared update.

    When a fold is given, every client must belong to one of its training
    speakers.
    """
    config.validate()
    if not clients:
        raise ConfigError("no clients")
    if fold is not None:
        allowed = set(fold.train_speaker_ids)
        bad = [c.client_id for c in clients if c.speaker_id not in allowed]
        if bad:
            raise ConfigError(f"clients outside the fold's training speakers: {bad[:3]}")
    dim = clients[0].features.shape[1]
    if init is None:
        init = init_mlp((dim, *config.hidden, NUM_CLASSES), rng_mod.derive(config.seed, "init"))
    params = init
    log = UpdateLog(config.algorithm, config.lr, [c.client_id for c in clients])
    round_fn = run_fedsgd_round if config.algorithm is Algorithm.FEDSGD else run_fedavg_round
    history = []
    for t in range(config.global_rounds):
        if keep_snapshots:
            log.snapshots[t] = params
        participants = sample_clients(clients, config.client_fraction, t, config.seed)
        params = round_fn(params, clients, participants, config, log, t, threads)
        val = _validation(params, clients)
        if val is not None and not np.isfinite(val["loss"]):
            raise NumericError(f"validation loss is not finite after round {t}; training diverged")
        history.append({"round": t, "participants": len(participants), **(val or {})})
    if keep_snapshots:
        log.snapshots[config.global_rounds] = params
    run = TrainedRun(params, config, log, history, None if fold is None else fold.fold_index)
    if test_speakers:
        run.test_metrics = evaluate_ser(params, test_speakers)
    return run


def replay_fedsgd(log: UpdateLog, init: MlpParams) -> list[MlpParams]:
    """Rebuild the global trajectory from logged FedSGD gradients."""
    if log.algorithm is not Algorithm.FEDSGD:
        raise ValueError("replay is defined for FedSGD logs")
    traj = [init]
    params = init
    by_round: dict[int, list[LogEntry]] = {}
    for e in log.entries:
        by_round.setdefault(e.round, []).append(e)
    for t in sorted(by_round):
        entries = by_round[t]
        params = fedsgd_apply(params, [e.update for e in entries], [e.n_k for e in entries], log.lr)
        traj.append(params)
    return traj
