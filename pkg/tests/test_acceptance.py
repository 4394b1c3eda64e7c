"""Acceptance criteria, each at its stated tolerance.

Every test prints one ``criterion N: PASS|FAIL|WARN`` line; the lines are
repeated in the pytest terminal summary. The benchmark pipelines take about
half an hour single-threaded in total.
"""

import json
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from fedleak import pipeline as pl
from fedleak.attack import eval_attack, fusion_weights, pseudo_gradient
from fedleak.cli import build_spec, main, make_parser
from fedleak.data import ClientShard
from fedleak.fl import FLConfig, local_train, replay_fedsgd, train_federated, weighted_average
from fedleak.nn import kernels
from fedleak.nn.conv import ConvLayer, conv_stack_backward_batch, conv_stack_forward_batch, init_conv_stack
from fedleak.nn.gradcheck import max_relative_error, numeric_gradient
from fedleak.nn.mlp import MlpParams, init_mlp, mlp_backward, mlp_forward, softmax_cross_entropy
from fedleak.data import CorpusConfig, shard_clients, synth_corpus
from fedleak.rng import derive

SEED = 0


def report(n, ok, detail, warn_only=False):
    status = "PASS" if ok else ("WARN" if warn_only else "FAIL")
    line = f"criterion {n}: {status}  {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok or warn_only


# -- benchmark pipelines, shared between criteria ----------------------------

_CACHE: dict = {}


def _setup(delta, algorithm, folds):
    key = (delta, algorithm, folds)
    if key not in _CACHE:
        t0 = time.perf_counter()
        spec = pl.ExperimentSpec.from_dict({
            "private": {"attribute_separation": delta},
            "shadow": {"attribute_separation": delta},
            "algorithms": [algorithm],
            "folds": list(folds),
            "seed": SEED,
        }).resolved()
        priv = pl.private_speakers(spec)
        probe = pl.probe(priv, spec)
        plans = pl.fold_plans(spec, priv)
        cfg = pl.fl_config(spec, algorithm)
        runs = [pl.train_private(spec, priv, plans[f], cfg) for f in folds]
        init = pl.initial_model(spec, priv[0].features.shape[1], cfg)
        shadow_logs = pl.train_shadows(spec, pl.shadow_speakers(spec), cfg, init, [s.speaker_id for s in priv])
        _CACHE[key] = dict(spec=spec, probe=probe, runs=runs, shadow_logs=shadow_logs, attacks={},
                           fl_seconds=time.perf_counter() - t0, n_clients=len(runs[0].log.client_ids))
    return _CACHE[key]


def _attack(delta, algorithm, folds, layers):
    b = _setup(delta, algorithm, folds)
    if layers not in b["attacks"]:
        t0 = time.perf_counter()
        model, _ = pl.attack_cell(b["spec"], b["shadow_logs"], [], layers, algorithm)
        ev = eval_attack(model, [r.log for r in b["runs"]], algorithm)
        b["attacks"][layers] = (ev, time.perf_counter() - t0)
    return b["attacks"][layers]


FULL = (1, 2, 3)
BENCH = (1.0, "fedsgd", (0,))


# -- 1: gradient oracle ------------------------------------------------------


def _dense_cases(n):
    worst = 0.0
    for seed in range(n):
        g = derive(seed, "accept-dense")
        dims = (int(g.integers(2, 8)), int(g.integers(2, 7)), int(g.integers(2, 6)), 4)
        p = init_mlp(dims, g)
        p = MlpParams([(W, g.normal(scale=0.1, size=b.shape)) for W, b in p.layers])
        x, y = g.normal(size=(3, dims[0])), g.integers(0, 4, size=3)
        rates = (0.3, 0.25) if seed % 2 else (0.0, 0.0)  # dropout-masked paths on odd seeds
        _, cache = mlp_forward(p, x, rates, "train", derive(seed, "mask"))
        _, grads = mlp_backward(p, cache, y)

        def f():
            out, c = mlp_forward(p, x, rates, "train", derive(seed, "mask"))
            return mlp_backward(p, c, y)[0]

        for (W, b), (dW, db) in zip(p.layers, grads.per_layer):
            worst = max(worst, max_relative_error(dW, numeric_gradient(f, W)),
                        max_relative_error(db, numeric_gradient(f, b)))
    return worst


def _softmax_cases(n):
    worst = 0.0
    for seed in range(n):
        g = derive(seed, "accept-ce")
        logits = g.normal(scale=2.0, size=(4, int(g.integers(2, 6))))
        y = g.integers(0, logits.shape[1], size=4)
        _, d = softmax_cross_entropy(logits, y)
        worst = max(worst, max_relative_error(d, numeric_gradient(lambda: softmax_cross_entropy(logits, y)[0], logits)))
    return worst


def _conv_cases(n):
    worst = 0.0
    for seed in range(n):
        g = derive(seed, "accept-conv")
        layers = [ConvLayer(L.W, g.normal(scale=0.1, size=L.b.shape)) for L in init_conv_stack(g, (1, 2, 3, 2), 3)]
        x = g.normal(size=(2, int(g.integers(4, 9)), int(g.integers(4, 9)), 1))
        mode = "train" if seed % 2 else "eval"
        feats, cache = conv_stack_forward_batch(x, layers, 0.2, mode, derive(seed, "drop"))
        w_out = g.normal(size=feats.shape)
        grads, dx = conv_stack_backward_batch(cache, w_out, input_grad=True)

        def f():
            return float((conv_stack_forward_batch(x, layers, 0.2, mode, derive(seed, "drop"))[0] * w_out).sum())

        for L, G in zip(layers, grads):
            worst = max(worst, max_relative_error(G.W, numeric_gradient(f, L.W)),
                        max_relative_error(G.b, numeric_gradient(f, L.b)))
        worst = max(worst, max_relative_error(dx, numeric_gradient(f, x)))
    return worst


def _pool_cases(n):
    worst = 0.0
    for seed in range(n):
        g = derive(seed, "accept-pool")
        x = g.normal(size=(1, int(g.integers(2, 9)), int(g.integers(2, 9)), 2))
        ph, pw = int(g.integers(1, 3)), int(g.integers(1, 3))
        out, idx = kernels.maxpool_forward(x, ph, pw)
        w = g.normal(size=out.shape)
        dx = kernels.maxpool_backward(w, idx, x.shape, ph, pw)
        worst = max(worst, max_relative_error(dx, numeric_gradient(lambda: float(
            (kernels.maxpool_forward(x, ph, pw)[0] * w).sum()), x)))
    return worst


def test_criterion_1_gradient_oracle():
    t0 = time.perf_counter()
    counts = dict(dense=30, softmax_ce=20, conv=30, pool=20)
    worst = dict(dense=_dense_cases(30), softmax_ce=_softmax_cases(20), conv=_conv_cases(30), pool=_pool_cases(20))
    secs = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and sum(counts.values()) >= 100 and secs < 60
    detail = ", ".join(f"{k} max rel err {v:.1e}" for k, v in worst.items())
    assert report(1, ok, f"{sum(counts.values())} instances, {detail}, {secs:.1f}s")


# -- 2: aggregation exactness ------------------------------------------------


def test_criterion_2_aggregation_exactness():
    (avg,) = weighted_average([[np.array([2.0])], [np.array([6.0])]], [1, 3])
    err_avg = abs(float(avg[0]) - 5.0)
    speakers = synth_corpus(CorpusConfig(num_speakers=8, utterances_per_speaker=30, feature_dim=12, seed=3))
    run = train_federated(shard_clients(speakers, 1, seed=1), FLConfig(global_rounds=8, client_fraction=0.5, seed=2))
    traj = replay_fedsgd(run.log, run.log.snapshots[0])
    err_replay = max(float(np.max(np.abs(a - b))) for t, p in enumerate(traj) if t in run.log.snapshots
                     for a, b in zip(p.arrays(), run.log.snapshots[t].arrays()))
    ok = err_avg <= 1e-12 and err_replay <= 1e-10
    assert report(2, ok, f"weighted average |5.0 - got| = {err_avg:.1e}; FedSGD replay max dev {err_replay:.1e}")


# -- 3: pseudo-gradient identity ---------------------------------------------


def test_criterion_3_pseudo_gradient_identity():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        g = derive(seed, "accept-identity")
        dims = (int(g.integers(2, 12)), int(g.integers(2, 10)), int(g.integers(2, 8)), 4)
        n = int(g.integers(1, 30))
        cid = f"c{seed}"
        client = ClientShard(cid, cid, "M", g.normal(size=(n, dims[0])), g.integers(0, 4, size=n),
                             np.arange(n), np.arange(0))
        eta = float(g.choice([0.0005, 0.01, 0.05]))
        cfg = FLConfig(algorithm="fedavg", batch_size=n, local_epochs=1, lr_fedavg=eta, seed=seed,
                       dropout_first=0.0, dropout_second=0.0)
        params = init_mlp(dims, g)
        theta_k, T = local_train(client, params, cfg, round_index=0)
        _, cache = mlp_forward(params, client.x_train, (), "eval")
        _, raw = mlp_backward(params, cache, client.y_train)
        pg = pseudo_gradient(params, theta_k, T, eta)
        worst = max(worst, max(float(np.max(np.abs(a - b))) for a, b in zip(pg.arrays(), raw.arrays())))
        assert T == 1
    secs = time.perf_counter() - t0
    assert report(3, worst <= 1e-10 and secs < 10, f"20 configs, max |g' - g| = {worst:.1e}, {secs:.2f}s")


# -- 4: leakage exists -------------------------------------------------------


def test_criterion_4_leakage_exists():
    b = _setup(*BENCH)
    assert b["probe"] >= 0.9, "probe oracle must see gender before the attack is meaningful"
    ev, attack_secs = _attack(*BENCH, FULL)
    total = b["fl_seconds"] + attack_secs
    uar = ev.metrics.uar
    ok = uar >= 0.80 and total <= 15 * 60 and b["n_clients"] == 40
    assert report(4, ok, f"probe {b['probe']:.3f}, {b['n_clients']} clients, fused UAR {uar:.4f} over "
                         f"{len(ev.labels)} updates (per-client {ev.client_metrics.uar:.4f}), {total:.0f}s")


# -- 5: null control ---------------------------------------------------------


def test_criterion_5_null_control():
    ev, _ = _attack(0.0, "fedsgd", (0, 1, 2), FULL)
    n = len(ev.labels)
    lo, hi = pl.binomial_interval(n)
    uar = ev.metrics.uar
    ok = n >= 500 and lo <= uar <= hi
    assert report(5, ok, f"delta=0 fused UAR {uar:.4f} over {n} updates, 99% interval [{lo:.4f}, {hi:.4f}]")


# -- 6: layer-position trend -------------------------------------------------


def test_criterion_6_layer_trend():
    uar = {layer: _attack(*BENCH, (layer,))[0].metrics.uar for layer in (1, 2, 3)}
    gap = uar[1] - max(uar[2], uar[3])
    assert report(6, gap >= 0.10, f"UAR layer1 {uar[1]:.4f}, layer2 {uar[2]:.4f}, layer3 {uar[3]:.4f}; "
                                  f"gap {gap:+.4f} (need >= 0.10)")


# -- 7: FedSGD vs FedAvg (soft) ----------------------------------------------


def test_criterion_7_fedsgd_vs_fedavg():
    sgd = _attack(*BENCH, FULL)[0].metrics.uar
    avg = _attack(1.0, "fedavg", (0,), FULL)[0].metrics.uar
    report(7, sgd >= avg - 0.05, f"fused UAR FedSGD {sgd:.4f} vs FedAvg {avg:.4f}", warn_only=True)


# -- 8: SER sanity -----------------------------------------------------------


def test_criterion_8_ser_sanity():
    parts, ok = [], True
    for algo in ("fedsgd", "fedavg"):
        m = _setup(1.0, algo, (0,))["runs"][0].test_metrics
        n = int(m.confusion.sum())
        bar = 0.25 + 3 * math.sqrt(0.25 * 0.75 / n)
        ok &= m.uar > bar
        parts.append(f"{algo} UAR {m.uar:.4f} (bar {bar:.4f}, n={n})")
    assert report(8, ok, "; ".join(parts))


# -- 9: determinism ----------------------------------------------------------

TINY_CORPUS = dict(num_speakers=10, num_male=5, utterances_per_speaker=20, feature_dim=8)
TINY = {"private": TINY_CORPUS, "shadow": TINY_CORPUS, "fl": {"global_rounds": 2, "client_fraction": 0.5},
        "attack": {"epochs": 1, "num_shadow": 2}, "layer_conditions": [[1, 2, 3], [1]],
        "algorithms": ["fedsgd", "fedavg"]}


def _artifacts(out):
    return {str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob("*"))
            if p.is_file() and p.name != "timing.log"}


def _numbers(obj):
    if isinstance(obj, dict):
        return [x for k in sorted(obj) for x in _numbers(obj[k])]
    if isinstance(obj, list):
        return [x for v in obj for x in _numbers(v)]
    return [obj] if isinstance(obj, float) else []


def test_criterion_9_determinism(tmp_path):
    cfg = tmp_path / "spec.json"
    cfg.write_text(json.dumps(TINY))
    runs = [(tmp_path / "t1a", 1), (tmp_path / "t1b", 1), (tmp_path / "t4", 4)]
    for out, threads in runs:
        for verb in ("synth", "train-private", "shadow", "attack", "sweep-dropout", "report"):
            extra = ["--sweep-dropout", "0.2,0.4"] if verb == "sweep-dropout" else []
            assert main([verb, "--config", str(cfg), "--out", str(out), "--threads", str(threads), *extra]) == 0
    arts = [_artifacts(out) for out, _ in runs]
    differing = sorted({k for a in arts[1:] for k in set(a) | set(arts[0]) if a.get(k) != arts[0].get(k)})
    worst = 0.0
    for name in ("private/ser_results.json", "attack_report.json", "dropout_sweep.json"):
        ref = _numbers(json.loads(arts[0][name]))
        for a in arts[1:]:
            got = _numbers(json.loads(a[name]))
            assert len(got) == len(ref)
            worst = max([worst] + [abs(x - y) for x, y in zip(ref, got)])
    ok = not differing and worst <= 1e-12
    assert report(9, ok, f"{len(arts[0])} artifacts from 6 verbs, reruns at 1 and 4 threads: "
                         f"{len(differing)} differ, max metric deviation {worst:.1e}")


# -- 10: paper-scale configuration -------------------------------------------


def test_criterion_10_paper_scale():
    args = make_parser().parse_args(["train-private", "--paper-scale", "--feature-dim", "988"])
    spec = build_spec(args)
    cfg = pl.fl_config(spec, "fedsgd")
    shapes = [W.shape for W, _ in pl.initial_model(spec, spec.private.feature_dim, cfg).layers]
    w = fusion_weights((988, 256, 128, 4))
    numel = np.array([988 * 256 + 256, 256 * 128 + 128, 128 * 4 + 4], dtype=float)
    ok = (shapes == [(988, 256), (256, 128), (128, 4)] and spec.fl.global_rounds == 200
          and np.allclose(w, numel / numel.sum(), rtol=0, atol=1e-15))
    assert report(10, ok, f"shapes {shapes}, rounds {spec.fl.global_rounds}, "
                          f"fusion weights {', '.join(f'{x:.4f}' for x in w)}")
