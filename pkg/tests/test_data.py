import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedleak.data import (
    PROFILES,
    CorpusConfig,
    Speaker,
    gender_probe_accuracy,
    load_corpus,
    make_folds,
    save_corpus,
    shard_clients,
    synth_corpus,
    world_vectors,
    znormalize_per_speaker,
)
from fedleak.errors import ConfigError, ShapeError
from fedleak.fl import FLConfig, local_gradient
from fedleak.nn.mlp import init_mlp
from fedleak.rng import derive


def _speaker(sid, gender, n, dim=3, seed=0):
    g = derive(seed, sid)
    return Speaker(sid, gender, g.normal(size=(n, dim)), g.integers(0, 4, size=n))


def test_iemocap_profile_proportions():
    cfg = CorpusConfig(profile="IEMOCAP-like").resolved()
    np.testing.assert_allclose(cfg.proportions, np.array([1099, 947, 608, 289]) / 2943, rtol=0, atol=1e-15)
    assert cfg.num_speakers == 10 and cfg.num_male == 5


def test_cremad_profile_speaker_counts():
    cfg = CorpusConfig(profile="CREMAD-like").resolved()
    assert (cfg.num_speakers, cfg.num_male) == (91, 48)
    assert sum(PROFILES["CREMAD-like"]["counts"]) == 4798


@pytest.mark.parametrize("kw", [dict(feature_dim=0), dict(proportions=()), dict(proportions=(0.5, 0.5, 0.5, -0.5)),
                                dict(attribute_separation=-1.0), dict(profile="nope")])
def test_config_errors(kw):
    with pytest.raises(ConfigError):
        synth_corpus(CorpusConfig(**kw))


def test_synth_is_deterministic_and_labels_valid():
    cfg = CorpusConfig(num_speakers=4, utterances_per_speaker=20, seed=3)
    a, b = synth_corpus(cfg), synth_corpus(cfg)
    assert [s.features.tobytes() for s in a] == [s.features.tobytes() for s in b]
    assert all(set(s.labels.tolist()) <= {0, 1, 2, 3} for s in a)
    assert Counter(s.gender for s in a) == {"F": 2, "M": 2}


def test_prefixes_give_disjoint_speakers_in_one_world():
    p = synth_corpus(CorpusConfig(num_speakers=4, utterances_per_speaker=5, speaker_prefix="p", seed=2))
    s = synth_corpus(CorpusConfig(num_speakers=4, utterances_per_speaker=5, speaker_prefix="s", seed=2))
    assert not {x.speaker_id for x in p} & {x.speaker_id for x in s}
    assert p[0].features.tobytes() != s[0].features.tobytes()
    mu1, u1 = world_vectors(CorpusConfig(seed=2, speaker_prefix="p"))
    mu2, u2 = world_vectors(CorpusConfig(seed=2, speaker_prefix="s"))
    assert mu1.tobytes() == mu2.tobytes() and u1.tobytes() == u2.tobytes()


def test_world_vectors_are_normalised():
    mu, u = world_vectors(CorpusConfig(emotion_separation=3.0, seed=1))
    np.testing.assert_allclose(np.linalg.norm(mu, axis=1), 3.0)
    assert np.linalg.norm(u) == pytest.approx(1.0)
    mu, u = world_vectors(CorpusConfig(gender_in_emotion_span=True, seed=1))
    # u lies in the span of the emotion means
    coef, *_ = np.linalg.lstsq(mu.T, u, rcond=None)
    np.testing.assert_allclose(mu.T @ coef, u, atol=1e-10)


def test_null_delta_has_no_gender_shift():
    cfg = CorpusConfig(num_speakers=40, utterances_per_speaker=300, attribute_separation=0.0, seed=4)
    spk = synth_corpus(cfg)
    _, u = world_vectors(cfg.resolved())
    proj = {g: np.concatenate([s.features @ u for s in spk if s.gender == g]) for g in "FM"}
    assert sum(len(v) for v in proj.values()) >= 10_000
    diff = proj["M"].mean() - proj["F"].mean()
    sigma = np.sqrt(proj["M"].var() / len(proj["M"]) + proj["F"].var() / len(proj["F"]))
    assert abs(diff) < 3 * sigma


def test_probe_oracle_detects_gender_at_unit_delta():
    spk = synth_corpus(CorpusConfig(num_speakers=20, utterances_per_speaker=60, attribute_separation=1.0,
                                    noise_std=0.5, seed=0))
    assert gender_probe_accuracy(spk, seed=0) >= 0.9


def test_probe_accuracy_monotone_in_delta():
    accs = [gender_probe_accuracy(synth_corpus(CorpusConfig(num_speakers=20, utterances_per_speaker=60,
                                                            attribute_separation=d, seed=0)), seed=0)
            for d in (0.0, 0.25, 0.5, 1.0)]
    assert all(b >= a for a, b in zip(accs, accs[1:])), accs
    assert abs(accs[0] - 0.5) < 0.1


def test_znorm_population_std_example():
    out = znormalize_per_speaker([Speaker("a", "F", np.array([[1.0], [3.0]]), [0, 1])])
    np.testing.assert_array_equal(out[0].features.ravel(), [-1.0, 1.0])


def test_znorm_constant_column_is_centred_only():
    x = np.array([[5.0, 1.0], [5.0, 2.0], [5.0, 4.0]])
    out = znormalize_per_speaker([Speaker("a", "M", x, [0, 1, 2])])[0].features
    np.testing.assert_array_equal(out[:, 0], 0.0)
    assert out[:, 1].std() == pytest.approx(1.0)


def test_znorm_rejects_single_utterance():
    with pytest.raises(ConfigError):
        znormalize_per_speaker([Speaker("a", "F", np.ones((1, 3)), [0])])


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 30), dim=st.integers(1, 6), seed=st.integers(0, 2**31))
def test_znorm_idempotent(n, dim, seed):
    x = derive(seed).normal(loc=3.0, scale=2.0, size=(n, dim))
    once = znormalize_per_speaker([Speaker("a", "F", x, np.zeros(n, dtype=int))])
    twice = znormalize_per_speaker(once)
    np.testing.assert_allclose(twice[0].features, once[0].features, rtol=0, atol=1e-12)


def test_shard_counts():
    spk = [_speaker(f"s{i}", "FM"[i % 2], 30) for i in range(10)]
    assert len(shard_clients(spk, 10)) == 100
    assert len(shard_clients(spk, 1)) == 10


def test_shard_sizes_balanced():
    shards = shard_clients([_speaker("a", "F", 25)], 10)
    assert sorted((len(c.labels) for c in shards), reverse=True) == [3, 3, 3, 3, 3, 2, 2, 2, 2, 2]


def test_shard_too_few_utterances():
    with pytest.raises(ConfigError):
        shard_clients([_speaker("a", "F", 3)], 4)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 40), k=st.integers(1, 6), seed=st.integers(0, 1000))
def test_sharding_preserves_rows_and_splits(n, k, seed):
    if n < k:
        return
    spk = _speaker("a", "M", n, seed=seed)
    shards = shard_clients([spk], k, seed=seed)
    rows = np.concatenate([c.features for c in shards])
    assert sorted(map(bytes, rows)) == sorted(map(bytes, spk.features))
    for c in shards:
        assert c.gender == "M"
        tr, va = set(c.train_idx.tolist()), set(c.val_idx.tolist())
        assert not tr & va and tr | va == set(range(len(c.labels)))
        assert c.n_train >= 1


def test_ten_speakers_five_folds():
    spk = [_speaker(f"s{i}", "FM"[i % 2], 4) for i in range(10)]
    plans = make_folds(spk, 5, seed=1)
    tests = [set(p.test_speaker_ids) for p in plans]
    assert all(len(t) == 2 for t in tests)
    assert set().union(*tests) == {s.speaker_id for s in spk}
    assert sum(len(t) for t in tests) == 10
    for p in plans:
        assert not set(p.train_speaker_ids) & set(p.test_speaker_ids)
        assert len(p.train_speaker_ids) == 8


def test_msp_like_folds_are_gender_paired():
    spk = synth_corpus(CorpusConfig(profile="MSPIMPROV-like", utterances_per_speaker=3, seed=0))
    gender = {s.speaker_id: s.gender for s in spk}
    for p in make_folds(spk, 5, seed=0):
        got = sorted(gender[i] for i in p.test_speaker_ids)
        assert got in (["F", "M"], ["F", "F", "M"], ["F", "M", "M"])
    pairs = [p for p in make_folds(spk, 5, seed=0) if len(p.test_speaker_ids) == 2]
    assert all(sorted(gender[i] for i in p.test_speaker_ids) == ["F", "M"] for p in pairs)


def test_folds_need_enough_speakers():
    with pytest.raises(ConfigError):
        make_folds([_speaker(f"s{i}", "F", 3) for i in range(4)], 5)


def test_save_load_roundtrip_bitwise(tmp_path):
    spk = synth_corpus(CorpusConfig(num_speakers=3, utterances_per_speaker=7, seed=5))
    save_corpus(spk, tmp_path)
    back = load_corpus(tmp_path)
    for a, b in zip(spk, back):
        assert (a.speaker_id, a.gender) == (b.speaker_id, b.gender)
        assert a.features.tobytes() == b.features.tobytes()
        assert a.labels.tolist() == b.labels.tolist()


def test_save_is_byte_stable(tmp_path):
    spk = synth_corpus(CorpusConfig(num_speakers=2, utterances_per_speaker=4, seed=5))
    save_corpus(spk, tmp_path / "a")
    save_corpus(spk, tmp_path / "b")
    for name in ("manifest.json", "features.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_load_rejects_dim_mismatch(tmp_path):
    save_corpus(synth_corpus(CorpusConfig(num_speakers=2, utterances_per_speaker=4, seed=5)), tmp_path)
    m = json.loads((tmp_path / "manifest.json").read_text())
    m["feature_dim"] = 87
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises((ShapeError, ConfigError)):
        load_corpus(tmp_path)


def test_load_rejects_truncated_payload(tmp_path):
    save_corpus(synth_corpus(CorpusConfig(num_speakers=2, utterances_per_speaker=4, seed=5)), tmp_path)
    data = (tmp_path / "features.bin").read_bytes()
    (tmp_path / "features.bin").write_bytes(data[:-8])
    with pytest.raises(ShapeError):
        load_corpus(tmp_path)


def test_load_rejects_malformed_manifest(tmp_path):
    (tmp_path / "manifest.json").write_text("{not json")
    (tmp_path / "features.bin").write_bytes(b"")
    with pytest.raises(ConfigError):
        load_corpus(tmp_path)


def test_external_988_dim_corpus_runs_through_client_pipeline(tmp_path):
    # hand-written files, as an external feature extractor would produce them
    g = derive(8)
    entries, blobs = [], []
    for i, gender in enumerate("FMFM"):
        x = g.normal(size=(6, 988))
        labels = g.integers(0, 4, size=6).tolist()
        entries.append({"speaker_id": f"ext{i}", "gender": gender, "n_utterances": 6, "feature_dim": 988,
                        "labels": labels})
        blobs.append(x.astype("<f8").tobytes())
    (tmp_path / "manifest.json").write_text(json.dumps(
        {"format_version": 1, "feature_dim": 988, "num_classes": 4, "speakers": entries}))
    (tmp_path / "features.bin").write_bytes(b"".join(blobs))
    spk = znormalize_per_speaker(load_corpus(tmp_path))
    clients = shard_clients(spk, 1)
    params = init_mlp((988, 256, 128, 4), derive(0))
    upd, bs = local_gradient(clients[0], params, FLConfig())
    assert upd.per_layer[0][0].shape == (988, 256) and bs == clients[0].n_train
