import json
import tracemalloc
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gblum.logdata import (
    TASKS,
    BehaviorSequence,
    CorpusFormatError,
    LabelRecord,
    Persona,
    SyntheticConfig,
    balance_labels,
    build_platform,
    build_vocab,
    count_records,
    default_behavior_names,
    derive_labels,
    generate_corpus,
    iter_records,
    load_corpus,
    load_vocab,
    make_persona,
    median_length,
    persona_chain,
    sample_pair_indices,
    sample_sequence_pair,
    save_corpus,
    save_vocab,
    simulate_stream,
    total_variation,
)


# -- vocabulary ---------------------------------------------------------------

def test_two_behavior_vocab_appends_specials():
    v = build_vocab(["send_chat", "view_video"])
    assert v.num_behaviors == 2
    assert {v.pad_id, v.mask_id, v.unk_id} == {2, 3, 4}
    assert v.size == 5


def test_empty_vocab_rejected():
    with pytest.raises(ValueError):
        build_vocab([])


def test_duplicate_name_is_named():
    with pytest.raises(ValueError, match="send_chat"):
        build_vocab(["send_chat", "view_video", "send_chat"])


def test_desk_vocab_round_trip(tmp_path):
    names = default_behavior_names(120)
    v = build_vocab(names)
    assert [v.id_of[n] for n in names] == list(range(120))
    assert all(v.name_of(v.id_of[n]) == n for n in names)
    assert (v.pad_id, v.mask_id, v.unk_id) == (120, 121, 122)
    save_vocab(tmp_path / "vocab.txt", v)
    assert (tmp_path / "vocab.txt").read_text().splitlines() == names
    assert load_vocab(tmp_path / "vocab.txt") == v


# -- sequences and labels -----------------------------------------------------

def test_sequence_validation():
    with pytest.raises(ValueError):
        BehaviorSequence(1, [], [])
    with pytest.raises(ValueError):
        BehaviorSequence(1, [0, 1], [0])
    with pytest.raises(ValueError, match="non-decreasing"):
        BehaviorSequence(1, [0, 1], [2, 1])


def test_label_validation():
    with pytest.raises(ValueError):
        LabelRecord(0, "churn", 0, 1)
    with pytest.raises(ValueError):
        LabelRecord(0, "reported", 8, 1)
    with pytest.raises(ValueError):
        LabelRecord(0, "reported", 0, 2)


def test_before_day_and_latest():
    s = BehaviorSequence(3, [5, 6, 7, 8], [0, 0, 1, 2])
    assert s.before_day(0) is None
    assert s.before_day(1).tokens == [5, 6]
    assert s.before_day(9).tokens == [5, 6, 7, 8]
    assert s.latest(3).tokens == [6, 7, 8]
    assert s.latest(10).tokens == [5, 6, 7, 8]


# -- generator ----------------------------------------------------------------

def test_generation_is_deterministic():
    cfg = SyntheticConfig(num_users=2, days=14, mean_events_per_day=40.0)
    _, s1, l1 = generate_corpus(cfg, seed=7)
    _, s2, l2 = generate_corpus(cfg, seed=7)
    assert s1 == s2 and l1 == l2
    _, s3, _ = generate_corpus(cfg, seed=8)
    assert s1 != s3


def test_single_user_rejected():
    with pytest.raises(ValueError, match="at least 2 users"):
        generate_corpus(SyntheticConfig(num_users=1), seed=0)


def test_one_hot_persona_emits_only_that_behavior():
    cfg = SyntheticConfig(num_behaviors=20, num_risky=2, num_content=2, days=10)
    platform = build_platform(cfg, 0)
    rng = np.random.default_rng(0)
    p = make_persona(platform, cfg, rng)
    one_hot = np.zeros(20)
    one_hot[7] = 1.0
    p = replace(p, preference=one_hot, transition_bias=np.tile(one_hot, (20, 1)))
    s = simulate_stream(p, cfg, rng)
    assert set(s.tokens) == {7}


def test_persona_distributions_are_normalized(small_config):
    platform = build_platform(small_config, 3)
    rng = np.random.default_rng(3)
    for _ in range(20):
        p = make_persona(platform, small_config, rng)
        assert abs(p.preference.sum() - 1) < 1e-9
        assert np.allclose(p.transition_bias.sum(axis=1), 1, atol=1e-9)
        chain, pi = persona_chain(p, small_config)
        assert np.allclose(chain.sum(axis=1), 1, atol=1e-9)
        assert 0 <= p.risk_level <= 1


def test_median_length_near_target():
    cfg = SyntheticConfig(num_users=1000, days=21)
    _, streams, _ = generate_corpus(cfg, seed=0)
    assert abs(median_length(streams) / cfg.target_length - 1) <= 0.15


def test_stream_tokens_are_behaviors(small_corpus, small_config):
    _, streams, _ = small_corpus
    for s in streams:
        assert 0 <= min(s.tokens) and max(s.tokens) < small_config.num_behaviors
        assert s.timestamps[-1] < small_config.days


def test_same_user_windows_are_closer(small_corpus, small_config):
    _, streams, _ = small_corpus
    rng = np.random.default_rng(5)
    wins, trials = 0, 300
    for _ in range(trials):
        i, j = rng.choice(len(streams), size=2, replace=False)
        a, b = sample_sequence_pair(streams[i], 64, rng)
        start = int(rng.integers(0, len(streams[j]) - 64))
        c = streams[j].window(start, start + 64)
        v = small_config.num_behaviors
        wins += total_variation(a.tokens, b.tokens, v) < total_variation(a.tokens, c.tokens, v)
    assert wins / trials >= 0.8


# -- window pairs -------------------------------------------------------------

def _stream(n, uid=0):
    return BehaviorSequence(uid, list(range(n)), [0] * n)


def test_pair_on_long_stream(rng):
    a, b = sample_sequence_pair(_stream(256), 128, rng)
    assert len(a) <= 128 and len(b) <= 128
    assert not set(a.tokens) & set(b.tokens)


def test_pair_on_minimal_stream(rng):
    a, b = sample_sequence_pair(_stream(2), 128, rng)
    assert len(a) == len(b) == 1
    assert {a.tokens[0], b.tokens[0]} == {0, 1}


def test_pair_too_short_names_user(rng):
    with pytest.raises(ValueError, match="user 42"):
        sample_sequence_pair(_stream(1, uid=42), 8, rng)


def test_pair_indices_never_overlap():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        r1, r2 = sample_pair_indices(300, 128, rng)
        assert r1.stop <= r2.start or r2.stop <= r1.start


def test_pair_indices_match_sampler():
    s = _stream(100)
    a, b = sample_sequence_pair(s, 16, np.random.default_rng(9))
    r1, r2 = sample_pair_indices(100, 16, np.random.default_rng(9))
    assert a.tokens == list(r1) and b.tokens == list(r2)


@settings(max_examples=200, deadline=None)
@given(n=st.integers(2, 400), max_len=st.integers(1, 200), seed=st.integers(0, 2**32 - 1))
def test_pair_property(n, max_len, seed):
    a, b = sample_sequence_pair(_stream(n), max_len, np.random.default_rng(seed))
    assert 1 <= len(a) <= max_len and len(a) == len(b)
    assert not set(a.tokens) & set(b.tokens)


# -- labels -------------------------------------------------------------------

@pytest.fixture(scope="module")
def label_setup():
    cfg = SyntheticConfig(num_behaviors=40, num_risky=4, num_content=4, days=12)
    platform = build_platform(cfg, 1)
    rng = np.random.default_rng(1)
    persona = make_persona(platform, cfg, rng)
    stream = simulate_stream(persona, cfg, rng)
    return cfg, platform, persona, stream


def test_saturated_risk_is_reported(label_setup):
    cfg, platform, persona, stream = label_setup
    p = replace(persona, risk_level=1.0)
    for gap in range(8):
        assert derive_labels(p, stream, "reported", gap, platform=platform, config=cfg).label == 1


def test_growing_user_does_not_delete(label_setup):
    cfg, platform, persona, stream = label_setup
    p = replace(persona, activity_trend=1.0)
    assert derive_labels(p, stream, "self_delete", 0, platform=platform, config=cfg).label == 0
    p = replace(persona, activity_trend=-1.0)
    assert derive_labels(p, stream, "self_delete", 0, platform=platform, config=cfg).label == 1


def test_unknown_task_rejected(label_setup):
    cfg, platform, persona, stream = label_setup
    with pytest.raises(ValueError, match="unknown task"):
        derive_labels(persona, stream, "churn", 0, platform=platform, config=cfg)


def test_every_user_gets_every_label(small_corpus):
    _, streams, labels = small_corpus
    assert len(labels) == len(streams) * len(TASKS) * 8


def test_balanced_assembly():
    cfg = SyntheticConfig(num_users=2000, days=10, mean_events_per_day=4.0)
    _, _, labels = generate_corpus(cfg, seed=2)
    rng = np.random.default_rng(0)
    for task in TASKS:
        chosen = balance_labels(labels, task, 0, rng)
        rate = np.mean([r.label for r in chosen])
        assert abs(rate - 0.5) <= 0.02
        assert len({r.user_id for r in chosen}) == len(chosen)


# -- corpus files ---------------------------------------------------------------

def test_corpus_round_trip(tmp_path):
    _, streams, labels = generate_corpus(SyntheticConfig(num_users=100, days=10, mean_events_per_day=5.0), 4)
    save_corpus(tmp_path / "c.jsonl", streams, labels)
    s2, l2 = load_corpus(tmp_path / "c.jsonl")
    assert s2 == streams and l2 == labels
    first = json.loads((tmp_path / "c.jsonl").read_text().splitlines()[0])
    assert set(first) == {"user_id", "tokens", "timestamps"}


def test_truncated_file_names_line(tmp_path, small_corpus):
    _, streams, _ = small_corpus
    path = tmp_path / "c.jsonl"
    save_corpus(path, streams[:5])
    text = path.read_text()
    lines = text.splitlines()
    path.write_text("\n".join(lines[:3]) + "\n" + lines[3][: len(lines[3]) // 2])
    with pytest.raises(CorpusFormatError, match="line 4"):
        load_corpus(path)


def test_bad_fields_rejected(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text('{"user_id": 1, "tokens": [1], "timestamps": [0]}\n{"user_id": 1, "tokens": [1]}\n')
    with pytest.raises(CorpusFormatError, match="line 2"):
        load_corpus(path)


def test_counting_streams_in_bounded_memory(tmp_path):
    path = tmp_path / "big.jsonl"
    seq = BehaviorSequence(0, list(range(20)), [0] * 20)
    save_corpus(path, (replace(seq, user_id=i) for i in range(50_000)))
    tracemalloc.start()
    counts = count_records(path)
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    assert counts == (50_000, 0)
    assert peak < 2_000_000
    assert sum(1 for _ in iter_records(path)) == 50_000


def test_persona_type_fields():
    p = Persona(np.ones(3) / 3, np.ones((3, 3)) / 3, 0.1, 0.2)
    assert p.engagement == 0.5
