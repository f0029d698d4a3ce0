"""Curricula, exemplar store, session training, metrics, baselines."""

import numpy as np
import pytest

from gencil import numerics as nm
from gencil.decoder import DecoderConfig, init_decoder
from gencil.errors import FrozenParamsError, InvariantError
from gencil.harness import (ExemplarStore, Scheme, TaskSpec, baseline_linear_probe,
                            evaluate_generative, make_curriculum, metric_avg,
                            metric_last, metric_pd, parse_scheme, task_indices,
                            train_task)
from gencil.matcher import ClassRegistry, RunStats
from gencil.seeding import rng_for
from gencil.tokenizer import QUESTION_TEXT, build_vocab, encode
from gencil.vision import ProjectionParams


# ---------------------------------------------------------------------------
# schemes and curricula


def test_scheme_parsing_round_trip():
    for text, kind, values in [("b0(10)", "b0", (10,)), ("bb(50,5)", "bb", (50, 5)),
                               ("fscil(60,5,5,8)", "fscil", (60, 5, 5, 8)),
                               ("B0( 10 )", "b0", (10,))]:
        s = parse_scheme(text)
        assert (s.kind, s.values) == (kind, values)
    assert parse_scheme("bb(50,5)").render() == "bb(50,5)"


def test_scheme_rejects_garbage():
    for bad in ("b1(10)", "b0()", "b0(10,5)", "bb(10)", "fscil(60,5,5)",
                "b0(0)", "b0(-3)", "10", ""):
        with pytest.raises(ValueError):
            parse_scheme(bad)


def test_b0_curriculum_partitions_classes():
    tasks = make_curriculum(parse_scheme("b0(10)"), 100, seed=0)
    assert len(tasks) == 10
    assert all(len(t.class_ids) == 10 and t.shots is None for t in tasks)
    flat = [c for t in tasks for c in t.class_ids]
    assert sorted(flat) == list(range(100))


def test_bb_curriculum_has_base_then_increments():
    tasks = make_curriculum(parse_scheme("bb(50,5)"), 100, seed=3)
    assert [len(t.class_ids) for t in tasks] == [50] + [5] * 10
    flat = [c for t in tasks for c in t.class_ids]
    assert sorted(flat) == list(range(100))


def test_fscil_curriculum_marks_shots():
    tasks = make_curriculum(parse_scheme("fscil(60,5,5,8)"), 100, seed=1)
    assert [len(t.class_ids) for t in tasks] == [60] + [5] * 8
    assert tasks[0].shots is None
    assert all(t.shots == 5 for t in tasks[1:])


def test_curriculum_is_seeded_and_deterministic():
    a = make_curriculum(parse_scheme("b0(5)"), 20, seed=4)
    b = make_curriculum(parse_scheme("b0(5)"), 20, seed=4)
    c = make_curriculum(parse_scheme("b0(5)"), 20, seed=5)
    assert a == b
    assert a != c


def test_curriculum_divisibility_errors():
    with pytest.raises(ValueError, match="does not divide"):
        make_curriculum(parse_scheme("b0(3)"), 20, seed=0)
    with pytest.raises(ValueError, match="does not divide"):
        make_curriculum(parse_scheme("bb(10,3)"), 20, seed=0)
    with pytest.raises(ValueError, match="must cover exactly"):
        make_curriculum(parse_scheme("fscil(10,2,5,4)"), 20, seed=0)
    with pytest.raises(ValueError, match="leave room"):
        make_curriculum(parse_scheme("bb(20,5)"), 20, seed=0)


def test_fscil_task_indices_subsample_per_class():
    labels = np.repeat(np.arange(4), 10)
    task = TaskSpec(1, (1, 3), shots=3)
    idx = task_indices(labels, task, seed=9)
    assert len(idx) == 6
    assert sorted(set(labels[idx])) == [1, 3]
    assert np.array_equal(idx, task_indices(labels, task, seed=9))
    with pytest.raises(ValueError, match="fewer than"):
        task_indices(labels, TaskSpec(1, (1,), shots=11), seed=9)


# ---------------------------------------------------------------------------
# exemplar store


def test_exemplar_store_budget_and_determinism():
    store = ExemplarStore(budget=5)
    rows = np.arange(100, 130)
    store.add_class(2, rows, seed=1)
    store.add_class(0, np.arange(3), seed=1)
    assert len(store) == 8  # 5 capped + 3 whole
    again = ExemplarStore(budget=5)
    again.add_class(2, rows, seed=1)
    assert again.flat_indices() == [i for i in store.flat_indices() if i >= 100]
    kept = store.flat_indices()
    assert kept == sorted(kept, key=lambda i: (i >= 100, i))  # class 0 block first
    assert all(100 <= i < 130 for i in kept[3:])
    with pytest.raises(ValueError, match="already has exemplars"):
        store.add_class(2, rows, seed=1)


def test_exemplar_store_zero_budget():
    store = ExemplarStore(budget=0)
    store.add_class(1, np.arange(10), seed=0)
    assert len(store) == 0
    assert store.flat_indices() == []
    assert store.classes() == [1]


# ---------------------------------------------------------------------------
# session training on a tiny synthetic setup


@pytest.fixture(scope="module")
def tiny_world():
    """Four linearly separable feature clusters and a small frozen decoder."""
    names = ("red dot", "blue ring", "green box", "dark star")
    vocab = build_vocab(names, (QUESTION_TEXT,))
    cfg = DecoderConfig(vocab_size=len(vocab), d_model=32, max_len=24)
    decoder = init_decoder(cfg, seed=2)
    decoder.freeze()
    rng = rng_for(0, "tiny-world")
    centers = rng.normal(0.0, 1.0, size=(4, 12))
    labels = np.repeat(np.arange(4), 12)
    feats = centers[labels] + rng.normal(0.0, 0.15, size=(48, 12))
    return names, vocab, decoder, feats, labels


def _fresh_projection():
    return ProjectionParams.init(12, 2, 32, seed=5)


def test_zero_epochs_is_a_bitwise_noop(tiny_world):
    names, vocab, decoder, feats, labels = tiny_world
    proj = _fresh_projection()
    before_w = proj.w.values.copy()
    store = ExemplarStore(budget=4)
    question = encode(QUESTION_TEXT, vocab)
    steps = train_task(feats, labels, names, TaskSpec(0, (0, 1)), vocab, question,
                       decoder, proj, store, epochs=0, batch_size=8, lr=0.1,
                       replay_fraction=0.25, seed=3)
    assert steps == 0
    assert np.array_equal(proj.w.values, before_w)
    assert store.classes() == [0, 1]  # exemplars recorded even without steps
    assert len(store) == 8


def test_training_moves_projection_and_respects_freeze(tiny_world):
    names, vocab, decoder, feats, labels = tiny_world
    proj = _fresh_projection()
    before = proj.w.values.copy()
    store = ExemplarStore(budget=4)
    question = encode(QUESTION_TEXT, vocab)
    dec_digest = decoder.digest()
    steps = train_task(feats, labels, names, TaskSpec(0, (0, 1)), vocab, question,
                       decoder, proj, store, epochs=2, batch_size=8, lr=0.1,
                       replay_fraction=0.25, seed=3)
    assert steps == (24 * 2) // 8
    assert not np.array_equal(proj.w.values, before)
    assert decoder.digest() == dec_digest  # frozen decoder untouched


def test_decoder_drift_is_detected(tiny_world):
    names, vocab, decoder, feats, labels = tiny_world
    proj = _fresh_projection()
    question = encode(QUESTION_TEXT, vocab)
    original = decoder["emb"].values[0, 0]
    decoder["emb"].values[0, 0] = original + 1e-9
    try:
        with pytest.raises(FrozenParamsError, match="drifted"):
            train_task(feats, labels, names, TaskSpec(0, (0, 1)), vocab, question,
                       decoder, proj, ExemplarStore(4), epochs=1, batch_size=8,
                       lr=0.1, replay_fraction=0.25, seed=3)
    finally:
        decoder["emb"].values[0, 0] = original


def test_unfrozen_decoder_is_rejected(tiny_world):
    names, vocab, decoder, feats, labels = tiny_world
    thawed = init_decoder(DecoderConfig(vocab_size=len(vocab), d_model=32, max_len=24), seed=2)
    with pytest.raises(FrozenParamsError, match="must be frozen"):
        train_task(feats, labels, names, TaskSpec(0, (0, 1)), vocab,
                   encode(QUESTION_TEXT, vocab), thawed, _fresh_projection(),
                   ExemplarStore(4), epochs=1, batch_size=8, lr=0.1,
                   replay_fraction=0.25, seed=3)


def test_evaluating_an_unseen_class_is_an_error(tiny_world):
    names, vocab, decoder, feats, labels = tiny_world
    registry = ClassRegistry()
    registry.add("red dot")
    with pytest.raises(InvariantError, match="unseen class"):
        evaluate_generative(feats, labels, names, np.flatnonzero(labels == 2),
                            decoder, _fresh_projection(), encode(QUESTION_TEXT, vocab),
                            vocab, registry, RunStats())


def test_session_training_is_deterministic(tiny_world):
    names, vocab, decoder, feats, labels = tiny_world
    outs = []
    for _ in range(2):
        proj = _fresh_projection()
        train_task(feats, labels, names, TaskSpec(0, (0, 1, 2, 3)), vocab,
                   encode(QUESTION_TEXT, vocab), decoder, proj, ExemplarStore(4),
                   epochs=2, batch_size=8, lr=0.1, replay_fraction=0.25, seed=3)
        outs.append(proj.w.values.copy())
    assert np.array_equal(outs[0], outs[1])


# ---------------------------------------------------------------------------
# metrics


def test_performance_drop_reference_values():
    # frozen reference pairs for the drop metric, on the percent scale
    assert abs(metric_pd(61.31, 17.21) - 44.10) <= 1e-9
    assert abs(metric_pd(64.10, 13.73) - 50.37) <= 1e-9


def test_avg_and_last_identities():
    assert metric_avg([42.0]) == 42.0 == metric_last([42.0])
    assert abs(metric_avg([80.0, 60.0, 40.0]) - 60.0) <= 1e-12
    assert metric_last([80.0, 60.0, 40.0]) == 40.0
    assert metric_pd(80.0, 40.0) == 40.0
    with pytest.raises(ValueError):
        metric_avg([])


# ---------------------------------------------------------------------------
# linear probe against an independent oracle


def test_probe_matches_sklearn_on_one_task():
    from sklearn.linear_model import LogisticRegression

    rng = rng_for(0, "probe-oracle")
    centers = rng.normal(0.0, 1.0, size=(4, 8))
    ytr = np.repeat(np.arange(4), 32)
    xtr = centers[ytr] + rng.normal(0.0, 0.35, size=(128, 8))
    yte = np.repeat(np.arange(4), 16)
    xte = centers[yte] + rng.normal(0.0, 0.35, size=(64, 8))

    accs = baseline_linear_probe(xtr, ytr, xte, yte,
                                 [TaskSpec(0, (0, 1, 2, 3))], epochs=40,
                                 batch_size=16, lr=0.5, exemplar_budget=0, seed=1)
    ref = LogisticRegression(max_iter=2000).fit(xtr, ytr).score(xte, yte)
    assert abs(accs[0] - ref) <= 0.05


def test_probe_expands_head_and_forgets_without_exemplars():
    rng = rng_for(1, "probe-forget")
    centers = rng.normal(0.0, 1.2, size=(6, 8))
    ytr = np.repeat(np.arange(6), 24)
    xtr = centers[ytr] + rng.normal(0.0, 0.2, size=(144, 8))
    yte = np.repeat(np.arange(6), 8)
    xte = centers[yte] + rng.normal(0.0, 0.2, size=(48, 8))
    tasks = [TaskSpec(0, (0, 1)), TaskSpec(1, (2, 3)), TaskSpec(2, (4, 5))]
    free = baseline_linear_probe(xtr, ytr, xte, yte, tasks, epochs=30,
                                 batch_size=16, lr=0.5, exemplar_budget=0, seed=2)
    replay = baseline_linear_probe(xtr, ytr, xte, yte, tasks, epochs=30,
                                   batch_size=16, lr=0.5, exemplar_budget=20, seed=2)
    assert free[0] > 0.9           # first task is easy
    assert replay[-1] > free[-1]   # exemplars reduce forgetting
