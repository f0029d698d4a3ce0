"""Release acceptance gate: eight checks, one test per criterion.

Each test prints a "[criterion N] PASS/FAIL" line with the measured numbers,
so the gate can be audited from the test log alone.  Criteria 7 and 8 share
one full default-config pipeline run through a module-scoped fixture.
"""

import json
import math
import time

import numpy as np
import pytest

import gencil.numerics as nm
from gencil.checkpoint import write_checkpoint
from gencil.config import DEFAULTS, spec_from_config
from gencil.data import all_combos, combo_name, gen_synthetic, write_dataset
from gencil.decoder import (DecoderConfig, assemble_input, caption_loss,
                            forward_logits, greedy_decode, init_decoder)
from gencil.harness import (GEN_MAX_LEN, make_curriculum, metric_avg,
                            metric_last, metric_pd, parse_scheme)
from gencil.matcher import (ClassRegistry, RunStats, TextEmbedding, cosine,
                            embed_text, predict)
from gencil.pipeline import pretrain_all, run_stage
from gencil.seeding import rng_for
from gencil.tokenizer import (EOS_ID, QUESTION_TEXT, TokenSequence,
                              build_vocab, encode, render_template)
from gencil.vision import ProjectionParams, project


def _check(capfd, num: int, ok: bool, detail: str) -> None:
    line = f"[criterion {num}] {'PASS' if ok else 'FAIL'}: {detail}"
    with capfd.disabled():
        print(line, flush=True)
    assert ok, line


# ---------------------------------------------------------------------------
# criterion 1: gradients


def _composite(seed: int):
    """One graph touching every differentiable op the stack uses.

    Test points are conditioned so every path carries a gradient that
    central differences can resolve: the elementwise multiplier stays
    away from zero and weight scales keep attention off the uniform
    plateau, where path gradients drop to the 1e-8 roundoff floor.
    """
    rng = rng_for(seed, "acceptance-grad")
    V, D, T = 7, 6, 3
    L = T + 2  # two image-style rows in front of the tokens

    def p(shape, s, name):
        return nm.Tensor(rng.normal(0.0, s, size=shape), trainable=True, name=name)

    params = {
        "emb": p((V, D), 0.4, "emb"), "img": p((2, D), 0.4, "img"),
        "wq": p((D, D), 0.4, "wq"), "wk": p((D, D), 0.4, "wk"),
        "wv": p((D, D), 0.4, "wv"), "wo": p((D, D), 0.4, "wo"),
        "gain": nm.Tensor(1.0 + rng.normal(0.0, 0.1, size=D), trainable=True, name="gain"),
        "bias": p((D,), 0.05, "bias"),
        "w1": p((D, 2 * D), 0.4, "w1"), "b1": p((2 * D,), 0.05, "b1"),
        "w2": p((2 * D, D), 0.4, "w2"), "b2": p((D,), 0.05, "b2"),
        "mix": nm.Tensor(rng.uniform(0.5, 1.5, size=(L, D)), trainable=True, name="mix"),
    }
    ids = rng.integers(0, V, size=T)
    targets = rng.integers(0, V, size=L)
    span = np.array([False, True, True, True, True])
    causal = np.tril(np.ones((L, L), dtype=bool))

    def build():
        x = nm.concat_rows([params["img"], nm.embedding_lookup(params["emb"], ids)])
        h = nm.layer_norm(x, params["gain"], params["bias"])
        att = nm.softmax(nm.scale(nm.matmul(nm.matmul(h, params["wq"]),
                                            nm.matmul(h, params["wk"]),
                                            transpose_b=True), D ** -0.5), mask=causal)
        x = nm.add(x, nm.matmul(nm.matmul(att, nm.matmul(h, params["wv"])), params["wo"]))
        f = nm.gelu(nm.add(nm.matmul(x, params["w1"]), params["b1"]))
        x = nm.add(x, nm.tanh(nm.add(nm.matmul(f, params["w2"]), params["b2"])))
        x = nm.mul(x, params["mix"])
        ce = nm.token_cross_entropy(nm.softmax(nm.matmul(x, params["emb"], transpose_b=True)),
                                    targets, span)
        flat = nm.reshape(x, (L * D,))
        picked = nm.gather(flat, np.array([0, 7, 13]))
        return nm.add(ce, nm.scale(nm.sum_all(nm.mul(picked, picked)), 0.5))

    return build, list(params.values())


def test_criterion_1_gradient_suite(capfd):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(50):
        build, params = _composite(seed)
        worst = max(worst, nm.grad_check(build, params))
    wall = time.perf_counter() - t0
    _check(capfd, 1, worst <= 1e-4 and wall < 60.0,
           f"composite attention/LN/embedding/CE graph, worst rel err {worst:.3e} "
           f"over 50 seeds (tol 1e-4) in {wall:.1f}s (limit 60s)")


# ---------------------------------------------------------------------------
# criterion 2: autoregressive factorization


def test_criterion_2_factorization(capfd):
    names = ("red dot", "blue ring", "green box")
    vocab = build_vocab(list(names), (QUESTION_TEXT,))
    cfg = DecoderConfig(vocab_size=len(vocab), d_model=16, n_blocks=1, max_len=24)
    q = encode(QUESTION_TEXT, vocab)
    worst = 0.0
    for seed in range(100):
        params = init_decoder(cfg, seed)
        img = nm.Tensor(rng_for(seed, "acceptance-fact").normal(0.0, 0.5, size=(2, cfg.d_model)))
        a = encode(render_template(names[seed % 3]), vocab)
        full = assemble_input(img, q, a, params)
        probs = nm.softmax(forward_logits(full, params)).values
        start, length = full.answer_span
        total_full = sum(math.log(probs[r, full.ids[r + 1]])
                         for r in range(start - 1, start - 1 + length))
        total_steps = 0.0
        for t, target in enumerate(list(a.ids) + [EOS_ID]):
            prefix = assemble_input(img, q, TokenSequence(a.ids[:t]), params, terminal=False)
            total_steps += math.log(nm.softmax(forward_logits(prefix, params)).values[-1, target])
        worst = max(worst, abs(total_full - total_steps))
    _check(capfd, 2, worst <= 1e-10,
           f"teacher-forced vs stepwise sequence log-prob, worst |diff| {worst:.3e} "
           f"over 100 inits (tol 1e-10)")


# ---------------------------------------------------------------------------
# criterion 3: loss calibration


def test_criterion_3_loss_calibration(capfd):
    names = [combo_name(c) for c in all_combos()]
    vocab = build_vocab(names, (QUESTION_TEXT,))
    cfg = DecoderConfig(vocab_size=len(vocab))
    q = encode(QUESTION_TEXT, vocab)

    losses = []
    for seed in (0, 1, 2):
        params = init_decoder(cfg, seed)
        proj = ProjectionParams.init(64, 4, cfg.d_model, seed)
        rng = rng_for(seed, "acceptance-init-loss")
        for name in names[:8]:
            img = project(rng.normal(0.0, 1.0, size=64), proj)
            inp = assemble_input(img, q, encode(render_template(name), vocab), params)
            losses.append(float(caption_loss([inp], params).values))
    init_gap = abs(float(np.mean(losses)) - math.log(len(vocab)))

    params = init_decoder(cfg, seed=3)
    proj = ProjectionParams.init(64, 4, cfg.d_model, seed=3)
    feature = rng_for(3, "acceptance-overfit").normal(0.0, 0.5, size=64)
    a = encode(render_template(names[0]), vocab)
    trainables = params.trainables() + proj.trainables()
    opt = nm.OptimizerState(lr_base=0.3, total_steps=1200)
    for _ in range(1200):
        inp = assemble_input(project(feature, proj), q, a, params)
        nm.backward(caption_loss([inp], params))
        nm.sgd_step(trainables, [t.grad for t in trainables], opt)
    inp = assemble_input(project(feature, proj), q, a, params)
    final = float(caption_loss([inp], params).values)
    exact = greedy_decode(project(feature, proj), q, params, max_len=GEN_MAX_LEN).ids == a.ids

    _check(capfd, 3, init_gap <= 0.2 and final < 1e-3 and exact,
           f"fresh-init caption loss within {init_gap:.3f} of ln V = {math.log(len(vocab)):.3f} "
           f"(tol 0.2); one-example loss {final:.2e} after 1200 steps (tol 1e-3); "
           f"greedy reproduces the caption: {exact}")


# ---------------------------------------------------------------------------
# criterion 4: session metrics


def test_criterion_4_metric_identities(capfd):
    pd1 = metric_pd(61.31, 17.21)
    pd2 = metric_pd(64.10, 13.73)
    accs = [0.875, 0.66, 0.515, 0.475]
    identities = (abs(metric_avg(accs) - sum(accs) / len(accs)) <= 1e-12
                  and metric_last(accs) == accs[-1])
    _check(capfd, 4, abs(pd1 - 44.10) <= 1e-9 and abs(pd2 - 50.37) <= 1e-9 and identities,
           f"PD(61.31, 17.21) = {pd1:.2f} (want 44.10), PD(64.10, 13.73) = {pd2:.2f} "
           f"(want 50.37), tol 1e-9; Avg/Last identities hold: {identities}")


# ---------------------------------------------------------------------------
# criterion 5: text matcher


def test_criterion_5_matcher(capfd):
    registry = ClassRegistry()
    ids = {name: registry.add(name) for name in (combo_name(c) for c in all_combos())}
    stats = RunStats()
    hits = sum(predict(render_template(n), registry, stats) == i for n, i in ids.items())

    u = embed_text("dark dotted cross")
    v = embed_text("dark dotted circle")
    scale_gap = abs(cosine(u, v) - cosine(u, TextEmbedding(37.5 * v.vector, False)))

    vehicles = ClassRegistry()
    truck = vehicles.add("fire truck")
    vehicles.add("police car")
    vehicles.add("ambulance")
    near_miss = predict("this is a photo of fire engine", vehicles) == truck

    _check(capfd, 5,
           hits == len(ids) and stats.empty_generations == 0
           and scale_gap <= 1e-12 and near_miss,
           f"{hits}/{len(ids)} grammar names self-match; cosine scale gap {scale_gap:.1e} "
           f"(tol 1e-12); 'fire engine' lands on 'fire truck': {near_miss}")


# ---------------------------------------------------------------------------
# criterion 6: curriculum shapes


def test_criterion_6_curriculum_shapes(capfd):
    expected = {
        "b0(10)": ([10] * 10, [None] * 10),
        "bb(50,5)": ([50] + [5] * 10, [None] * 11),
        "fscil(60,5,5,8)": ([60] + [5] * 8, [None] + [5] * 8),
    }
    orderings = set()
    for text, (sizes, shots) in expected.items():
        scheme = parse_scheme(text)
        for seed in range(100):
            tasks = make_curriculum(scheme, 100, seed)
            assert [len(t.class_ids) for t in tasks] == sizes
            assert [t.shots for t in tasks] == shots
            assert [t.session for t in tasks] == list(range(len(tasks)))
            flat = [c for t in tasks for c in t.class_ids]
            assert sorted(flat) == list(range(100))  # disjoint, exhaustive
            again = make_curriculum(scheme, 100, seed)
            assert [t.class_ids for t in again] == [t.class_ids for t in tasks]
            orderings.add(tuple(flat))
    _check(capfd, 6, len(orderings) >= 90,
           f"b0(10)/bb(50,5)/fscil(60,5,5,8) partition 100 classes correctly over "
           f"100 seeds each; {len(orderings)} distinct seeded orderings")


# ---------------------------------------------------------------------------
# criteria 7 and 8: one full default-config pipeline, shared


@pytest.fixture(scope="module")
def pipeline():
    cfg = dict(DEFAULTS)
    seed = int(cfg["seed"])
    t0 = time.perf_counter()
    splits = gen_synthetic(spec_from_config(cfg))
    bundle = pretrain_all(splits["pretrain"], splits["train"].class_names, cfg, seed)
    results = run_stage(bundle, splits["train"], splits["test"], cfg)
    wall = time.perf_counter() - t0
    return {"cfg": cfg, "seed": seed, "splits": splits, "bundle": bundle,
            "results": results, "wall": wall}


def test_criterion_7_end_to_end_default_run(pipeline, capfd):
    methods = pipeline["results"]["methods"]
    gmm, probe, zero = methods["gmm"], methods["probe"], methods["zero_shot"]
    ok = (pipeline["wall"] < 600.0
          and gmm["last_pct"] > probe["last_pct"]
          and zero["pd_pct"] < probe["pd_pct"])
    _check(capfd, 7, ok,
           f"default pipeline in {pipeline['wall']:.1f}s (limit 600s); generative Last "
           f"{gmm['last_pct']:.2f}% > probe Last {probe['last_pct']:.2f}%; zero-shot PD "
           f"{zero['pd_pct']:.2f} < probe PD {probe['pd_pct']:.2f}")


def test_criterion_8_bitwise_reproducibility(pipeline, tmp_path, capfd):
    cfg, seed = pipeline["cfg"], pipeline["seed"]
    splits2 = gen_synthetic(spec_from_config(cfg))
    d1, d2 = tmp_path / "a.gcil", tmp_path / "b.gcil"
    write_dataset(pipeline["splits"]["train"], d1)
    write_dataset(splits2["train"], d2)
    data_ok = d1.read_bytes() == d2.read_bytes()

    bundle2 = pretrain_all(splits2["pretrain"], splits2["train"].class_names, cfg, seed)
    c1, c2 = tmp_path / "a.gckp", tmp_path / "b.gckp"
    write_checkpoint(pipeline["bundle"], c1)
    write_checkpoint(bundle2, c2)
    ckpt_ok = c1.read_bytes() == c2.read_bytes()

    results2 = run_stage(pipeline["bundle"], pipeline["splits"]["train"],
                         pipeline["splits"]["test"], cfg)
    strip = lambda r: json.dumps({k: v for k, v in r.items() if k != "timings"},
                                 sort_keys=True)
    results_ok = strip(pipeline["results"]) == strip(results2)

    _check(capfd, 8, data_ok and ckpt_ok and results_ok,
           f"independent reruns: dataset bytes identical {data_ok}, checkpoint bytes "
           f"identical {ckpt_ok}, results JSON identical minus timings {results_ok}")
