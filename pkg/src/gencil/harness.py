"""Benchmark protocols, the incremental training loop, metrics and baselines.

A curriculum is an ordered list of tasks over a seeded class permutation:

  b0(n)                     equal tasks of n classes each
  bb(b,n)                   base task of b classes, then increments of n
  fscil(base,way,shot,k)    base task, then k few-shot tasks (way classes,
                            shot examples per class)

Sessions train the projection only (the decoder stays frozen behind its
checksum), replay a fixed fraction of each batch from the exemplar store,
and are evaluated by greedy caption decoding plus the trigram matcher over
the classes seen so far.  The linear probe and zero-shot baselines share
the curriculum and the evaluation protocol.
"""

from __future__ import annotations

import re
import time
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .decoder import DecoderParams, assemble_input, caption_loss, greedy_decode
from .errors import FrozenParamsError, InvariantError
from .matcher import ClassRegistry, RunStats, predict
from .seeding import rng_for
from .tokenizer import (QUESTION_TEXT, TokenSequence, Vocab, decode, encode,
                        render_template)
from .vision import EncoderParams, ProjectionParams, encode_image, project

GEN_MAX_LEN = 12  # greedy budget per caption; template + name is 8-9 tokens


# ---------------------------------------------------------------------------
# curricula


@dataclass(frozen=True)
class Scheme:
    kind: str  # "b0" | "bb" | "fscil"
    values: tuple[int, ...]

    def render(self) -> str:
        return f"{self.kind}({','.join(str(v) for v in self.values)})"


@dataclass(frozen=True)
class TaskSpec:
    session: int
    class_ids: tuple[int, ...]
    shots: int | None = None  # per-class example cap (few-shot tasks only)


_SCHEME_RE = re.compile(r"^\s*([a-z0-9]+)\s*\(\s*([0-9]+(?:\s*,\s*[0-9]+)*)\s*\)\s*$")
_SCHEME_ARITY = {"b0": 1, "bb": 2, "fscil": 4}


def parse_scheme(text: str) -> Scheme:
    m = _SCHEME_RE.match(text.lower())
    if not m or m.group(1) not in _SCHEME_ARITY:
        raise ValueError(f"unrecognized scheme: {text!r} (expected b0(n), bb(b,n) "
                         f"or fscil(base,way,shot,sessions))")
    kind = m.group(1)
    values = tuple(int(v) for v in m.group(2).split(","))
    if len(values) != _SCHEME_ARITY[kind]:
        raise ValueError(f"scheme {kind} takes {_SCHEME_ARITY[kind]} arguments, "
                         f"got {len(values)}")
    if any(v < 1 for v in values):
        raise ValueError(f"scheme arguments must be positive: {text!r}")
    return Scheme(kind, values)


def make_curriculum(scheme: Scheme, n_classes: int, seed: int) -> list[TaskSpec]:
    """Partition a seeded class permutation into session tasks."""
    order = [int(c) for c in rng_for(seed, "curriculum").permutation(n_classes)]
    if scheme.kind == "b0":
        (n,) = scheme.values
        if n_classes % n != 0:
            raise ValueError(f"b0({n}) does not divide {n_classes} classes evenly")
        sizes = [(n, None)] * (n_classes // n)
    elif scheme.kind == "bb":
        b, n = scheme.values
        if b >= n_classes:
            raise ValueError(f"bb base {b} must leave room for increments "
                             f"({n_classes} classes)")
        if (n_classes - b) % n != 0:
            raise ValueError(f"bb({b},{n}) does not divide the remaining "
                             f"{n_classes - b} classes evenly")
        sizes = [(b, None)] + [(n, None)] * ((n_classes - b) // n)
    else:
        base, way, shot, sessions = scheme.values
        if base + way * sessions != n_classes:
            raise ValueError(f"fscil({base},{way},{shot},{sessions}) must cover "
                             f"exactly {n_classes} classes, covers {base + way * sessions}")
        sizes = [(base, None)] + [(way, shot)] * sessions
    tasks, at = [], 0
    for s, (size, shots) in enumerate(sizes):
        tasks.append(TaskSpec(s, tuple(order[at:at + size]), shots))
        at += size
    return tasks


def task_indices(labels: np.ndarray, task: TaskSpec, seed: int) -> np.ndarray:
    """Train-row indices available to a task; few-shot tasks subsample per class."""
    if task.shots is None:
        return np.flatnonzero(np.isin(labels, task.class_ids))
    picked: list[int] = []
    for cid in task.class_ids:
        rows = np.flatnonzero(labels == cid)
        if len(rows) < task.shots:
            raise ValueError(f"class {cid} has {len(rows)} examples, fewer than "
                             f"{task.shots} shots")
        sel = rng_for(seed, "shots", str(cid)).choice(len(rows), size=task.shots,
                                                      replace=False)
        picked += [int(rows[i]) for i in sorted(sel)]
    return np.asarray(picked, dtype=np.int64)


# ---------------------------------------------------------------------------
# exemplar store


class ExemplarStore:
    """Per-class replay memory holding train-row indices, fixed budget each."""

    def __init__(self, budget: int):
        if budget < 0:
            raise ValueError("exemplar budget must be >= 0")
        self.budget = budget
        self._kept: dict[int, list[int]] = {}

    def __len__(self) -> int:
        return sum(len(v) for v in self._kept.values())

    def classes(self) -> list[int]:
        return sorted(self._kept)

    def add_class(self, class_id: int, candidates: np.ndarray, seed: int) -> None:
        if class_id in self._kept:
            raise ValueError(f"class {class_id} already has exemplars")
        if self.budget == 0:
            self._kept[class_id] = []
            return
        rows = np.asarray(candidates, dtype=np.int64)
        take = min(self.budget, len(rows))
        sel = rng_for(seed, "exemplars", str(class_id)).choice(len(rows), size=take,
                                                               replace=False)
        self._kept[class_id] = [int(rows[i]) for i in sorted(sel)]

    def flat_indices(self) -> list[int]:
        return [i for cid in sorted(self._kept) for i in self._kept[cid]]


# ---------------------------------------------------------------------------
# generative method: train and evaluate


def _caption_for(label: int, class_names: tuple[str, ...], vocab: Vocab) -> TokenSequence:
    return encode(render_template(class_names[label]), vocab)


def _verify_frozen(decoder: DecoderParams) -> None:
    if not decoder.frozen:
        raise FrozenParamsError("decoder must be frozen during incremental training")
    if decoder.digest() != decoder.checksum:
        raise FrozenParamsError("decoder weights drifted after freeze (checksum mismatch)")


def train_task(features: np.ndarray, labels: np.ndarray, class_names: tuple[str, ...],
               task: TaskSpec, vocab: Vocab, question: TokenSequence,
               decoder: DecoderParams, projection: ProjectionParams,
               store: ExemplarStore, *, epochs: int, batch_size: int, lr: float,
               replay_fraction: float, seed: int) -> int:
    """One incremental session: projection-only SGD with exemplar replay.

    Returns the number of steps run.  Zero epochs leave the projection
    bit-identical; exemplars for the task's classes are recorded either way.
    """
    if not 0.0 <= replay_fraction <= 1.0:
        raise ValueError("replay fraction must be within [0, 1]")
    _verify_frozen(decoder)
    idx = task_indices(labels, task, seed)
    if len(idx) == 0:
        raise ValueError(f"task {task.session} has no training data")
    steps = max(1, (len(idx) * epochs) // batch_size) if epochs > 0 else 0
    replay_pool = store.flat_indices()
    k_replay = int(round(batch_size * replay_fraction)) if replay_pool else 0
    k_new = batch_size - k_replay
    rng = rng_for(seed, "cil-batches", str(task.session))
    opt = nm.OptimizerState(lr_base=lr, total_steps=max(steps, 1))
    trainables = projection.trainables()
    for step in range(steps):
        rows = [int(idx[j]) for j in rng.integers(0, len(idx), size=k_new)]
        if k_replay:
            rows += [replay_pool[j] for j in rng.integers(0, len(replay_pool), size=k_replay)]
        batch = [assemble_input(project(features[i], projection), question,
                                _caption_for(int(labels[i]), class_names, vocab), decoder)
                 for i in rows]
        try:
            nm.backward(caption_loss(batch, decoder))
        except nm.NonFiniteError as e:
            raise nm.NonFiniteError(f"{e} at session {task.session} step {step}") from e
        nm.sgd_step(trainables, [t.grad for t in trainables], opt)
    for cid in task.class_ids:
        store.add_class(int(cid), idx[labels[idx] == cid], seed)
    _verify_frozen(decoder)
    return steps


def evaluate_generative(features: np.ndarray, labels: np.ndarray,
                        class_names: tuple[str, ...], eval_indices: np.ndarray,
                        decoder: DecoderParams, projection: ProjectionParams,
                        question: TokenSequence, vocab: Vocab,
                        registry: ClassRegistry, stats: RunStats,
                        max_len: int = GEN_MAX_LEN) -> np.ndarray:
    """Per-example correctness (bool) via decode + match.  Pure apart from the
    stats counters; an example whose true class is unregistered is an error."""
    registered = set(registry.names)
    hits = np.zeros(len(eval_indices), dtype=bool)
    for j, i in enumerate(eval_indices):
        true_name = class_names[int(labels[i])]
        if true_name not in registered:
            raise InvariantError(f"evaluation example has unseen class {true_name!r}")
        toks = greedy_decode(project(features[i], projection), question, decoder, max_len)
        rid = predict(decode(toks, vocab), registry, stats)
        hits[j] = registry.name(rid) == true_name
    return hits


# ---------------------------------------------------------------------------
# metrics


def metric_avg(session_accs: list[float]) -> float:
    """Mean accuracy over all sessions (each measured on classes seen so far)."""
    if not session_accs:
        raise ValueError("no session accuracies")
    return float(np.mean(session_accs))


def metric_last(session_accs: list[float]) -> float:
    if not session_accs:
        raise ValueError("no session accuracies")
    return float(session_accs[-1])


def metric_pd(first: float, last: float) -> float:
    """Performance drop: first-session accuracy minus last-session accuracy."""
    return first - last


# ---------------------------------------------------------------------------
# baselines


def baseline_linear_probe(train_features: np.ndarray, train_labels: np.ndarray,
                          test_features: np.ndarray, test_labels: np.ndarray,
                          curriculum: list[TaskSpec], *, epochs: int,
                          batch_size: int, lr: float, exemplar_budget: int,
                          seed: int) -> list[float]:
    """Expanding softmax head on the frozen features (the classic probe).

    New class rows start at zero; previously learned rows are kept in place.
    With a zero exemplar budget this is the exemplar-free probe.
    """
    d = train_features.shape[1]
    w = np.zeros((0, d))
    b = np.zeros(0)
    seen: list[int] = []
    store = ExemplarStore(exemplar_budget)
    accs: list[float] = []
    for task in curriculum:
        row_of = {cid: j for j, cid in enumerate(seen)}
        for cid in task.class_ids:
            row_of[int(cid)] = len(row_of)
        seen += [int(c) for c in task.class_ids]
        w = np.vstack([w, np.zeros((len(task.class_ids), d))])
        b = np.concatenate([b, np.zeros(len(task.class_ids))])
        idx = task_indices(train_labels, task, seed)
        pool = np.concatenate([idx, np.asarray(store.flat_indices(), dtype=np.int64)]) \
            if len(store) else idx
        steps = max(1, (len(pool) * epochs) // batch_size)
        rng = rng_for(seed, "probe-batches", str(task.session))
        for step in range(steps):
            pick = pool[rng.integers(0, len(pool), size=batch_size)]
            x = train_features[pick]
            y = np.array([row_of[int(train_labels[i])] for i in pick])
            logits = x @ w.T + b
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(len(y)), y] -= 1.0
            lr_t = nm.cosine_lr(step, steps, lr)
            w -= lr_t * (p.T @ x) / len(y)
            b -= lr_t * p.mean(axis=0)
        for cid in task.class_ids:
            store.add_class(int(cid), idx[train_labels[idx] == cid], seed)
        ti = np.flatnonzero(np.isin(test_labels, seen))
        logits = test_features[ti] @ w.T + b
        pred = np.array([seen[j] for j in np.argmax(logits, axis=1)])
        accs.append(float((pred == test_labels[ti]).mean()))
    return accs


def baseline_zero_shot(test_features: np.ndarray, test_labels: np.ndarray,
                       class_names: tuple[str, ...], curriculum: list[TaskSpec],
                       vocab: Vocab, question: TokenSequence,
                       decoder: DecoderParams, projection: ProjectionParams,
                       stats: RunStats) -> list[float]:
    """Pretrained decoder + projection with no incremental training at all;
    only the registry of candidate names grows per session."""
    registry = ClassRegistry()
    seen: list[int] = []
    accs: list[float] = []
    for task in curriculum:
        for cid in task.class_ids:
            registry.add(class_names[int(cid)])
        seen += [int(c) for c in task.class_ids]
        ti = np.flatnonzero(np.isin(test_labels, seen))
        hits = evaluate_generative(test_features, test_labels, class_names, ti,
                                   decoder, projection, question, vocab,
                                   registry, stats)
        accs.append(float(hits.mean()))
    return accs


# ---------------------------------------------------------------------------
# full experiment


def _method_summary(accs: list[float]) -> dict:
    pct = [100.0 * a for a in accs]
    return {
        "per_session": accs,
        "avg_pct": metric_avg(pct),
        "last_pct": metric_last(pct),
        "pd_pct": metric_pd(pct[0], pct[-1]),
    }


def run_experiment(encoder: EncoderParams, decoder: DecoderParams,
                   projection: ProjectionParams, vocab: Vocab, train_ds,
                   test_ds, cfg: dict, seed: int) -> dict:
    """Run the generative method plus both baselines over one curriculum.

    Everything except the entries under "timings" is a deterministic
    function of (datasets, pretrained weights, cfg, seed).
    """
    t_total = time.time()
    if train_ds.class_names != test_ds.class_names:
        raise InvariantError("train/test class-name tables differ")
    class_names = train_ds.class_names
    scheme = parse_scheme(str(cfg["scheme"]))
    curriculum = make_curriculum(scheme, len(class_names), seed)
    question = encode(QUESTION_TEXT, vocab)

    t0 = time.time()
    ftr = np.stack([encode_image(train_ds.pixels[i], encoder) for i in range(len(train_ds))])
    fte = np.stack([encode_image(test_ds.pixels[i], encoder) for i in range(len(test_ds))])
    encode_s = time.time() - t0

    # the session loop trains a private copy; the pretrained projection stays
    # pristine for the zero-shot baseline
    proj = ProjectionParams.init(ftr.shape[1], projection.p_tokens, projection.d_dec, seed)
    proj.load_arrays(projection.arrays())
    store = ExemplarStore(int(cfg["exemplar_budget"]))
    registry = ClassRegistry()
    stats = RunStats()
    sessions: list[dict] = []
    matrix: list[list[float]] = []
    gmm_accs: list[float] = []
    train_s = eval_s = 0.0
    for task in curriculum:
        t0 = time.time()
        steps = train_task(ftr, train_ds.labels, class_names, task, vocab, question,
                           decoder, proj, store, epochs=int(cfg["epochs"]),
                           batch_size=int(cfg["batch_size"]), lr=float(cfg["lr"]),
                           replay_fraction=float(cfg["replay_fraction"]), seed=seed)
        train_s += time.time() - t0
        for cid in task.class_ids:
            registry.add(class_names[int(cid)])
        seen_ids = [int(c) for t in curriculum[:task.session + 1] for c in t.class_ids]
        ti = np.flatnonzero(np.isin(test_ds.labels, seen_ids))
        t0 = time.time()
        hits = evaluate_generative(fte, test_ds.labels, class_names, ti, decoder,
                                   proj, question, vocab, registry, stats)
        eval_s += time.time() - t0
        row = []
        for prev in curriculum[:task.session + 1]:
            sel = np.isin(test_ds.labels[ti], prev.class_ids)
            row.append(float(hits[sel].mean()))
        matrix.append(row)
        gmm_accs.append(float(hits.mean()))
        sessions.append({
            "session": task.session,
            "class_ids": [int(c) for c in task.class_ids],
            "class_names": [class_names[int(c)] for c in task.class_ids],
            "shots": task.shots,
            "gmm_steps": steps,
            "gmm_accuracy": gmm_accs[-1],
        })

    t0 = time.time()
    probe_accs = baseline_linear_probe(
        ftr, train_ds.labels, fte, test_ds.labels, curriculum,
        epochs=int(cfg["probe_epochs"]), batch_size=int(cfg["batch_size"]),
        lr=float(cfg["probe_lr"]), exemplar_budget=int(cfg["probe_exemplar_budget"]),
        seed=seed)
    probe_s = time.time() - t0

    zs_stats = RunStats()
    t0 = time.time()
    zs_accs = baseline_zero_shot(fte, test_ds.labels, class_names, curriculum,
                                 vocab, question, decoder, projection, zs_stats)
    zs_s = time.time() - t0

    for s, task in enumerate(curriculum):
        sessions[s]["probe_accuracy"] = probe_accs[s]
        sessions[s]["zero_shot_accuracy"] = zs_accs[s]

    return {
        "schema_version": 1,
        "scheme": scheme.render(),
        "seed": seed,
        "classes": len(class_names),
        "sessions": sessions,
        "gmm_task_matrix": matrix,
        "methods": {
            "gmm": _method_summary(gmm_accs),
            "probe": _method_summary(probe_accs),
            "zero_shot": _method_summary(zs_accs),
        },
        "counters": {
            "gmm_empty_generations": stats.empty_generations,
            "zero_shot_empty_generations": zs_stats.empty_generations,
            "exemplars_stored": len(store),
        },
        "timings": {
            "encode_s": encode_s,
            "gmm_train_s": train_s,
            "gmm_eval_s": eval_s,
            "probe_s": probe_s,
            "zero_shot_s": zs_s,
            "total_s": time.time() - t_total,
        },
    }
