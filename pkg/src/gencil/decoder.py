"""Tiny causal caption decoder.

Two pre-LN self-attention blocks (single head, D = 64, feed-forward 4x),
learned positional embeddings, output projection tied to the token table,
plus a final layer norm before the tie.  Inputs are assembled as
[bos, P image rows, question, answer, eos]; image rows carry the IMG id for
bookkeeping but their embeddings come from the projection (or, for
text-only pretraining entries, from the learned IMG table row).

The caption loss is next-token cross-entropy restricted to the answer span
(answer tokens plus eos).  Greedy decoding re-runs the forward per step,
breaks ties toward the lowest id, and stops at eos or the length budget.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import numerics as nm
from .errors import GateError
from .seeding import rng_for
from .tokenizer import BOS_ID, EOS_ID, IMG_ID, TokenSequence
from .vision import ProjectionParams, project


@dataclass(frozen=True)
class DecoderConfig:
    vocab_size: int
    d_model: int = 64
    n_blocks: int = 2
    max_len: int = 32

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model


def _param_shapes(cfg: DecoderConfig) -> list[tuple[str, tuple[int, ...]]]:
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("emb", (cfg.vocab_size, cfg.d_model)),
        ("pos", (cfg.max_len, cfg.d_model)),
    ]
    for i in range(cfg.n_blocks):
        p = f"block{i}."
        shapes += [
            (p + "ln1_g", (cfg.d_model,)), (p + "ln1_b", (cfg.d_model,)),
            (p + "wq", (cfg.d_model, cfg.d_model)), (p + "wk", (cfg.d_model, cfg.d_model)),
            (p + "wv", (cfg.d_model, cfg.d_model)), (p + "wo", (cfg.d_model, cfg.d_model)),
            (p + "ln2_g", (cfg.d_model,)), (p + "ln2_b", (cfg.d_model,)),
            (p + "w1", (cfg.d_model, cfg.d_ff)), (p + "b1", (cfg.d_ff,)),
            (p + "w2", (cfg.d_ff, cfg.d_model)), (p + "b2", (cfg.d_model,)),
        ]
    shapes += [("fin_g", (cfg.d_model,)), ("fin_b", (cfg.d_model,))]
    return shapes


def param_shapes(cfg: DecoderConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Name/shape pairs in serialization order."""
    return _param_shapes(cfg)


class DecoderParams:
    """Named tensors in a fixed serialization order, with a freeze checksum."""

    def __init__(self, cfg: DecoderConfig, tensors: dict[str, nm.Tensor]):
        self.cfg = cfg
        self.tensors = tensors
        self.names = [name for name, _ in _param_shapes(cfg)]
        self.frozen = False
        self.checksum = ""

    def __getitem__(self, name: str) -> nm.Tensor:
        return self.tensors[name]

    def trainables(self) -> list[nm.Tensor]:
        return [self.tensors[n] for n in self.names]

    def blob(self) -> bytes:
        return b"".join(self.tensors[n].values.tobytes() for n in self.names)

    def digest(self) -> str:
        return hashlib.sha256(self.blob()).hexdigest()

    def freeze(self) -> None:
        for t in self.tensors.values():
            t.trainable = False
        self.frozen = True
        self.checksum = self.digest()

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: self.tensors[n].values.copy() for n in self.names}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for n in self.names:
            expected = self.tensors[n].values.shape
            if arrays[n].shape != expected:
                raise ValueError(f"decoder param {n}: shape {arrays[n].shape} != {expected}")
            self.tensors[n].values = arrays[n].astype(np.float64).copy()


def init_decoder(cfg: DecoderConfig, seed: int) -> DecoderParams:
    """Near-uniform init: tiny embedding scale keeps the initial caption loss
    within a hair of ln(vocab)."""
    rng = rng_for(seed, "decoder-init")
    tensors: dict[str, nm.Tensor] = {}
    for name, shape in _param_shapes(cfg):
        leaf = name.split(".")[-1]
        if leaf in ("ln1_g", "ln2_g", "fin_g"):
            values = np.ones(shape)
        elif leaf in ("ln1_b", "ln2_b", "fin_b", "b1", "b2"):
            values = np.zeros(shape)
        elif leaf == "emb":
            values = rng.normal(0.0, 0.05, size=shape)
        elif leaf == "pos":
            values = rng.normal(0.0, 0.03, size=shape)
        elif leaf in ("wq", "wk", "wv", "w1"):
            values = rng.normal(0.0, 1.0 / math.sqrt(cfg.d_model), size=shape)
        else:  # wo, w2: residual-path outputs start small
            values = rng.normal(0.0, 0.5 / math.sqrt(cfg.d_model * cfg.n_blocks), size=shape)
        tensors[name] = nm.Tensor(values, trainable=True, name=f"dec.{name}")
    return DecoderParams(cfg, tensors)


@lru_cache(maxsize=None)
def _causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


@dataclass
class AssembledInput:
    """Embedded rows (positions not added yet), bookkeeping ids, answer span."""

    rows: nm.Tensor
    ids: np.ndarray
    answer_span: tuple[int, int] | None


def assemble_input(image_tokens: nm.Tensor, question: TokenSequence,
                   answer: TokenSequence | None, params: DecoderParams,
                   *, terminal: bool = True) -> AssembledInput:
    """Order: [bos, P image rows, question, answer, eos].

    `terminal` appends the eos row and marks the answer span (answer + eos),
    i.e. a teacher-forcing input; inference prefixes set terminal=False and
    carry no span.  Span start is always 1 + P + |question|.
    """
    p_tokens, d = image_tokens.values.shape
    if d != params.cfg.d_model:
        raise ValueError(f"image token dim {d} != d_model {params.cfg.d_model}")
    emb = params["emb"]
    parts = [nm.embedding_lookup(emb, [BOS_ID])]
    ids: list[int] = [BOS_ID]
    parts.append(image_tokens)
    ids += [IMG_ID] * p_tokens
    if question.ids:
        parts.append(nm.embedding_lookup(emb, list(question.ids)))
        ids += list(question.ids)
    answer_ids = list(answer.ids) if answer is not None else []
    if answer_ids:
        parts.append(nm.embedding_lookup(emb, answer_ids))
        ids += answer_ids
    span = None
    if terminal:
        if not answer_ids:
            raise ValueError("terminal assembly requires a non-empty answer")
        parts.append(nm.embedding_lookup(emb, [EOS_ID]))
        ids.append(EOS_ID)
        span = (1 + p_tokens + len(question.ids), len(answer_ids) + 1)
    if len(ids) > params.cfg.max_len:
        raise ValueError(f"assembled length {len(ids)} exceeds max_len {params.cfg.max_len}")
    return AssembledInput(nm.concat_rows(parts), np.asarray(ids, dtype=np.int64), span)


def forward_logits(inp: AssembledInput, params: DecoderParams) -> nm.Tensor:
    """Causal forward over the assembled rows; logits for every position."""
    n = len(inp.ids)
    cfg = params.cfg
    x = nm.add(inp.rows, nm.embedding_lookup(params["pos"], np.arange(n)))
    mask = _causal_mask(n)
    inv_sqrt_d = 1.0 / math.sqrt(cfg.d_model)
    for i in range(cfg.n_blocks):
        p = f"block{i}."
        pre = nm.layer_norm(x, params[p + "ln1_g"], params[p + "ln1_b"])
        q = nm.matmul(pre, params[p + "wq"])
        k = nm.matmul(pre, params[p + "wk"])
        v = nm.matmul(pre, params[p + "wv"])
        att = nm.softmax(nm.scale(nm.matmul(q, k, transpose_b=True), inv_sqrt_d), mask=mask)
        x = nm.add(x, nm.matmul(nm.matmul(att, v), params[p + "wo"]))
        pre2 = nm.layer_norm(x, params[p + "ln2_g"], params[p + "ln2_b"])
        h = nm.add(nm.matmul(nm.gelu(nm.add(nm.matmul(pre2, params[p + "w1"]), params[p + "b1"])),
                             params[p + "w2"]), params[p + "b2"])
        x = nm.add(x, h)
    fin = nm.layer_norm(x, params["fin_g"], params["fin_b"])
    return nm.matmul(fin, params["emb"], transpose_b=True)


def _example_loss(inp: AssembledInput, params: DecoderParams) -> nm.Tensor:
    if inp.answer_span is None:
        raise ValueError("caption loss requires teacher-forced inputs with an answer span")
    n = len(inp.ids)
    logits = forward_logits(inp, params)
    probs = nm.softmax(logits)
    # position j predicts the token at j+1; mask the rows whose target falls
    # inside the answer span (answer tokens plus eos)
    targets = np.append(inp.ids[1:], 0)
    start, length = inp.answer_span
    mask = np.zeros(n, dtype=bool)
    mask[start - 1:start - 1 + length] = True
    return nm.token_cross_entropy(probs, targets, mask)


def caption_loss(batch: Sequence[AssembledInput], params: DecoderParams) -> nm.Tensor:
    """Mean per-example answer-span cross-entropy over the batch."""
    if not batch:
        raise ValueError("caption_loss needs a non-empty batch")
    total = _example_loss(batch[0], params)
    for inp in batch[1:]:
        total = nm.add(total, _example_loss(inp, params))
    return nm.scale(total, 1.0 / len(batch))


def greedy_decode(image_tokens: nm.Tensor, question: TokenSequence,
                  params: DecoderParams, max_len: int = 12) -> TokenSequence:
    """Argmax decoding (ties -> lowest id); stops at eos or max_len tokens."""
    out: list[int] = []
    while len(out) < max_len:
        prefix = TokenSequence(tuple(out))
        inp = assemble_input(image_tokens, question, prefix, params, terminal=False)
        logits = forward_logits(inp, params)
        next_id = int(np.argmax(logits.values[-1]))
        if next_id == EOS_ID:
            break
        out.append(next_id)
    return TokenSequence(tuple(out))


# ---------------------------------------------------------------------------
# pretraining


@dataclass
class CorpusEntry:
    """One pretraining example.  feature=None means a text-only entry whose
    image positions are filled with the learned IMG (null token) embedding."""

    feature: np.ndarray | None
    question: TokenSequence
    answer: TokenSequence


def _entry_input(entry: CorpusEntry, params: DecoderParams,
                 projection: ProjectionParams) -> AssembledInput:
    if entry.feature is not None:
        image_tokens = project(entry.feature, projection)
    else:
        image_tokens = nm.embedding_lookup(params["emb"], [IMG_ID] * projection.p_tokens)
    return assemble_input(image_tokens, entry.question, entry.answer, params)


def corpus_loss(entries: Sequence[CorpusEntry], params: DecoderParams,
                projection: ProjectionParams, chunk: int = 32) -> float:
    """Mean per-example loss over a whole corpus (forward only)."""
    total = 0.0
    for start in range(0, len(entries), chunk):
        part = entries[start:start + chunk]
        batch = [_entry_input(e, params, projection) for e in part]
        total += float(caption_loss(batch, params).values) * len(part)
    return total / len(entries)


def null_image_rows(params: DecoderParams, p_tokens: int) -> nm.Tensor:
    """Constant IMG-token rows standing in for an absent image."""
    return nm.Tensor(params["emb"].values[[IMG_ID] * p_tokens].copy())


def copy_task_hits(entries: Sequence[CorpusEntry], params: DecoderParams,
                   p_tokens: int) -> tuple[int, int]:
    """(exact, total) over the copy entries (question == answer, no image).

    These are the entries that make class names decodable from a bare text
    prompt; greedy must reproduce the sentence and then stop.
    """
    copies = [e for e in entries if e.feature is None and e.question.ids == e.answer.ids]
    null = null_image_rows(params, p_tokens)
    hits = 0
    for e in copies:
        out = greedy_decode(null, e.question, params, max_len=len(e.answer.ids) + 3)
        hits += int(out.ids == e.answer.ids)
    return hits, len(copies)


def pretrain_decoder(caption_corpus: Sequence[CorpusEntry],
                     language_corpus: Sequence[CorpusEntry],
                     projection: ProjectionParams, cfg: DecoderConfig, *,
                     steps: int, batch_size: int, lr: float, gate: float,
                     seed: int, lr_min: float = 0.0, eval_every: int = 250,
                     require_copy_exact: bool = True) -> tuple[DecoderParams, float]:
    """Joint training on image-conditioned captions and text-only sentences.

    The projection trains together with the decoder here; both corpora are
    mixed half/half per batch.  Training stops once the caption-corpus loss
    reaches `gate` AND every copy entry decodes exactly (checked every
    `eval_every` steps); exhausting the step budget with either condition
    unmet is an error.  Returns unfrozen params plus the final caption loss;
    callers freeze after any ablation checks.
    """
    if not caption_corpus or not language_corpus:
        raise ValueError("both corpora must be non-empty")
    params = init_decoder(cfg, seed)
    trainables = params.trainables() + projection.trainables()
    opt = nm.OptimizerState(lr_base=lr, total_steps=max(steps, 1), lr_min=lr_min)
    rng = rng_for(seed, "decoder-batches")
    k_lang = batch_size // 2
    k_cap = batch_size - k_lang

    def progress() -> tuple[float, int, int]:
        ls = corpus_loss(caption_corpus, params, projection)
        if not require_copy_exact:
            return ls, 0, 0
        hits, total = copy_task_hits(language_corpus, params, projection.p_tokens)
        return ls, hits, total

    loss, hits, total = progress()
    for step in range(steps):
        picks = [caption_corpus[i] for i in rng.integers(0, len(caption_corpus), size=k_cap)]
        picks += [language_corpus[i] for i in rng.integers(0, len(language_corpus), size=k_lang)]
        batch = [_entry_input(e, params, projection) for e in picks]
        try:
            nm.backward(caption_loss(batch, params))
        except nm.NonFiniteError as e:
            raise nm.NonFiniteError(f"{e} at step {step}") from e
        grads = [t.grad if t.grad is not None else np.zeros_like(t.values) for t in trainables]
        nm.sgd_step(trainables, grads, opt)
        if (step + 1) % eval_every == 0 or step == steps - 1:
            loss, hits, total = progress()
            if loss <= gate and hits == total:
                break
    if loss > gate or hits < total:
        raise GateError(f"pretrain budget exhausted after {steps} steps: caption loss "
                        f"{loss:.4f} (gate {gate}), copy task {hits}/{total} exact")
    return params, loss
