"""Stage orchestration: datasets -> pretrained checkpoint -> experiment.

The caption corpus pairs every pretrain image's frozen feature with its
template sentence.  The language corpus covers every class name (pretrain
and benchmark alike) twice: once as a question-scaffold entry (null image,
fixed question) and once as a copy entry (the sentence is both prompt and
answer), which is what makes each name reachable by greedy decoding before
its images ever appear.
"""

from __future__ import annotations

from .checkpoint import CheckpointBundle
from .data import Dataset
from .decoder import CorpusEntry, DecoderConfig, pretrain_decoder
from .errors import InvariantError
from .harness import run_experiment
from .tokenizer import QUESTION_TEXT, Vocab, build_vocab, encode, render_template
from .vision import D_ENC, ProjectionParams, encode_image, pretrain_encoder


def build_caption_corpus(pre: Dataset, encoder, vocab: Vocab) -> list[CorpusEntry]:
    question = encode(QUESTION_TEXT, vocab)
    entries = []
    for i in range(len(pre)):
        feature = encode_image(pre.pixels[i], encoder)
        answer = encode(render_template(pre.class_names[int(pre.labels[i])]), vocab)
        entries.append(CorpusEntry(feature, question, answer))
    return entries


def build_language_corpus(names: tuple[str, ...], vocab: Vocab) -> list[CorpusEntry]:
    question = encode(QUESTION_TEXT, vocab)
    entries = []
    for name in names:
        sentence = encode(render_template(name), vocab)
        entries.append(CorpusEntry(None, question, sentence))
        entries.append(CorpusEntry(None, sentence, sentence))
    return entries


def pretrain_all(pre: Dataset, benchmark_names: tuple[str, ...],
                 cfg: dict, seed: int) -> CheckpointBundle:
    """Encoder first, then decoder + projection jointly; returns frozen weights."""
    encoder, acc = pretrain_encoder(
        pre, steps=int(cfg["encoder_steps"]), batch_size=int(cfg["encoder_batch"]),
        lr=float(cfg["encoder_lr"]), gate=float(cfg["encoder_gate"]), seed=seed)

    all_names = tuple(benchmark_names) + tuple(pre.class_names)
    vocab = build_vocab(all_names, (QUESTION_TEXT,))
    dcfg = DecoderConfig(vocab_size=len(vocab), d_model=int(cfg["d_model"]),
                         n_blocks=int(cfg["decoder_blocks"]), max_len=int(cfg["max_len"]))
    projection = ProjectionParams.init(D_ENC, int(cfg["p_tokens"]), dcfg.d_model, seed)
    decoder, loss = pretrain_decoder(
        build_caption_corpus(pre, encoder, vocab),
        build_language_corpus(all_names, vocab),
        projection, dcfg, steps=int(cfg["decoder_steps"]),
        batch_size=int(cfg["decoder_batch"]), lr=float(cfg["decoder_lr"]),
        gate=float(cfg["decoder_gate"]), seed=seed)
    decoder.freeze()

    meta = {
        "schema": 1,
        "seed": seed,
        "image_size": int(pre.pixels.shape[1]),
        "channels": int(pre.pixels.shape[3]),
        "d_enc": D_ENC,
        "p_tokens": projection.p_tokens,
        "d_model": dcfg.d_model,
        "decoder_blocks": dcfg.n_blocks,
        "max_len": dcfg.max_len,
        "vocab_size": len(vocab),
        "encoder_accuracy": acc,
        "decoder_loss": loss,
        "encoder_checksum": encoder.checksum,
        "decoder_checksum": decoder.checksum,
        "pretrain_class_names": list(pre.class_names),
    }
    return CheckpointBundle(encoder, projection, decoder, vocab, meta)


def run_stage(bundle: CheckpointBundle, train_ds: Dataset, test_ds: Dataset,
              cfg: dict) -> dict:
    """Compatibility checks, then the full experiment."""
    h = int(train_ds.pixels.shape[1])
    c = int(train_ds.pixels.shape[3])
    if (h, c) != (bundle.meta["image_size"], bundle.meta["channels"]):
        raise InvariantError(
            f"checkpoint expects {bundle.meta['image_size']}x{bundle.meta['image_size']} "
            f"images with {bundle.meta['channels']} channel(s), dataset has {h}x{h} with {c}")
    missing = [n for n in train_ds.class_names
               if any(w not in bundle.vocab for w in n.split())]
    if missing:
        raise InvariantError(f"checkpoint vocabulary cannot express classes: {missing}")
    return run_experiment(bundle.encoder, bundle.decoder, bundle.projection,
                          bundle.vocab, train_ds, test_ds, cfg, int(cfg["seed"]))
