"""GCKP checkpoint container: everything pretraining produced, one file.

Layout (little-endian):

    magic "GCKP" | version u32 | section count u32
    per section:  name len u16 | name utf-8 | payload len u64 | crc32 u32 | payload

Five sections, always in this order: meta (compact sorted JSON), vocab
(one word per line), encoder / projection / decoder (raw float64 arrays in
their fixed serialization orders).  The meta section records the freeze
checksums, so a reader detects not only corruption (crc) but also sections
recombined from different runs.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nm
from .decoder import DecoderConfig, DecoderParams, init_decoder, param_shapes
from .tokenizer import Vocab
from .vision import EncoderLayout, EncoderParams, ProjectionParams, encoder_shapes

MAGIC = b"GCKP"
FORMAT_VERSION = 1
_SECTIONS = ("meta", "vocab", "encoder", "projection", "decoder")

_META_KEYS = {
    "schema", "seed", "image_size", "channels", "d_enc", "p_tokens", "d_model",
    "decoder_blocks", "max_len", "vocab_size", "encoder_accuracy", "decoder_loss",
    "encoder_checksum", "decoder_checksum", "pretrain_class_names",
}


class CheckpointFormatError(ValueError):
    """Typed reader error; `kind` distinguishes the failure mode."""

    def __init__(self, kind: str, message: str):
        self.kind = kind
        super().__init__(message)


@dataclass
class CheckpointBundle:
    encoder: EncoderParams
    projection: ProjectionParams
    decoder: DecoderParams
    vocab: Vocab
    meta: dict


def write_checkpoint(bundle: CheckpointBundle, path: str | Path) -> None:
    if not bundle.encoder.frozen or not bundle.decoder.frozen:
        raise ValueError("only frozen encoder/decoder weights can be checkpointed")
    payloads = {
        "meta": json.dumps(bundle.meta, sort_keys=True, separators=(",", ":")).encode(),
        "vocab": "\n".join(bundle.vocab.to_lines()).encode(),
        "encoder": bundle.encoder.blob(),
        "projection": bundle.projection.w.values.tobytes() + bundle.projection.b.values.tobytes(),
        "decoder": bundle.decoder.blob(),
    }
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<II", FORMAT_VERSION, len(_SECTIONS))
    for name in _SECTIONS:
        payload = payloads[name]
        raw = name.encode()
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<QI", len(payload), zlib.crc32(payload))
        buf += payload
    Path(path).write_bytes(bytes(buf))


def _split_arrays(payload: bytes, shapes: list[tuple[str, tuple[int, ...]]],
                  what: str) -> dict[str, np.ndarray]:
    need = sum(int(np.prod(s)) for _, s in shapes) * 8
    if len(payload) != need:
        raise CheckpointFormatError(
            "bad_section", f"{what} section holds {len(payload)} bytes, expected {need}")
    out: dict[str, np.ndarray] = {}
    at = 0
    for name, shape in shapes:
        size = int(np.prod(shape)) * 8
        out[name] = np.frombuffer(payload[at:at + size], dtype="<f8").reshape(shape).copy()
        at += size
    return out


def read_checkpoint(path: str | Path) -> CheckpointBundle:
    blob = Path(path).read_bytes()
    offset = 0

    def take(n: int, what: str) -> bytes:
        nonlocal offset
        if offset + n > len(blob):
            raise CheckpointFormatError(
                "truncated", f"checkpoint truncated at byte {len(blob)} reading {what}")
        part = blob[offset:offset + n]
        offset += n
        return part

    if take(4, "magic") != MAGIC:
        raise CheckpointFormatError("bad_magic", "not a GCKP checkpoint (bad magic)")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != FORMAT_VERSION:
        raise CheckpointFormatError("bad_version", f"unsupported checkpoint version {version}")
    sections: dict[str, bytes] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "section name length"))
        try:
            name = take(name_len, "section name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointFormatError("bad_section", "section name is not UTF-8") from None
        length, crc = struct.unpack("<QI", take(12, f"section {name} header"))
        payload = take(length, f"section {name} payload")
        if zlib.crc32(payload) != crc:
            raise CheckpointFormatError("crc_mismatch", f"section {name} fails its crc check")
        if name in sections:
            raise CheckpointFormatError("bad_section", f"duplicate section {name}")
        sections[name] = payload
    if offset != len(blob):
        raise CheckpointFormatError(
            "trailing_data", f"{len(blob) - offset} trailing bytes after last section")
    for name in _SECTIONS:
        if name not in sections:
            raise CheckpointFormatError("missing_section", f"checkpoint lacks section {name}")

    try:
        meta = json.loads(sections["meta"])
    except json.JSONDecodeError as e:
        raise CheckpointFormatError("bad_meta", f"meta section is not valid JSON: {e}") from None
    if not isinstance(meta, dict) or set(meta) != _META_KEYS:
        raise CheckpointFormatError("bad_meta", "meta section has the wrong fields")
    if meta["schema"] != 1:
        raise CheckpointFormatError("bad_meta", f"unsupported meta schema {meta['schema']}")

    try:
        vocab = Vocab.from_lines(sections["vocab"].decode("utf-8").split("\n"))
    except (UnicodeDecodeError, ValueError) as e:
        raise CheckpointFormatError("bad_section", f"vocab section invalid: {e}") from None
    if len(vocab) != meta["vocab_size"]:
        raise CheckpointFormatError("bad_meta", "vocab size disagrees with meta")

    layout = EncoderLayout(size=int(meta["image_size"]), channels=int(meta["channels"]))
    enc_arrays = _split_arrays(sections["encoder"],
                               list(encoder_shapes(layout).items()), "encoder")
    digest = EncoderParams.digest(enc_arrays)
    if digest != meta["encoder_checksum"]:
        raise CheckpointFormatError("checksum_mismatch",
                                    "encoder weights do not match their recorded checksum")
    encoder = EncoderParams(arrays=enc_arrays, layout=layout, frozen=True, checksum=digest)

    d_enc, p, d = int(meta["d_enc"]), int(meta["p_tokens"]), int(meta["d_model"])
    proj_arrays = _split_arrays(sections["projection"],
                                [("w", (d_enc, p * d)), ("b", (p * d,))], "projection")
    projection = ProjectionParams(
        w=nm.Tensor(proj_arrays["w"], trainable=True, name="proj.w"),
        b=nm.Tensor(proj_arrays["b"], trainable=True, name="proj.b"),
        p_tokens=p, d_dec=d)

    cfg = DecoderConfig(vocab_size=int(meta["vocab_size"]), d_model=d,
                        n_blocks=int(meta["decoder_blocks"]), max_len=int(meta["max_len"]))
    decoder = init_decoder(cfg, seed=0)
    decoder.load_arrays(_split_arrays(sections["decoder"], param_shapes(cfg), "decoder"))
    decoder.freeze()
    if decoder.checksum != meta["decoder_checksum"]:
        raise CheckpointFormatError("checksum_mismatch",
                                    "decoder weights do not match their recorded checksum")
    return CheckpointBundle(encoder, projection, decoder, vocab, meta)
