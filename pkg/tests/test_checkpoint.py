"""GCKP checkpoint container: round trips and typed failure modes."""

import struct
import zlib

import numpy as np
import pytest

from gencil.checkpoint import (CheckpointBundle, CheckpointFormatError,
                               read_checkpoint, write_checkpoint)
from gencil.data import SyntheticSpec, gen_synthetic
from gencil.pipeline import pretrain_all


def _tiny_cfg() -> dict:
    return {
        "encoder_steps": 150, "encoder_batch": 16, "encoder_lr": 0.2,
        "encoder_gate": 0.8, "p_tokens": 2, "d_model": 32, "decoder_blocks": 2,
        "max_len": 24, "decoder_steps": 1200, "decoder_batch": 8,
        "decoder_lr": 0.3, "decoder_gate": 1.0,
    }


@pytest.fixture(scope="module")
def bundle():
    spec = SyntheticSpec(classes=4, pretrain_classes=3, train_per_class=4,
                         test_per_class=2, pretrain_per_class=10,
                         image_size=16, seed=13)
    splits = gen_synthetic(spec)
    return pretrain_all(splits["pretrain"], splits["train"].class_names,
                        _tiny_cfg(), seed=13)


@pytest.fixture()
def ckpt_path(bundle, tmp_path):
    path = tmp_path / "model.gckp"
    write_checkpoint(bundle, path)
    return path


def test_round_trip_is_bit_exact(bundle, ckpt_path):
    loaded = read_checkpoint(ckpt_path)
    assert loaded.vocab == bundle.vocab
    assert loaded.meta == bundle.meta
    assert loaded.encoder.blob() == bundle.encoder.blob()
    assert loaded.encoder.frozen and loaded.decoder.frozen
    assert loaded.decoder.blob() == bundle.decoder.blob()
    assert np.array_equal(loaded.projection.w.values, bundle.projection.w.values)
    assert np.array_equal(loaded.projection.b.values, bundle.projection.b.values)
    assert loaded.decoder.checksum == bundle.meta["decoder_checksum"]


def test_writes_are_byte_deterministic(bundle, ckpt_path, tmp_path):
    other = tmp_path / "again.gckp"
    write_checkpoint(bundle, other)
    assert other.read_bytes() == ckpt_path.read_bytes()


def test_unfrozen_weights_cannot_be_written(bundle, tmp_path):
    thawed = CheckpointBundle(bundle.encoder, bundle.projection, bundle.decoder,
                              bundle.vocab, bundle.meta)
    was = thawed.decoder.frozen
    thawed.decoder.frozen = False
    try:
        with pytest.raises(ValueError, match="frozen"):
            write_checkpoint(thawed, tmp_path / "x.gckp")
    finally:
        thawed.decoder.frozen = was


def test_bad_magic(ckpt_path, tmp_path):
    raw = bytearray(ckpt_path.read_bytes())
    raw[:4] = b"NOPE"
    p = tmp_path / "bad.gckp"
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointFormatError) as err:
        read_checkpoint(p)
    assert err.value.kind == "bad_magic"


def test_bad_version(ckpt_path, tmp_path):
    raw = bytearray(ckpt_path.read_bytes())
    raw[4:8] = struct.pack("<I", 9)
    p = tmp_path / "bad.gckp"
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointFormatError) as err:
        read_checkpoint(p)
    assert err.value.kind == "bad_version"


def test_truncation_names_the_byte(ckpt_path, tmp_path):
    raw = ckpt_path.read_bytes()[:-10]
    p = tmp_path / "cut.gckp"
    p.write_bytes(raw)
    with pytest.raises(CheckpointFormatError, match=f"at byte {len(raw)}") as err:
        read_checkpoint(p)
    assert err.value.kind == "truncated"


def test_trailing_bytes_are_rejected(ckpt_path, tmp_path):
    p = tmp_path / "fat.gckp"
    p.write_bytes(ckpt_path.read_bytes() + b"\x00\x01")
    with pytest.raises(CheckpointFormatError) as err:
        read_checkpoint(p)
    assert err.value.kind == "trailing_data"


def test_payload_corruption_fails_crc(ckpt_path, tmp_path):
    raw = bytearray(ckpt_path.read_bytes())
    raw[-1] ^= 0xFF  # last byte sits inside the decoder payload
    p = tmp_path / "flip.gckp"
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointFormatError) as err:
        read_checkpoint(p)
    assert err.value.kind == "crc_mismatch"


def test_consistent_corruption_fails_the_freeze_checksum(ckpt_path, tmp_path):
    """Flipping payload bytes AND refreshing the section crc must still be
    caught, via the recorded sha256 freeze checksum."""
    raw = bytearray(ckpt_path.read_bytes())
    # walk the sections to find the decoder payload
    at = 12
    while True:
        (name_len,) = struct.unpack_from("<H", raw, at)
        name = bytes(raw[at + 2:at + 2 + name_len]).decode()
        length, _ = struct.unpack_from("<QI", raw, at + 2 + name_len)
        payload_at = at + 2 + name_len + 12
        if name == "decoder":
            raw[payload_at + 8] ^= 0x04  # nudge one float64
            crc = zlib.crc32(bytes(raw[payload_at:payload_at + length]))
            struct.pack_into("<QI", raw, at + 2 + name_len, length, crc)
            break
        at = payload_at + length
    p = tmp_path / "swap.gckp"
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointFormatError, match="decoder weights") as err:
        read_checkpoint(p)
    assert err.value.kind == "checksum_mismatch"


def test_missing_section(ckpt_path, tmp_path):
    raw = bytearray(ckpt_path.read_bytes())
    # drop the final section (decoder) and fix the count
    at = 12
    sections = []
    while at < len(raw):
        (name_len,) = struct.unpack_from("<H", raw, at)
        length, _ = struct.unpack_from("<QI", raw, at + 2 + name_len)
        end = at + 2 + name_len + 12 + length
        sections.append((at, end))
        at = end
    start, _ = sections[-1]
    raw = raw[:start]
    struct.pack_into("<I", raw, 8, len(sections) - 1)
    p = tmp_path / "short.gckp"
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointFormatError, match="lacks section decoder") as err:
        read_checkpoint(p)
    assert err.value.kind == "missing_section"


def test_meta_records_pretraining_facts(bundle):
    meta = bundle.meta
    assert meta["schema"] == 1
    assert meta["encoder_accuracy"] >= 0.8
    assert meta["vocab_size"] == len(bundle.vocab)
    assert len(meta["pretrain_class_names"]) == 3
    assert meta["image_size"] == 16
