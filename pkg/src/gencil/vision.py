"""Frozen image encoder and the trainable projection.

The encoder is a small conv stack: two conv+avg-pool stages and a hidden
affine layer with tanh, producing a D_enc = 64 feature.  Convolutions are
expressed as im2col gathers followed by matmuls, pooling as a gather plus a
constant averaging matmul, so the whole stack trains through the tensor
core during pretraining.  After pretraining the weights freeze behind a
sha256 checksum; during CIL only the projection (one affine map from the
feature to P decoder-token embeddings) ever trains.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import numerics as nm
from .errors import FrozenParamsError, GateError
from .seeding import rng_for

D_ENC = 64
_CONV1_OUT = 8
_CONV2_OUT = 16
_K = 3

PARAM_ORDER = ("w1", "b1", "w2", "b2", "fw", "fb")


@dataclass(frozen=True)
class EncoderLayout:
    """All dims derived from the input size; kept with the params."""

    size: int
    channels: int

    @property
    def h1(self) -> int:  # after conv1 (valid, stride 1)
        return self.size - _K + 1

    @property
    def p1(self) -> int:  # after 2x2 avg pool
        return self.h1 // 2

    @property
    def h2(self) -> int:
        return self.p1 - _K + 1

    @property
    def p2(self) -> int:
        return self.h2 // 2

    @property
    def flat(self) -> int:
        return self.p2 * self.p2 * _CONV2_OUT


@lru_cache(maxsize=None)
def _conv_indices(h: int, w: int, c: int, k: int) -> np.ndarray:
    """im2col: row per output position, k*k*c flat indices into (h, w, c)."""
    oh, ow = h - k + 1, w - k + 1
    rows = np.empty((oh * ow, k * k * c), dtype=np.int64)
    for y in range(oh):
        for x in range(ow):
            patch = [((y + i) * w + (x + j)) * c + ch
                     for i in range(k) for j in range(k) for ch in range(c)]
            rows[y * ow + x] = patch
    return rows


@lru_cache(maxsize=None)
def _pool_indices(h: int, w: int, c: int) -> np.ndarray:
    """2x2 average pooling: row per (pooled position, channel)."""
    ph, pw = h // 2, w // 2
    rows = np.empty((ph * pw * c, 4), dtype=np.int64)
    r = 0
    for y in range(ph):
        for x in range(pw):
            for ch in range(c):
                rows[r] = [((2 * y + i) * w + (2 * x + j)) * c + ch
                           for i in range(2) for j in range(2)]
                r += 1
    return rows


_QUARTER = None


def _quarter() -> nm.Tensor:
    global _QUARTER
    if _QUARTER is None:
        _QUARTER = nm.Tensor(np.full((4, 1), 0.25))
    return _QUARTER


def _feature_graph(x: nm.Tensor, params: dict[str, nm.Tensor], lay: EncoderLayout) -> nm.Tensor:
    """(h*w*c,) pixel tensor in [0,1] -> (1, D_ENC) feature."""
    a1 = nm.tanh(nm.add(nm.matmul(nm.gather(x, _conv_indices(lay.size, lay.size, lay.channels, _K)),
                                  params["w1"]), params["b1"]))
    p1 = nm.reshape(nm.matmul(nm.gather(a1, _pool_indices(lay.h1, lay.h1, _CONV1_OUT)),
                              _quarter()), (lay.p1 * lay.p1, _CONV1_OUT))
    a2 = nm.tanh(nm.add(nm.matmul(nm.gather(p1, _conv_indices(lay.p1, lay.p1, _CONV1_OUT, _K)),
                                  params["w2"]), params["b2"]))
    p2 = nm.reshape(nm.matmul(nm.gather(a2, _pool_indices(lay.h2, lay.h2, _CONV2_OUT)),
                              _quarter()), (1, lay.flat))
    return nm.tanh(nm.add(nm.matmul(p2, params["fw"]), params["fb"]))


@dataclass
class EncoderParams:
    """Frozen weights plus the checksum taken at freeze time."""

    arrays: dict[str, np.ndarray]
    layout: EncoderLayout
    frozen: bool
    checksum: str

    def blob(self) -> bytes:
        return b"".join(self.arrays[k].tobytes() for k in PARAM_ORDER)

    @staticmethod
    def digest(arrays: dict[str, np.ndarray]) -> str:
        return hashlib.sha256(b"".join(arrays[k].tobytes() for k in PARAM_ORDER)).hexdigest()


def encoder_shapes(lay: EncoderLayout) -> dict[str, tuple[int, ...]]:
    """Array shapes in PARAM_ORDER; the serialized encoder layout."""
    return {
        "w1": (_K * _K * lay.channels, _CONV1_OUT),
        "b1": (_CONV1_OUT,),
        "w2": (_K * _K * _CONV1_OUT, _CONV2_OUT),
        "b2": (_CONV2_OUT,),
        "fw": (lay.flat, D_ENC),
        "fb": (D_ENC,),
    }


def _init_params(lay: EncoderLayout, seed: int) -> dict[str, nm.Tensor]:
    rng = rng_for(seed, "encoder-init")
    out = {}
    for name, shape in encoder_shapes(lay).items():
        if name.startswith("b") or name == "fb":
            values = np.zeros(shape)
        else:
            values = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
        out[name] = nm.Tensor(values, trainable=True, name=f"enc.{name}")
    return out


def _to_float(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float64).reshape(-1) / 255.0


def pretrain_encoder(dataset, *, steps: int, batch_size: int, lr: float,
                     gate: float, seed: int, lr_min: float = 0.0) -> tuple[EncoderParams, float]:
    """Train conv stack + temporary linear head on the pretrain split.

    Runs the full step budget (early exit only once train accuracy >= 0.995),
    then checks the >= `gate` train-accuracy requirement, discards the head
    and freezes the weights.  Same seed, same budget -> bit-identical params.
    """
    n = len(dataset)
    n_classes = len(dataset.class_names)
    lay = EncoderLayout(dataset.pixels.shape[1], dataset.pixels.shape[3])
    params = _init_params(lay, seed)
    head_rng = rng_for(seed, "encoder-head")
    head_w = nm.Tensor(head_rng.normal(0.0, 0.1, size=(D_ENC, n_classes)),
                       trainable=True, name="enc.head_w")
    head_b = nm.Tensor(np.zeros(n_classes), trainable=True, name="enc.head_b")
    trainables = list(params.values()) + [head_w, head_b]
    images = [_to_float(dataset.pixels[i]) for i in range(n)]
    labels = dataset.labels

    def features_for(idx_batch) -> nm.Tensor:
        feats = [_feature_graph(nm.Tensor(images[i]), params, lay) for i in idx_batch]
        return feats[0] if len(feats) == 1 else nm.concat_rows(feats)

    def train_accuracy() -> float:
        hits = 0
        for start in range(0, n, 64):
            idx = range(start, min(start + 64, n))
            logits = nm.add(nm.matmul(features_for(idx), head_w), head_b)
            hits += int((np.argmax(logits.values, axis=1) == labels[list(idx)]).sum())
        return hits / n

    acc = train_accuracy()
    if steps > 0:
        opt = nm.OptimizerState(lr_base=lr, total_steps=steps, lr_min=lr_min)
        shuffle_rng = rng_for(seed, "encoder-batches")
        done = 0
        while done < steps:
            perm = shuffle_rng.permutation(n)
            for start in range(0, n, batch_size):
                if done >= steps:
                    break
                idx = perm[start:start + batch_size]
                logits = nm.add(nm.matmul(features_for(idx), head_w), head_b)
                probs = nm.softmax(logits)
                loss = nm.token_cross_entropy(probs, labels[idx], np.ones(len(idx), dtype=bool))
                try:
                    nm.backward(loss)
                except nm.NonFiniteError as e:
                    raise nm.NonFiniteError(f"{e} at step {done}") from e
                nm.sgd_step(trainables, [t.grad for t in trainables], opt)
                done += 1
            acc = train_accuracy()
            if acc >= 0.995:
                break
    if acc < gate:
        raise GateError(f"pretrain budget exhausted: encoder train accuracy "
                        f"{acc:.4f} < gate {gate} after {steps} steps")
    arrays = {k: t.values.copy() for k, t in params.items()}
    return EncoderParams(arrays, lay, True, EncoderParams.digest(arrays)), acc


def encode_image(img: np.ndarray, enc: EncoderParams) -> np.ndarray:
    """Pure frozen forward: uint8 (H, W, C) -> float (D_ENC,).

    Verifies the freeze checksum on every call; any drift in the weights is
    a hard error rather than a silent result change.
    """
    if not enc.frozen:
        raise FrozenParamsError("encode_image requires frozen encoder params")
    if EncoderParams.digest(enc.arrays) != enc.checksum:
        raise FrozenParamsError("encoder weights changed after freeze (checksum mismatch)")
    if img.shape != (enc.layout.size, enc.layout.size, enc.layout.channels):
        raise ValueError(f"image shape {img.shape} does not match encoder layout")
    consts = {k: nm.Tensor(v) for k, v in enc.arrays.items()}
    feat = _feature_graph(nm.Tensor(_to_float(img)), consts, enc.layout)
    return feat.values.reshape(D_ENC).copy()


@dataclass
class ProjectionParams:
    """The only vision-side trainables during CIL: feature -> P token rows."""

    w: nm.Tensor
    b: nm.Tensor
    p_tokens: int
    d_dec: int

    @classmethod
    def init(cls, d_enc: int, p_tokens: int, d_dec: int, seed: int,
             init_scale: float = 0.08) -> "ProjectionParams":
        rng = rng_for(seed, "projection-init")
        w = nm.Tensor(rng.normal(0.0, init_scale, size=(d_enc, p_tokens * d_dec)),
                      trainable=True, name="proj.w")
        b = nm.Tensor(np.zeros(p_tokens * d_dec), trainable=True, name="proj.b")
        return cls(w, b, p_tokens, d_dec)

    def trainables(self) -> list[nm.Tensor]:
        return [self.w, self.b]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"w": self.w.values.copy(), "b": self.b.values.copy()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.w.values = arrays["w"].astype(np.float64).copy()
        self.b.values = arrays["b"].astype(np.float64).copy()


def project(feature: np.ndarray, proj: ProjectionParams) -> nm.Tensor:
    """Affine map to (P, D_dec) image-token embeddings; grads flow to proj only."""
    if feature.shape != (proj.w.values.shape[0],):
        raise ValueError(f"feature shape {feature.shape} does not match projection")
    out = nm.add(nm.matmul(nm.Tensor(feature[None, :]), proj.w), proj.b)
    return nm.reshape(out, (proj.p_tokens, proj.d_dec))
