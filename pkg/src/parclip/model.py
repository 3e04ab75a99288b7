"""Desk-scale dual encoder with hand-written backward passes.

Image encoder: non-overlapping patches -> linear + tanh -> mean over patches
-> two tanh layers -> linear projection -> L2 normalization.
Text encoder: token embeddings -> masked mean -> two tanh layers -> linear
projection -> L2 normalization.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .numerics import EvaluationError, Rng, l2_normalize_rows, l2_normalize_rows_backward

__all__ = [
    "PAD",
    "UNK",
    "Vocabulary",
    "tokenize",
    "Dims",
    "DualEncoderParams",
    "PARAM_ORDER",
    "init_params",
    "encode_images",
    "encode_texts",
    "image_forward",
    "text_forward",
    "image_backward",
    "text_backward",
    "logit_scale",
    "snapshot",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_hash",
    "MAGIC",
]

PAD, UNK = 0, 1
MAGIC = b"PARCKPT1"
_TOKEN_RE = re.compile(r"[a-z0-9]+")
MAX_LOGIT_SCALE = 100.0
LSE_BETA = 8.0


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    max_len: int = 16

    @classmethod
    def build(cls, captions: Iterable[str], max_len: int = 16) -> "Vocabulary":
        seen = {}
        for cap in captions:
            for tok in _TOKEN_RE.findall(cap.lower()):
                seen.setdefault(tok, None)
        return cls(("<pad>", "<unk>") + tuple(sorted(seen)), max_len)

    def __len__(self):
        return len(self.tokens)

    @property
    def index(self) -> dict[str, int]:
        idx = self.__dict__.get("_index")
        if idx is None:
            idx = {t: i for i, t in enumerate(self.tokens)}
            object.__setattr__(self, "_index", idx)
        return idx


def tokenize(caption: str, vocab: Vocabulary) -> np.ndarray:
    ids = [vocab.index.get(t, UNK) for t in _TOKEN_RE.findall(caption.lower())]
    ids = ids[: vocab.max_len]
    return np.asarray(ids + [PAD] * (vocab.max_len - len(ids)), dtype=np.int64)


def tokenize_batch(captions: Iterable[str], vocab: Vocabulary) -> np.ndarray:
    return np.stack([tokenize(c, vocab) for c in captions])


@dataclass(frozen=True)
class Dims:
    image_size: int = 32
    patch: int = 8
    stride: int = 8
    pool: str = "mean"
    vocab_size: int = 64
    hidden: int = 128
    embed: int = 64
    max_len: int = 16
    learnable_temperature: bool = True

    @property
    def n_patches(self) -> int:
        return ((self.image_size - self.patch) // self.stride + 1) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * 3

    def shapes(self) -> dict[str, tuple[int, ...]]:
        h, d = self.hidden, self.embed
        return {
            "img_patch_w": (self.patch_dim, h),
            "img_patch_b": (h,),
            "img_w1": (h, h),
            "img_b1": (h,),
            "img_w2": (h, h),
            "img_b2": (h,),
            "img_proj": (h, d),
            "txt_embed": (self.vocab_size, h),
            "txt_w1": (h, h),
            "txt_b1": (h,),
            "txt_w2": (h, h),
            "txt_b2": (h,),
            "txt_proj": (h, d),
            "temperature_logit": (),
        }


PARAM_ORDER = tuple(Dims().shapes())


class DualEncoderParams:
    """Named float64 weight arrays plus the dims that shaped them.

    A frozen instance (see :func:`snapshot`) has read-only arrays.
    """

    def __init__(self, dims: Dims, arrays: dict[str, np.ndarray], frozen: bool = False):
        self.dims = dims
        self.arrays = {k: np.asarray(arrays[k], dtype=np.float64) for k in PARAM_ORDER}
        for name, shape in dims.shapes().items():
            if self.arrays[name].shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {self.arrays[name].shape}")
        self.frozen = frozen
        if frozen:
            for a in self.arrays.values():
                a.setflags(write=False)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def copy(self) -> "DualEncoderParams":
        return DualEncoderParams(self.dims, {k: v.copy() for k, v in self.arrays.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[k].reshape(-1) for k in PARAM_ORDER])

    def with_flat(self, vec: np.ndarray) -> "DualEncoderParams":
        out, pos = {}, 0
        for k in PARAM_ORDER:
            shape = self.dims.shapes()[k]
            n = int(np.prod(shape, dtype=np.int64))
            out[k] = np.asarray(vec[pos:pos + n], dtype=np.float64).reshape(shape)
            pos += n
        return DualEncoderParams(self.dims, out)

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}

    def equal(self, other: "DualEncoderParams") -> bool:
        return self.dims == other.dims and all(
            np.array_equal(self.arrays[k], other.arrays[k]) for k in PARAM_ORDER
        )


def init_params(seed: int, dims: Dims) -> DualEncoderParams:
    """Uniform init with std 1/sqrt(fan_in); biases zero."""
    rng = Rng(seed)
    arrays = {}
    for name, shape in dims.shapes().items():
        if name == "temperature_logit":
            arrays[name] = np.array(math.log(1.0 / 0.07) if dims.learnable_temperature else 0.0)
        elif len(shape) == 1:
            arrays[name] = np.zeros(shape)
        else:
            fan_in = 1 if name == "txt_embed" else shape[0]
            bound = math.sqrt(3.0 / fan_in)
            arrays[name] = rng.generator().uniform(-bound, bound, size=shape)
    return DualEncoderParams(dims, arrays)


def logit_scale(params: DualEncoderParams) -> float:
    if not params.dims.learnable_temperature:
        return 1.0
    return float(np.exp(params["temperature_logit"]))


def _check_finite(x: np.ndarray, layer: str) -> None:
    if not np.all(np.isfinite(x)):
        raise EvaluationError(f"non-finite activation in {layer}")


def _patchify(images: np.ndarray, patch: int, stride: int) -> np.ndarray:
    b, h, w, c = images.shape
    g = (h - patch) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(images, (patch, patch), axis=(1, 2))
    win = win[:, ::stride, ::stride][:, :g, :g]  # b, g, g, c, patch, patch
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b, g * g, patch * patch * c)


def image_forward(params: DualEncoderParams, images: np.ndarray):
    """Return (unit embeddings, cache) for a B x H x W x 3 batch."""
    images = np.asarray(images, dtype=np.float64)
    d = params.dims
    if images.ndim != 4 or images.shape[1:] != (d.image_size, d.image_size, 3):
        raise ValueError(f"images must be B x {d.image_size} x {d.image_size} x 3, got {images.shape}")
    x = _patchify(images, d.patch, d.stride) - 0.5
    h0 = np.tanh(x @ params["img_patch_w"] + params["img_patch_b"])
    if d.pool == "max":
        arg = np.argmax(h0, axis=1)
        pooled = np.take_along_axis(h0, arg[:, None, :], axis=1)[:, 0]
    elif d.pool == "lse":
        m = h0.max(axis=1, keepdims=True)
        e = np.exp(LSE_BETA * (h0 - m))
        arg = e / e.sum(axis=1, keepdims=True)
        pooled = m[:, 0] + np.log(e.mean(axis=1)) / LSE_BETA
    else:
        arg = None
        pooled = h0.mean(axis=1)
    h1 = np.tanh(pooled @ params["img_w1"] + params["img_b1"])
    h2 = np.tanh(h1 @ params["img_w2"] + params["img_b2"])
    z = h2 @ params["img_proj"]
    _check_finite(z, "image projection")
    cache = (x, h0, arg, pooled, h1, h2, z)
    return l2_normalize_rows(z), cache


def image_backward(params: DualEncoderParams, cache, grad_emb: np.ndarray, grads: dict) -> None:
    """Accumulate parameter gradients of the image tower into ``grads``."""
    x, h0, arg, pooled, h1, h2, z = cache
    gz = l2_normalize_rows_backward(z, grad_emb)
    grads["img_proj"] += h2.T @ gz
    ga2 = (gz @ params["img_proj"].T) * (1.0 - h2 * h2)
    grads["img_w2"] += h1.T @ ga2
    grads["img_b2"] += ga2.sum(axis=0)
    ga1 = (ga2 @ params["img_w2"].T) * (1.0 - h1 * h1)
    grads["img_w1"] += pooled.T @ ga1
    grads["img_b1"] += ga1.sum(axis=0)
    gpool = ga1 @ params["img_w1"].T
    if arg is None:
        ga0 = (gpool[:, None, :] / h0.shape[1]) * (1.0 - h0 * h0)
    elif arg.ndim == 3:
        ga0 = arg * gpool[:, None, :] * (1.0 - h0 * h0)
    else:
        ga0 = np.zeros_like(h0)
        np.put_along_axis(ga0, arg[:, None, :], gpool[:, None, :], axis=1)
        ga0 *= 1.0 - h0 * h0
    grads["img_patch_w"] += np.einsum("bpi,bph->ih", x, ga0)
    grads["img_patch_b"] += ga0.sum(axis=(0, 1))


def text_forward(params: DualEncoderParams, tokens: np.ndarray):
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise ValueError(f"token batch must be B x L, got {tokens.shape}")
    mask = (tokens != PAD).astype(np.float64)
    counts = np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
    emb = params["txt_embed"][tokens]
    pooled = (emb * mask[:, :, None]).sum(axis=1) / counts
    h1 = np.tanh(pooled @ params["txt_w1"] + params["txt_b1"])
    h2 = np.tanh(h1 @ params["txt_w2"] + params["txt_b2"])
    z = h2 @ params["txt_proj"]
    _check_finite(z, "text projection")
    cache = (tokens, mask, counts, pooled, h1, h2, z)
    return l2_normalize_rows(z), cache


def text_backward(params: DualEncoderParams, cache, grad_emb: np.ndarray, grads: dict) -> None:
    tokens, mask, counts, pooled, h1, h2, z = cache
    gz = l2_normalize_rows_backward(z, grad_emb)
    grads["txt_proj"] += h2.T @ gz
    ga2 = (gz @ params["txt_proj"].T) * (1.0 - h2 * h2)
    grads["txt_w2"] += h1.T @ ga2
    grads["txt_b2"] += ga2.sum(axis=0)
    ga1 = (ga2 @ params["txt_w2"].T) * (1.0 - h1 * h1)
    grads["txt_w1"] += pooled.T @ ga1
    grads["txt_b1"] += ga1.sum(axis=0)
    gpool = ga1 @ params["txt_w1"].T
    per_tok = (gpool / counts)[:, None, :] * mask[:, :, None]
    np.add.at(grads["txt_embed"], tokens.reshape(-1), per_tok.reshape(-1, per_tok.shape[-1]))


def encode_images(params: DualEncoderParams, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    parts = [image_forward(params, images[i:i + batch_size])[0] for i in range(0, len(images), batch_size)]
    return np.concatenate(parts) if parts else np.zeros((0, params.dims.embed))


def encode_texts(params: DualEncoderParams, tokens: np.ndarray, batch_size: int = 512) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    parts = [text_forward(params, tokens[i:i + batch_size])[0] for i in range(0, len(tokens), batch_size)]
    return np.concatenate(parts) if parts else np.zeros((0, params.dims.embed))


def snapshot(params: DualEncoderParams) -> DualEncoderParams:
    """Frozen deep copy (read-only arrays) used as the poisoned reference."""
    return DualEncoderParams(params.dims, {k: v.copy() for k, v in params.arrays.items()}, frozen=True)


_DIM_FIELDS = ("image_size", "patch", "stride", "pool", "vocab_size", "hidden", "embed", "max_len", "learnable_temperature")


_POOL_CODES = {"mean": 0, "max": 1, "lse": 2}


def _encode_dims(dims: Dims) -> list[int]:
    out = []
    for f in _DIM_FIELDS:
        v = getattr(dims, f)
        out.append(_POOL_CODES[v] if f == "pool" else int(v))
    return out


def _decode_dims(vals) -> Dims:
    kw = {}
    for f, v in zip(_DIM_FIELDS, vals):
        if f == "pool":
            kw[f] = {c: n for n, c in _POOL_CODES.items()}[v]
        elif f == "learnable_temperature":
            kw[f] = bool(v)
        else:
            kw[f] = int(v)
    return Dims(**kw)


def save_checkpoint(
    params: DualEncoderParams,
    path: str | os.PathLike,
    vocab: Vocabulary | None = None,
    meta: dict | None = None,
) -> str:
    """Write ``PARCKPT1`` binary plus ``<path>.json`` sidecar; returns the sha256 hex digest."""
    path = Path(path)
    header = struct.pack("<8sI", MAGIC, len(_DIM_FIELDS))
    header += struct.pack(f"<{len(_DIM_FIELDS)}q", *_encode_dims(params.dims))
    body = params.flat().astype("<f8").tobytes()
    blob = header + body
    path.write_bytes(blob)
    digest = hashlib.sha256(blob).hexdigest()
    sidecar = dict(meta or {})
    sidecar["sha256"] = digest
    sidecar["param_order"] = list(PARAM_ORDER)
    if vocab is not None:
        sidecar["vocab"] = list(vocab.tokens)
        sidecar["max_len"] = vocab.max_len
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return digest


def load_checkpoint(path: str | os.PathLike) -> tuple[DualEncoderParams, Vocabulary | None, dict]:
    path = Path(path)
    blob = path.read_bytes()
    magic, n = struct.unpack_from("<8sI", blob, 0)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
    vals = struct.unpack_from(f"<{n}q", blob, 12)
    dims = _decode_dims(vals)
    flat = np.frombuffer(blob, dtype="<f8", offset=12 + 8 * n).astype(np.float64)
    template = DualEncoderParams(dims, {k: np.zeros(s) for k, s in dims.shapes().items()})
    params = template.with_flat(flat)
    sidecar_path = Path(str(path) + ".json")
    meta = json.loads(sidecar_path.read_text()) if sidecar_path.exists() else {}
    vocab = Vocabulary(tuple(meta["vocab"]), meta.get("max_len", dims.max_len)) if "vocab" in meta else None
    return params, vocab, meta


def checkpoint_hash(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
