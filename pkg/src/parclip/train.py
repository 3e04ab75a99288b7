"""Optimizer, learning-rate schedules and the poison / clean training drivers."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .config import RunConfig
from .losses import CleanClipConfig, ParLossConfig, cleanclip_objective, clip_objective, par_objective
from .model import (
    MAX_LOGIT_SCALE,
    Dims,
    DualEncoderParams,
    Vocabulary,
    init_params,
    load_checkpoint,
    save_checkpoint,
    snapshot,
    tokenize_batch,
)
from .numerics import Rng
from .synthdata import TEMPLATES, CLASSES, Corpus, Sample, poison_corpus

logger = logging.getLogger(__name__)

__all__ = [
    "Schedule",
    "lr_at",
    "AdamW",
    "DivergenceError",
    "TrainResult",
    "corpus_vocab",
    "fit",
    "pretrain",
    "train_poison",
    "train_clean",
]


class DivergenceError(FloatingPointError):
    def __init__(self, message: str, last_params: DualEncoderParams | None = None):
        super().__init__(message)
        self.last_params = last_params


@dataclass(frozen=True)
class Schedule:
    kind: str = "par_custom"
    start_lr: float = 3e-5
    mid_lr: float = 3e-6
    final_lr: float = 1e-9
    total_steps: int = 100
    mid_step: int = 50

    def __post_init__(self):
        if self.kind not in ("par_custom", "cosine", "constant"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.kind == "par_custom" and not 0 < self.mid_step < self.total_steps:
            raise ValueError("par_custom needs 0 < mid_step < total_steps")


def lr_at(schedule: Schedule, step: int) -> float:
    """Learning rate at ``step`` in [0, total_steps].

    ``par_custom``: linear from start_lr to mid_lr over [0, mid_step], then a
    half-cosine from mid_lr down to final_lr. ``cosine``: half-cosine from
    start_lr to final_lr over the whole run.
    """
    s = schedule
    if not 0 <= step <= s.total_steps:
        raise ValueError(f"step {step} outside [0, {s.total_steps}]")
    if s.kind == "constant":
        return s.start_lr
    if s.kind == "cosine":
        frac = step / s.total_steps
        return s.final_lr + (s.start_lr - s.final_lr) * 0.5 * (1.0 + math.cos(math.pi * frac))
    if step <= s.mid_step:
        frac = step / s.mid_step
        return (1.0 - frac) * s.start_lr + frac * s.mid_lr
    frac = (step - s.mid_step) / (s.total_steps - s.mid_step)
    return s.final_lr + (s.mid_lr - s.final_lr) * 0.5 * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Decoupled weight decay Adam, matching the usual PyTorch defaults."""

    def __init__(self, params: DualEncoderParams, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 1e-4):
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = params.zeros_like()
        self.v = params.zeros_like()
        self.t = 0

    def step(self, params: DualEncoderParams, grads: dict, lr: float) -> None:
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in params.arrays.items():
            g = grads[name]
            p *= 1.0 - lr * self.weight_decay
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        if params.dims.learnable_temperature:
            t = params.arrays["temperature_logit"]
            np.clip(t, 0.0, math.log(MAX_LOGIT_SCALE), out=t)


@dataclass
class TrainResult:
    params: DualEncoderParams
    vocab: Vocabulary
    diagnostics: list[dict] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    poisoned_indices: list[int] = field(default_factory=list)


def corpus_vocab(corpus: Corpus, max_len: int = 16) -> Vocabulary:
    """Vocabulary over every caption the pipeline can produce for this corpus."""
    caps = [s.caption for s in corpus.samples]
    caps += [t.format(c.class_name) for t in TEMPLATES for c in CLASSES]
    return Vocabulary.build(caps, max_len)


def _batches(n: int, batch_size: int, rng: Rng):
    perm = rng.permutation(n)
    for lo in range(0, n, batch_size):
        idx = perm[lo:lo + batch_size]
        if len(idx) >= 2:
            yield idx


def steps_per_epoch(n: int, batch_size: int) -> int:
    full, rem = divmod(n, batch_size)
    return full + (1 if rem >= 2 else 0)


Objective = Callable[[DualEncoderParams, np.ndarray, np.ndarray, Rng], tuple]


def fit(
    params: DualEncoderParams,
    images: np.ndarray,
    tokens: np.ndarray,
    objective: Objective,
    schedule: Schedule,
    epochs: int,
    batch_size: int,
    rng: Rng,
    weight_decay: float = 1e-4,
    on_step: Callable[[int, dict], None] | None = None,
) -> list[dict]:
    """Minibatch AdamW loop updating ``params`` in place; returns per-step diagnostics.

    ``objective(params, images, tokens, rng)`` returns ``(loss, grads)`` or
    ``(loss, grads, diag)``.
    """
    opt = AdamW(params, weight_decay=weight_decay)
    history = []
    step = 0
    last_good = params.copy()
    for _ in range(epochs):
        for idx in _batches(len(images), batch_size, rng):
            lr = lr_at(schedule, min(step, schedule.total_steps))
            out = objective(params, images[idx], tokens[idx], rng)
            loss, grads = out[0], out[1]
            diag = dict(out[2]) if len(out) > 2 else {}
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise DivergenceError(f"non-finite loss at step {step}", last_good)
            diag.setdefault("L_clip", loss)
            row = {"step": step, "loss": loss, **diag, "lr": lr}
            history.append(row)
            if on_step is not None:
                on_step(step, row)
            opt.step(params, grads, lr)
            step += 1
            if step % 25 == 0:
                last_good = params.copy()
    return history


def _stack(samples: list[Sample], vocab: Vocabulary):
    images = np.stack([s.image for s in samples])
    tokens = tokenize_batch([s.caption for s in samples], vocab)
    return images, tokens


def _clip_step(params, images, tokens, rng):
    return clip_objective(params, images, tokens)


def _config_digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def pretrain(corpus: Corpus, vocab: Vocabulary, cfg: RunConfig) -> DualEncoderParams:
    """Clean contrastive pre-training on the train split (stand-in for a public checkpoint).

    Cached under ``cfg.pretrain.cache_dir`` when set, keyed by the corpus
    seed/size and every setting that shapes the weights.
    """
    pc = cfg.pretrain
    key = _config_digest(
        {"pretrain": pc.to_dict(ignore=("cache_dir",)), "model": cfg.model.to_dict(), "vocab": list(vocab.tokens),
         "corpus": [corpus.seed, corpus.splits, corpus.image_size]}
    )
    cache = None
    if pc.cache_dir:
        cache = Path(pc.cache_dir) / f"pretrain-{key}.bin"
        if cache.exists():
            params, _, _ = load_checkpoint(cache)
            logger.info("loaded cached pre-trained model %s", cache)
            return params
    dims = cfg.model.dims(corpus.image_size, len(vocab))
    params = init_params(pc.seed, dims)
    images, tokens = _stack(corpus.split("train"), vocab)
    total = pc.epochs * steps_per_epoch(len(images), pc.batch_size)
    sched = Schedule("cosine", start_lr=pc.lr, final_lr=pc.lr * 1e-2, total_steps=max(total, 1))
    fit(params, images, tokens, _clip_step, sched, pc.epochs, pc.batch_size, Rng(pc.seed ^ 0x5EED))
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(params, cache, vocab, {"kind": "pretrain", "key": key})
    return params


def train_poison(cfg: RunConfig, corpus: Corpus, base: DualEncoderParams | None = None,
                 vocab: Vocabulary | None = None) -> TrainResult:
    """Fine-tune a pre-trained model on the poisoned train split with the CLIP loss."""
    vocab = vocab or corpus_vocab(corpus, cfg.model.max_len)
    if base is None:
        base = pretrain(corpus, vocab, cfg)
    params = base.copy()
    poisoned, chosen = poison_corpus(corpus.split("train"), cfg.poison.to_poison_config())
    images, tokens = _stack(poisoned, vocab)
    tc = cfg.train
    batch_size = tc.batch_size or (256 if len(images) >= 4000 else 128)
    total = tc.epochs * steps_per_epoch(len(images), batch_size)
    sched = Schedule(tc.schedule, start_lr=tc.lr, mid_lr=tc.mid_lr, final_lr=tc.final_lr,
                     total_steps=max(total, 1), mid_step=max(total // 2, 1))
    hist = fit(params, images, tokens, _clip_step, sched, tc.epochs, batch_size, Rng(cfg.seed),
               weight_decay=tc.weight_decay)
    return TrainResult(params, vocab, hist, poisoned_indices=chosen)


def train_clean(cfg: RunConfig, poisoned_params: DualEncoderParams, corpus: Corpus,
                vocab: Vocabulary) -> TrainResult:
    """Clean a poisoned model on the disjoint ``clean`` split with PAR or the CleanCLIP baseline."""
    if cfg.mode not in ("clean_par", "clean_baseline"):
        raise ValueError(f"train_clean needs mode clean_par or clean_baseline, got {cfg.mode!r}")
    expected = cfg.model.dims(corpus.image_size, len(vocab))
    if poisoned_params.dims != expected:
        raise ValueError(f"checkpoint dims {poisoned_params.dims} do not match config dims {expected}")
    ref = snapshot(poisoned_params)
    params = poisoned_params.copy()
    images, tokens = _stack(corpus.split("clean"), vocab)
    cc = cfg.clean_settings()
    total = cc.epochs * steps_per_epoch(len(images), cc.batch_size)
    sched = Schedule(cc.schedule, start_lr=cc.lr, mid_lr=cc.mid_lr, final_lr=cc.final_lr,
                     total_steps=max(total, 1), mid_step=max(int(round(total * cc.mid_frac)), 1))
    if cfg.mode == "clean_par":
        lcfg = ParLossConfig(tau=cc.tau, noise_std=cc.noise_std, noise_prob=cc.noise_prob,
                             cutout_area_frac=tuple(cc.cutout_area), cutout_prob=cc.cutout_prob)

        def objective(p, x, t, rng):
            return par_objective(p, ref, x, t, lcfg, rng)
    else:
        ccfg = CleanClipConfig(lam=cc.lam)

        def objective(p, x, t, rng):
            return cleanclip_objective(p, x, t, ccfg, rng)

    hist = fit(params, images, tokens, objective, sched, cc.epochs, cc.batch_size, Rng(cfg.seed),
               weight_decay=cc.weight_decay)
    return TrainResult(params, vocab, hist)
