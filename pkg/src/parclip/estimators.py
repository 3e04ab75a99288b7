"""scikit-learn style wrappers around the dual encoder, triggers and cleaning objectives.

Images are ``B x H x W x 3`` float arrays in [0, 1]; captions are lists of
strings. Estimators follow the usual ``fit`` / ``transform`` / ``predict``
protocol and expose their hyper-parameters through ``get_params``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import evaluate
from .losses import CleanClipConfig, ParLossConfig, cleanclip_objective, clip_objective, par_objective
from .model import (
    Dims,
    DualEncoderParams,
    Vocabulary,
    encode_images,
    encode_texts,
    init_params,
    load_checkpoint,
    save_checkpoint,
    snapshot,
    tokenize_batch,
)
from .numerics import Rng
from .synthdata import CLASSES, TEMPLATES
from .train import Schedule, fit, steps_per_epoch
from .triggers import TriggerSpec, default_spec
from .validation import check_captions, check_images

__all__ = [
    "DualEncoder",
    "ZeroShotClassifier",
    "TriggerTransformer",
    "PerturbAndRecover",
    "CleanClipBaseline",
]


class DualEncoder(BaseEstimator, TransformerMixin):
    """Image/text encoder pair trained with the symmetric contrastive loss.

    ``fit(images, captions)`` trains from a seeded initialization;
    ``transform(images)`` returns unit-norm image embeddings and
    ``encode_text(captions)`` the matching text embeddings.
    """

    def __init__(
        self,
        hidden=128,
        embed=64,
        patch=8,
        stride=2,
        pool="lse",
        max_len=16,
        temperature="learnable",
        epochs=20,
        learning_rate=2e-3,
        batch_size=128,
        weight_decay=1e-4,
        random_state=0,
    ):
        self.hidden = hidden
        self.embed = embed
        self.patch = patch
        self.stride = stride
        self.pool = pool
        self.max_len = max_len
        self.temperature = temperature
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.random_state = random_state

    def _dims(self, image_size: int, vocab_size: int) -> Dims:
        if self.temperature not in ("learnable", "fixed"):
            raise ValueError(f"temperature must be 'learnable' or 'fixed', got {self.temperature!r}")
        return Dims(image_size=image_size, patch=self.patch, stride=self.stride, pool=self.pool,
                    vocab_size=vocab_size, hidden=self.hidden, embed=self.embed, max_len=self.max_len,
                    learnable_temperature=self.temperature == "learnable")

    def fit(self, X, y):
        images = check_images(X)
        captions = check_captions(y, len(images))
        prompts = [t.format(c.class_name) for t in TEMPLATES for c in CLASSES]
        self.vocab_ = Vocabulary.build(captions + prompts, self.max_len)
        dims = self._dims(images.shape[1], len(self.vocab_))
        params = init_params(self.random_state, dims)
        tokens = tokenize_batch(captions, self.vocab_)
        total = max(self.epochs * steps_per_epoch(len(images), self.batch_size), 1)
        sched = Schedule("cosine", start_lr=self.learning_rate, final_lr=self.learning_rate * 1e-2,
                         total_steps=total)
        self.history_ = fit(params, images, tokens, lambda p, x, t, r: clip_objective(p, x, t), sched,
                            self.epochs, self.batch_size, Rng(self.random_state), self.weight_decay)
        self.params_ = params
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        return encode_images(self.params_, check_images(X, self.params_.dims.image_size))

    def encode_text(self, captions):
        check_is_fitted(self, "params_")
        return encode_texts(self.params_, tokenize_batch(check_captions(captions), self.vocab_))

    def score(self, X, y):
        """Top-1 image-to-caption retrieval accuracy over the distinct captions in ``y``."""
        images = check_images(X)
        captions = check_captions(y, len(images))
        return evaluate.retrieval_eval(self.params_, self.vocab_, images, captions, k=1)[0]

    def save(self, path, meta: dict | None = None) -> str:
        check_is_fitted(self, "params_")
        return save_checkpoint(self.params_, path, self.vocab_, meta)

    @classmethod
    def from_params(cls, params: DualEncoderParams, vocab: Vocabulary) -> "DualEncoder":
        d = params.dims
        est = cls(hidden=d.hidden, embed=d.embed, patch=d.patch, stride=d.stride, pool=d.pool,
                  max_len=d.max_len, temperature="learnable" if d.learnable_temperature else "fixed")
        est.params_ = params
        est.vocab_ = vocab
        return est

    @classmethod
    def from_checkpoint(cls, path) -> "DualEncoder":
        params, vocab, _ = load_checkpoint(path)
        if vocab is None:
            raise ValueError(f"{path}: checkpoint sidecar carries no vocabulary")
        return cls.from_params(params, vocab)


class ZeroShotClassifier(BaseEstimator, ClassifierMixin):
    """Nearest class-prompt classifier on top of a fitted :class:`DualEncoder`.

    ``fit`` only builds the per-class prompt embeddings; no weights change.
    """

    def __init__(self, encoder=None, class_names=None):
        self.encoder = encoder
        self.class_names = class_names

    def fit(self, X=None, y=None):
        if self.encoder is None:
            raise ValueError("ZeroShotClassifier needs a fitted encoder")
        check_is_fitted(self.encoder, "params_")
        names = list(self.class_names) if self.class_names is not None else [c.class_name for c in CLASSES]
        self.class_names_ = names
        self.classes_ = np.arange(len(names))
        self.class_embeddings_ = evaluate.class_text_embeddings(self.encoder.params_, self.encoder.vocab_, names)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "class_embeddings_")
        return self.encoder.transform(X) @ self.class_embeddings_.T

    def predict(self, X):
        return np.argmax(self.decision_function(X), axis=1)


class TriggerTransformer(BaseEstimator, TransformerMixin):
    """Stamp a backdoor trigger onto every image.

    ``blend_weight=None`` uses the variant's default weight. BadNet patch
    positions are drawn per image from ``random_state``.
    """

    def __init__(
        self,
        variant="BadNetStripes",
        blend_weight=None,
        patch_size=8,
        triangle_side=14,
        text="Watermarked",
        text_height_frac=0.1,
        pattern_seed=7,
        random_state=0,
    ):
        self.variant = variant
        self.blend_weight = blend_weight
        self.patch_size = patch_size
        self.triangle_side = triangle_side
        self.text = text
        self.text_height_frac = text_height_frac
        self.pattern_seed = pattern_seed
        self.random_state = random_state

    def fit(self, X=None, y=None):
        base = default_spec(self.variant, self.pattern_seed)
        weight = base.blend_weight if self.blend_weight is None else self.blend_weight
        self.spec_ = TriggerSpec(base.variant, patch_size=self.patch_size, blend_weight=weight,
                                 triangle_side=self.triangle_side, text=self.text,
                                 text_height_frac=self.text_height_frac, pattern_seed=self.pattern_seed)
        return self

    def transform(self, X):
        check_is_fitted(self, "spec_")
        return evaluate.trigger_images(check_images(X), self.spec_, self.random_state)


class _Cleaner(BaseEstimator, TransformerMixin):
    """Shared plumbing: fine-tune a copy of a fitted encoder on clean pairs."""

    def _objective(self, reference: DualEncoderParams):
        raise NotImplementedError

    def _schedule(self, total: int) -> Schedule:
        raise NotImplementedError

    def fit(self, X, y):
        if self.encoder is None:
            raise ValueError(f"{type(self).__name__} needs a fitted (possibly poisoned) encoder")
        check_is_fitted(self.encoder, "params_")
        source = self.encoder.params_
        images = check_images(X, source.dims.image_size)
        tokens = tokenize_batch(check_captions(y, len(images)), self.encoder.vocab_)
        reference = snapshot(source)
        params = source.copy()
        total = max(self.epochs * steps_per_epoch(len(images), self.batch_size), 2)
        self.diagnostics_ = fit(params, images, tokens, self._objective(reference), self._schedule(total),
                                self.epochs, self.batch_size, Rng(self.random_state), self.weight_decay)
        self.encoder_ = DualEncoder.from_params(params, self.encoder.vocab_)
        return self

    def transform(self, X):
        check_is_fitted(self, "encoder_")
        return self.encoder_.transform(X)


class PerturbAndRecover(_Cleaner):
    """Clean a poisoned encoder by pushing its embeddings away from the poisoned
    snapshot (up to a squared distance ``tau``) while keeping the contrastive
    loss low on clean data.

    The learning rate decays linearly to ``mid_learning_rate`` over the first
    half of the steps, then follows a half-cosine to ``final_learning_rate``.
    """

    def __init__(
        self,
        encoder=None,
        tau=2.15,
        epochs=10,
        learning_rate=3e-3,
        mid_learning_rate=3e-4,
        final_learning_rate=1e-7,
        batch_size=64,
        weight_decay=1e-4,
        noise_std=0.2,
        noise_prob=0.5,
        cutout_area=(0.005, 0.01),
        cutout_prob=0.5,
        random_state=0,
    ):
        self.encoder = encoder
        self.tau = tau
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.mid_learning_rate = mid_learning_rate
        self.final_learning_rate = final_learning_rate
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.noise_std = noise_std
        self.noise_prob = noise_prob
        self.cutout_area = cutout_area
        self.cutout_prob = cutout_prob
        self.random_state = random_state

    def _objective(self, reference):
        cfg = ParLossConfig(tau=self.tau, noise_std=self.noise_std, noise_prob=self.noise_prob,
                            cutout_area_frac=tuple(self.cutout_area), cutout_prob=self.cutout_prob)
        return lambda p, x, t, rng: par_objective(p, reference, x, t, cfg, rng)

    def _schedule(self, total):
        return Schedule("par_custom", start_lr=self.learning_rate, mid_lr=self.mid_learning_rate,
                        final_lr=self.final_learning_rate, total_steps=total, mid_step=total // 2)


class CleanClipBaseline(_Cleaner):
    """Clean by fine-tuning with the contrastive loss plus ``lam`` times the
    uni-modal augmentation loss, under a cosine schedule."""

    def __init__(
        self,
        encoder=None,
        lam=1.0,
        epochs=5,
        learning_rate=2e-3,
        final_learning_rate=1e-7,
        batch_size=64,
        weight_decay=1e-4,
        random_state=0,
    ):
        self.encoder = encoder
        self.lam = lam
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.final_learning_rate = final_learning_rate
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.random_state = random_state

    def _objective(self, reference):
        cfg = CleanClipConfig(lam=self.lam)
        return lambda p, x, t, rng: cleanclip_objective(p, x, t, cfg, rng)

    def _schedule(self, total):
        return Schedule("cosine", start_lr=self.learning_rate, final_lr=self.final_learning_rate,
                        total_steps=total)
