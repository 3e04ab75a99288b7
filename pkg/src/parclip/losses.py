"""Training objectives with exact gradients.

Embedding-level losses return their value together with gradients with
respect to each embedding batch (and the logit scale). The parameter-level
objectives chain those through the encoders' backward passes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import augment
from .model import (
    DualEncoderParams,
    image_backward,
    image_forward,
    logit_scale,
    text_backward,
    text_forward,
)
from .numerics import Rng

__all__ = [
    "ParLossConfig",
    "CleanClipConfig",
    "DegenerateBatchWarning",
    "clip_loss",
    "uniaug_loss",
    "embedding_distance",
    "embedding_distance_grad",
    "pert_loss",
    "pert_gates",
    "clip_objective",
    "cleanclip_objective",
    "par_objective",
]


class DegenerateBatchWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ParLossConfig:
    tau: float = 2.15
    noise_std: float = 0.2
    noise_prob: float = 0.5
    cutout_area_frac: tuple[float, float] = (0.005, 0.01)
    cutout_prob: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.tau < 4.0:
            raise ValueError(f"tau must lie in (0, 4), got {self.tau}")


@dataclass(frozen=True)
class CleanClipConfig:
    lam: float = 1.0
    image_aug: str = "strong"
    text_aug: str = "eda"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.image_aug not in ("strong", "identity") or self.text_aug not in ("eda", "identity"):
            raise ValueError("augmentation sets: image_aug in {strong, identity}, text_aug in {eda, identity}")


def _log_softmax(x: np.ndarray, axis: int) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    shifted = x - m
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def clip_loss(img: np.ndarray, txt: np.ndarray, scale: float = 1.0):
    """Symmetric in-batch InfoNCE.

    Returns ``(loss, d_img, d_txt, d_scale)``; logits are ``scale * img @ txt.T``.
    """
    img = np.asarray(img, dtype=np.float64)
    txt = np.asarray(txt, dtype=np.float64)
    if img.shape != txt.shape:
        raise ValueError(f"embedding batches differ in shape: {img.shape} vs {txt.shape}")
    b = img.shape[0]
    sims = img @ txt.T
    logits = scale * sims
    lr = _log_softmax(logits, axis=1)
    lc = _log_softmax(logits, axis=0)
    diag = np.arange(b)
    loss = -(lr[diag, diag].sum() + lc[diag, diag].sum()) / (2.0 * b)
    eye = np.eye(b)
    g_logits = ((np.exp(lr) - eye) + (np.exp(lc) - eye)) / (2.0 * b)
    d_img = scale * (g_logits @ txt)
    d_txt = scale * (g_logits.T @ img)
    d_scale = float(np.sum(g_logits * sims))
    return float(loss), d_img, d_txt, d_scale


def uniaug_loss(emb: np.ndarray, emb_aug: np.ndarray, scale: float = 1.0):
    """One modality's contrastive term between views and their augmentations.

    Mean over the batch of ``-log softmax_k(<e_n, e~_k>)_n``. The full
    uni-modal loss is the average of the image and text halves.
    Returns ``(loss, d_emb, d_aug, d_scale)``.
    """
    emb = np.asarray(emb, dtype=np.float64)
    emb_aug = np.asarray(emb_aug, dtype=np.float64)
    if emb.shape != emb_aug.shape:
        raise ValueError(f"embedding batches differ in shape: {emb.shape} vs {emb_aug.shape}")
    b = emb.shape[0]
    sims = emb @ emb_aug.T
    lr = _log_softmax(scale * sims, axis=1)
    diag = np.arange(b)
    loss = -lr[diag, diag].sum() / b
    g_logits = (np.exp(lr) - np.eye(b)) / b
    d_emb = scale * (g_logits @ emb_aug)
    d_aug = scale * (g_logits.T @ emb)
    d_scale = float(np.sum(g_logits * sims))
    return float(loss), d_emb, d_aug, d_scale


def embedding_distance(emb_now: np.ndarray, emb_ref: np.ndarray) -> float:
    """Mean squared L2 distance between matching rows."""
    diff = np.asarray(emb_now, dtype=np.float64) - np.asarray(emb_ref, dtype=np.float64)
    return float(np.sum(diff * diff) / diff.shape[0])


def embedding_distance_grad(emb_now: np.ndarray, emb_ref: np.ndarray) -> np.ndarray:
    return 2.0 * (emb_now - emb_ref) / emb_now.shape[0]


def pert_gates(s_phi: float, s_psi: float, tau: float) -> tuple[float, float]:
    return float(s_phi <= tau), float(s_psi <= tau)


def pert_loss(s_phi: float, s_psi: float, tau: float) -> float:
    g_phi, g_psi = pert_gates(s_phi, s_psi, tau)
    return 0.5 * (g_phi * s_phi + g_psi * s_psi)


def _warn_small(b: int) -> None:
    if b < 2:
        warnings.warn(
            "contrastive loss on a batch of 1 is identically 0", DegenerateBatchWarning, stacklevel=3
        )


def _add_scale_grad(params: DualEncoderParams, grads: dict, d_scale: float) -> None:
    if params.dims.learnable_temperature:
        grads["temperature_logit"] += d_scale * logit_scale(params)


def clip_objective(params: DualEncoderParams, images: np.ndarray, tokens: np.ndarray):
    """Contrastive loss of the model on one batch; returns ``(loss, grads)``."""
    _warn_small(len(images))
    img, icache = image_forward(params, images)
    txt, tcache = text_forward(params, tokens)
    loss, d_img, d_txt, d_scale = clip_loss(img, txt, logit_scale(params))
    grads = params.zeros_like()
    image_backward(params, icache, d_img, grads)
    text_backward(params, tcache, d_txt, grads)
    _add_scale_grad(params, grads, d_scale)
    return loss, grads


def cleanclip_objective(
    params: DualEncoderParams,
    images: np.ndarray,
    tokens: np.ndarray,
    cfg: CleanClipConfig = CleanClipConfig(),
    rng: Rng | None = None,
    aug_images: np.ndarray | None = None,
    aug_tokens: np.ndarray | None = None,
):
    """``L_CLIP + lam * (image half + text half) / 2``; returns ``(loss, grads, diag)``.

    Augmented views are drawn from ``rng`` unless passed in explicitly.
    """
    _warn_small(len(images))
    if aug_images is None:
        aug_images = images if cfg.image_aug == "identity" else augment.strong_image_augment(images, rng)
    if aug_tokens is None:
        aug_tokens = tokens if cfg.text_aug == "identity" else augment.text_augment(tokens, rng)
    scale = logit_scale(params)
    grads = params.zeros_like()

    img, icache = image_forward(params, images)
    txt, tcache = text_forward(params, tokens)
    l_clip, d_img, d_txt, ds = clip_loss(img, txt, scale)
    d_scale = ds
    l_uni = 0.0
    if cfg.lam != 0.0:
        img_a, iacache = image_forward(params, aug_images)
        txt_a, tacache = text_forward(params, aug_tokens)
        li, di, dia, dsi = uniaug_loss(img, img_a, scale)
        lt, dt, dta, dst = uniaug_loss(txt, txt_a, scale)
        l_uni = 0.5 * (li + lt)
        w = 0.5 * cfg.lam
        d_img = d_img + w * di
        d_txt = d_txt + w * dt
        d_scale += w * (dsi + dst)
        image_backward(params, iacache, w * dia, grads)
        text_backward(params, tacache, w * dta, grads)
    image_backward(params, icache, d_img, grads)
    text_backward(params, tcache, d_txt, grads)
    _add_scale_grad(params, grads, d_scale)
    loss = l_clip + cfg.lam * l_uni
    return loss, grads, {"L_clip": l_clip, "L_uniaug": l_uni}


def par_objective(
    params: DualEncoderParams,
    poisoned: DualEncoderParams,
    images: np.ndarray,
    tokens: np.ndarray,
    cfg: ParLossConfig = ParLossConfig(),
    rng: Rng | None = None,
):
    """Perturb-and-recover loss ``L_CLIP - L_PERT``; returns ``(loss, grads, diag)``.

    With ``rng`` the images first get the noise/CutOut augmentation; the
    poisoned reference embeds the same augmented views. Each distance term
    is gated by a constant indicator (no gradient through the gate).
    """
    if params.dims != poisoned.dims:
        raise ValueError("parameter and snapshot dims differ")
    _warn_small(len(images))
    if rng is not None:
        images = augment.par_augment(
            images,
            rng,
            noise_std=cfg.noise_std,
            noise_prob=cfg.noise_prob,
            cutout_area=cfg.cutout_area_frac,
            cutout_prob=cfg.cutout_prob,
        )
    img, icache = image_forward(params, images)
    txt, tcache = text_forward(params, tokens)
    img_ref, _ = image_forward(poisoned, images)
    txt_ref, _ = text_forward(poisoned, tokens)

    l_clip, d_img, d_txt, d_scale = clip_loss(img, txt, logit_scale(params))
    s_phi = embedding_distance(img, img_ref)
    s_psi = embedding_distance(txt, txt_ref)
    g_phi, g_psi = pert_gates(s_phi, s_psi, cfg.tau)
    l_pert = pert_loss(s_phi, s_psi, cfg.tau)
    if g_phi:
        d_img = d_img - 0.5 * embedding_distance_grad(img, img_ref)
    if g_psi:
        d_txt = d_txt - 0.5 * embedding_distance_grad(txt, txt_ref)

    grads = params.zeros_like()
    image_backward(params, icache, d_img, grads)
    text_backward(params, tcache, d_txt, grads)
    _add_scale_grad(params, grads, d_scale)
    diag = {"L_clip": l_clip, "L_pert": l_pert, "S_phi": s_phi, "S_psi": s_psi}
    return l_clip - l_pert, grads, diag
