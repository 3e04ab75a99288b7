"""Zero-shot classification, retrieval and embedding-projection metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .model import DualEncoderParams, Vocabulary, encode_images, encode_texts, tokenize_batch
from .numerics import Rng, l2_normalize_rows
from .synthdata import CLASSES, TEMPLATES, Sample, class_by_name
from .triggers import TriggerSpec, apply_trigger

__all__ = [
    "Metrics",
    "class_text_embeddings",
    "trigger_images",
    "zero_shot_predict",
    "zero_shot_eval",
    "retrieval_eval",
    "retrieval_rankings",
    "Projection",
    "export_projection",
    "separation_score",
    "evaluate_model",
]


@dataclass
class Metrics:
    clean_acc: float
    asr: float
    retrieval_p_at_k: float
    retrieval_asr: float
    k: int = 5
    n_eval: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def class_text_embeddings(params: DualEncoderParams, vocab: Vocabulary, class_names: list[str] | None = None) -> np.ndarray:
    """One unit vector per class: mean of its template-prompt embeddings, renormalized."""
    class_names = class_names or [c.class_name for c in CLASSES]
    prompts = [t.format(name) for name in class_names for t in TEMPLATES]
    emb = encode_texts(params, tokenize_batch(prompts, vocab))
    emb = emb.reshape(len(class_names), len(TEMPLATES), -1).mean(axis=1)
    return l2_normalize_rows(emb)


def trigger_images(images: np.ndarray, spec: TriggerSpec, seed: int) -> np.ndarray:
    """Triggered copies of ``images``; image ``i`` draws its patch position from ``Rng(seed).split(i)``."""
    base = Rng(seed)
    return np.stack([apply_trigger(img, spec, base.split(i)) for i, img in enumerate(images)])


def zero_shot_predict(params: DualEncoderParams, images: np.ndarray, class_emb: np.ndarray) -> np.ndarray:
    emb = encode_images(params, images)
    # argmax returns the first maximum, so ties go to the lowest class index
    return np.argmax(emb @ class_emb.T, axis=1)


def zero_shot_eval(
    params: DualEncoderParams,
    vocab: Vocabulary,
    images: np.ndarray,
    labels: np.ndarray,
    trigger: TriggerSpec | None = None,
    target_label: str = "yellow bar",
    seed: int = 0,
    class_names: list[str] | None = None,
) -> tuple[float, float]:
    """Return ``(clean_acc, asr)``.

    ASR counts triggered copies of non-target images predicted as the
    target; with ``trigger=None`` it is the base rate on clean images.
    """
    class_names = class_names or [c.class_name for c in CLASSES]
    if target_label not in class_names:
        raise KeyError(f"target label {target_label!r} is not among the classes")
    target = class_names.index(target_label)
    labels = np.asarray(labels)
    class_emb = class_text_embeddings(params, vocab, class_names)
    pred = zero_shot_predict(params, images, class_emb)
    clean_acc = float(np.mean(pred == labels)) if len(labels) else 0.0
    keep = labels != target
    if not keep.any():
        return clean_acc, 0.0
    if trigger is None:
        asr = float(np.mean(pred[keep] == target))
    else:
        trig = trigger_images(np.asarray(images)[keep], trigger, seed)
        asr = float(np.mean(zero_shot_predict(params, trig, class_emb) == target))
    return clean_acc, asr


def retrieval_rankings(img_emb: np.ndarray, cap_emb: np.ndarray, k: int) -> np.ndarray:
    """Top-k caption indices per image by cosine, ties to the lower caption index."""
    sims = img_emb @ cap_emb.T
    order = np.argsort(-sims, axis=1, kind="stable")
    return order[:, :k]


def retrieval_eval(
    params: DualEncoderParams,
    vocab: Vocabulary,
    images: np.ndarray,
    captions: list[str],
    k: int = 5,
    trigger: TriggerSpec | None = None,
    target_label: str = "yellow bar",
    labels: np.ndarray | None = None,
    seed: int = 0,
) -> tuple[float, float]:
    """Image-to-text retrieval over the pool of distinct captions.

    Returns ``(p_at_k, retrieval_asr)``; retrieval ASR is the fraction of
    triggered non-target images with a target-label caption in their top-k.
    """
    pool = list(dict.fromkeys(captions))
    if k > len(pool):
        raise ValueError(f"k={k} exceeds caption pool size {len(pool)}")
    cap_emb = encode_texts(params, tokenize_batch(pool, vocab))
    truth = np.array([pool.index(c) for c in captions])
    top = retrieval_rankings(encode_images(params, images), cap_emb, k)
    p_at_k = float(np.mean(np.any(top == truth[:, None], axis=1)))
    if trigger is None:
        return p_at_k, 0.0
    is_target = np.array([target_label in c for c in pool])
    keep = np.ones(len(images), dtype=bool)
    if labels is not None:
        keep = np.asarray(labels) != class_by_name(target_label)
    if not keep.any():
        return p_at_k, 0.0
    trig = trigger_images(np.asarray(images)[keep], trigger, seed)
    top_t = retrieval_rankings(encode_images(params, trig), cap_emb, k)
    r_asr = float(np.mean(is_target[top_t].any(axis=1)))
    return p_at_k, r_asr


@dataclass
class Projection:
    xy: np.ndarray
    poisoned: np.ndarray
    labels: np.ndarray
    separation: float

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("x,y,poisoned_flag,class\n")
            for (x, y), p, c in zip(self.xy, self.poisoned, self.labels):
                fh.write(f"{x!r},{y!r},{int(p)},{CLASSES[int(c)].class_name}\n")


def separation_score(xy: np.ndarray, groups: np.ndarray) -> float:
    """Mean distance between group centroids over mean within-group spread."""
    groups = np.asarray(groups)
    keys = np.unique(groups)
    if len(keys) < 2:
        raise ValueError("separation needs at least two groups")
    cents = np.stack([xy[groups == g].mean(axis=0) for g in keys])
    spread = np.mean([np.linalg.norm(xy[groups == g] - c, axis=1).mean() for g, c in zip(keys, cents)])
    inter = [np.linalg.norm(cents[i] - cents[j]) for i in range(len(keys)) for j in range(i + 1, len(keys))]
    return float(np.mean(inter) / max(spread, 1e-12))


def _pca2(emb: np.ndarray) -> np.ndarray:
    centered = emb - emb.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    tol = max(emb.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    if s.size < 2 or s[1] <= max(tol, 1e-12):
        raise np.linalg.LinAlgError("embedding covariance has rank < 2")
    # sign convention: largest-magnitude loading positive
    signs = np.sign(vt[np.arange(2), np.argmax(np.abs(vt[:2]), axis=1)])
    return centered @ (vt[:2].T * signs)


def export_projection(
    params: DualEncoderParams | None,
    images: np.ndarray | None = None,
    poisoned: np.ndarray | None = None,
    labels: np.ndarray | None = None,
    embeddings: np.ndarray | None = None,
) -> Projection:
    """Project image embeddings on their top-2 principal components."""
    emb = embeddings if embeddings is not None else encode_images(params, images)
    if len(emb) < 3:
        raise ValueError("projection needs at least 3 samples")
    xy = _pca2(np.asarray(emb, dtype=np.float64))
    poisoned = np.asarray(poisoned, dtype=bool)
    labels = np.zeros(len(emb), dtype=int) if labels is None else np.asarray(labels)
    return Projection(xy, poisoned, labels, separation_score(xy, poisoned))


def eval_split(samples: list[Sample]):
    images = np.stack([s.image for s in samples])
    labels = np.array([s.label for s in samples])
    captions = [s.caption for s in samples]
    return images, labels, captions


def evaluate_model(
    params: DualEncoderParams,
    vocab: Vocabulary,
    samples: list[Sample],
    trigger: TriggerSpec | None,
    target_label: str,
    k: int = 5,
    seed: int = 0,
) -> Metrics:
    images, labels, captions = eval_split(samples)
    clean_acc, asr = zero_shot_eval(params, vocab, images, labels, trigger, target_label, seed)
    p_at_k, r_asr = retrieval_eval(params, vocab, images, captions, k, trigger, target_label, labels, seed)
    return Metrics(clean_acc, asr, p_at_k, r_asr, k, len(samples))


def projection_for(params, samples: list[Sample], trigger: TriggerSpec, target_label: str, n: int, seed: int) -> Projection:
    """Projection of ``n`` clean non-target eval images plus their triggered copies."""
    target = class_by_name(target_label)
    picked = [s for s in samples if s.label != target][:n]
    images = np.stack([s.image for s in picked])
    labels = np.array([s.label for s in picked])
    trig = trigger_images(images, trigger, seed)
    return export_projection(
        params,
        np.concatenate([images, trig]),
        np.r_[np.zeros(len(picked), bool), np.ones(len(picked), bool)],
        np.r_[labels, labels],
    )
