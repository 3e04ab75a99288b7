import math

import numpy as np
import pytest

import parclip.evaluate as ev
from parclip.model import Dims, encode_images, encode_texts, init_params, tokenize_batch
from parclip.numerics import Rng
from parclip.synthdata import CLASSES, TEMPLATES, build_corpus, class_by_name
from parclip.train import corpus_vocab
from parclip.triggers import Variant, apply_trigger, default_spec

TARGET = "yellow bar"


@pytest.fixture(scope="module")
def eval_setup():
    corpus = build_corpus({"eval": 200}, Rng(21))
    vocab = corpus_vocab(corpus)
    samples = corpus.split("eval")
    images, labels, captions = ev.eval_split(samples)
    dims = Dims(vocab_size=len(vocab), pool="lse", stride=4)
    return vocab, images, labels, captions, dims


def brute_force_zero_shot(params, vocab, images, labels, trigger, target_label, seed):
    n_cls = len(CLASSES)
    cls = []
    for c in CLASSES:
        acc = None
        for t in TEMPLATES:
            e = encode_texts(params, tokenize_batch([t.format(c.class_name)], vocab))[0]
            acc = e if acc is None else acc + e
        acc = acc / len(TEMPLATES)
        cls.append(acc / math.sqrt(sum(v * v for v in acc)))

    def predict(img):
        e = encode_images(params, img[None])[0]
        best, best_s = 0, -math.inf
        for j in range(n_cls):
            s = float(sum(a * b for a, b in zip(e, cls[j])))
            if s > best_s:
                best, best_s = j, s
        return best

    target = class_by_name(target_label)
    correct = sum(predict(img) == lab for img, lab in zip(images, labels))
    hits = total = 0
    base = Rng(seed)
    for img, lab in zip(images, labels):
        if lab == target:
            continue
        trig = apply_trigger(img, trigger, base.split(total))
        hits += predict(trig) == target
        total += 1
    return correct / len(images), hits / total


def brute_force_retrieval(params, vocab, images, labels, captions, k, trigger, target_label, seed):
    pool = []
    for c in captions:
        if c not in pool:
            pool.append(c)
    cap = encode_texts(params, tokenize_batch(pool, vocab))

    def topk(img):
        e = encode_images(params, img[None])[0]
        scored = [(-float(np.dot(e, cap[j])), j) for j in range(len(pool))]
        return [j for _, j in sorted(scored)[:k]]

    p = sum(pool.index(c) in topk(img) for img, c in zip(images, captions)) / len(images)
    target = class_by_name(target_label)
    hits = total = 0
    base = Rng(seed)
    for img, lab in zip(images, labels):
        if lab == target:
            continue
        top = topk(apply_trigger(img, trigger, base.split(total)))
        hits += any(target_label in pool[j] for j in top)
        total += 1
    return p, hits / total


def trained_like(seed, dims):
    p = init_params(seed, dims)
    gen = np.random.default_rng(seed)
    for k, v in p.arrays.items():
        if v.ndim == 1:
            v[...] = gen.normal(0, 0.5, size=v.shape)
    return p


@pytest.mark.parametrize("seed", [0, 1])
def test_zero_shot_matches_brute_force(eval_setup, seed):
    vocab, images, labels, _, dims = eval_setup
    p = trained_like(seed, dims)
    trig = default_spec(Variant.BADNET_STRIPES, 7)
    got = ev.zero_shot_eval(p, vocab, images, labels, trig, TARGET, seed=5)
    want = brute_force_zero_shot(p, vocab, images, labels, trig, TARGET, 5)
    assert got == want


@pytest.mark.parametrize("seed", [0, 1])
def test_retrieval_matches_brute_force(eval_setup, seed):
    vocab, images, labels, captions, dims = eval_setup
    p = trained_like(seed, dims)
    trig = default_spec(Variant.BLENDED_TRIANGLES)
    got = ev.retrieval_eval(p, vocab, images, captions, 5, trig, TARGET, labels, seed=3)
    want = brute_force_retrieval(p, vocab, images, labels, captions, 5, trig, TARGET, 3)
    assert got == want


def test_retrieval_full_pool_and_k_errors(eval_setup):
    vocab, images, labels, captions, dims = eval_setup
    p = trained_like(2, dims)
    n_pool = len(set(captions))
    assert ev.retrieval_eval(p, vocab, images, captions, k=n_pool)[0] == 1.0
    with pytest.raises(ValueError, match="exceeds"):
        ev.retrieval_eval(p, vocab, images, captions, k=n_pool + 1)


def test_random_model_is_at_chance():
    corpus = build_corpus({"eval": 960}, Rng(22))
    vocab = corpus_vocab(corpus)
    images, labels, _ = ev.eval_split(corpus.split("eval"))
    p = init_params(0, Dims(vocab_size=len(vocab)))
    acc, _ = ev.zero_shot_eval(p, vocab, images, labels)
    chance = 1 / 48
    sigma = math.sqrt(chance * (1 - chance) / len(labels))
    assert abs(acc - chance) <= 3 * sigma


def test_unknown_target_label(eval_setup):
    vocab, images, labels, _, dims = eval_setup
    with pytest.raises(KeyError, match="purple"):
        ev.zero_shot_eval(trained_like(0, dims), vocab, images, labels, target_label="purple blob")


def test_no_trigger_asr_is_base_rate(eval_setup):
    vocab, images, labels, _, dims = eval_setup
    p = trained_like(3, dims)
    _, asr = ev.zero_shot_eval(p, vocab, images, labels, None, TARGET)
    pred = ev.zero_shot_predict(p, images, ev.class_text_embeddings(p, vocab))
    keep = labels != class_by_name(TARGET)
    assert asr == np.mean(pred[keep] == class_by_name(TARGET))


def test_metrics_invariant_to_order_without_trigger(eval_setup):
    vocab, images, labels, captions, dims = eval_setup
    p = trained_like(4, dims)
    perm = np.random.default_rng(0).permutation(len(labels))
    a = ev.zero_shot_eval(p, vocab, images, labels)
    b = ev.zero_shot_eval(p, vocab, images[perm], labels[perm])
    assert a == b
    ra = ev.retrieval_eval(p, vocab, images, captions, 5)
    rb = ev.retrieval_eval(p, vocab, images[perm], [captions[i] for i in perm], 5)
    assert ra[0] == rb[0]


def _one_hot(n, idx):
    out = np.zeros((len(idx), n))
    out[np.arange(len(idx)), idx] = 1.0
    return out


def test_constructed_one_hot_model(monkeypatch, eval_setup):
    vocab, _, _, _, dims = eval_setup
    labels = np.arange(48).repeat(2)
    images = labels.astype(float)[:, None, None, None] * np.ones((1, 32, 32, 3)) / 100.0
    prompt_class = {t.format(c.class_name): i for i, c in enumerate(CLASSES) for t in TEMPLATES}
    inv_vocab = vocab.tokens

    def fake_texts(params, tokens, batch_size=512):
        caps = [" ".join(inv_vocab[t] for t in row if t != 0) for row in tokens]
        return _one_hot(64, [prompt_class[c] for c in caps])

    def fake_images(params, imgs, batch_size=512):
        # the class index is encoded in the pixel values
        return _one_hot(64, np.rint(np.asarray(imgs)[:, -1, -1, 0] * 100).astype(int))

    monkeypatch.setattr(ev, "encode_texts", fake_texts)
    monkeypatch.setattr(ev, "encode_images", fake_images)
    clean, asr = ev.zero_shot_eval(None, vocab, images, labels, None, TARGET)
    assert clean == 1.0 and asr == 0.0
    captions = [TEMPLATES[0].format(CLASSES[i].class_name) for i in labels]
    assert ev.retrieval_eval(None, vocab, images, captions, k=1)[0] == 1.0


def test_rankings_tie_break_matches_stable_sort():
    gen = np.random.default_rng(0)
    for _ in range(50):
        img = gen.integers(-2, 3, size=(4, 3)).astype(float)
        cap = gen.integers(-2, 3, size=(6, 3)).astype(float)
        got = ev.retrieval_rankings(img, cap, 4)
        for i in range(4):
            sims = [float(img[i] @ cap[j]) for j in range(6)]
            want = sorted(range(6), key=lambda j: (-sims[j], j))[:4]
            assert got[i].tolist() == want


def test_projection_examples():
    with pytest.raises(np.linalg.LinAlgError):
        ev.export_projection(None, embeddings=np.ones((5, 4)), poisoned=[0, 0, 1, 1, 1])
    gen = np.random.default_rng(1)
    a = gen.normal(0, 0.1, size=(30, 6))
    b = gen.normal(0, 0.1, size=(30, 6)) + np.r_[3.0, np.zeros(5)]
    emb = np.vstack([a, b])
    proj = ev.export_projection(None, embeddings=emb, poisoned=np.r_[np.zeros(30), np.ones(30)])
    assert proj.separation > 3
    d_full = np.linalg.norm(emb[:, None] - emb[None], axis=2)
    d_2d = np.linalg.norm(proj.xy[:, None] - proj.xy[None], axis=2)
    assert np.all(d_2d <= d_full + 1e-12)


def test_projection_csv(tmp_path):
    gen = np.random.default_rng(2)
    proj = ev.export_projection(None, embeddings=gen.normal(size=(6, 4)), poisoned=[0, 1, 0, 1, 0, 1],
                                labels=[0, 1, 2, 3, 4, 5])
    proj.to_csv(tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "x,y,poisoned_flag,class"
    assert len(lines) == 7 and lines[2].endswith(",1,red circle")
