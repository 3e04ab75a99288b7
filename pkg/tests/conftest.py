import numpy as np
import pytest

from parclip.model import DualEncoderParams, Dims, init_params
from parclip.numerics import Rng


def tiny_dims(pool="lse", learnable=True, **kw):
    base = dict(image_size=8, patch=4, stride=2, pool=pool, vocab_size=11, hidden=6, embed=4, max_len=5,
                learnable_temperature=learnable)
    base.update(kw)
    return Dims(**base)


def random_params(seed, dims):
    """Init plus nonzero biases and a non-default temperature."""
    p = init_params(seed, dims)
    gen = np.random.default_rng(seed + 1000)
    arrays = {k: v.copy() for k, v in p.arrays.items()}
    for k, v in arrays.items():
        if v.ndim == 1:
            arrays[k] = gen.normal(0, 0.3, size=v.shape)
    if dims.learnable_temperature:
        arrays["temperature_logit"] = np.array(gen.uniform(0.5, 2.0))
    return DualEncoderParams(dims, arrays)


def random_batch(seed, dims, b=4):
    gen = np.random.default_rng(seed)
    images = gen.uniform(size=(b, dims.image_size, dims.image_size, 3))
    tokens = gen.integers(2, dims.vocab_size, size=(b, dims.max_len))
    lengths = gen.integers(1, dims.max_len + 1, size=b)  # never all-PAD
    for i, n in enumerate(lengths):
        tokens[i, n:] = 0
    return images, tokens


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def unit_rows(gen, b, d):
    x = gen.normal(size=(b, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@pytest.fixture
def rng():
    return Rng(0)


# --- acceptance report ------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
