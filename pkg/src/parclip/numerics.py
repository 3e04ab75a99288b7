"""Dense float64 arithmetic, seeded randomness and gradient checking.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. The helpers
here pin the few operations whose exact behavior other modules depend on.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

__all__ = [
    "DimensionError",
    "EvaluationError",
    "Rng",
    "as_tensor",
    "matmul",
    "l2_normalize_rows",
    "l2_normalize_rows_backward",
    "finite_diff_grad",
    "NORM_EPS",
]

NORM_EPS = 1e-8
_MASK64 = (1 << 64) - 1


class DimensionError(ValueError):
    pass


class EvaluationError(FloatingPointError):
    pass


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


def _splitmix64(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


class Rng:
    """xoshiro256** generator seeded through splitmix64.

    Scalar draws come straight from the xoshiro stream. Bulk array draws go
    through :meth:`generator`, which seeds a numpy PCG64 from the next 64-bit
    output so large noise tensors stay fast while remaining a pure function
    of the seed.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        sm = self.seed
        state = []
        for _ in range(4):
            sm, out = _splitmix64(sm)
            state.append(out)
        if not any(state):
            state[0] = 1
        self._s = state

    def next_u64(self) -> int:
        s = self._s
        result = (_rotl((s[1] * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s[1] << 17) & _MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 bits of precision."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, low: float, high: float) -> float:
        return low + (high - low) * self.random()

    def integers(self, n: int) -> int:
        """Uniform integer in [0, n) without modulo bias."""
        if n <= 0:
            raise ValueError(f"integers() needs n >= 1, got {n}")
        if n == 1:
            return 0
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def bernoulli(self, p: float) -> bool:
        return self.random() < p

    def normal(self) -> float:
        # Box-Muller; 1 - u keeps the log argument in (0, 1].
        u1 = 1.0 - self.random()
        u2 = self.random()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def permutation(self, n: int) -> np.ndarray:
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.integers(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return np.asarray(perm, dtype=np.int64)

    def sample_without_replacement(self, n: int, k: int) -> list[int]:
        """k distinct indices from range(n), in draw order (partial Fisher-Yates)."""
        if not 0 <= k <= n:
            raise ValueError(f"cannot draw {k} of {n} without replacement")
        pool = list(range(n))
        out = []
        for i in range(k):
            j = i + self.integers(n - i)
            pool[i], pool[j] = pool[j], pool[i]
            out.append(pool[i])
        return out

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.next_u64()))

    def split(self, index: int) -> "Rng":
        """Independent child stream for worker ``index``."""
        _, h = _splitmix64(int(index) & _MASK64)
        return Rng(self.seed ^ h)

    def spawn(self) -> "Rng":
        """Child stream drawn from (and advancing) this stream."""
        return Rng(self.next_u64())


def as_tensor(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise EvaluationError("tensor contains non-finite values")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def l2_normalize_rows(x: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    return x / np.maximum(norms, eps)


def l2_normalize_rows_backward(
    x: np.ndarray, grad_out: np.ndarray, eps: float = NORM_EPS
) -> np.ndarray:
    """Vector-Jacobian product of :func:`l2_normalize_rows` at ``x``."""
    norms = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    denom = np.maximum(norms, eps)
    y = x / denom
    active = norms >= eps
    proj = grad_out - y * np.sum(y * grad_out, axis=-1, keepdims=True)
    return np.where(active, proj, grad_out) / denom


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise EvaluationError(f"non-finite function value at index {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
