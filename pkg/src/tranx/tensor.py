"""Dense float64 primitives, activations, normalization and the shared PRNG.

Every function accepts arrays with arbitrary leading batch dimensions; the
last two axes are (rows, cols).  Backward helpers take the cache returned by
the matching forward and the upstream gradient.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractError

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715
LN_EPS = 1e-5

_MASK64 = (1 << 64) - 1
SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
SPLITMIX_MUL1 = 0xBF58476D1CE4E5B9
SPLITMIX_MUL2 = 0x94D049BB133111EB


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Validate and convert to a finite float64 array with ndim >= 2."""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim < 2 or m.shape[-1] < 1 or m.shape[-2] < 1:
        raise ContractError(f"{name}: expected a non-empty matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ContractError(f"{name}: contains non-finite entries")
    return m


def check_finite(x: np.ndarray, name: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise ContractError(f"{name}: contains non-finite entries")
    return x


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out if out.ndim else float(out)


def row_softmax(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    z = m - m.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    """Gradient wrt the logits given softmax output p and dL/dp."""
    return p * (dp - (dp * p).sum(axis=-1, keepdims=True))


def gelu(x):
    x = np.asarray(x, dtype=np.float64)
    out = 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_A * x**3)))
    return out if out.ndim else float(out)


def gelu_grad(x):
    x = np.asarray(x, dtype=np.float64)
    t = np.tanh(GELU_C * (x + GELU_A * x**3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)


def layer_norm(m: np.ndarray, gain, bias, eps: float = LN_EPS):
    """Per-row standardization with population variance; returns (out, cache)."""
    m = np.asarray(m, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    cols = m.shape[-1]
    if gain.shape != (cols,) or bias.shape != (cols,):
        raise ContractError(
            f"layer_norm: gain/bias must have length {cols}, got {gain.shape} and {bias.shape}"
        )
    if eps < 0:
        raise ContractError("layer_norm: eps must be nonnegative")
    mu = m.mean(axis=-1, keepdims=True)
    xc = m - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv, gain)


def layer_norm_backward(cache, dy: np.ndarray):
    """Returns (dx, dgain, dbias); parameter grads are summed over all rows."""
    xhat, inv, gain = cache
    dxhat = dy * gain
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    cols = dy.shape[-1]
    dgain = (dy * xhat).reshape(-1, cols).sum(axis=0)
    dbias = dy.reshape(-1, cols).sum(axis=0)
    return dx, dgain, dbias


def param_grad(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """dL/dW for y = x @ W, summed over every leading axis."""
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


def sum_rows(dy: np.ndarray) -> np.ndarray:
    return dy.reshape(-1, dy.shape[-1]).sum(axis=0)


def swap(m: np.ndarray) -> np.ndarray:
    """Transpose of the last two axes."""
    return np.swapaxes(m, -1, -2)


# --------------------------------------------------------------------------
# SplitMix64 + Box-Muller
#
# next_u64:  state <- (state + 0x9E3779B97F4A7C15) mod 2^64
#            z = state
#            z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 mod 2^64
#            z = (z ^ (z >> 27)) * 0x94D049BB133111EB mod 2^64
#            return z ^ (z >> 31)
# uniform:   (next_u64 >> 11) * 2^-53, in [0, 1)
# gaussian:  draws are produced in pairs from two consecutive uniforms
#            u1 = 1 - uniform (in (0, 1]), u2 = uniform,
#            r = sqrt(-2 ln u1), emit r*cos(2 pi u2) then r*sin(2 pi u2).
#            A request for n values consumes ceil(n/2) pairs; an odd
#            trailing sine value is discarded.
# integer:   next_u64 mod n (bias below 2^-50 for the sizes used here).
# --------------------------------------------------------------------------


def _mix64(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(SPLITMIX_MUL1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(SPLITMIX_MUL2)
    return z ^ (z >> np.uint64(31))


class RandomSource:
    """Single-owner SplitMix64 stream.  Not thread-safe; split seeds instead."""

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def next_u64_array(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state) + steps * np.uint64(SPLITMIX_GAMMA)
        self.state = (self.state + n * SPLITMIX_GAMMA) & _MASK64
        return _mix64(states)

    def next_u64(self) -> int:
        return int(self.next_u64_array(1)[0])

    def uniform(self, n: int) -> np.ndarray:
        return (self.next_u64_array(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def randint(self, n: int) -> int:
        if n < 1:
            raise ContractError("randint: n must be >= 1")
        return self.next_u64() % n

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates, swapping position i with randint(i + 1) from the top down."""
        out = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.randint(i + 1)
            out[i], out[j] = out[j], out[i]
        return out

    def choice(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), sorted ascending."""
        return np.sort(self.permutation(n)[:k])

    def gaussian(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log(1.0 - u[:, 0]))
        theta = 2.0 * math.pi * u[:, 1]
        z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).reshape(-1)
        return z[:n]

    def normal_matrix(self, rows: int, cols: int, std: float = 1.0) -> np.ndarray:
        return std * self.gaussian(rows * cols).reshape(rows, cols)

    def spawn(self) -> "RandomSource":
        """Derive an independent child stream (seeded from this stream's next word)."""
        return RandomSource(self.next_u64())


def sample_gaussian(rng: RandomSource, n: int) -> np.ndarray:
    if n < 1:
        raise ContractError("sample_gaussian: n must be >= 1")
    return rng.gaussian(n)
