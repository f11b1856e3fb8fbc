"""Unbiased stochastic compression operators with uplink bit accounting.

Three operators are available:

``identity``
    ``Quant(x) = x``; ``omega = 0``.
``dithering``
    Random dithering with ``s`` levels in the ``l_r`` norm,
    ``Quant(x) = ||x||_r / s * sign(x) * floor(s |x| / ||x||_r + xi)`` with
    ``xi ~ U[0, 1]^q``.
``block``
    Block-p quantization: each block is replaced by
    ``||x_b||_p * sign(x_b) * U`` with ``U_j ~ Bernoulli(|x_j| / ||x_b||_p)``.

All operators are unbiased and satisfy
``E||Quant(x)||^2 <= (1 + omega) ||x||^2`` with the ``omega`` returned by
:meth:`QuantizerSpec.omega`.

Bit costs (used only for the ``bits`` column of traces): 64 bits per
transmitted float, one sign bit plus ``ceil(log2(s + 1))`` level bits per
coordinate for dithering, a sign bit and an indicator bit per coordinate
for block quantization.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple

import numpy as np

from .rng import as_generator

KINDS = ("identity", "dithering", "block")
FLOAT_BITS = 64


@dataclass(frozen=True)
class QuantizerSpec:
    kind: str = "identity"
    r: float = 2.0
    levels: int = 1
    p_norm: float = 2.0
    blocks: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown quantizer kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "dithering":
            if not self.r >= 1:
                raise ValueError("dithering norm order r must be >= 1")
            if int(self.levels) != self.levels or self.levels < 1:
                raise ValueError("dithering levels must be a positive integer")
        if self.kind == "block":
            if not self.p_norm >= 1:
                raise ValueError("block norm order p must be >= 1")
        if self.blocks is not None:
            blocks = tuple(int(b) for b in self.blocks)
            if not blocks or min(blocks) < 1:
                raise ValueError("block lengths must be positive integers")
            object.__setattr__(self, "blocks", blocks)

    def block_lengths(self, q):
        if self.kind != "block" or self.blocks is None:
            return (q,)
        if sum(self.blocks) != q:
            raise ValueError(f"block lengths {self.blocks} do not partition dimension {q}")
        return self.blocks

    def omega(self, q=None):
        """Variance constant of the operator.

        Dithering needs the dimension ``q``; block quantization uses its
        block lengths (or ``q`` for a single block).
        """
        if self.kind == "identity":
            return 0.0
        if self.kind == "block":
            lengths = self.blocks if self.blocks is not None else (_need_q(q),)
            # ||x||_1 <= sqrt(d) ||x||_2 and ||x||_p <= d^(1/p - 1/2) ||x||_2 for p < 2
            expo = max(1.0 / self.p_norm - 0.5, 0.0)
            return max(math.sqrt(d) * d**expo - 1.0 for d in lengths)
        q = _need_q(q)
        s = self.levels
        # per-coordinate variance (||x||_r/s)^2 f(1-f) with f(1-f) <= min(1/4, s|x_i|/||x||_r)
        c = q ** max(1.0 / self.r - 0.5, 0.0)
        return min(math.sqrt(q) * c / s, q * c * c / (4.0 * s * s))

    def bit_cost(self, q):
        if self.kind == "identity":
            return FLOAT_BITS * q
        if self.kind == "dithering":
            return FLOAT_BITS + q * (1 + math.ceil(math.log2(self.levels + 1)))
        return sum(FLOAT_BITS + 2 * d for d in self.block_lengths(q))


def _need_q(q):
    if q is None:
        raise ValueError("omega of this operator depends on the dimension q")
    return int(q)


@dataclass(frozen=True)
class CompressedDelta:
    """Payload sent by a worker.

    For identity, ``scales`` holds the raw vector and ``codes`` is None.
    Otherwise ``decode()`` returns ``scale_of_block * codes / divisor``.
    """

    kind: str
    scales: np.ndarray
    codes: Optional[np.ndarray]
    divisor: int
    block_lengths: Tuple[int, ...]
    bit_cost: int

    def decode(self):
        if self.codes is None:
            return self.scales.copy()
        scale = np.repeat(self.scales, self.block_lengths)
        return scale * self.codes / self.divisor

    def to_bytes(self):
        parts = [self.kind.encode(), np.asarray(self.scales, dtype="<f8").tobytes()]
        if self.codes is not None:
            parts.append(np.asarray(self.codes, dtype="<i8").tobytes())
        return b"|".join(parts)


def _check_vector(x):
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("quantizer input must be a 1-D vector")
    if not np.all(np.isfinite(x)):
        raise ValueError("quantizer input has non-finite entries")
    return x


def _block_norms(x, lengths, order):
    """Norms of consecutive blocks along the last axis."""
    edges = np.cumsum((0,) + tuple(lengths))
    return np.stack(
        [np.linalg.norm(x[..., a:b], ord=order, axis=-1) for a, b in zip(edges[:-1], edges[1:])],
        axis=-1,
    )


def _codes(spec, x, u):
    """Signed integer codes and per-block scales for uniforms ``u``.

    ``x`` has shape ``(..., q)`` and ``u`` broadcasts against it; scales
    have shape ``(..., n_blocks)``.
    """
    q = x.shape[-1]
    if spec.kind == "dithering":
        lengths = (q,)
        norms = np.linalg.norm(x, ord=spec.r, axis=-1, keepdims=True)
    else:
        lengths = spec.block_lengths(q)
        norms = _block_norms(x, lengths, spec.p_norm)
    scale = np.repeat(norms, lengths, axis=-1)
    safe = np.where(scale > 0, scale, 1.0)
    ratio = np.where(scale > 0, np.abs(x) / safe, 0.0)
    if spec.kind == "dithering":
        level = np.floor(spec.levels * ratio + u)
    else:
        level = u < ratio
    codes = (np.sign(x) * level).astype(np.int64)
    return norms, codes, lengths


def _message(spec, scales, codes, lengths, q):
    divisor = spec.levels if spec.kind == "dithering" else 1
    return CompressedDelta(spec.kind, scales, codes, divisor, tuple(lengths), spec.bit_cost(q))


def quantize(spec, x, rng):
    """Compress ``x`` with one draw from ``rng``."""
    x = _check_vector(x)
    q = x.shape[0]
    if spec.kind == "identity":
        return CompressedDelta("identity", x.copy(), None, 1, (q,), spec.bit_cost(q))
    u = as_generator(rng).random(q)
    return quantize_with(spec, x, u)


def quantize_with(spec, x, u):
    """Compress ``x`` using pinned uniforms ``u`` (the dither / Bernoulli draws)."""
    x = _check_vector(x)
    q = x.shape[0]
    if spec.kind == "identity":
        return CompressedDelta("identity", x.copy(), None, 1, (q,), spec.bit_cost(q))
    scales, codes, lengths = _codes(spec, x, np.asarray(u, dtype=float))
    return _message(spec, scales, codes, lengths, q)


def quantize_rows(spec, X, U):
    """Compress every row of ``X`` with the matching row of uniforms ``U``.

    Equivalent to ``[quantize_with(spec, x, u) for x, u in zip(X, U)]``.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("expected a 2-D array of vectors")
    if not np.all(np.isfinite(X)):
        raise ValueError("quantizer input has non-finite entries")
    q = X.shape[1]
    if spec.kind == "identity":
        return MessageBatch([CompressedDelta("identity", x.copy(), None, 1, (q,), spec.bit_cost(q)) for x in X], X.copy())
    scales, codes, lengths = _codes(spec, X, np.asarray(U, dtype=float))
    divisor = spec.levels if spec.kind == "dithering" else 1
    decoded = np.repeat(scales, lengths, axis=-1) * codes / divisor
    lengths, bits = tuple(lengths), spec.bit_cost(q)
    messages = [CompressedDelta(spec.kind, sc, cd, divisor, lengths, bits) for sc, cd in zip(scales, codes)]
    return MessageBatch(messages, decoded)


class MessageBatch(list):
    """Messages of several workers with their decoded values stacked in
    ``decoded`` (row ``a`` equals ``self[a].decode()``)."""

    def __init__(self, messages, decoded):
        super().__init__(messages)
        self.decoded = decoded


def sample(spec, x, size, rng):
    """``size`` independent decoded draws of ``Quant(x)``, shape ``(size, q)``."""
    x = _check_vector(x)
    if spec.kind == "identity":
        return np.broadcast_to(x, (size, x.shape[0])).copy()
    u = as_generator(rng).random((size, x.shape[0]))
    scales, codes, lengths = _codes(spec, x, u)
    divisor = spec.levels if spec.kind == "dithering" else 1
    return np.repeat(scales, lengths, axis=-1) * codes / divisor


def exact_mse(spec, x):
    """Closed-form ``E||Quant(x) - x||^2``."""
    x = _check_vector(x)
    if spec.kind == "identity":
        return 0.0
    if spec.kind == "block":
        lengths = spec.block_lengths(x.shape[0])
        edges = np.cumsum((0,) + tuple(lengths))
        total = 0.0
        for a, b in zip(edges[:-1], edges[1:]):
            xb = x[a:b]
            total += np.linalg.norm(xb, 1) * np.linalg.norm(xb, spec.p_norm) - xb @ xb
        return float(total)
    norm = np.linalg.norm(x, ord=spec.r)
    if norm == 0.0:
        return 0.0
    a = spec.levels * np.abs(x) / norm
    frac = a - np.floor(a)
    return float((norm / spec.levels) ** 2 * np.sum(frac * (1 - frac)))


class Moments(NamedTuple):
    mean: np.ndarray
    mse: float
    mean_stderr: np.ndarray
    sq_norm: float
    sq_norm_stderr: float
    mse_stderr: float


def empirical_moments(spec, x, trials, rng, chunk=10_000):
    """Monte-Carlo estimates of ``E[Quant(x)]``, ``E||Quant(x) - x||^2`` and
    ``E||Quant(x)||^2`` with their standard errors."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    x = _check_vector(x)
    rng = as_generator(rng)
    q = x.shape[0]
    s1 = np.zeros(q)
    s2 = np.zeros(q)
    err = np.zeros(2)
    sq = np.zeros(2)
    done = 0
    while done < trials:
        size = min(chunk, trials - done)
        draws = sample(spec, x, size, rng)
        s1 += draws.sum(axis=0)
        s2 += (draws**2).sum(axis=0)
        e = ((draws - x) ** 2).sum(axis=1)
        err += (e.sum(), (e**2).sum())
        nsq = (draws**2).sum(axis=1)
        sq += (nsq.sum(), (nsq**2).sum())
        done += size

    def _se(total, total_sq):
        mean = total / trials
        var = np.maximum(total_sq / trials - mean**2, 0.0)
        return mean, np.sqrt(var / max(trials - 1, 1))

    mean, mean_se = _se(s1, s2)
    mse, mse_se = _se(err[0], err[1])
    sqn, sqn_se = _se(sq[0], sq[1])
    return Moments(mean, float(mse), mean_se, float(sqn), float(sqn_se), float(mse_se))


def omega(spec, q=None):
    return spec.omega(q)
