"""Counter-based random streams.

Every random draw in the simulators comes from a stream addressed by a
tuple of integers, e.g. ``(seed, PURPOSE_BATCH, round, worker)``. Streams
with distinct addresses are statistically independent and do not depend on
the order in which workers are executed.
"""

import numpy as np

PURPOSE_PARTICIPATION = 1
PURPOSE_BATCH = 2
PURPOSE_QUANT = 3
PURPOSE_INIT = 4
PURPOSE_DATA = 5
PURPOSE_MISC = 6


MAX_ADDRESS = 4


def stream(seed, *address):
    """Return a generator for the stream ``(seed, *address)``.

    The Philox key holds the seed and ``(purpose, address length)``; the
    remaining address words fill the upper three counter words, so the
    low counter word has room for ``2**64`` blocks per stream.
    """
    if len(address) > MAX_ADDRESS:
        raise ValueError(f"stream address has more than {MAX_ADDRESS} components")
    words = [int(a) for a in address]
    if any(w < 0 or w >= 2**32 for w in words[:1]) or any(w < 0 or w >= 2**64 for w in words[1:]):
        raise ValueError(f"stream address {tuple(words)} out of range")
    purpose, rest = (words[0], words[1:]) if words else (0, [])
    key = np.array([int(seed) % 2**64, purpose | (len(rest) << 32)], dtype=np.uint64)
    counter = np.array([0, *rest, *[0] * (3 - len(rest))], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(counter=counter, key=key))


def as_generator(rng):
    """Coerce ``None``, an int seed or a Generator into a Generator."""
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
