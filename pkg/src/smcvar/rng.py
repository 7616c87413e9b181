"""Counter-based random streams.

Every stream is a Philox generator keyed by ``(seed, stream)``, so replicate
``i`` of an experiment can be handed ``RngStream(seed, i)`` directly without
advancing any shared generator.
"""

import numpy as np

_MASK64 = (1 << 64) - 1


class RngStream:
    """A reproducible random stream identified by ``(seed, stream)``.

    Attribute access falls through to the underlying
    :class:`numpy.random.Generator`, so ``rng.normal(...)``,
    ``rng.random(...)`` etc. work as usual.
    """

    def __init__(self, seed: int, stream: int = 0):
        if seed < 0 or stream < 0:
            raise ValueError("seed and stream must be nonnegative")
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def spawn(self, stream: int) -> "RngStream":
        """Independent stream sharing this seed."""
        return RngStream(self.seed, stream)

    def __getattr__(self, name):
        return getattr(self.generator, name)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream={self.stream})"


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None or isinstance(rng, (int, np.integer)):
        return np.random.default_rng(rng)
    raise TypeError(f"cannot build a generator from {type(rng).__name__}")


def categorical_rows(rng, probs: np.ndarray, size: int) -> np.ndarray:
    """Draw ``size`` i.i.d. categorical indices from each row of ``probs``.

    Inverse-CDF sampling with a single ``searchsorted`` over all rows (rows
    are offset by their index so the flattened CDF stays sorted). ``probs``
    may carry leading batch axes; the result has shape
    ``probs.shape[:-1] + (size,)``.
    """
    gen = as_generator(rng)
    probs = np.asarray(probs, dtype=float)
    lead = probs.shape[:-1]
    n = probs.shape[-1]
    flat = probs.reshape(-1, n)
    rows = flat.shape[0]
    cdf = np.cumsum(flat, axis=1)
    cdf /= cdf[:, -1:]
    cdf[:, -1] = 1.0
    offsets = np.arange(rows, dtype=float)[:, None]
    u = gen.random((rows, size))
    idx = np.searchsorted((cdf + offsets).ravel(), (u + offsets).ravel(), side="right")
    idx = idx.reshape(rows, size) - np.arange(rows)[:, None] * n
    # rounding at the offset boundaries can push an index one slot out
    np.clip(idx, 0, n - 1, out=idx)
    return idx.reshape(lead + (size,))
