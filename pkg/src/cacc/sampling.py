"""Vose's alias method for O(1) draws from a fixed categorical distribution."""

import numpy as np


class AliasTable:
    """Alias table over ``len(probs)`` outcomes.

    ``probs`` must be nonnegative with a positive sum; it is renormalized.
    """

    def __init__(self, probs):
        p = np.asarray(probs, dtype=np.float64).ravel()
        if p.size == 0 or not np.isfinite(p).all() or (p < 0).any() or p.sum() <= 0:
            raise ValueError("probabilities must be finite, nonnegative and not all zero")
        k = p.size
        scaled = p * (k / p.sum())
        prob = np.ones(k)
        alias = np.arange(k)
        small = [i for i in range(k) if scaled[i] < 1.0]
        large = [i for i in range(k) if scaled[i] >= 1.0]
        while small and large:
            s = small.pop()
            g = large.pop()
            prob[s] = scaled[s]
            alias[s] = g
            scaled[g] = (scaled[g] + scaled[s]) - 1.0
            (small if scaled[g] < 1.0 else large).append(g)
        # leftovers are 1 up to rounding
        for i in small + large:
            prob[i] = 1.0
        self.prob = prob
        self.alias = alias

    def __len__(self):
        return self.prob.size

    def draw(self, n, rng):
        """``n`` i.i.d. outcome indices."""
        n = int(n)
        if n < 0:
            raise ValueError("sample count must be nonnegative")
        cols = rng.integers(0, self.prob.size, size=n)
        coin = rng.random(n)
        return np.where(coin < self.prob[cols], cols, self.alias[cols])
