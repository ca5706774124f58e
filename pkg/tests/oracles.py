"""Slow, obviously-correct reference implementations used by several test modules."""

import numpy as np

from marlin.data import PRIORITY_REGIONS


def fasking_oracle(labels, r, seed):
    """Token-by-token ordered fill of the visible set, written as plainly as possible."""
    k = len(labels)
    n = int(np.floor(r * k + 1e-9))
    rng = np.random.default_rng(seed)
    regions = [0, 1] + [int(PRIORITY_REGIONS[i]) for i in rng.permutation(5)]
    token_order = list(rng.permutation(k))
    visible = []
    for region in regions:
        for tok in token_order:
            if len(visible) == k - n:
                break
            if labels[tok] == region:
                visible.append(tok)
    masked = np.ones(k, dtype=bool)
    masked[visible] = False
    return masked


def central_difference(f, p, index, h):
    """d f / d p[index] by a central difference, restoring p afterwards."""
    flat = p.data.view(-1)
    old = flat[index].item()
    flat[index] = old + h
    up = f()
    flat[index] = old - h
    down = f()
    flat[index] = old
    return (up - down) / (2 * h)
