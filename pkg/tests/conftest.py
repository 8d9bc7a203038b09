import os
from collections import deque

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=50)
settings.register_profile("ci", deadline=None, max_examples=200)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def ball(shape, center, radius):
    grid = np.indices(shape)
    d2 = sum((g - c) ** 2 for g, c in zip(grid, center))
    return d2 <= radius**2


def bfs_components(mask, connectivity):
    """Plain breadth-first labelling used as an oracle for scipy's labeller."""
    if connectivity == 6:
        steps = [s for s in np.ndindex(3, 3, 3) if sum(abs(a - 1) for a in s) == 1]
    else:
        steps = [s for s in np.ndindex(3, 3, 3) if s != (1, 1, 1)]
    steps = [tuple(a - 1 for a in s) for s in steps]
    seen = np.zeros(mask.shape, dtype=bool)
    comps = []
    for start in zip(*np.nonzero(mask)):
        if seen[start]:
            continue
        seen[start] = True
        queue, members = deque([start]), []
        while queue:
            v = queue.popleft()
            members.append(v)
            for s in steps:
                w = tuple(a + b for a, b in zip(v, s))
                if all(0 <= w[i] < mask.shape[i] for i in range(3)) and mask[w] and not seen[w]:
                    seen[w] = True
                    queue.append(w)
        comps.append(sorted(members))
    return comps


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
