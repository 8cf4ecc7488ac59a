"""Independent scalar oracles: plain-Python loops, no tensor library code.

These deliberately re-derive every quantity from first principles so they
can certify the vectorized implementations.
"""

import math


def dist(a, b):
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))


def unit(v):
    n = math.sqrt(sum(x * x for x in v))
    return [x / n for x in v]


def matmul_loops(a, b):
    m, k, n = len(a), len(a[0]), len(b[0])
    return [[sum(a[i][p] * b[p][j] for p in range(k)) for j in range(n)] for i in range(m)]


def pairwise_loops(a, b):
    return [[dist(ra, rb) for rb in b] for ra in a]


def infonce_scalar(j, anchors, candidates):
    """Direct softmax evaluation (no log-sum-exp trick)."""
    dists = [dist(anchors[j], c) for c in candidates]
    denom = sum(math.exp(-d) for d in dists)
    return -math.log(math.exp(-dists[j]) / denom)


def alignment_loss_scalar(h1, h2, g1, g2):
    """Term-by-term two-stream symmetric loss on raw embedding lists."""
    b = len(h1)
    h1, h2 = [unit(v) for v in h1], [unit(v) for v in h2]
    g1, g2 = [unit(v) for v in g1], [unit(v) for v in g2]
    total = 0.0
    for halves, gts in ((h1, g1), (h2, g2)):
        for j in range(b):
            total += infonce_scalar(j, halves, gts)  # half anchored vs GT candidates
            total += infonce_scalar(j, gts, halves)  # GT anchored vs half candidates
    return total / (2.0 * (2 * b))
