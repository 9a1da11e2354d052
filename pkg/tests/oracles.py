"""Independent scalar re-implementations used as test oracles."""

import math


def cos(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    return dot / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b)))


def unit(v):
    n = math.sqrt(sum(x * x for x in v))
    return [x / n for x in v]


def info_nce(anchors, targets, base, perturbed, tau, base_only=False):
    """Mean over anchors of sum over the two positives of -log softmax mass."""
    total = 0.0
    for a, t in zip(anchors, targets):
        candidates = []
        for j in range(len(base)):
            candidates.append(base[j])
            if not base_only or j == t:
                candidates.append(perturbed[j])
        denom = sum(math.exp(cos(a, q) / tau) for q in candidates)
        term = 0.0
        for p in (base[t], perturbed[t]):
            term += -math.log(math.exp(cos(a, p) / tau) / denom)
        total += term
    return total / len(anchors)


def group_means(rows, keys):
    out = {}
    for c in sorted(set(keys)):
        members = [r for r, k in zip(rows, keys) if k == c]
        out[c] = [sum(col) / len(members) for col in zip(*members)]
    return out
