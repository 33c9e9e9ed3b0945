"""Shared builders and the finite-difference gradient oracle."""
import numpy as np

from caprec.core import ContextVectors, LatentModel, RatingsDataset
from caprec.objective import objective_value


def random_model(rng, M, N, k, L=None, scale=0.5):
    X = Y = None
    if L is not None:
        X = rng.normal(0, scale, (L, M))
        Y = np.abs(rng.normal(0, scale, (L, N)))
    return LatentModel(rng.normal(0, scale, (k, M)), rng.normal(0, scale, (k, N)), X, Y)


def random_signed(rng, M, N, density=0.6):
    """Random +-1 ratings with every user holding at least one of each label."""
    triples = []
    for i in range(M):
        items = rng.permutation(N)
        n = max(2, int(round(density * N)))
        for t, j in enumerate(items[:n]):
            v = 1.0 if t == 0 else (-1.0 if t == 1 else rng.choice([-1.0, 1.0]))
            triples.append((i, int(j), v))
    return RatingsDataset.from_triples(triples, M, N, feedback_mode="explicit±1")


def random_context(rng, model, floor=0.05):
    p = rng.uniform(0, 1, model.num_users)
    usage = p @ (1.0 / (1.0 + np.exp(-model.scores())))
    c = np.maximum(usage + rng.normal(0, 1, model.num_items), floor)
    return ContextVectors(p, c)


def fd_gradients(model, train, ctx, cfg, h=1e-5, pairs=None):
    """Central differences of ``objective_value`` for every factor entry."""
    out = {}
    for name in ("U", "V", "X"):
        P = getattr(model, name)
        if P is None:
            continue
        G = np.zeros_like(P)
        for idx in np.ndindex(P.shape):
            old = P[idx]
            P[idx] = old + h
            fp = objective_value(model, train, ctx, cfg, pairs=pairs).total
            P[idx] = old - h
            fm = objective_value(model, train, ctx, cfg, pairs=pairs).total
            P[idx] = old
            G[idx] = (fp - fm) / (2 * h)
        out[name] = G
    return out


def rel_err(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


# brute-force metric oracles: plain loops over definitions, no shared code with caprec.evaluate

def brute_pairwise(scores, test):
    per_user = []
    for i in range(test.num_users):
        pos = [int(j) for u, j, v in zip(test.users, test.items, test.values) if u == i and v > 0]
        neg = [int(j) for u, j, v in zip(test.users, test.items, test.values) if u == i and v < 0]
        if not pos or not neg:
            continue
        wrong = sum(1 for a in pos for b in neg if scores[i, b] >= scores[i, a])
        per_user.append(wrong / (len(pos) * len(neg)))
    return sum(per_user) / len(per_user) if per_user else None


def brute_ranking(scores, candidates):
    return [sorted(candidates[i], key=lambda j: (-scores[i, j], j)) for i in range(len(candidates))]


def brute_ap(ranking, relevant, k):
    if not relevant:
        return None
    top = ranking[:k]
    total = 0.0
    for r in range(1, len(top) + 1):
        if top[r - 1] in relevant:
            precision = len([x for x in top[:r] if x in relevant]) / r
            total += precision
    return total / min(k, len(relevant))


def brute_wmcv(ranking, p, c, k):
    violated = 0
    for j in range(len(c)):
        load = sum(p[i] for i in range(len(ranking)) if j in ranking[i][:k])
        violated += load >= c[j]
    return violated / len(c)
