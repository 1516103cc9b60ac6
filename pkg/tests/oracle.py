"""Pure-Python reference implementation by exhaustive enumeration.

Written independently of the vectorized model code: plain loops, math.exp,
no numpy in the arithmetic.
"""

import math


def dist(logits_row):
    m = max(logits_row)
    e = [math.exp(x - m) for x in logits_row]
    s = sum(e)
    return [x / s for x in e]


def scores(params, hp, u, t):
    F, C, R = hp.num_features, hp.num_categories, hp.rating_max
    out = []
    for p in range(R):
        total = 0.0
        for n in range(F):
            pz = dist(list(params.user_logits[u, n]))
            py = dist(list(params.item_logits[t, n]))
            for i in range(C):
                for j in range(C):
                    lap = math.exp(-abs(pz[i] - py[j]) / hp.sigma)
                    total += pz[i] * py[j] * float(params.tau[p, i, j, n]) * lap
        out.append(total / F)
    return out


def rating(params, hp, u, t):
    q = scores(params, hp, u, t)
    s = float(params.omega_u[u]) * float(params.omega_t[t])
    m = max(x * s for x in q)
    w = [math.exp(x * s - m) for x in q]
    return sum((p + 1) * w[p] for p in range(len(w))) / sum(w)


def joint(params, hp, u, t, p, i, j, n):
    pz = dist(list(params.user_logits[u, n]))
    py = dist(list(params.item_logits[t, n]))
    tau = max(float(params.tau[p, i, j, n]), 0.0)
    return pz[i] * py[j] * tau * math.exp(-abs(pz[i] - py[j]) / hp.sigma) / hp.num_features


def user_profile(params, hp, u, n, items):
    C, R = hp.num_categories, hp.rating_max
    score = [sum(joint(params, hp, u, t, p, i, j, n) for t in items for j in range(C) for p in range(R))
             for i in range(C)]
    s = sum(score)
    return [x / s for x in score]


def item_profile(params, hp, t, n, users):
    C, R = hp.num_categories, hp.rating_max
    score = [sum(joint(params, hp, u, t, p, i, j, n) for u in users for i in range(C) for p in range(R))
             for j in range(C)]
    s = sum(score)
    return [x / s for x in score]


def loss(params, hp, triples):
    """Squared error plus lambda times squared category probabilities of each
    distinct user and item in the batch."""
    total = sum((rating(params, hp, u, t) - r) ** 2 for u, t, r in triples)
    reg = 0.0
    for u in {u for u, _, _ in triples}:
        for n in range(hp.num_features):
            reg += sum(x * x for x in dist(list(params.user_logits[u, n])))
    for t in {t for _, t, _ in triples}:
        for n in range(hp.num_features):
            reg += sum(x * x for x in dist(list(params.item_logits[t, n])))
    return total + hp.lam * reg


def loss_longdouble(tensors, hp, users, items, ratings):
    """The same objective evaluated in extended precision with plain numpy.

    ``tensors`` is (user_logits, item_logits, tau, omega_u, omega_t) as
    longdouble arrays. Used to push finite-difference roundoff well below
    the float64 level.
    """
    import numpy as np

    ld = np.longdouble
    ul, il, tau, wu, wt = tensors
    users, items = np.asarray(users), np.asarray(items)

    def probs(x):
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    pz, py = probs(ul[users]), probs(il[items])             # [B, F, C]
    a, b = pz[:, :, :, None], py[:, :, None, :]               # [B, F, C, C]
    w = a * b * np.exp(-np.abs(a - b) / ld(hp.sigma))
    q = np.einsum("bnij,pijn->bp", w, tau) / ld(hp.num_features)
    s = (q * (wu[users] * wt[items])[:, None])
    e = np.exp(s - s.max(axis=1, keepdims=True))
    levels = np.arange(1, hp.rating_max + 1, dtype=ld)
    pred = (e * levels).sum(axis=1) / e.sum(axis=1)
    total = ((pred - np.asarray(ratings, dtype=ld)) ** 2).sum()
    reg = (probs(ul[np.unique(users)]) ** 2).sum() + (probs(il[np.unique(items)]) ** 2).sum()
    return total + ld(hp.lam) * reg


def finite_diff_longdouble(params, hp, batch, h=1e-5):
    """Central differences of :func:`loss_longdouble` for every parameter."""
    import numpy as np

    base = [np.asarray(t, dtype=np.longdouble) for t in params.tensors()]
    step = np.longdouble(h)
    out = []
    for k, t in enumerate(base):
        g = np.zeros(t.shape)
        flat = t.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            fp = loss_longdouble(base, hp, *batch)
            flat[idx] = orig - step
            fm = loss_longdouble(base, hp, *batch)
            flat[idx] = orig
            g.reshape(-1)[idx] = float((fp - fm) / (2 * step))
        out.append(g)
    return out
