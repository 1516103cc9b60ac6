"""Compiled elementwise stages of the batched SAR forward/backward pass.

The contractions with tau are left to BLAS; these kernels fill and consume
the [B, F, C, C] pair tensors without numpy temporaries.
"""

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def pair_weights(pz, py, ez, ey, inv_sigma, kern, weight):
    """Fill Laplace factors ``kern`` and mixture weights ``weight`` =
    pz_i * py_j * kern, both [B, F, C, C], from category distributions
    ``pz``/``py`` [B, F, C].

    ``ez``/``ey`` hold exp(pz / sigma) and exp(py / sigma); when given
    (non-empty), exp(-|a - c| / sigma) is formed as the smaller of the two
    cross products, otherwise it is evaluated directly.
    """
    B, F, C = pz.shape
    factored = ez.shape[0] > 0
    for b in range(B):
        for n in range(F):
            for i in range(C):
                a = pz[b, n, i]
                if factored:
                    ea = ez[b, n, i]
                    ea_inv = 1.0 / ea
                for j in range(C):
                    c = py[b, n, j]
                    if factored:
                        ec = ey[b, n, j]
                        k = min(ea_inv * ec, ea / ec)
                    else:
                        k = np.exp(-abs(a - c) * inv_sigma)
                    kern[b, n, i, j] = k
                    weight[b, n, i, j] = a * c * k


@njit(cache=True, nogil=True)
def prob_grads(g_weight, pz, py, kern, weight, inv_sigma, g_pz, g_py):
    """Map gradients w.r.t. ``weight`` onto the category probabilities.

    The subgradient of |pz_i - py_j| is taken as 0 where they are equal.
    """
    B, F, C = pz.shape
    for b in range(B):
        for n in range(F):
            for i in range(C):
                g_pz[b, n, i] = 0.0
                g_py[b, n, i] = 0.0
            for i in range(C):
                a = pz[b, n, i]
                acc = 0.0
                for j in range(C):
                    c = py[b, n, j]
                    g = g_weight[b, n, i, j]
                    gk = g * kern[b, n, i, j]
                    gd = -np.sign(a - c) * g * weight[b, n, i, j] * inv_sigma
                    acc += gk * c + gd
                    g_py[b, n, j] += gk * a - gd
                g_pz[b, n, i] = acc


@njit(cache=True, nogil=True)
def adadelta_dense(theta, eg2, edx2, g, eta, epsilon):
    """In-place AdaDelta update over flat arrays."""
    for k in range(theta.shape[0]):
        gk = g[k]
        e = eta * eg2[k] + (1.0 - eta) * gk * gk
        delta = -np.sqrt(edx2[k] + epsilon) / np.sqrt(e + epsilon) * gk
        eg2[k] = e
        edx2[k] = eta * edx2[k] + (1.0 - eta) * delta * delta
        theta[k] += delta


@njit(cache=True, nogil=True)
def adadelta_rows(theta, eg2, edx2, rows, g, last, step, eta, epsilon):
    """AdaDelta on the ``rows`` of 2-D ``theta`` whose gradients are ``g``.

    Rows untouched since step ``last[r]`` first have both accumulators scaled
    by ``eta ** (step - last[r])``, which is what the skipped zero-gradient
    steps would have done.
    """
    width = theta.shape[1]
    for m in range(rows.shape[0]):
        r = rows[m]
        missed = step - last[r]
        decay = eta ** missed if missed > 0 else 1.0
        for k in range(width):
            gk = g[m, k]
            e = eta * (eg2[r, k] * decay) + (1.0 - eta) * gk * gk
            d2 = edx2[r, k] * decay
            delta = -np.sqrt(d2 + epsilon) / np.sqrt(e + epsilon) * gk
            eg2[r, k] = e
            edx2[r, k] = eta * d2 + (1.0 - eta) * delta * delta
            theta[r, k] += delta
        last[r] = step + 1



@njit(cache=True, nogil=True)
def gather_shifted(logits, rows, out):
    """``out[b] = logits[rows[b]]`` minus its max along the last axis."""
    F, C = logits.shape[1], logits.shape[2]
    for b in range(rows.shape[0]):
        r = rows[b]
        for n in range(F):
            m = logits[r, n, 0]
            for i in range(1, C):
                m = max(m, logits[r, n, i])
            for i in range(C):
                out[b, n, i] = logits[r, n, i] - m


@njit(cache=True, nogil=True)
def normalize_last(x):
    """Scale every last-axis row of a 3-D array to sum to one, in place."""
    B, F, C = x.shape
    for b in range(B):
        for n in range(F):
            s = 0.0
            for i in range(C):
                s += x[b, n, i]
            inv = 1.0 / s
            for i in range(C):
                x[b, n, i] *= inv


@njit(cache=True, nogil=True)
def level_softmax(scores, scale, probs, pred):
    """Soft-max over rating levels of ``scores * scale`` and its expectation
    over levels 1..R."""
    B, R = scores.shape
    for b in range(B):
        s = scale[b]
        m = scores[b, 0] * s
        for p in range(1, R):
            m = max(m, scores[b, p] * s)
        total = 0.0
        for p in range(R):
            e = np.exp(scores[b, p] * s - m)
            probs[b, p] = e
            total += e
        inv = 1.0 / total
        acc = 0.0
        for p in range(R):
            probs[b, p] *= inv
            acc += (p + 1) * probs[b, p]
        pred[b] = acc
