"""Hot inner loops, each with a numba kernel and a numpy twin.

The public wrappers dispatch on :data:`poems._accel.USE_NUMBA`; the ``_np``
and ``_nb`` functions stay importable so tests and the benchmark can pit the
two paths against each other regardless of the flag.

The decoder kernels cover the default trunk shape ``K -> H (relu) -> 1``.
They form the masked latents of a block of features implicitly, as the
product ``z @ M`` with ``M[k, (j, h)] = W[j, k] * W1[k, h]``, so the dense
work runs through BLAS and only the relu / output contraction is looped.
Their numpy counterpart is the generic batched trunk evaluation in
:func:`poems.model.sparse_decode`, which materialises every masked latent.
"""
from __future__ import annotations

import numpy as np

from ._accel import USE_NUMBA, njit

DECODE_CHUNK = 16
# reassociation lets LLVM vectorise the per-feature reductions
_FAST = {"reassoc", "contract", "nsz"}


# --------------------------------------------------------------------------
# sparse decoder, fused one-hidden-layer trunk
# --------------------------------------------------------------------------


@njit
def _build_chunk_weights(W, W1, start, stop, M):
    K, H = W1.shape
    for k in range(K):
        for jj in range(stop - start):
            wjk = W[start + jj, k]
            base = jj * H
            for h in range(H):
                M[k, base + h] = wjk * W1[k, h]


@njit(fastmath=_FAST)
def decode_forward_nb(z, W, W1, b1, w2, b2, bias, chunk, pre):
    """Reconstruction ``out[n, j] = trunk(z[n] * W[j]) + bias[j]``.

    ``pre`` is either an ``(N, D, H)`` buffer that receives the hidden
    pre-activations, or an empty array to skip storing them.
    """
    N, K = z.shape
    D = W.shape[0]
    H = W1.shape[1]
    store = pre.shape[0] == N
    out = np.empty((N, D))
    M = np.empty((K, chunk * H))
    for start in range(0, D, chunk):
        stop = min(D, start + chunk)
        m = stop - start
        Mc = M[:, : m * H]
        _build_chunk_weights(W, W1, start, stop, Mc)
        P = np.dot(z, np.ascontiguousarray(Mc))
        for n in range(N):
            for jj in range(m):
                base = jj * H
                acc = 0.0
                if store:
                    for h in range(H):
                        p = P[n, base + h] + b1[h]
                        pre[n, start + jj, h] = p
                        acc += max(p, 0.0) * w2[h]
                else:
                    for h in range(H):
                        acc += max(P[n, base + h] + b1[h], 0.0) * w2[h]
                out[n, start + jj] = acc + b2 + bias[start + jj]
    return out


@njit(fastmath=_FAST)
def decode_backward_nb(z, W, W1, w2, pre, G, chunk):
    """Gradients of ``sum(G * out)`` for the fused trunk.

    Returns ``(dz, dW, dW1, db1, dw2)``; the output-bias gradients are plain
    sums of ``G`` and are left to the caller.
    """
    N, K = z.shape
    D = W.shape[0]
    H = W1.shape[1]
    dz = np.zeros((N, K))
    dW = np.zeros((D, K))
    dW1 = np.zeros((K, H))
    db1 = np.zeros(H)
    dw2 = np.zeros(H)
    zT = np.ascontiguousarray(z.T)
    M = np.empty((K, chunk * H))
    dP = np.empty((N, chunk * H))
    for start in range(0, D, chunk):
        stop = min(D, start + chunk)
        m = stop - start
        Mc = M[:, : m * H]
        _build_chunk_weights(W, W1, start, stop, Mc)
        dPc = dP[:, : m * H]
        for n in range(N):
            for jj in range(m):
                g = G[n, start + jj]
                base = jj * H
                for h in range(H):
                    p = pre[n, start + jj, h]
                    on = 1.0 if p > 0.0 else 0.0
                    dw2[h] += max(p, 0.0) * g
                    d = on * g * w2[h]
                    dPc[n, base + h] = d
                    db1[h] += d
        dPcc = np.ascontiguousarray(dPc)
        dM = np.dot(zT, dPcc)
        for k in range(K):
            for jj in range(m):
                wjk = W[start + jj, k]
                base = jj * H
                s = 0.0
                for h in range(H):
                    v = dM[k, base + h]
                    dW1[k, h] += v * wjk
                    s += v * W1[k, h]
                dW[start + jj, k] = s
        dz += np.dot(dPcc, np.ascontiguousarray(Mc).T)
    return dz, dW, dW1, db1, dw2


def decode_forward(z, W, W1, b1, w2, b2, bias, store_pre=False, chunk=DECODE_CHUNK):
    N, D, H = z.shape[0], W.shape[0], W1.shape[1]
    pre = np.empty((N, D, H)) if store_pre else np.empty((0, 0, 0))
    out = decode_forward_nb(z, W, W1, b1, w2, float(b2), bias, chunk, pre)
    return out, (pre if store_pre else None)


def decode_backward(z, W, W1, w2, pre, G, chunk=DECODE_CHUNK):
    return decode_backward_nb(z, W, W1, w2, pre, G, chunk)


# --------------------------------------------------------------------------
# clustering / neighbours
# --------------------------------------------------------------------------


@njit
def sq_distances_nb(X, C):
    n, d = X.shape
    k = C.shape[0]
    out = np.empty((n, k))
    for i in range(n):
        for c in range(k):
            s = 0.0
            for t in range(d):
                diff = X[i, t] - C[c, t]
                s += diff * diff
            out[i, c] = s
    return out


def sq_distances_np(X, C):
    diff = X[:, None, :] - C[None, :, :]
    return np.einsum("ikd,ikd->ik", diff, diff)


@njit
def lloyd_nb(X, centers, max_iter):
    """Lloyd iterations from the given seeds.

    Returns ``(labels, centers, n_iter, inertia_trace)``. An emptied cluster
    is re-seeded at the point farthest from its current centre (lowest index
    on ties).
    """
    n, d = X.shape
    k = centers.shape[0]
    C = centers.copy()
    labels = np.full(n, -1, dtype=np.int64)
    trace = np.empty(max_iter)
    it = 0
    for it in range(max_iter):
        D2 = sq_distances_nb(X, C)
        changed = False
        inertia = 0.0
        dmin = np.empty(n)
        for i in range(n):
            best = 0
            bv = D2[i, 0]
            for c in range(1, k):
                if D2[i, c] < bv:
                    bv = D2[i, c]
                    best = c
            dmin[i] = bv
            inertia += bv
            if labels[i] != best:
                changed = True
                labels[i] = best
        trace[it] = inertia
        if not changed and it > 0:
            return labels, C, it + 1, trace[: it + 1]
        counts = np.zeros(k, dtype=np.int64)
        sums = np.zeros((k, d))
        for i in range(n):
            c = labels[i]
            counts[c] += 1
            for t in range(d):
                sums[c, t] += X[i, t]
        for c in range(k):
            if counts[c] > 0:
                for t in range(d):
                    C[c, t] = sums[c, t] / counts[c]
            else:
                far = 0
                for i in range(1, n):
                    if dmin[i] > dmin[far]:
                        far = i
                for t in range(d):
                    C[c, t] = X[far, t]
                dmin[far] = 0.0
    return labels, C, it + 1, trace[: it + 1]


def lloyd_np(X, centers, max_iter):
    n = X.shape[0]
    k = centers.shape[0]
    C = centers.copy()
    labels = np.full(n, -1, dtype=np.int64)
    trace = []
    for it in range(max_iter):
        D2 = sq_distances_np(X, C)
        new = np.argmin(D2, axis=1)
        dmin = D2[np.arange(n), new]
        trace.append(dmin.sum())
        changed = np.any(new != labels)
        labels = new
        if not changed and it > 0:
            return labels, C, it + 1, np.array(trace)
        for c in range(k):
            members = labels == c
            if members.any():
                C[c] = X[members].sum(axis=0) / members.sum()
            else:
                far = int(np.argmax(dmin))
                C[c] = X[far]
                dmin[far] = 0.0
    return labels, C, max_iter, np.array(trace)


def sq_distances(X, C):
    X = np.ascontiguousarray(X, dtype=np.float64)
    C = np.ascontiguousarray(C, dtype=np.float64)
    return sq_distances_nb(X, C) if USE_NUMBA else sq_distances_np(X, C)


def lloyd(X, centers, max_iter=300):
    X = np.ascontiguousarray(X, dtype=np.float64)
    centers = np.ascontiguousarray(centers, dtype=np.float64)
    fn = lloyd_nb if USE_NUMBA else lloyd_np
    labels, C, n_iter, trace = fn(X, centers, max_iter)
    return labels, C, int(n_iter), trace
