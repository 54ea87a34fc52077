"""Pure-numpy implementations of the hot kernels.

This is the fallback backend: always available, vectorized, and the
reference semantics for the compiled twin in ``_core.pyx``.  Every function
here takes and returns plain ``float64`` ndarrays and does no shape
checking; callers validate.
"""

import numpy as np

NAME = "numpy"


def channel_map_fwd(w, v):
    """w: (Co, Ci), v: (N, Ci, 3) -> (N, Co, 3); out[n] = w @ v[n]."""
    return np.einsum("oc,ncd->nod", w, v, optimize=True)


def channel_map_bwd(w, v, g):
    """Gradients of ``channel_map_fwd`` given upstream g: (N, Co, 3)."""
    gw = np.einsum("nod,ncd->oc", g, v, optimize=True)
    gv = np.einsum("oc,nod->ncd", w, g, optimize=True)
    return gw, gv


def vn_clip_fwd(q, k, eps, alpha):
    """Direction-gated half-space clip applied per vector channel.

    q, k: (N, C, 3).  Where <q,k> >= 0 the output is q; elsewhere the
    component of q along k/(|k|+eps) is contracted by (1 - alpha).
    """
    dot = np.einsum("ncd,ncd->nc", q, k)
    knorm = np.sqrt(np.einsum("ncd,ncd->nc", k, k))
    u = k / (knorm + eps)[..., None]
    s = np.einsum("ncd,ncd->nc", q, u)
    neg = dot < 0.0
    out = q - ((1.0 - alpha) * np.where(neg, s, 0.0))[..., None] * u
    return out


def vn_clip_bwd(q, k, eps, alpha, g):
    """Gradients of ``vn_clip_fwd`` w.r.t. q and k given upstream g."""
    beta = 1.0 - alpha
    dot = np.einsum("ncd,ncd->nc", q, k)
    knorm = np.sqrt(np.einsum("ncd,ncd->nc", k, k))
    denom = knorm + eps
    u = k / denom[..., None]
    s = np.einsum("ncd,ncd->nc", q, u)
    neg = (dot < 0.0)[..., None]

    gdotu = np.einsum("ncd,ncd->nc", g, u)
    gq = np.where(neg, g - beta * gdotu[..., None] * u, g)
    # out depends on k only through u = k / (|k| + eps)
    gu = -beta * (gdotu[..., None] * q + s[..., None] * g)
    kgu = np.einsum("ncd,ncd->nc", k, gu)
    safe_kn = np.maximum(knorm, 1e-30)
    gk = gu / denom[..., None] - k * (kgu / (safe_kn * denom**2))[..., None]
    gk = np.where(neg, gk, 0.0)
    return gq, gk


def pairwise_sqdist(x):
    """x: (N, D) -> (N, N) squared Euclidean distances."""
    diff = x[:, None, :] - x[None, :, :]
    return np.einsum("nmd,nmd->nm", diff, diff)


def knn_select(dist, k, exclude_self):
    """Row-wise k smallest entries of a square distance matrix.

    Ties break toward the lower column index; each row is returned
    nearest-first.  dist: (N, N) -> (N, k) int64.
    """
    d = dist
    if exclude_self:
        d = dist.copy()
        np.fill_diagonal(d, np.inf)
    order = np.argsort(d, axis=1, kind="stable")
    return np.ascontiguousarray(order[:, :k].astype(np.int64))
