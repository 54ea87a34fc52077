"""Vector-neuron layers.

A feature is a Tensor of shape ``(N, C, 3)``: N set elements, C vector
channels, and a trailing 3-vector per channel.  Every layer in this module
commutes with a right-multiplied rotation of that trailing axis, except
``vn_invariant`` whose output is rotation-invariant by construction.

Directions, clips and pooling selectors follow the same recipe: learned
linear maps produce per-channel query/direction vectors, and only invariant
inner products of those enter any data-dependent decision.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from ._kernels import active as _K
from .autodiff import ShapeError, Tensor

DEFAULT_EPS = 1e-6          # margin added to |k| before dividing
DEFAULT_LEAKY_SLOPE = 0.2
NORM_GUARD = 1e-12          # below this a vector norm counts as zero
BN_EPS = 1e-5               # additive guard inside normalization variance


def _check_vn(v: Tensor, name: str = "feature") -> Tensor:
    v = ad.tensor(v)
    if v.ndim != 3 or v.shape[2] != 3:
        raise ShapeError(f"{name} must have shape (N, C, 3), got {v.shape}")
    return v


def uniform_init(rng: ad.Rng, c_out: int, c_in: int) -> Tensor:
    """Channel-count-scaled weight init, i.i.d. uniform in +-sqrt(3/c_in).

    Entry variance 1/c_in keeps the mean squared channel norm constant
    through a linear layer, so norm statistics stay stable across depth.
    """
    bound = float(np.sqrt(3.0 / c_in))
    return Tensor(rng.uniform((c_out, c_in), -bound, bound), requires_grad=True)


# ---------------------------------------------------------------------------
# parameter records

@dataclass
class VNLinearParams:
    weight: Tensor  # (C_out, C_in)


@dataclass
class VNActParams:
    """Direction-gated nonlinearity parameters.

    ``feature_weight`` is the linear map built into the nonlinearity; when it
    is None the layer is "detached" and clips its input channels directly.
    """

    feature_weight: Optional[Tensor]  # (C_out, C_in) or None
    direction_weight: Tensor          # (C_out, C_in); C_out = C_in if detached
    epsilon: float = DEFAULT_EPS
    negative_slope: float = 0.0

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not 0.0 <= self.negative_slope < 1.0:
            raise ValueError(f"negative_slope must be in [0, 1), got {self.negative_slope}")


@dataclass
class VNBatchNormState:
    """Channel-norm batch statistics plus affine parameters."""

    gamma: Tensor                # (C,)
    beta: Tensor                 # (C,)
    running_mean: np.ndarray     # (C,)
    running_var: np.ndarray      # (C,)
    momentum: float = 0.1
    mode: str = "train"          # train | eval
    initialized: bool = False


@dataclass
class VNInvariantParams:
    """Learned-frame invariant read-out.

    ``frame_mlp`` maps the (optionally mean-augmented) feature down to 3
    channels whose rows form the per-element frame.
    """

    frame_mlp: Sequence[object]       # VNLinearParams / VNActParams
    include_global_mean: bool = True
    mlp_depth: int = 3


@dataclass
class ScalarFn:
    """A scalar function with its derivative, liftable to vector channels."""

    fn: Callable[[np.ndarray], np.ndarray]
    deriv: Callable[[np.ndarray], np.ndarray]


scalar_identity = ScalarFn(lambda x: x, lambda x: np.ones_like(x))
scalar_relu = ScalarFn(lambda x: np.maximum(x, 0.0), lambda x: (x > 0.0).astype(float))
scalar_tanh = ScalarFn(np.tanh, lambda x: 1.0 - np.tanh(x) ** 2)
scalar_softplus = ScalarFn(
    lambda x: np.logaddexp(0.0, x), lambda x: 1.0 / (1.0 + np.exp(-x))
)


def vn_linear_params(rng: ad.Rng, c_in: int, c_out: int) -> VNLinearParams:
    return VNLinearParams(weight=uniform_init(rng, c_out, c_in))


def vn_act_params(rng: ad.Rng, c_in: int, c_out: int, *, epsilon: float = DEFAULT_EPS,
                  negative_slope: float = 0.0, detached: bool = False) -> VNActParams:
    if detached:
        if c_out != c_in:
            raise ShapeError(f"detached act preserves channels, got {c_in} -> {c_out}")
        return VNActParams(None, uniform_init(rng, c_in, c_in),
                           epsilon=epsilon, negative_slope=negative_slope)
    return VNActParams(uniform_init(rng, c_out, c_in), uniform_init(rng, c_out, c_in),
                       epsilon=epsilon, negative_slope=negative_slope)


def layer_tensors(param) -> list[tuple[str, Tensor]]:
    """Named learnable tensors of one layer-parameter record."""
    if isinstance(param, VNLinearParams):
        return [("weight", param.weight)]
    if isinstance(param, VNActParams):
        out = []
        if param.feature_weight is not None:
            out.append(("feature_weight", param.feature_weight))
        out.append(("direction_weight", param.direction_weight))
        return out
    if isinstance(param, VNBatchNormState):
        return [("gamma", param.gamma), ("beta", param.beta)]
    if isinstance(param, VNInvariantParams):
        out = []
        for i, sub in enumerate(param.frame_mlp):
            out.extend((f"frame{i}.{n}", t) for n, t in layer_tensors(sub))
        return out
    raise TypeError(f"not a layer parameter record: {type(param).__name__}")


# ---------------------------------------------------------------------------
# diagnostics used by boundary-aware gradient checking

_trace = None


@contextmanager
def record_margins():
    """Collect case-boundary margins of every gated op run in the block.

    Yields a list that receives one normalized margin per gated operation:
    min |<q,k>| / (|q||k|) over channels for clips, and the normalized
    runner-up score gap for pooling argmaxes.  Finite-difference probes
    should be resampled when any margin is tiny.
    """
    global _trace
    prev = _trace
    _trace = trace = []
    try:
        yield trace
    finally:
        _trace = prev


def _record_clip_margin(q: np.ndarray, k: np.ndarray) -> None:
    if _trace is None:
        return
    dot = np.einsum("ncd,ncd->nc", q, k)
    scale = np.linalg.norm(q, axis=-1) * np.linalg.norm(k, axis=-1) + 1e-30
    _trace.append(float(np.min(np.abs(dot) / scale)))


def _record_abs_margin(x: np.ndarray) -> None:
    # distance of scalar pre-activations to the ReLU kink
    if _trace is None or x.size == 0:
        return
    _trace.append(float(np.min(np.abs(x))))


def _record_pool_margin(scores: np.ndarray, axis: int) -> None:
    # normalized gap between the best and second-best pooling score
    if _trace is None or scores.shape[axis] < 2:
        return
    top2 = np.sort(scores, axis=axis)
    top2 = np.moveaxis(top2, axis, 0)[-2:]
    gap = (top2[1] - top2[0]) / (np.abs(top2[1]) + np.abs(top2[0]) + 1e-30)
    _trace.append(float(np.min(gap)))


# ---------------------------------------------------------------------------
# core layers

def vn_linear(v: Tensor, p: VNLinearParams) -> Tensor:
    """Shared linear map over channels: out[n] = W @ v[n].  No bias; a
    constant offset would break equivariance."""
    v = _check_vn(v)
    w = p.weight
    if w.shape[1] != v.shape[1]:
        raise ShapeError(f"vn_linear: weight {w.shape} does not accept {v.shape[1]} channels")
    return ad.channel_map(w, v)


def vn_act(v: Tensor, p: VNActParams, kind: str = "leaky") -> Tensor:
    """Direction-gated ReLU family.

    q is W @ v (or v itself when detached), k is U @ v.  Where <q,k> >= 0
    the output is q; elsewhere the component of q along k/(|k|+eps) is
    contracted by (1 - alpha), alpha = 0 for the plain ReLU.
    """
    v = _check_vn(v)
    if kind == "relu":
        alpha = 0.0
    elif kind == "leaky":
        alpha = p.negative_slope
    else:
        raise ValueError(f"unknown nonlinearity kind {kind!r}")
    if p.feature_weight is not None:
        q = ad.channel_map(p.feature_weight, v)
    else:
        q = v
    k = ad.channel_map(p.direction_weight, v)
    if q.shape != k.shape:
        raise ShapeError(f"vn_act: q {q.shape} and k {k.shape} disagree")
    _record_clip_margin(q.data, k.data)
    return ad.vn_clip(q, k, p.epsilon, alpha)


def vn_act_detached(v: Tensor, direction_weight: Tensor,
                    epsilon: float = DEFAULT_EPS, alpha: float = 0.0) -> Tensor:
    """Clip each input channel directly against a learned direction."""
    p = VNActParams(None, direction_weight, epsilon=epsilon, negative_slope=alpha)
    return vn_act(v, p, kind="leaky")


def vn_lift_scalar(v: Tensor, p: VNActParams, h: ScalarFn) -> Tensor:
    """Lift a scalar nonlinearity to vector channels.

    Splits q = W @ v into components parallel and orthogonal to the learned
    direction k and maps the signed parallel coordinate through ``h`` (so
    h = max(.,0) reproduces the clip).  Parallel coordinates smaller than
    epsilon contribute nothing.
    """
    v = _check_vn(v)
    if p.feature_weight is not None:
        q = ad.channel_map(p.feature_weight, v)
    else:
        q = v
    k = ad.channel_map(p.direction_weight, v)
    if q.shape != k.shape:
        raise ShapeError(f"vn_lift_scalar: q {q.shape} and k {k.shape} disagree")
    knorm = ad.norm_last(k)                                # (N, C)
    unit = ad.div(k, ad.expand(ad.reshape(ad.add(knorm, p.epsilon),
                                          knorm.shape + (1,)), k.shape))
    s = ad.sum_axis(ad.mul(q, unit), -1)                   # signed parallel coord
    _record_clip_margin(q.data, k.data)
    ortho = ad.sub(q, ad.mul(ad.expand(ad.reshape(s, s.shape + (1,)), q.shape), unit))
    hs = ad.elementwise(s, h.fn, h.deriv)
    keep = np.abs(s.data) >= p.epsilon
    hs = ad.where(keep, hs, ad.zeros(hs.shape))
    return ad.add(ortho, ad.mul(ad.expand(ad.reshape(hs, hs.shape + (1,)), q.shape), unit))


def vn_leaky_relu(v: Tensor, direction_weight: Tensor,
                  alpha: float = DEFAULT_LEAKY_SLOPE,
                  epsilon: float = DEFAULT_EPS) -> Tensor:
    """Detached leaky variant: alpha*v + (1-alpha)*clip(v)."""
    return vn_act_detached(v, direction_weight, epsilon=epsilon, alpha=alpha)


# ---------------------------------------------------------------------------
# pooling

def _pool_scores(v: Tensor, direction_weight: Tensor) -> np.ndarray:
    """Alignment scores <W v[n,c], v[n,c]>; invariant, so selection indices
    do not change under rotation.  Selection is not differentiated."""
    w = ad.tensor(direction_weight)
    if w.shape != (v.shape[1], v.shape[1]):
        raise ShapeError(f"pool weight {w.shape} must be ({v.shape[1]}, {v.shape[1]})")
    k = _K.channel_map_fwd(w.data, v.data)
    return np.einsum("ncd,ncd->nc", k, v.data)


def vn_max_pool_global(v: Tensor, direction_weight: Tensor) -> Tensor:
    """Per channel, keep the element whose vector best aligns with its
    learned direction; ties go to the lowest element index."""
    v = _check_vn(v)
    if v.shape[0] < 1:
        raise ShapeError("vn_max_pool_global needs at least one element")
    scores = _pool_scores(v, direction_weight)       # (N, C)
    _record_pool_margin(scores, axis=0)
    idx = np.argmax(scores, axis=0)                  # (C,)
    picked = ad.gather_channel(v, idx)               # (C, 3)
    return ad.reshape(picked, (1,) + picked.shape)


def vn_mean_pool_global(v: Tensor) -> Tensor:
    """Mean over elements; linear, hence equivariant."""
    v = _check_vn(v)
    if v.shape[0] < 1:
        raise ShapeError("vn_mean_pool_global needs at least one element")
    m = ad.mean_axis(v, 0)
    return ad.reshape(m, (1,) + m.shape)


def max_pool_indices(v: Tensor, direction_weight: Tensor) -> np.ndarray:
    """The argmax selector of the global max pool, for invariance audits."""
    v = _check_vn(v)
    return np.argmax(_pool_scores(v, direction_weight), axis=0)


def _neighbor_array(neighbors, n: int) -> list[np.ndarray]:
    out = []
    for i in range(n):
        row = np.asarray(neighbors[i], dtype=np.int64)
        if row.size == 0:
            raise ShapeError(f"point {i} has an empty neighbor list")
        if row.max() >= n or row.min() < 0:
            raise ShapeError(f"point {i} has a neighbor index out of range")
        out.append(row)
    return out


def vn_local_pool(v: Tensor, neighbors, direction_weight: Optional[Tensor] = None,
                  kind: str = "max") -> Tensor:
    """Pool each element's neighborhood, max (aligned-argmax) or mean.

    ``neighbors`` holds one index sequence per element; every element needs
    at least one neighbor.
    """
    v = _check_vn(v)
    n, c = v.shape[0], v.shape[1]
    rows = _neighbor_array(neighbors, n)
    if kind == "mean":
        src = np.concatenate(rows)
        seg = np.repeat(np.arange(n), [len(r) for r in rows])
        gathered = ad.gather_rows(v, src)
        sums = ad.segment_sum(gathered, seg, n)
        inv_counts = 1.0 / np.array([len(r) for r in rows], dtype=np.float64)
        return ad.mul(sums, ad.expand(Tensor(inv_counts.reshape(n, 1, 1)), sums.shape))
    if kind != "max":
        raise ValueError(f"unknown pool kind {kind!r}")
    if direction_weight is None:
        raise ValueError("max local pool needs a direction weight")
    scores = _pool_scores(v, direction_weight)       # (N, C)
    idx = np.empty((n, c), dtype=np.int64)
    for i, row in enumerate(rows):
        local = scores[row]                          # (k_i, C)
        _record_pool_margin(local, axis=0)
        idx[i] = row[np.argmax(local, axis=0)]
    return ad.gather_channel_rows(v, idx)


# ---------------------------------------------------------------------------
# normalization

def _norm_rescale(v: Tensor, norms: Tensor, target: Tensor) -> Tensor:
    """Rescale each channel vector from its norm to ``target``; channels with
    (near-)zero norm pass through unchanged to avoid 0/0."""
    zero = norms.data < NORM_GUARD
    safe = ad.where(zero, ad.ones(norms.shape), norms)
    factor = ad.where(zero, ad.ones(norms.shape), ad.div(target, safe))
    return ad.mul(v, ad.expand(ad.reshape(factor, factor.shape + (1,)), v.shape))


def vn_batch_norm_state(c: int, momentum: float = 0.1) -> VNBatchNormState:
    return VNBatchNormState(
        gamma=Tensor(np.ones(c), requires_grad=True),
        beta=Tensor(np.zeros(c), requires_grad=True),
        running_mean=np.zeros(c),
        running_var=np.ones(c),
        momentum=momentum,
    )


def vn_batch_norm(batch: Sequence[Tensor], state: VNBatchNormState) -> list[Tensor]:
    """Standard scalar batch normalization applied to channel norms.

    Norms are gathered across the batch and point axes per channel,
    standardized (population variance, additive guard), mapped through
    gamma/beta, and each vector is rescaled to its new norm.  A negative
    normalized norm flips the vector.  Only invariant norms enter the
    statistics, so the layer stays equivariant.
    """
    if not batch:
        raise ShapeError("vn_batch_norm needs a nonempty batch")
    feats = [_check_vn(b, "batch element") for b in batch]
    c = feats[0].shape[1]
    for f in feats:
        if f.shape[1] != c:
            raise ShapeError(f"batch channel mismatch: {f.shape[1]} != {c}")
    if state.gamma.shape != (c,):
        raise ShapeError(f"state holds {state.gamma.shape[0]} channels, batch has {c}")

    norms = [ad.norm_last(f) for f in feats]            # (N_i, C) each
    stacked = ad.concat(norms, axis=0)                  # (sum N_i, C)

    if state.mode == "train":
        mu = ad.mean_axis(stacked, 0)                   # (C,)
        centered = ad.sub(stacked, ad.expand(ad.reshape(mu, (1, c)), stacked.shape))
        var = ad.mean_axis(ad.square(centered), 0)      # population variance
        m = state.momentum
        state.running_mean = (1.0 - m) * state.running_mean + m * mu.data
        state.running_var = (1.0 - m) * state.running_var + m * var.data
        state.initialized = True
    elif state.mode == "eval":
        if not state.initialized:
            raise RuntimeError("vn_batch_norm: eval mode with uninitialized running stats")
        mu = Tensor(state.running_mean)
        var = Tensor(state.running_var)
    else:
        raise ValueError(f"unknown mode {state.mode!r}")

    denom = ad.sqrt(ad.add(var, BN_EPS))                # (C,)
    outs = []
    for f, nrm in zip(feats, norms):
        shape = nrm.shape
        nhat = ad.div(ad.sub(nrm, ad.expand(ad.reshape(mu, (1, c)), shape)),
                      ad.expand(ad.reshape(denom, (1, c)), shape))
        target = ad.add(ad.mul(ad.expand(ad.reshape(state.gamma, (1, c)), shape), nhat),
                        ad.expand(ad.reshape(state.beta, (1, c)), shape))
        outs.append(_norm_rescale(f, nrm, target))
    return outs


def vn_layer_norm(v: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-element normalization: standardize the C channel norms of each
    element, then rescale through gamma/beta.  Same mechanism as the batch
    variant but no cross-element statistics."""
    v = _check_vn(v)
    gamma, beta = ad.tensor(gamma), ad.tensor(beta)
    n, c = v.shape[0], v.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must be ({c},), got {gamma.shape}/{beta.shape}")
    norms = ad.norm_last(v)                              # (N, C)
    mu = ad.mean_axis(norms, 1)                          # (N,)
    centered = ad.sub(norms, ad.expand(ad.reshape(mu, (n, 1)), norms.shape))
    var = ad.mean_axis(ad.square(centered), 1)           # (N,)
    nhat = ad.div(centered, ad.expand(ad.reshape(ad.sqrt(ad.add(var, BN_EPS)), (n, 1)),
                                      norms.shape))
    target = ad.add(ad.mul(ad.expand(ad.reshape(gamma, (1, c)), norms.shape), nhat),
                    ad.expand(ad.reshape(beta, (1, c)), norms.shape))
    return _norm_rescale(v, norms, target)


def vn_instance_norm(v: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-channel variant: standardize each channel's norms across the
    element axis of one sample."""
    v = _check_vn(v)
    gamma, beta = ad.tensor(gamma), ad.tensor(beta)
    n, c = v.shape[0], v.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must be ({c},), got {gamma.shape}/{beta.shape}")
    norms = ad.norm_last(v)                              # (N, C)
    mu = ad.mean_axis(norms, 0)                          # (C,)
    centered = ad.sub(norms, ad.expand(ad.reshape(mu, (1, c)), norms.shape))
    var = ad.mean_axis(ad.square(centered), 0)
    nhat = ad.div(centered, ad.expand(ad.reshape(ad.sqrt(ad.add(var, BN_EPS)), (1, c)),
                                      norms.shape))
    target = ad.add(ad.mul(ad.expand(ad.reshape(gamma, (1, c)), norms.shape), nhat),
                    ad.expand(ad.reshape(beta, (1, c)), norms.shape))
    return _norm_rescale(v, norms, target)


# ---------------------------------------------------------------------------
# invariant layer and MLP composition

def vn_mlp(v: Tensor, layers: Sequence[object]) -> Tensor:
    """Apply a sequence of VN layer parameter records; empty list = identity."""
    out = _check_vn(v)
    for layer in layers:
        if isinstance(layer, VNLinearParams):
            out = vn_linear(out, layer)
        elif isinstance(layer, VNActParams):
            out = vn_act(out, layer, kind="leaky")
        else:
            raise TypeError(f"vn_mlp cannot apply {type(layer).__name__}")
    return out


def vn_invariant_params(rng: ad.Rng, c: int, *, mlp_depth: int = 3,
                        include_global_mean: bool = True,
                        epsilon: float = DEFAULT_EPS,
                        negative_slope: float = 0.0) -> VNInvariantParams:
    c_in = 2 * c if include_global_mean else c
    if mlp_depth == 1:
        layers = [vn_linear_params(rng.child(0), c_in, 3)]
    elif mlp_depth == 3:
        h1 = max(c_in // 2, 3)
        h2 = max(c_in // 4, 3)
        layers = [
            vn_act_params(rng.child(0), c_in, h1, epsilon=epsilon,
                          negative_slope=negative_slope),
            vn_act_params(rng.child(1), h1, h2, epsilon=epsilon,
                          negative_slope=negative_slope),
            vn_linear_params(rng.child(2), h2, 3),
        ]
    else:
        raise ValueError(f"mlp_depth must be 1 or 3, got {mlp_depth}")
    return VNInvariantParams(frame_mlp=layers,
                             include_global_mean=include_global_mean,
                             mlp_depth=mlp_depth)


def _frame_out_channels(p: VNInvariantParams) -> int:
    last = p.frame_mlp[-1]
    if isinstance(last, VNLinearParams):
        return last.weight.shape[0]
    return last.direction_weight.shape[0]


def vn_invariant(v: Tensor, p: VNInvariantParams) -> Tensor:
    """Read each element's feature in a learned equivariant frame.

    Builds T[n] (3x3 rows of VN channels) from [v[n]; mean(v)] and returns
    v[n] @ T[n]^T, which cancels any common rotation of the input.
    """
    v = _check_vn(v)
    if _frame_out_channels(p) != 3:
        raise ShapeError("invariant frame MLP must end in exactly 3 channels")
    if p.include_global_mean:
        mean = vn_mean_pool_global(v)                       # (1, C, 3)
        inp = ad.concat([v, ad.expand(mean, v.shape)], axis=1)
    else:
        inp = v
    frame = vn_mlp(inp, p.frame_mlp)                        # (N, 3, 3)
    return ad.pair_transpose_map(v, frame)                  # (N, C, 3)


def channel_norms(v: Tensor) -> Tensor:
    """Rotation-invariant per-channel norms (N, C)."""
    return ad.norm_last(_check_vn(v))
