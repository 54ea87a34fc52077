"""Network assemblies: VN-PointNet, VN-DGCNN, occupancy encoder/decoder,
plus their scalar twins used as rotation-sensitive baselines.

A ModelSpec names the scalar stage widths; the vector-neuron builds use
floor(width/3) channels per stage so that a matched (scalar, VN) pair obeys
the ~2/9 trainable-parameter ratio.  Inputs are centered at their centroid
inside every forward pass, which upgrades rotation to rigid-motion
robustness.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import layers as L
from ._kernels import active as _K
from .autodiff import Rng, ShapeError, Tensor

ARCHITECTURES = ("vn_pointnet", "vn_dgcnn", "vn_occnet",
                 "scalar_pointnet", "scalar_dgcnn", "scalar_occnet")
HEADS = ("classify", "segment", "occupancy")


@dataclass
class ModelSpec:
    """Everything needed to build a model deterministically from an Rng."""

    architecture: str = "vn_dgcnn"
    widths: tuple = (64, 64, 128, 256)   # scalar stage widths; VN uses w // 3
    k: int = 8
    pooling: str = "mean"                # mean | vn_max
    nonlinearity: str = "builtin"        # builtin | detached
    negative_slope: float = 0.2
    epsilon: float = L.DEFAULT_EPS
    invariant_depth: int = 1
    invariant_global_mean: bool = True
    norm: str = "layer"                  # layer | none; applied after each stage
    cross_augment: bool = False
    dynamic_graph: bool = True
    head: str = "classify"
    num_classes: int = 4
    head_hidden: int = 8
    occ_hidden: int = 128
    occ_blocks: int = 3

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if self.pooling not in ("mean", "vn_max"):
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if self.nonlinearity not in ("builtin", "detached"):
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.norm not in ("layer", "none"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if not self.widths:
            raise ValueError("widths must name at least one stage")
        self.widths = tuple(int(w) for w in self.widths)

    @property
    def is_vn(self) -> bool:
        return self.architecture.startswith("vn_")

    def vn_widths(self) -> list:
        return [max(w // 3, 1) for w in self.widths]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)  # JSON-stable
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelSpec keys: {sorted(unknown)}")
        d = dict(d)
        if "widths" in d:
            d["widths"] = tuple(d["widths"])
        return cls(**d)


def scalar_twin(spec: ModelSpec) -> ModelSpec:
    """The matched scalar baseline of a VN spec (same widths and head)."""
    if not spec.is_vn:
        raise ValueError(f"{spec.architecture} is already a scalar architecture")
    return dataclasses.replace(spec, architecture="scalar_" + spec.architecture[3:])


def center_points(points) -> Tensor:
    pts = ad.tensor(points)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeError(f"points must be (N, 3), got {pts.shape}")
    centroid = pts.data.mean(axis=0, keepdims=True)
    return ad.sub(pts, ad.expand(Tensor(centroid), pts.shape))


# ---------------------------------------------------------------------------
# kNN graphs

def knn_graph(x, k: int, space: str = "primal") -> np.ndarray:
    """k nearest neighbors by squared Euclidean distance, self excluded.

    ``x`` is (N, 3) points in primal space or an (N, C, 3) feature whose rows
    are flattened for feature-space queries.  Ties break toward the lower
    index; rows are ordered nearest-first.
    """
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if space == "primal":
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise ShapeError(f"primal knn needs (N, 3), got {arr.shape}")
        flat = arr
    elif space == "feature":
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ShapeError(f"feature knn needs (N, C, 3), got {arr.shape}")
        flat = np.ascontiguousarray(arr.reshape(arr.shape[0], -1))
    else:
        raise ValueError(f"unknown knn space {space!r}")
    n = flat.shape[0]
    if k >= n:
        raise ShapeError(f"knn needs k < N, got k={k}, N={n}")
    if k < 1:
        raise ShapeError(f"knn needs k >= 1, got k={k}")
    dist = _K.pairwise_sqdist(flat)
    return _K.knn_select(dist, k, True)


def _graph_or_self_loop(points: np.ndarray, k: int) -> np.ndarray:
    # degenerate single-point clouds fall back to a self loop
    n = points.shape[0]
    if n == 1:
        return np.zeros((1, 1), dtype=np.int64)
    return knn_graph(points, min(k, n - 1))


# ---------------------------------------------------------------------------
# edge convolution and the input lift

def _edge_pool(e: Tensor, n: int, k: int, kind: str,
               pool_weight: Optional[Tensor]) -> Tensor:
    """Pool per-edge features (N*k, C, 3) back to (N, C, 3)."""
    c = e.shape[1]
    stacked = ad.reshape(e, (n, k, c, 3))
    if kind == "mean":
        return ad.mean_axis(stacked, 1)
    if pool_weight is None:
        raise ValueError("vn_max edge pooling needs a direction weight")
    scores = L._pool_scores(e, pool_weight).reshape(n, k, c)
    L._record_pool_margin(scores, axis=1)
    idx = np.argmax(scores, axis=1)                       # (N, C)
    return ad.gather_slot(stacked, idx)


def vn_edge_conv(v: Tensor, edges: np.ndarray, theta: L.VNLinearParams,
                 phi: L.VNLinearParams, act: Optional[L.VNActParams],
                 pool: str = "mean", pool_weight: Optional[Tensor] = None) -> Tensor:
    """Edge features theta(v_m - v_n) + phi(v_n), gated, pooled per point.

    ``edges`` is a regular (N, k) neighbor-index array.  ``act`` of None
    skips the per-edge nonlinearity (used by the detached stage layout).
    """
    v = L._check_vn(v)
    edges = np.asarray(edges, dtype=np.int64)
    n = v.shape[0]
    if edges.ndim != 2 or edges.shape[0] != n or edges.shape[1] < 1:
        raise ShapeError(f"edges must be (N, k) with k >= 1, got {edges.shape}")
    k = edges.shape[1]
    src = edges.reshape(-1)
    dst = np.repeat(np.arange(n), k)
    v_src = ad.gather_rows(v, src)
    v_dst = ad.gather_rows(v, dst)
    x = ad.add(L.vn_linear(ad.sub(v_src, v_dst), theta), L.vn_linear(v_dst, phi))
    e = L.vn_act(x, act) if act is not None else x
    return _edge_pool(e, n, k, pool, pool_weight)


@dataclass
class InputLiftParams:
    act: L.VNActParams       # entangled map from the lifted edge channels
    cross_augment: bool = False


def input_lift_params(rng: Rng, out_channels: int, *, cross_augment: bool = False,
                      epsilon: float = L.DEFAULT_EPS,
                      negative_slope: float = 0.0) -> InputLiftParams:
    lifted = 3 if cross_augment else 2
    return InputLiftParams(
        act=L.vn_act_params(rng, lifted, out_channels, epsilon=epsilon,
                            negative_slope=negative_slope),
        cross_augment=cross_augment)


def input_lift(points: Tensor, k: int, params: InputLiftParams) -> Tensor:
    """Edge convolution at the input layer.

    Raw coordinates are a single vector channel, so a per-point linear map
    alone would keep all channels parallel.  Each edge therefore contributes
    the channels [x_m - x_n ; x_n] (optionally their cross product), which a
    gated linear map lifts to C channels, mean-pooled over the k neighbors.
    """
    pts = ad.tensor(points)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeError(f"input_lift needs (N, 3) points, got {pts.shape}")
    n = pts.shape[0]
    edges = _graph_or_self_loop(pts.data, k)
    kk = edges.shape[1]
    src = edges.reshape(-1)
    dst = np.repeat(np.arange(n), kk)
    x_src = ad.gather_rows(pts, src)
    x_dst = ad.gather_rows(pts, dst)
    diff = ad.sub(x_src, x_dst)
    chans = [diff, x_dst]
    if params.cross_augment:
        chans.append(ad.cross_last(diff, x_dst))  # stays SO(3)-equivariant
    e = n * kk
    stacked = ad.concat([ad.reshape(c, (e, 1, 3)) for c in chans], axis=1)
    lifted = L.vn_act(stacked, params.act)
    return ad.mean_axis(ad.reshape(lifted, (n, kk) + lifted.shape[1:]), 1)


# ---------------------------------------------------------------------------
# scalar building blocks (baselines and heads)

@dataclass
class DenseParams:
    weight: Tensor   # (out, in)
    bias: Tensor     # (out,)


def dense_params(rng: Rng, n_in: int, n_out: int) -> DenseParams:
    # scalar ReLU stacks need the conventional sqrt(2/fan_in)-std gain;
    # the VN init rule would shrink activations roughly 2x per stage
    bound = float(np.sqrt(6.0 / n_in))
    weight = Tensor(rng.child(0).uniform((n_out, n_in), -bound, bound),
                    requires_grad=True)
    return DenseParams(weight=weight, bias=Tensor(np.zeros(n_out), requires_grad=True))


def dense(x: Tensor, p: DenseParams) -> Tensor:
    out = ad.matmul(x, ad.transpose(p.weight, (1, 0)))
    return ad.add(out, ad.expand(ad.reshape(p.bias, (1, p.bias.shape[0])), out.shape))


def _relu(x: Tensor) -> Tensor:
    L._record_abs_margin(x.data)
    return ad.relu(x)


def mlp_head(x: Tensor, stack: list) -> Tensor:
    for i, p in enumerate(stack):
        x = dense(x, p)
        if i + 1 < len(stack):
            x = _relu(x)
    return x


def scalar_layer_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Standardize each row over the feature axis, then affine-map."""
    n, c = x.shape
    mu = ad.mean_axis(x, 1)
    centered = ad.sub(x, ad.expand(ad.reshape(mu, (n, 1)), x.shape))
    var = ad.mean_axis(ad.square(centered), 1)
    xhat = ad.div(centered, ad.expand(ad.reshape(ad.sqrt(ad.add(var, L.BN_EPS)),
                                                 (n, 1)), x.shape))
    return ad.add(ad.mul(ad.expand(ad.reshape(gamma, (1, c)), x.shape), xhat),
                  ad.expand(ad.reshape(beta, (1, c)), x.shape))


# ---------------------------------------------------------------------------
# model base

class Model:
    """Parameter registry plus the shared head/assembly logic."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self._params: dict[str, Tensor] = {}

    def params(self) -> dict[str, Tensor]:
        return dict(self._params)

    def parameter_count(self) -> int:
        return sum(t.size for t in self._params.values())

    def _register(self, name: str, record) -> object:
        if isinstance(record, Tensor):
            self._params[name] = record
        elif isinstance(record, DenseParams):
            self._params[f"{name}.weight"] = record.weight
            self._params[f"{name}.bias"] = record.bias
        else:
            for suffix, t in L.layer_tensors(record):
                self._params[f"{name}.{suffix}"] = t
        return record

    def load_tensors(self, tensors: dict) -> None:
        missing = set(self._params) - set(tensors)
        extra = set(tensors) - set(self._params)
        if missing or extra:
            raise KeyError(f"parameter names differ: missing={sorted(missing)}, "
                           f"extra={sorted(extra)}")
        for name, value in tensors.items():
            target = self._params[name]
            if target.shape != value.shape:
                raise ShapeError(f"{name}: shape {value.shape} != {target.shape}")
            target.data = np.ascontiguousarray(value, dtype=np.float64)


# ---------------------------------------------------------------------------
# VN trunks

def _norm_pair(model: Model, name: str, c: int):
    gamma = model._register(f"{name}.gamma", Tensor(np.ones(c), requires_grad=True))
    beta = model._register(f"{name}.beta", Tensor(np.zeros(c), requires_grad=True))
    return gamma, beta


class _VNTrunk(Model):
    """Input lift followed by VN stages; produces per-point (N, C, 3)."""

    def __init__(self, spec: ModelSpec, rng: Rng):
        super().__init__(spec)
        vw = spec.vn_widths()
        detached = spec.nonlinearity == "detached"
        self.lift = self._register("lift", input_lift_params(
            rng.child(0), vw[0], cross_augment=spec.cross_augment,
            epsilon=spec.epsilon, negative_slope=spec.negative_slope).act)
        self.lift_params = InputLiftParams(self.lift, spec.cross_augment)
        self.lift_norm = _norm_pair(self, "lift.norm", vw[0]) if spec.norm == "layer" else None
        self.stages = []
        dgcnn = spec.architecture.endswith("dgcnn")
        for i in range(1, len(vw)):
            c_in, c_out = vw[i - 1], vw[i]
            sub = rng.child(i)
            stage = {}
            if dgcnn:
                stage["theta"] = self._register(
                    f"stage{i}.theta", L.vn_linear_params(sub.child(0), c_in, c_out))
                stage["phi"] = self._register(
                    f"stage{i}.phi", L.vn_linear_params(sub.child(1), c_in, c_out))
                stage["act"] = self._register(
                    f"stage{i}.act",
                    L.vn_act_params(sub.child(2), c_out, c_out, detached=True,
                                    epsilon=spec.epsilon,
                                    negative_slope=spec.negative_slope))
                if spec.pooling == "vn_max":
                    stage["pool_weight"] = self._register(
                        f"stage{i}.pool", L.uniform_init(sub.child(3), c_out, c_out))
            elif detached:
                stage["linear"] = self._register(
                    f"stage{i}.linear", L.vn_linear_params(sub.child(0), c_in, c_out))
                stage["act"] = self._register(
                    f"stage{i}.act",
                    L.vn_act_params(sub.child(1), c_out, c_out, detached=True,
                                    epsilon=spec.epsilon,
                                    negative_slope=spec.negative_slope))
            else:
                stage["act"] = self._register(
                    f"stage{i}.act",
                    L.vn_act_params(sub.child(0), c_in, c_out,
                                    epsilon=spec.epsilon,
                                    negative_slope=spec.negative_slope))
            if spec.norm == "layer":
                stage["norm"] = _norm_pair(self, f"stage{i}.norm", c_out)
            self.stages.append(stage)
        self.out_channels = vw[-1]
        if spec.pooling == "vn_max":
            self.global_pool_weight = self._register(
                "global_pool", L.uniform_init(rng.child(90), vw[-1], vw[-1]))

    def point_features(self, points) -> Tensor:
        spec = self.spec
        pts = center_points(points)
        v = input_lift(pts, spec.k, self.lift_params)
        if self.lift_norm is not None:
            v = L.vn_layer_norm(v, *self.lift_norm)
        dgcnn = spec.architecture.endswith("dgcnn")
        detached = spec.nonlinearity == "detached"
        for i, stage in enumerate(self.stages):
            if dgcnn:
                n = v.shape[0]
                if n == 1:
                    edges = np.zeros((1, 1), dtype=np.int64)
                elif spec.dynamic_graph:
                    edges = knn_graph(v, min(spec.k, n - 1), space="feature")
                else:
                    edges = _graph_or_self_loop(pts.data, spec.k)
                act = None if detached else stage["act"]
                v = vn_edge_conv(v, edges, stage["theta"], stage["phi"], act,
                                 pool=spec.pooling,
                                 pool_weight=stage.get("pool_weight"))
                if detached:
                    v = L.vn_act(v, stage["act"])
            elif detached:
                v = L.vn_linear(v, stage["linear"])
                v = L.vn_act(v, stage["act"])
            else:
                v = L.vn_act(v, stage["act"])
            if "norm" in stage:
                v = L.vn_layer_norm(v, *stage["norm"])
        return v

    def global_feature(self, v: Tensor) -> Tensor:
        if self.spec.pooling == "vn_max":
            return L.vn_max_pool_global(v, self.global_pool_weight)
        return L.vn_mean_pool_global(v)


class VNClassifier(_VNTrunk):
    def __init__(self, spec: ModelSpec, rng: Rng):
        super().__init__(spec, rng)
        c = self.out_channels
        self.invariant = self._register("invariant", L.vn_invariant_params(
            rng.child(91), c, mlp_depth=spec.invariant_depth,
            include_global_mean=spec.invariant_global_mean,
            epsilon=spec.epsilon, negative_slope=spec.negative_slope))
        if spec.head == "classify":
            head_in = 3 * c
            self.head = [
                self._register("head0", dense_params(rng.child(92), head_in, spec.head_hidden)),
                self._register("head1", dense_params(rng.child(93), spec.head_hidden,
                                                     spec.num_classes)),
            ]
        elif spec.head == "segment":
            head_in = 6 * c   # per-point invariant plus tiled global invariant
            h = spec.head_hidden
            self.head = [
                self._register("head0", dense_params(rng.child(92), head_in, h)),
                self._register("head1", dense_params(rng.child(93), h, h)),
                self._register("head2", dense_params(rng.child(94), h, spec.num_classes)),
            ]

    def _invariant_scalars(self, points) -> Tensor:
        """Per-point rotation-invariant features (N, 3C); the scalar part of
        the network (pooling, heads) mirrors the classical backbone."""
        v = self.point_features(points)                    # (N, C, 3)
        inv = L.vn_invariant(v, self.invariant)            # (N, C, 3), invariant
        return ad.reshape(inv, (v.shape[0], 3 * v.shape[1]))

    def _pool_scalars(self, flat: Tensor) -> Tensor:
        pooled = (ad.max_axis(flat, 0) if self.spec.pooling == "vn_max"
                  else ad.mean_axis(flat, 0))
        return ad.reshape(pooled, (1, flat.shape[1]))

    def classify(self, points) -> Tensor:
        if self.spec.head != "classify":
            raise ValueError(f"head is {self.spec.head!r}, not classify")
        flat = self._invariant_scalars(points)
        return ad.reshape(mlp_head(self._pool_scalars(flat), self.head),
                          (self.spec.num_classes,))

    def segment(self, points) -> Tensor:
        if self.spec.head != "segment":
            raise ValueError(f"head is {self.spec.head!r}, not segment")
        flat = self._invariant_scalars(points)             # (N, 3C)
        n, d = flat.shape
        tiled = ad.expand(self._pool_scalars(flat), (n, d))
        return mlp_head(ad.concat([flat, tiled], axis=1), self.head)


class VNOccNet(_VNTrunk):
    """Equivariant encoder, invariant decoder over <x,Z>, |x|^2, VN-In(Z)."""

    def __init__(self, spec: ModelSpec, rng: Rng):
        super().__init__(spec, rng)
        c = self.out_channels
        self.invariant = self._register("invariant", L.vn_invariant_params(
            rng.child(91), c, mlp_depth=spec.invariant_depth,
            include_global_mean=spec.invariant_global_mean,
            epsilon=spec.epsilon, negative_slope=spec.negative_slope))
        self.latent_channels = c
        _build_occ_decoder(self, rng, c)

    def encode(self, points) -> Tensor:
        # the raw pooled feature: normalizing its channel norms here would
        # erase the size cue the decoder needs
        v = self.point_features(points)
        pooled = self.global_feature(v)                    # (1, C, 3)
        return ad.reshape(pooled, (pooled.shape[1], 3))    # Z: (C, 3)

    def decode_batch(self, queries, z: Tensor) -> Tensor:
        return _occ_decode_batch(self, queries, z)

    def decode(self, x, z: Tensor) -> Tensor:
        out = self.decode_batch(ad.reshape(ad.tensor(x), (1, 3)), z)
        return ad.reshape(out, ())


def _build_occ_decoder(model: Model, rng: Rng, latent_channels: int) -> None:
    spec = model.spec
    feat_in = latent_channels + 1 + 3 * latent_channels
    model.dec_in = model._register("dec_in", dense_params(rng.child(95), feat_in,
                                                          spec.occ_hidden))
    model.dec_blocks = []
    for b in range(spec.occ_blocks):
        blk = (model._register(f"dec_block{b}a",
                               dense_params(rng.child(96, b, 0), spec.occ_hidden,
                                            spec.occ_hidden)),
               model._register(f"dec_block{b}b",
                               dense_params(rng.child(96, b, 1), spec.occ_hidden,
                                            spec.occ_hidden)))
        model.dec_blocks.append(blk)
    model.dec_out = model._register("dec_out", dense_params(rng.child(97),
                                                            spec.occ_hidden, 1))


def _occ_decode_batch(model: Model, queries, z: Tensor) -> Tensor:
    """Shared invariant decoder: (Q, 3) queries x (C, 3) latent -> (Q,)."""
    x = ad.tensor(queries)
    if x.ndim != 2 or x.shape[1] != 3:
        raise ShapeError(f"queries must be (Q, 3), got {x.shape}")
    if z.ndim != 2 or z.shape[1] != 3:
        raise ShapeError(f"latent code must be (C, 3), got {z.shape}")
    q = x.shape[0]
    dots = ad.matmul(x, ad.transpose(z, (1, 0)))                   # (Q, C)
    sqnorm = ad.reshape(ad.sum_axis(ad.square(x), 1), (q, 1))      # (Q, 1)
    z_feat = ad.reshape(z, (1,) + z.shape)                         # (1, C, 3)
    inv = L.vn_invariant(z_feat, model.invariant)                  # (1, C, 3)
    inv_flat = ad.expand(ad.reshape(inv, (1, 3 * z.shape[0])), (q, 3 * z.shape[0]))
    h = _relu(dense(ad.concat([dots, sqnorm, inv_flat], axis=1), model.dec_in))
    for blk_a, blk_b in model.dec_blocks:
        update = dense(_relu(dense(h, blk_a)), blk_b)
        h = _relu(ad.add(h, update))
    return ad.reshape(ad.sigmoid(dense(h, model.dec_out)), (q,))


# ---------------------------------------------------------------------------
# scalar baselines (rotation-sensitive by design; negative controls)

class _ScalarTrunk(Model):
    def __init__(self, spec: ModelSpec, rng: Rng):
        super().__init__(spec)
        widths = spec.widths
        dgcnn = spec.architecture.endswith("dgcnn")
        self.stages = []
        c_prev = 3
        for i, w in enumerate(widths):
            sub = rng.child(i)
            if dgcnn:
                stage = {
                    "theta": self._register(f"stage{i}.theta",
                                            dense_params(sub.child(0), c_prev, w)),
                    "phi": self._register(f"stage{i}.phi",
                                          dense_params(sub.child(1), c_prev, w)),
                }
            else:
                stage = {"dense": self._register(f"stage{i}.dense",
                                                 dense_params(sub.child(0), c_prev, w))}
            if spec.norm == "layer":
                stage["norm"] = _norm_pair(self, f"stage{i}.norm", w)
            self.stages.append(stage)
            c_prev = w
        self.out_channels = widths[-1]
        self.pooled_norm = (_norm_pair(self, "pooled.norm", widths[-1])
                            if spec.norm == "layer" else None)

    def point_features(self, points) -> Tensor:
        spec = self.spec
        x = center_points(points)
        dgcnn = spec.architecture.endswith("dgcnn")
        feats = x
        for i, stage in enumerate(self.stages):
            if dgcnn:
                n = feats.shape[0]
                if n == 1:
                    edges = np.zeros((1, 1), dtype=np.int64)
                elif i == 0 or not spec.dynamic_graph:
                    edges = _graph_or_self_loop(x.data, spec.k)
                else:
                    edges = _scalar_feature_knn(feats, spec.k)
                feats = _scalar_edge_conv(feats, edges, stage, spec.pooling)
            else:
                feats = _relu(dense(feats, stage["dense"]))
            if "norm" in stage:
                feats = scalar_layer_norm(feats, *stage["norm"])
        return feats

    def global_feature(self, feats: Tensor) -> Tensor:
        if self.spec.pooling == "vn_max":
            pooled = ad.max_axis(feats, 0)
        else:
            pooled = ad.mean_axis(feats, 0)
        if self.pooled_norm is not None:
            c = pooled.shape[0]
            pooled = ad.reshape(scalar_layer_norm(ad.reshape(pooled, (1, c)),
                                                  *self.pooled_norm), (c,))
        return pooled


def _scalar_feature_knn(feats: Tensor, k: int) -> np.ndarray:
    n = feats.shape[0]
    dist = _K.pairwise_sqdist(np.ascontiguousarray(feats.data))
    return _K.knn_select(dist, min(k, n - 1), True)


def _scalar_edge_conv(x: Tensor, edges: np.ndarray, stage: dict, pooling: str) -> Tensor:
    n = x.shape[0]
    k = edges.shape[1]
    src = edges.reshape(-1)
    dst = np.repeat(np.arange(n), k)
    x_src = ad.gather_rows(x, src)
    x_dst = ad.gather_rows(x, dst)
    e = _relu(ad.add(dense(ad.sub(x_src, x_dst), stage["theta"]),
                     dense(x_dst, stage["phi"])))
    stacked = ad.reshape(e, (n, k, e.shape[1]))
    if pooling == "vn_max":
        return ad.max_axis(stacked, 1)
    return ad.mean_axis(stacked, 1)


class ScalarClassifier(_ScalarTrunk):
    def __init__(self, spec: ModelSpec, rng: Rng):
        super().__init__(spec, rng)
        c = self.out_channels
        if spec.head == "classify":
            self.head = [
                self._register("head0", dense_params(rng.child(92), c, spec.head_hidden)),
                self._register("head1", dense_params(rng.child(93), spec.head_hidden,
                                                     spec.num_classes)),
            ]
        elif spec.head == "segment":
            h = spec.head_hidden
            self.head = [
                self._register("head0", dense_params(rng.child(92), 2 * c, h)),
                self._register("head1", dense_params(rng.child(93), h, h)),
                self._register("head2", dense_params(rng.child(94), h, spec.num_classes)),
            ]

    def classify(self, points) -> Tensor:
        if self.spec.head != "classify":
            raise ValueError(f"head is {self.spec.head!r}, not classify")
        feats = self.point_features(points)
        pooled = ad.reshape(self.global_feature(feats), (1, self.out_channels))
        return ad.reshape(mlp_head(pooled, self.head), (self.spec.num_classes,))

    def segment(self, points) -> Tensor:
        if self.spec.head != "segment":
            raise ValueError(f"head is {self.spec.head!r}, not segment")
        feats = self.point_features(points)
        n, c = feats.shape
        pooled = ad.expand(ad.reshape(self.global_feature(feats), (1, c)), (n, c))
        return mlp_head(ad.concat([feats, pooled], axis=1), self.head)


class ScalarOccNet(_ScalarTrunk):
    """Scalar encoder ablation: latent reshaped to (C//3, 3), same decoder."""

    def __init__(self, spec: ModelSpec, rng: Rng):
        super().__init__(spec, rng)
        c = self.out_channels
        self.latent_channels = c // 3
        self.invariant = self._register("invariant", L.vn_invariant_params(
            rng.child(91), self.latent_channels, mlp_depth=spec.invariant_depth,
            include_global_mean=spec.invariant_global_mean,
            epsilon=spec.epsilon, negative_slope=spec.negative_slope))
        _build_occ_decoder(self, rng, self.latent_channels)

    def encode(self, points) -> Tensor:
        feats = self.point_features(points)
        if self.spec.pooling == "vn_max":                  # raw pool, as in the
            pooled = ad.max_axis(feats, 0)                 # VN encoder
        else:
            pooled = ad.mean_axis(feats, 0)
        c3 = 3 * self.latent_channels                      # drop C mod 3 tail
        sliced = ad.gather_rows(ad.reshape(pooled, (self.out_channels, 1)), np.arange(c3))
        return ad.reshape(sliced, (self.latent_channels, 3))

    def decode_batch(self, queries, z: Tensor) -> Tensor:
        return _occ_decode_batch(self, queries, z)

    def decode(self, x, z: Tensor) -> Tensor:
        out = self.decode_batch(ad.reshape(ad.tensor(x), (1, 3)), z)
        return ad.reshape(out, ())


# ---------------------------------------------------------------------------
# public construction and the spec-level ops

def build_model(spec: ModelSpec, rng: Rng) -> Model:
    arch = spec.architecture
    if arch in ("vn_pointnet", "vn_dgcnn"):
        return VNClassifier(spec, rng)
    if arch == "vn_occnet":
        return VNOccNet(spec, rng)
    if arch in ("scalar_pointnet", "scalar_dgcnn"):
        return ScalarClassifier(spec, rng)
    if arch == "scalar_occnet":
        return ScalarOccNet(spec, rng)
    raise ValueError(f"unknown architecture {arch!r}")


def forward_classify(model: Model, points) -> Tensor:
    return model.classify(points)


def forward_segment(model: Model, points) -> Tensor:
    return model.segment(points)


def occnet_encode(model: Model, points) -> Tensor:
    return model.encode(points)


def occ_decode(model: Model, x, z: Tensor) -> Tensor:
    return model.decode(x, z)
