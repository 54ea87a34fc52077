"""Property-based certification: equivariance, invariance, pooling-index
stability, boundary-aware gradient checks, and the parameter-ratio audit.

Every trial is a pure function of its integer seed, so a report's
``worst_seed`` replays the worst residual exactly.  Failures are data
(``passed=False``), never exceptions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import layers as L
from .autodiff import Rng, Tensor
from .data import rotate, sample_rotation_uniform
from .models import ModelSpec, build_model


@dataclass
class EquivarianceReport:
    name: str
    trials: int
    max_residual: float
    worst_seed: int
    passed: bool
    tolerance: float
    rows: list = field(default_factory=list)   # (trial, seed, residual)

    def __str__(self):
        verdict = "pass" if self.passed else "FAIL"
        return (f"{self.name}: {verdict} ({self.trials} trials, "
                f"max residual {self.max_residual:.3e} vs tol {self.tolerance:.1e}, "
                f"worst seed {self.worst_seed})")


@dataclass
class GradReport:
    name: str
    coords_checked: int
    max_rel_err: float
    skipped_probes: int
    passed: bool
    tolerance: float

    def __str__(self):
        verdict = "pass" if self.passed else "FAIL"
        return (f"{self.name}: {verdict} ({self.coords_checked} coords, "
                f"max rel err {self.max_rel_err:.3e} vs tol {self.tolerance:.1e}, "
                f"{self.skipped_probes} boundary probes resampled)")


def _trial_seed(base_seed: int, trial: int) -> int:
    # documented splitting: one seed integer per trial
    return base_seed * 1_000_003 + trial


def equivariance_trial(f, input_gen, seed: int, param_gen=None) -> float:
    """One residual draw; rerunning with the same seed reproduces it.

    With ``param_gen`` the transform itself is redrawn per trial from the
    trial seed (random inputs, parameters, and rotations every time).
    """
    rng = Rng(seed)
    v = input_gen(rng.child(0))
    r = sample_rotation_uniform(rng.child(1))
    fn = param_gen(rng.child(2)) if param_gen is not None else f
    with ad.no_grad():
        out = fn(Tensor(v)).data
        out_rot = fn(Tensor(rotate(v, r))).data
    return float(np.abs(out_rot - rotate(out, r)).max() / (1.0 + np.abs(out).max()))


def check_equivariance(f, input_gen, trials: int, tol: float,
                       base_seed: int = 0, name: str = "equivariance",
                       param_gen=None) -> EquivarianceReport:
    """max-norm residual of f(V R) - f(V) R, relative with a +1 regularizer."""
    rows = []
    worst = (-1.0, 0)
    for t in range(trials):
        seed = _trial_seed(base_seed, t)
        resid = equivariance_trial(f, input_gen, seed, param_gen)
        rows.append((t, seed, resid))
        if resid > worst[0]:
            worst = (resid, seed)
    return EquivarianceReport(name=name, trials=trials, max_residual=worst[0],
                              worst_seed=worst[1], passed=worst[0] <= tol,
                              tolerance=tol, rows=rows)


def invariance_trial(g, input_gen, seed: int, param_gen=None) -> float:
    rng = Rng(seed)
    v = input_gen(rng.child(0))
    r = sample_rotation_uniform(rng.child(1))
    fn = param_gen(rng.child(2)) if param_gen is not None else g
    with ad.no_grad():
        out = np.asarray(fn(v))
        out_rot = np.asarray(fn(rotate(v, r)))
    return float(np.abs(out_rot - out).max())


def check_invariance(g, input_gen, trials: int, tol: float,
                     base_seed: int = 0, name: str = "invariance",
                     param_gen=None) -> EquivarianceReport:
    """Absolute max-norm residual of g(V R) - g(V)."""
    rows = []
    worst = (-1.0, 0)
    for t in range(trials):
        seed = _trial_seed(base_seed, t)
        resid = invariance_trial(g, input_gen, seed, param_gen)
        rows.append((t, seed, resid))
        if resid > worst[0]:
            worst = (resid, seed)
    return EquivarianceReport(name=name, trials=trials, max_residual=worst[0],
                              worst_seed=worst[1], passed=worst[0] <= tol,
                              tolerance=tol, rows=rows)


def check_joint_invariance(fn, input_gen, query_gen, trials: int, tol: float,
                           base_seed: int = 0, name: str = "joint invariance",
                           param_gen=None) -> EquivarianceReport:
    """Residual of fn(points R, queries R) - fn(points, queries)."""
    rows = []
    worst = (-1.0, 0)
    for t in range(trials):
        seed = _trial_seed(base_seed, t)
        rng = Rng(seed)
        pts = input_gen(rng.child(0))
        q = query_gen(rng.child(1))
        r = sample_rotation_uniform(rng.child(2))
        pair_fn = param_gen(rng.child(3)) if param_gen is not None else fn
        with ad.no_grad():
            base = np.asarray(pair_fn(pts, q))
            moved = np.asarray(pair_fn(rotate(pts, r), rotate(q, r)))
        resid = float(np.abs(moved - base).max())
        rows.append((t, seed, resid))
        if resid > worst[0]:
            worst = (resid, seed)
    return EquivarianceReport(name=name, trials=trials, max_residual=worst[0],
                              worst_seed=worst[1], passed=worst[0] <= tol,
                              tolerance=tol, rows=rows)


def check_pool_indices(trials: int, base_seed: int = 0, n: int = 12, c: int = 5,
                       name: str = "pooling-index invariance") -> EquivarianceReport:
    """Exact equality of max-pool argmax selectors under rotation."""
    rows = []
    mismatches = 0
    worst_seed = _trial_seed(base_seed, 0)
    for t in range(trials):
        seed = _trial_seed(base_seed, t)
        rng = Rng(seed)
        v = rng.child(0).normal((n, c, 3))
        w = Tensor(rng.child(1).normal((c, c)))
        r = sample_rotation_uniform(rng.child(2))
        idx = L.max_pool_indices(Tensor(v), w)
        idx_rot = L.max_pool_indices(Tensor(rotate(v, r)), w)
        bad = float(np.any(idx != idx_rot))
        rows.append((t, seed, bad))
        if bad:
            mismatches += 1
            worst_seed = seed
    return EquivarianceReport(name=name, trials=trials, max_residual=float(mismatches),
                              worst_seed=worst_seed, passed=mismatches == 0,
                              tolerance=0.0, rows=rows)


# ---------------------------------------------------------------------------
# gradient checking

BOUNDARY_MARGIN = 1e-3


def grad_check(probe_factory, tol: float, step: float = 1e-5,
               max_coords: int = 200, base_seed: int = 0,
               max_resamples: int = 50, name: str = "gradients") -> GradReport:
    """Analytic gradients vs central differences on a sampled coordinate set.

    ``probe_factory(rng) -> (loss_fn, params)`` builds a scalar loss closure
    over fresh inputs; probes whose gated ops sit within ``BOUNDARY_MARGIN``
    of a case split or pooling tie are discarded and redrawn (the layers are
    only piecewise smooth there).
    """
    skipped = 0
    loss_fn = params = None
    for attempt in range(max_resamples):
        rng = Rng(_trial_seed(base_seed, attempt))
        loss_fn, params = probe_factory(rng.child(0))
        with L.record_margins() as margins:
            loss_fn()
        if not margins or min(margins) >= BOUNDARY_MARGIN:
            break
        skipped += 1
    else:
        return GradReport(name=name, coords_checked=0, max_rel_err=np.inf,
                          skipped_probes=skipped, passed=False, tolerance=tol)

    ad.zero_grads(params)
    ad.backward(loss_fn())
    coord_rng = Rng(_trial_seed(base_seed, 777))
    worst = 0.0
    checked = 0
    for p in params:
        flat = p.data.reshape(-1)
        grad = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
        count = min(max_coords, flat.size)
        if count == flat.size:
            coords = np.arange(flat.size)
        else:
            coords = coord_rng.child(checked).permutation(flat.size)[:count]
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            plus = loss_fn().item()
            flat[i] = orig - step
            minus = loss_fn().item()
            flat[i] = orig
            numeric = (plus - minus) / (2.0 * step)
            denom = max(abs(grad[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(grad[i] - numeric) / denom)
            checked += 1
    return GradReport(name=name, coords_checked=checked, max_rel_err=worst,
                      skipped_probes=skipped, passed=worst <= tol, tolerance=tol)


# ---------------------------------------------------------------------------
# parameter audit

def param_ratio(vn_spec: ModelSpec, scalar_spec: ModelSpec) -> float:
    """Trainable-parameter ratio of a matched (VN, scalar) pair."""
    if not vn_spec.is_vn or scalar_spec.is_vn:
        raise ValueError("param_ratio expects (vn spec, scalar spec)")
    if vn_spec.architecture[3:] != scalar_spec.architecture[7:]:
        raise ValueError(f"mismatched pair: {vn_spec.architecture} vs "
                         f"{scalar_spec.architecture}")
    if vn_spec.widths != scalar_spec.widths:
        raise ValueError(f"mismatched widths: {vn_spec.widths} vs {scalar_spec.widths}")
    vn = build_model(vn_spec, Rng(0))
    scalar = build_model(scalar_spec, Rng(0))
    return vn.parameter_count() / scalar.parameter_count()


# ---------------------------------------------------------------------------
# report emission

def write_report_csv(path, reports: Sequence[EquivarianceReport]) -> None:
    """Machine-readable trial log: check, trial, seed, residual."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("check,trial,seed,residual\n")
        for rep in reports:
            for trial, seed, resid in rep.rows:
                fh.write(f"{rep.name},{trial},{seed},{resid:.17g}\n")


def format_report_lines(reports, grad_reports, ratios) -> list:
    lines = [str(r) for r in reports]
    lines += [str(g) for g in grad_reports]
    for name, value, bound in ratios:
        if bound is None:
            lines.append(f"{name}: ratio {value:.4f} (reported)")
        else:
            verdict = "pass" if value <= bound else "FAIL"
            lines.append(f"{name}: {verdict} (ratio {value:.4f} vs bound {bound:.4f})")
    return lines


# ---------------------------------------------------------------------------
# the standard certification suite

PARAM_RATIO_BOUND = 2.0 / 9.0 + 0.05


@dataclass
class SuiteResult:
    positive: list          # EquivarianceReport; must pass
    negative: list          # EquivarianceReport; must FAIL (harness power)
    gradients: list         # GradReport; must pass
    ratios: list            # (name, value, bound or None)

    def all_passed(self) -> bool:
        return (all(r.passed for r in self.positive)
                and all(not r.passed for r in self.negative)
                and all(g.passed for g in self.gradients)
                and all(v <= b for _, v, b in self.ratios if b is not None))

    def failures(self) -> list:
        bad = [r for r in self.positive if not r.passed]
        bad += [r for r in self.negative if r.passed]
        bad += [g for g in self.gradients if not g.passed]
        bad += [(n, v, b) for n, v, b in self.ratios if b is not None and v > b]
        return bad


def _mini_net_spec(architecture, head="classify", **over):
    base = dict(widths=(12, 12, 24), k=4, num_classes=4)
    base.update(over)
    return ModelSpec(architecture=architecture, head=head, **base)


def standard_suite(trials: int = 100, tol_layer: float = 1e-10,
                   tol_net: float = 1e-8, grad_tol: float = 1e-5,
                   grad_tol_net: float = 1e-4, seed: int = 0,
                   points: int = 12, channels: int = 5,
                   log=None) -> SuiteResult:
    """Every layer and assembly check the package certifies, in one run."""
    from . import models as M

    n, c = points, channels
    feat = lambda rng: rng.normal((n, c, 3))
    pts = lambda rng: rng.normal((n, 3))

    def neighbors_for(rng):
        return M.knn_graph(rng.normal((n, 3)), 3)

    # --- per-trial layer factories (fresh parameters every trial) ---------
    def pg_linear(rng):
        p = L.vn_linear_params(rng, c, c + 2)
        return lambda v: L.vn_linear(v, p)

    def pg_act(kind, detached=False, slope=0.0):
        def gen(rng):
            p = L.vn_act_params(rng, c, c if detached else c + 1,
                                detached=detached, negative_slope=slope)
            return lambda v: L.vn_act(v, p, kind=kind)
        return gen

    def pg_lift_scalar(rng):
        p = L.vn_act_params(rng, c, c)
        return lambda v: L.vn_lift_scalar(v, p, L.scalar_tanh)

    def pg_max_pool(rng):
        w = L.uniform_init(rng, c, c)
        return lambda v: L.vn_max_pool_global(v, w)

    def pg_local_pool(kind):
        def gen(rng):
            w = L.uniform_init(rng.child(0), c, c)
            nbrs = neighbors_for(rng.child(1))
            return lambda v: L.vn_local_pool(v, nbrs, w, kind=kind)
        return gen

    def pg_batch_norm(rng):
        def fn(v):
            state = L.vn_batch_norm_state(c)
            state.gamma.data = rng_gamma.copy()
            state.beta.data = rng_beta.copy()
            return L.vn_batch_norm([v], state)[0]
        rng_gamma = rng.child(0).uniform((c,), 0.5, 1.5)
        rng_beta = rng.child(1).normal((c,))
        return fn

    def pg_layer_norm(rng):
        g = Tensor(rng.child(0).uniform((c,), 0.5, 1.5))
        b = Tensor(rng.child(1).normal((c,)))
        return lambda v: L.vn_layer_norm(v, g, b)

    def pg_instance_norm(rng):
        g = Tensor(rng.child(0).uniform((c,), 0.5, 1.5))
        b = Tensor(rng.child(1).normal((c,)))
        return lambda v: L.vn_instance_norm(v, g, b)

    def pg_mlp(rng):
        stack = [L.vn_act_params(rng.child(0), c, c + 3),
                 L.vn_act_params(rng.child(1), c + 3, c + 1),
                 L.vn_linear_params(rng.child(2), c + 1, 3)]
        return lambda v: L.vn_mlp(v, stack)

    def pg_edge_conv(rng):
        theta = L.vn_linear_params(rng.child(0), c, c + 1)
        phi = L.vn_linear_params(rng.child(1), c, c + 1)
        act = L.vn_act_params(rng.child(2), c + 1, c + 1, detached=True)
        edges = neighbors_for(rng.child(3))
        return lambda v: M.vn_edge_conv(v, edges, theta, phi, act)

    def pg_input_lift(rng):
        lift = M.input_lift_params(rng, c)
        return lambda p: M.input_lift(p, 4, lift)

    def pg_encode(rng):
        model = M.build_model(_mini_net_spec("vn_occnet", head="occupancy"), rng)
        return lambda p: model.encode(p)

    positive = []

    def run(kind, name, *args, **kw):
        rep = kind(*args, name=name, **kw)
        positive.append(rep)
        if log is not None:
            log(str(rep))
        return rep

    base = seed
    run(check_equivariance, "equivariance[vn_linear]", None, feat, trials,
        tol_layer, base_seed=base + 1, param_gen=pg_linear)
    run(check_equivariance, "equivariance[vn_act builtin-relu]", None, feat, trials,
        tol_layer, base_seed=base + 2, param_gen=pg_act("relu"))
    run(check_equivariance, "equivariance[vn_act builtin-leaky]", None, feat, trials,
        tol_layer, base_seed=base + 3, param_gen=pg_act("leaky", slope=0.2))
    run(check_equivariance, "equivariance[vn_act detached]", None, feat, trials,
        tol_layer, base_seed=base + 4, param_gen=pg_act("leaky", detached=True, slope=0.2))
    run(check_equivariance, "equivariance[vn_lift_scalar tanh]", None, feat, trials,
        tol_layer, base_seed=base + 5, param_gen=pg_lift_scalar)
    run(check_equivariance, "equivariance[vn_max_pool_global]", None, feat, trials,
        tol_layer, base_seed=base + 6, param_gen=pg_max_pool)
    run(check_equivariance, "equivariance[vn_mean_pool_global]",
        lambda v: L.vn_mean_pool_global(v), feat, trials, tol_layer, base_seed=base + 7)
    run(check_equivariance, "equivariance[vn_local_pool max]", None, feat, trials,
        tol_layer, base_seed=base + 8, param_gen=pg_local_pool("max"))
    run(check_equivariance, "equivariance[vn_local_pool mean]", None, feat, trials,
        tol_layer, base_seed=base + 9, param_gen=pg_local_pool("mean"))
    run(check_equivariance, "equivariance[vn_batch_norm]", None, feat, trials,
        tol_layer, base_seed=base + 10, param_gen=pg_batch_norm)
    run(check_equivariance, "equivariance[vn_layer_norm]", None, feat, trials,
        tol_layer, base_seed=base + 11, param_gen=pg_layer_norm)
    run(check_equivariance, "equivariance[vn_instance_norm]", None, feat, trials,
        tol_layer, base_seed=base + 12, param_gen=pg_instance_norm)
    run(check_equivariance, "equivariance[vn_mlp 3-layer]", None, feat, trials,
        tol_layer, base_seed=base + 13, param_gen=pg_mlp)
    run(check_equivariance, "equivariance[vn_edge_conv]", None, feat, trials,
        tol_layer, base_seed=base + 14, param_gen=pg_edge_conv)
    run(check_equivariance, "equivariance[input_lift]", None, pts, trials,
        tol_layer, base_seed=base + 15, param_gen=pg_input_lift)
    run(check_equivariance, "equivariance[occnet_encode]", None, pts, trials,
        tol_net, base_seed=base + 16, param_gen=pg_encode)

    # --- invariance ---------------------------------------------------------
    def pg_invariant(depth):
        def gen(rng):
            p = L.vn_invariant_params(rng, c, mlp_depth=depth)
            return lambda v: L.vn_invariant(Tensor(v), p).data
        return gen

    def pg_classify(arch):
        def gen(rng):
            model = M.build_model(_mini_net_spec(arch), rng)
            return lambda p: model.classify(p).data
        return gen

    def pg_segment(rng):
        model = M.build_model(_mini_net_spec("vn_pointnet", head="segment"), rng)
        return lambda p: model.segment(p).data

    run(check_invariance, "invariance[channel_norms]",
        lambda v: L.channel_norms(Tensor(v)).data, feat, trials, tol_layer,
        base_seed=base + 20)
    run(check_invariance, "invariance[vn_invariant lin]", None, feat, trials,
        tol_layer, base_seed=base + 21, param_gen=pg_invariant(1))
    run(check_invariance, "invariance[vn_invariant mlp3]", None, feat, trials,
        tol_layer, base_seed=base + 22, param_gen=pg_invariant(3))
    run(check_invariance, "invariance[classify vn_pointnet]", None, pts, trials,
        tol_net, base_seed=base + 23, param_gen=pg_classify("vn_pointnet"))
    run(check_invariance, "invariance[classify vn_dgcnn]", None, pts, trials,
        tol_net, base_seed=base + 24, param_gen=pg_classify("vn_dgcnn"))
    run(check_invariance, "invariance[segment vn_pointnet]", None, pts, trials,
        tol_net, base_seed=base + 25, param_gen=pg_segment)

    def pg_occ_pair(rng):
        model = M.build_model(_mini_net_spec("vn_occnet", head="occupancy"), rng)
        return lambda p, q: model.decode_batch(q, model.encode(p)).data

    run(check_joint_invariance, "invariance[occ_decode joint]", None, pts,
        lambda rng: rng.normal((6, 3)), trials, tol_net, base_seed=base + 26,
        param_gen=pg_occ_pair)

    run(check_pool_indices, "pool-indices[rotation]", trials, base_seed=base + 27,
        n=n, c=c)

    # --- negative controls (must fail) --------------------------------------
    negative = []

    def run_negative(rep):
        negative.append(rep)
        if log is not None:
            log(str(rep) + "  [negative control: failure expected]")

    run_negative(check_equivariance(
        lambda v: ad.relu(v), feat, min(trials, 20), tol_layer,
        base_seed=base + 30, name="negative[coordinatewise relu]"))
    for arch in ("scalar_pointnet", "scalar_dgcnn"):
        run_negative(check_invariance(
            None, pts, min(trials, 20), tol_net, base_seed=base + 31,
            name=f"negative[classify {arch}]", param_gen=pg_classify(arch)))

    def pg_scalar_encode(rng):
        model = M.build_model(_mini_net_spec("scalar_occnet", head="occupancy"), rng)
        return lambda p: model.encode(p)

    run_negative(check_equivariance(
        None, pts, min(trials, 20), tol_net, base_seed=base + 33,
        name="negative[occnet_encode scalar]", param_gen=pg_scalar_encode))

    # --- gradients -----------------------------------------------------------
    gradients = []

    def probe(layer_fn_gen, shape=(6, c, 3)):
        def factory(rng):
            fn = layer_fn_gen(rng.child(0))
            v = Tensor(rng.child(1).normal(shape), requires_grad=True)
            weight = Tensor(np.asarray(rng.child(2).normal(fn(v).shape)))
            loss_fn = lambda: ad.sum_all(ad.mul(fn(v), weight))
            return loss_fn, [v]
        return factory

    def run_grad(name, factory, tol, coords=200, seed_off=0):
        rep = grad_check(factory, tol, max_coords=coords,
                         base_seed=base + 50 + seed_off, name=name)
        gradients.append(rep)
        if log is not None:
            log(str(rep))

    run_grad("grad[vn_linear]", probe(pg_linear), grad_tol, seed_off=1)
    run_grad("grad[vn_act builtin]", probe(pg_act("relu")), grad_tol, seed_off=2)
    run_grad("grad[vn_act detached]",
             probe(pg_act("leaky", detached=True, slope=0.2)), grad_tol, seed_off=3)
    run_grad("grad[vn_lift_scalar]", probe(pg_lift_scalar), grad_tol, seed_off=4)
    run_grad("grad[vn_max_pool_global]", probe(pg_max_pool), grad_tol, seed_off=5)
    run_grad("grad[vn_mean_pool_global]",
             probe(lambda rng: (lambda v: L.vn_mean_pool_global(v))), grad_tol,
             seed_off=6)
    run_grad("grad[vn_local_pool max]", probe(pg_local_pool("max"), shape=(n, c, 3)),
             grad_tol, seed_off=7)
    run_grad("grad[vn_batch_norm]", probe(pg_batch_norm), grad_tol, seed_off=8)
    run_grad("grad[vn_layer_norm]", probe(pg_layer_norm), grad_tol, seed_off=9)
    run_grad("grad[vn_invariant]",
             probe(lambda rng: (lambda v: L.vn_invariant(
                 v, L.vn_invariant_params(rng, c, mlp_depth=3)))), grad_tol,
             seed_off=10)
    run_grad("grad[vn_edge_conv]", probe(pg_edge_conv, shape=(n, c, 3)), grad_tol,
             seed_off=11)

    def lift_probe(rng):
        lift = M.input_lift_params(rng.child(0), c)
        p = Tensor(rng.child(1).normal((n, 3)), requires_grad=True)
        out_shape = M.input_lift(p, 4, lift).shape
        weight = Tensor(rng.child(2).normal(out_shape))
        loss_fn = lambda: ad.sum_all(ad.mul(M.input_lift(p, 4, lift), weight))
        return loss_fn, [p, lift.act.feature_weight, lift.act.direction_weight]

    run_grad("grad[input_lift]", lift_probe, grad_tol, seed_off=12)

    def end_to_end_probe(rng):
        from .training import cross_entropy
        model = M.build_model(_mini_net_spec("vn_pointnet"), rng.child(0))
        clouds = [rng.child(1).normal((10, 3)), rng.child(2).normal((10, 3))]
        labels = [0, 2]

        def loss_fn():
            total = cross_entropy(model.classify(clouds[0]), labels[0])
            other = cross_entropy(model.classify(clouds[1]), labels[1])
            return ad.mul(ad.add(total, other), 0.5)

        return loss_fn, list(model.params().values())

    run_grad("grad[vn_pointnet classify end-to-end]", end_to_end_probe,
             grad_tol_net, coords=6, seed_off=13)

    # --- parameter audit ------------------------------------------------------
    ratios = []
    for arch in ("vn_pointnet", "vn_dgcnn"):
        spec = ModelSpec(architecture=arch)
        ratios.append((f"param_ratio[{arch[3:]}]",
                       param_ratio(spec, M.scalar_twin(spec)), PARAM_RATIO_BOUND))
    occ = ModelSpec(architecture="vn_occnet", head="occupancy")
    ratios.append(("param_ratio[occnet]",
                   param_ratio(occ, M.scalar_twin(occ)), None))
    if log is not None:
        for line in format_report_lines([], [], ratios):
            log(line)

    return SuiteResult(positive=positive, negative=negative,
                       gradients=gradients, ratios=ratios)
