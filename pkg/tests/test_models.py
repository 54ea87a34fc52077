import numpy as np
import pytest

from vnn import autodiff as ad
from vnn import layers as L
from vnn import models as M
from vnn.autodiff import Rng, ShapeError, Tensor
from vnn.data import rotate, sample_rotation_uniform

MINI = dict(widths=(12, 12, 24), k=4, num_classes=4)


def mini_spec(arch, **over):
    kw = {**MINI, **over}
    return M.ModelSpec(architecture=arch, **kw)


class TestKnnGraph:
    def test_collinear_exhaustive_oracle(self):
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [3.0, 0, 0]])
        # oracle: all pairwise distances, nearest other point per row
        expected = []
        for i in range(3):
            d = [(np.sum((pts[i] - pts[j]) ** 2), j) for j in range(3) if j != i]
            expected.append(min(d)[1])
        assert expected == [1, 0, 1]
        np.testing.assert_array_equal(M.knn_graph(pts, 1).reshape(-1), expected)

    def test_k_equals_n_minus_one_gives_all_others(self):
        pts = Rng(0).normal((6, 3))
        g = M.knn_graph(pts, 5)
        for i in range(6):
            assert sorted(g[i]) == sorted(set(range(6)) - {i})

    def test_rotation_leaves_primal_graph_unchanged(self):
        rng = Rng(1)
        pts = rng.child(0).normal((15, 3))
        for t in range(10):
            r = sample_rotation_uniform(rng.child(1, t))
            np.testing.assert_array_equal(M.knn_graph(pts, 4),
                                          M.knn_graph(rotate(pts, r), 4))

    def test_k_too_large_rejected(self):
        with pytest.raises(ShapeError):
            M.knn_graph(Rng(2).normal((4, 3)), 4)

    def test_feature_space_queries(self):
        v = Rng(3).normal((7, 4, 3))
        g = M.knn_graph(Tensor(v), 3, space="feature")
        d = ((v.reshape(7, 1, -1) - v.reshape(1, 7, -1)) ** 2).sum(-1)
        np.fill_diagonal(d, np.inf)
        np.testing.assert_array_equal(g[:, 0], np.argmin(d, axis=1))


class TestEdgeConv:
    def test_identity_passthrough(self):
        # theta = 0, phi = I, and a direction aligned with the feature
        rng = Rng(4)
        v = Tensor(rng.normal((6, 3, 3)))
        edges = M.knn_graph(Rng(5).normal((6, 3)), 2)
        theta = L.VNLinearParams(Tensor(np.zeros((3, 3))))
        phi = L.VNLinearParams(Tensor(np.eye(3)))
        act = L.VNActParams(None, Tensor(np.eye(3)))  # k = x, first branch always
        out = M.vn_edge_conv(v, edges, theta, phi, act, pool="mean")
        np.testing.assert_allclose(out.data, v.data, atol=1e-15)

    def test_single_edge_hand_expansion(self):
        rng = Rng(6)
        v = Tensor(rng.child(0).normal((2, 3, 3)))
        act = L.vn_act_params(rng.child(1), 3, 3, detached=True)
        theta = L.VNLinearParams(Tensor(np.eye(3)))
        phi = L.VNLinearParams(Tensor(np.zeros((3, 3))))
        out = M.vn_edge_conv(v, np.array([[1], [0]]), theta, phi, act)
        direct = L.vn_act(ad.sub(ad.gather_rows(v, [1, 0]), v), act)
        np.testing.assert_array_equal(out.data, direct.data)

    @pytest.mark.parametrize("pool", ["mean", "vn_max"])
    def test_equivariance(self, pool):
        rng = Rng(7)
        for t in range(10):
            sub = rng.child(t)
            v = sub.child(0).normal((8, 4, 3))
            theta = L.vn_linear_params(sub.child(1), 4, 5)
            phi = L.vn_linear_params(sub.child(2), 4, 5)
            act = L.vn_act_params(sub.child(3), 5, 5, detached=True)
            w = L.uniform_init(sub.child(4), 5, 5) if pool == "vn_max" else None
            edges = M.knn_graph(sub.child(5).normal((8, 3)), 3)
            r = sample_rotation_uniform(sub.child(6))
            out = M.vn_edge_conv(Tensor(v), edges, theta, phi, act, pool, w).data
            out_r = M.vn_edge_conv(Tensor(rotate(v, r)), edges, theta, phi, act, pool, w).data
            resid = np.abs(out_r - rotate(out, r)).max() / (1 + np.abs(out).max())
            assert resid <= 1e-10

    def test_empty_neighborhood_rejected(self):
        v = Tensor(np.zeros((2, 3, 3)))
        theta = phi = L.VNLinearParams(Tensor(np.eye(3)))
        with pytest.raises(ShapeError):
            M.vn_edge_conv(v, np.zeros((2, 0), dtype=int), theta, phi, None)


class TestInputLift:
    def test_identical_points_give_zero_features(self):
        lift = M.input_lift_params(Rng(8), 5)
        pts = np.tile([0.3, -0.2, 0.9], (6, 1))
        out = M.input_lift(M.center_points(pts), 3, lift)
        # centered coordinates collapse to ~0 (exact up to centroid rounding)
        np.testing.assert_allclose(out.data, np.zeros((6, 5, 3)), atol=1e-15)
        # differences are exactly zero, so only the position channel matters:
        # zeroing the difference column of both maps changes nothing
        no_diff = M.InputLiftParams(
            L.VNActParams(
                Tensor(np.concatenate(
                    [np.zeros((5, 1)), lift.act.feature_weight.data[:, 1:]], axis=1)),
                Tensor(np.concatenate(
                    [np.zeros((5, 1)), lift.act.direction_weight.data[:, 1:]], axis=1)),
                epsilon=lift.act.epsilon))
        out2 = M.input_lift(M.center_points(pts), 3, no_diff)
        np.testing.assert_array_equal(out.data, out2.data)

    def test_tetrahedron_equivariance(self):
        rng = Rng(9)
        lift = M.input_lift_params(rng.child(0), 6)
        pts = np.array([[1.0, 1, 1], [1.0, -1, -1], [-1.0, 1, -1], [-1.0, -1, 1]])
        out = M.input_lift(Tensor(pts), 3, lift).data
        for t in range(10):
            r = sample_rotation_uniform(rng.child(1, t))
            out_r = M.input_lift(Tensor(rotate(pts, r)), 3, lift).data
            assert np.abs(out_r - rotate(out, r)).max() <= 1e-10 * (1 + np.abs(out).max())

    def test_cross_channel_vanishes_on_collinear_clouds(self):
        rng = Rng(10)
        lift = M.input_lift_params(rng, 4, cross_augment=True)
        pts = np.linspace(-1, 1, 7)[:, None] * np.array([[0.4, -0.3, 0.8]])
        out_full = M.input_lift(M.center_points(pts), 3, lift).data
        # zeroing the cross column of both maps must not change anything
        trimmed = M.InputLiftParams(
            L.VNActParams(Tensor(lift.act.feature_weight.data[:, :2]),
                          Tensor(lift.act.direction_weight.data[:, :2]),
                          epsilon=lift.act.epsilon),
            cross_augment=False)
        out_trimmed = M.input_lift(M.center_points(pts), 3, trimmed).data
        np.testing.assert_allclose(out_full, out_trimmed, atol=1e-15)

    def test_cross_augment_stays_equivariant(self):
        rng = Rng(11)
        lift = M.input_lift_params(rng.child(0), 4, cross_augment=True)
        pts = rng.child(1).normal((9, 3))
        out = M.input_lift(M.center_points(pts), 3, lift).data
        r = sample_rotation_uniform(rng.child(2))
        out_r = M.input_lift(M.center_points(rotate(pts, r)), 3, lift).data
        assert np.abs(out_r - rotate(out, r)).max() <= 1e-10 * (1 + np.abs(out).max())


class TestClassify:
    @pytest.mark.parametrize("arch", ["vn_pointnet", "vn_dgcnn"])
    def test_logits_rotation_invariant(self, arch):
        rng = Rng(12)
        model = M.build_model(mini_spec(arch), rng.child(0))
        pts = rng.child(1).normal((16, 3))
        base = model.classify(pts).data
        for t in range(10):
            r = sample_rotation_uniform(rng.child(2, t))
            logits = model.classify(rotate(pts, r)).data
            assert np.abs(logits - base).max() <= 1e-8

    def test_permutation_invariant(self):
        rng = Rng(13)
        model = M.build_model(mini_spec("vn_pointnet"), rng.child(0))
        pts = rng.child(1).normal((14, 3))
        base = model.classify(pts).data
        perm = rng.child(2).permutation(14)
        assert np.abs(model.classify(pts[perm]).data - base).max() <= 1e-10

    def test_zeroed_final_layer_zero_logits(self):
        rng = Rng(14)
        model = M.build_model(mini_spec("vn_dgcnn"), rng.child(0))
        model.head[-1].weight.data[:] = 0.0
        model.head[-1].bias.data[:] = 0.0
        logits = model.classify(rng.child(1).normal((12, 3))).data
        np.testing.assert_array_equal(logits, np.zeros(4))

    def test_head_mismatch_rejected(self):
        model = M.build_model(mini_spec("vn_pointnet", head="segment"), Rng(15))
        with pytest.raises(ValueError):
            model.classify(np.zeros((8, 3)))

    def test_translation_invariance_from_centering(self):
        rng = Rng(16)
        model = M.build_model(mini_spec("vn_pointnet"), rng.child(0))
        pts = rng.child(1).normal((12, 3))
        base = model.classify(pts).data
        shifted = model.classify(pts + np.array([10.0, -4.0, 2.5])).data
        assert np.abs(shifted - base).max() <= 1e-8

    def test_scalar_baselines_are_rotation_sensitive(self):
        rng = Rng(17)
        for arch in ("scalar_pointnet", "scalar_dgcnn"):
            model = M.build_model(mini_spec(arch), rng.child(0))
            pts = rng.child(1).normal((16, 3))
            r = sample_rotation_uniform(rng.child(2))
            resid = np.abs(model.classify(rotate(pts, r)).data
                           - model.classify(pts).data).max()
            assert resid > 1e-2

    def test_forward_deterministic_bitwise(self):
        rng = Rng(18)
        model = M.build_model(mini_spec("vn_dgcnn"), rng.child(0))
        pts = rng.child(1).normal((16, 3))
        np.testing.assert_array_equal(model.classify(pts).data, model.classify(pts).data)


class TestSegment:
    def test_rowwise_invariance_and_permutation(self):
        rng = Rng(19)
        model = M.build_model(mini_spec("vn_pointnet", head="segment", num_classes=3),
                              rng.child(0))
        pts = rng.child(1).normal((12, 3))
        base = model.segment(pts).data
        r = sample_rotation_uniform(rng.child(2))
        np.testing.assert_allclose(model.segment(rotate(pts, r)).data, base, atol=1e-8)
        perm = rng.child(3).permutation(12)
        np.testing.assert_allclose(model.segment(pts[perm]).data, base[perm], atol=1e-12)

    def test_single_point_cloud_runs(self):
        model = M.build_model(mini_spec("vn_dgcnn", head="segment", num_classes=5), Rng(20))
        out = model.segment(np.array([[0.1, 0.2, 0.3]]))
        assert out.shape == (1, 5)


class TestOccNet:
    def test_encoder_equivariance(self):
        rng = Rng(21)
        model = M.build_model(mini_spec("vn_occnet", head="occupancy"), rng.child(0))
        pts = rng.child(1).normal((20, 3))
        z = model.encode(pts).data
        for t in range(10):
            r = sample_rotation_uniform(rng.child(2, t))
            z_r = model.encode(rotate(pts, r)).data
            assert np.abs(z_r - rotate(z, r)).max() <= 1e-9 * (1 + np.abs(z).max())

    def test_zero_cloud_deterministic(self):
        model = M.build_model(mini_spec("vn_occnet", head="occupancy"), Rng(22))
        a = model.encode(np.zeros((8, 3))).data
        b = model.encode(np.zeros((8, 3))).data
        np.testing.assert_array_equal(a, b)

    def test_scalar_encoder_not_equivariant(self):
        rng = Rng(23)
        model = M.build_model(mini_spec("scalar_occnet", head="occupancy"), rng.child(0))
        pts = rng.child(1).normal((20, 3))
        z = model.encode(pts).data
        r = sample_rotation_uniform(rng.child(2))
        z_r = model.encode(rotate(pts, r)).data
        assert np.abs(z_r - rotate(z, r)).max() > 0.1 * np.abs(z).max()

    def test_decoder_joint_invariance(self):
        rng = Rng(24)
        model = M.build_model(mini_spec("vn_occnet", head="occupancy"), rng.child(0))
        pts = rng.child(1).normal((16, 3))
        z = model.encode(pts)
        queries = rng.child(2).normal((10, 3))
        base = model.decode_batch(queries, z).data
        for t in range(10):
            r = sample_rotation_uniform(rng.child(3, t))
            probs = model.decode_batch(rotate(queries, r), Tensor(rotate(z.data, r))).data
            assert np.abs(probs - base).max() <= 1e-9

    def test_zero_query_depends_only_on_latent_invariants(self):
        rng = Rng(25)
        model = M.build_model(mini_spec("vn_occnet", head="occupancy"), rng.child(0))
        z = model.encode(rng.child(1).normal((12, 3)))
        r = sample_rotation_uniform(rng.child(2))
        a = model.decode(np.zeros(3), z).item()
        b = model.decode(np.zeros(3), Tensor(rotate(z.data, r))).item()
        assert abs(a - b) <= 1e-12

    def test_probabilities_in_open_unit_interval(self):
        rng = Rng(26)
        model = M.build_model(mini_spec("vn_occnet", head="occupancy"), rng.child(0))
        z = model.encode(rng.child(1).normal((16, 3)))
        probs = model.decode_batch(rng.child(2).normal((50, 3)) * 3.0, z).data
        assert ((probs > 0.0) & (probs < 1.0)).all()


class TestParameterAccounting:
    @pytest.mark.parametrize("arch", ["vn_pointnet", "vn_dgcnn"])
    def test_default_pairs_meet_ratio_bound(self, arch):
        spec = M.ModelSpec(architecture=arch)
        vn = M.build_model(spec, Rng(27))
        scalar = M.build_model(M.scalar_twin(spec), Rng(27))
        ratio = vn.parameter_count() / scalar.parameter_count()
        assert ratio <= 2.0 / 9.0 + 0.05

    def test_param_names_stable_and_loadable(self):
        spec = mini_spec("vn_dgcnn")
        a = M.build_model(spec, Rng(28))
        b = M.build_model(spec, Rng(29))
        assert list(a.params()) == list(b.params())
        b.load_tensors({k: t.data for k, t in a.params().items()})
        pts = Rng(30).normal((10, 3))
        np.testing.assert_array_equal(a.classify(pts).data, b.classify(pts).data)

    def test_load_rejects_wrong_names(self):
        model = M.build_model(mini_spec("vn_pointnet"), Rng(31))
        with pytest.raises(KeyError):
            model.load_tensors({"nope": np.zeros(3)})


class TestModelSpec:
    def test_unknown_architecture(self):
        with pytest.raises(ValueError):
            M.ModelSpec(architecture="transformer")

    def test_round_trip_dict(self):
        spec = mini_spec("vn_dgcnn", pooling="vn_max", nonlinearity="detached")
        again = M.ModelSpec.from_dict(spec.to_dict())
        assert again == spec

    def test_from_dict_rejects_unknown_keys(self):
        with pytest.raises(ValueError):
            M.ModelSpec.from_dict({"architecture": "vn_dgcnn", "depth": 7})

    def test_scalar_twin_maps_architecture(self):
        assert M.scalar_twin(mini_spec("vn_pointnet")).architecture == "scalar_pointnet"
        with pytest.raises(ValueError):
            M.scalar_twin(mini_spec("scalar_dgcnn"))

    @pytest.mark.parametrize("nonlin", ["builtin", "detached"])
    @pytest.mark.parametrize("arch", ["vn_pointnet", "vn_dgcnn"])
    def test_both_nonlinearity_layouts_stay_invariant(self, arch, nonlin):
        rng = Rng(32)
        model = M.build_model(mini_spec(arch, nonlinearity=nonlin), rng.child(0))
        pts = rng.child(1).normal((14, 3))
        base = model.classify(pts).data
        r = sample_rotation_uniform(rng.child(2))
        assert np.abs(model.classify(rotate(pts, r)).data - base).max() <= 1e-8
