"""Backend equivalence: the compiled kernels must match the numpy fallback."""

import numpy as np
import pytest

from vnn._kernels import BACKEND, backends
from vnn.autodiff import Rng

from util import max_rel_err

ALL = backends()


def test_compiled_backend_is_available_and_selected():
    # the build in this repo compiles the extension; the fallback still works
    assert "numpy" in ALL
    assert BACKEND in ALL


@pytest.mark.skipif(len(ALL) < 2, reason="compiled backend not built")
class TestEquivalence:
    def test_channel_map(self):
        rng = Rng(1)
        w = rng.normal((7, 5))
        v = rng.normal((11, 5, 3))
        g = rng.normal((11, 7, 3))
        outs = {n: b.channel_map_fwd(w, v) for n, b in ALL.items()}
        assert max_rel_err(outs["numpy"], outs["cython"]) <= 1e-12
        gw_n, gv_n = ALL["numpy"].channel_map_bwd(w, v, g)
        gw_c, gv_c = ALL["cython"].channel_map_bwd(w, v, g)
        assert max_rel_err(gw_n, gw_c) <= 1e-12
        assert max_rel_err(gv_n, gv_c) <= 1e-12

    @pytest.mark.parametrize("alpha", [0.0, 0.2])
    def test_vn_clip(self, alpha):
        rng = Rng(2)
        q = rng.normal((9, 6, 3))
        k = rng.normal((9, 6, 3))
        g = rng.normal((9, 6, 3))
        f_n = ALL["numpy"].vn_clip_fwd(q, k, 1e-6, alpha)
        f_c = ALL["cython"].vn_clip_fwd(q, k, 1e-6, alpha)
        assert max_rel_err(f_n, f_c) <= 1e-12
        b_n = ALL["numpy"].vn_clip_bwd(q, k, 1e-6, alpha, g)
        b_c = ALL["cython"].vn_clip_bwd(q, k, 1e-6, alpha, g)
        for x, y in zip(b_n, b_c):
            assert max_rel_err(x, y) <= 1e-12

    def test_pairwise_sqdist(self):
        x = Rng(3).normal((20, 3))
        d_n = ALL["numpy"].pairwise_sqdist(x)
        d_c = ALL["cython"].pairwise_sqdist(x)
        assert max_rel_err(d_n, d_c) <= 1e-12

    @pytest.mark.parametrize("exclude_self", [True, False])
    def test_knn_select_identical_indices(self, exclude_self):
        x = Rng(4).normal((25, 3))
        d = ALL["numpy"].pairwise_sqdist(x)
        i_n = ALL["numpy"].knn_select(d, 6, exclude_self)
        i_c = ALL["cython"].knn_select(d, 6, exclude_self)
        np.testing.assert_array_equal(i_n, i_c)

    def test_knn_tie_break_matches_on_exact_ties(self):
        # symmetric integer grid: many exactly equal distances
        pts = np.array([[float(i), 0.0, 0.0] for i in (-2, -1, 0, 1, 2)])
        d = ALL["numpy"].pairwise_sqdist(pts)
        i_n = ALL["numpy"].knn_select(d, 3, True)
        i_c = ALL["cython"].knn_select(d, 3, True)
        np.testing.assert_array_equal(i_n, i_c)
        # point 0 (x=-2): nearest -1, then 0, then 1
        np.testing.assert_array_equal(i_n[0], [1, 2, 3])
        # center point (x=0): ties at distance 1 and 4 resolve to lower index
        np.testing.assert_array_equal(i_n[2], [1, 3, 0])
