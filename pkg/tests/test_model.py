import numpy as np
import pytest

from wsag.errors import InvalidArgument
from wsag.geometry import build_map_index, validity_mask
from wsag.gradcheck import (
    audit_case,
    audit_loss,
    finite_difference_check,
    naive_finite_difference,
    staged_finite_difference,
)
from wsag.model import (
    POST_CONV_LAYERS,
    PRE_CONV_LAYERS,
    ModelParams,
    ParamLayout,
    backward,
    forward,
    init_params,
)


def tiny_case(seed=0, n=4, d_v=3, d_s=3, d_h=5, s_count=2):
    rng = np.random.default_rng(seed)
    index = build_map_index(n, 4.0 * n)
    params = init_params(d_v, d_s, d_h, seed=seed)
    clips = rng.normal(size=(n, d_v))
    sents = rng.normal(size=(s_count, d_s))
    return params, clips, sents, index


class TestParamLayout:
    def test_field_order(self):
        layout = ParamLayout(3, 4, 5)
        names = [n for n, _ in layout.fields]
        expect = ["w_v", "b_v", "w_s", "b_s"]
        expect += [f"pre{k}_{p}" for k in range(PRE_CONV_LAYERS) for p in ("w", "b")]
        expect += [f"post{k}_{p}" for k in range(POST_CONV_LAYERS) for p in ("w", "b")]
        expect += ["cls_w", "cls_b"]
        assert names == expect

    def test_size_arithmetic(self):
        d_v, d_s, d_h = 3, 4, 5
        layout = ParamLayout(d_v, d_s, d_h)
        manual = (d_h * d_v + d_h + d_h * d_s + d_h
                  + 2 * (9 * d_v * d_v + d_v)
                  + 3 * (9 * d_h * d_h + d_h)
                  + d_h + 1)
        assert layout.size == manual

    def test_slices_are_contiguous(self):
        layout = ParamLayout(2, 2, 3)
        off = 0
        for name, shape in layout.fields:
            sl = layout.slices[name]
            assert sl.start == off
            assert sl.stop - sl.start == int(np.prod(shape))
            off = sl.stop
        assert off == layout.size

    def test_view_is_a_view(self):
        layout = ParamLayout(2, 2, 2)
        theta = np.zeros(layout.size)
        layout.view(theta, "cls_b")[...] = 7.0
        assert theta[layout.slices["cls_b"]][0] == 7.0

    def test_rejects_bad_dims(self):
        with pytest.raises(InvalidArgument):
            ParamLayout(0, 2, 2)
        with pytest.raises(InvalidArgument):
            ParamLayout(2, 2, -1)


class TestInitParams:
    def test_deterministic(self):
        a = init_params(4, 4, 6, seed=3)
        b = init_params(4, 4, 6, seed=3)
        assert np.array_equal(a.theta, b.theta)

    def test_seed_changes_weights(self):
        a = init_params(4, 4, 6, seed=3)
        b = init_params(4, 4, 6, seed=4)
        assert not np.array_equal(a.theta, b.theta)

    def test_biases_zero_weights_bounded(self):
        p = init_params(5, 4, 8, seed=0)
        t = p.tensors()
        for name in ("b_v", "b_s", "pre0_b", "pre1_b", "post0_b",
                     "post1_b", "post2_b", "cls_b"):
            assert np.all(t[name] == 0.0), name
        bound_wv = np.sqrt(6.0 / (5 + 8))
        assert np.all(np.abs(t["w_v"]) < bound_wv)
        bound_pre = np.sqrt(6.0 / (9 * 5 + 9 * 5))
        assert np.all(np.abs(t["pre0_w"]) < bound_pre)
        assert np.any(t["w_v"] != 0.0)

    def test_params_validation(self):
        layout = ParamLayout(2, 2, 2)
        with pytest.raises(InvalidArgument):
            ModelParams(layout, np.zeros(layout.size + 1))
        bad = np.zeros(layout.size)
        bad[0] = np.nan
        with pytest.raises(InvalidArgument):
            ModelParams(layout, bad)


class TestForward:
    def test_shapes_and_range(self):
        params, clips, sents, index = tiny_case()
        maps, cache = forward(params, clips, sents, index)
        assert len(maps) == sents.shape[0]
        mask = validity_mask(index.num_clips)
        for m in maps:
            assert m.shape == (index.num_clips, index.num_clips)
            assert np.all(m[~mask] == 0.0)
            assert np.all(m[mask] > 0.0)
            assert np.all(m[mask] < 1.0)

    def test_zero_classifier_gives_half(self):
        params, clips, sents, index = tiny_case()
        t = params.tensors()
        t["cls_w"][...] = 0.0
        t["cls_b"][...] = 0.0
        maps, _ = forward(params, clips, sents, index)
        mask = validity_mask(index.num_clips)
        for m in maps:
            assert np.allclose(m[mask], 0.5)

    def test_sentence_permutation_equivariance(self):
        params, clips, sents, index = tiny_case(s_count=4)
        maps, _ = forward(params, clips, sents, index)
        perm = [2, 0, 3, 1]
        maps_p, _ = forward(params, clips, sents[perm], index)
        for k, src in enumerate(perm):
            assert np.allclose(maps_p[k], maps[src], atol=1e-12)

    def test_sentences_processed_independently(self):
        params, clips, sents, index = tiny_case(s_count=3)
        maps, _ = forward(params, clips, sents, index)
        solo, _ = forward(params, clips, sents[1:2], index)
        assert np.allclose(solo[0], maps[1], atol=1e-12)

    def test_float32_close_to_float64(self):
        params, clips, sents, index = tiny_case()
        m64, _ = forward(params, clips, sents, index, dtype=np.float64)
        m32, _ = forward(params, clips, sents, index, dtype=np.float32)
        assert m32[0].dtype == np.float32
        for a, b in zip(m32, m64):
            assert np.allclose(a, b, atol=1e-4)

    def test_rejects_bad_shapes(self):
        params, clips, sents, index = tiny_case()
        with pytest.raises(InvalidArgument):
            forward(params, clips[:, :2], sents, index)
        with pytest.raises(InvalidArgument):
            forward(params, clips, sents[:, :2], index)
        with pytest.raises(InvalidArgument):
            forward(params, clips, np.zeros((0, params.d_s)), index)

    def test_rejects_nonfinite_sentences(self):
        params, clips, sents, index = tiny_case()
        sents[0, 0] = np.inf
        with pytest.raises(InvalidArgument):
            forward(params, clips, sents, index)


class TestBackward:
    def test_matches_naive_finite_differences(self):
        params, clips, sents, index = tiny_case(seed=5)
        loss = audit_loss(index, sents.shape[0], seed=11)
        maps, cache = forward(params, clips, sents, index)
        analytic = backward(cache, loss.upstream(maps))
        numeric = naive_finite_difference(params, clips, sents, index, loss, 1e-6)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        rel = np.abs(analytic - numeric) / denom
        # naive central differences at step 1e-6 carry ~1e-9 cancellation
        # noise; gate generously and let the staged audit be the tight check
        assert rel.max() < 1e-3

    def test_staged_matches_naive_exactly_where_smooth(self):
        params, clips, sents, index = tiny_case(seed=6)
        loss = audit_loss(index, sents.shape[0], seed=12)
        naive = naive_finite_difference(params, clips, sents, index, loss, 1e-5)
        staged, crossed = staged_finite_difference(
            params, clips, sents, index, loss, 1e-5)
        # same quantity computed two ways; differences are pure float noise
        assert np.allclose(staged, naive, rtol=1e-6, atol=1e-9)

    def test_upstream_on_invalid_cells_ignored(self):
        params, clips, sents, index = tiny_case()
        maps, cache = forward(params, clips, sents, index)
        up = np.ones((sents.shape[0], index.num_clips, index.num_clips))
        g1 = backward(cache, up)
        maps2, cache2 = forward(params, clips, sents, index)
        up2 = up.copy()
        mask = validity_mask(index.num_clips)
        up2[:, ~mask] = 55.0
        g2 = backward(cache2, up2)
        assert np.allclose(g1, g2, atol=1e-12)

    def test_upstream_shape_checked(self):
        params, clips, sents, index = tiny_case()
        _, cache = forward(params, clips, sents, index)
        with pytest.raises(InvalidArgument):
            backward(cache, np.zeros((1, index.num_clips, index.num_clips)))

    def test_gradient_linearity_in_upstream(self):
        params, clips, sents, index = tiny_case(seed=7)
        rng = np.random.default_rng(0)
        shape = (sents.shape[0], index.num_clips, index.num_clips)
        u1, u2 = rng.normal(size=shape), rng.normal(size=shape)
        _, c1 = forward(params, clips, sents, index)
        g1 = backward(c1, u1)
        _, c2 = forward(params, clips, sents, index)
        g2 = backward(c2, u2)
        _, c3 = forward(params, clips, sents, index)
        g3 = backward(c3, 2.0 * u1 + 0.5 * u2)
        assert np.allclose(g3, 2.0 * g1 + 0.5 * g2, atol=1e-9)


class TestFiniteDifferenceCheck:
    def test_small_model_passes_tightly(self):
        params, clips, sents, index, loss = audit_case(
            seed=0, num_clips=5, d_v=6, d_s=6, d_h=8, n_sentences=2)
        err, report = finite_difference_check(
            params, clips, sents, index, loss, return_report=True)
        assert err < 1e-5
        assert report.kink_params >= 0
        assert report.worst_field in dict(params.layout.fields)

    def test_rejects_bad_epsilon(self):
        params, clips, sents, index, loss = audit_case(
            seed=0, num_clips=4, d_v=4, d_s=4, d_h=4, n_sentences=1)
        with pytest.raises(InvalidArgument):
            finite_difference_check(params, clips, sents, index, loss, epsilon=0.0)

    def test_broken_gradient_is_caught(self):
        # corrupt one analytic path by tampering with the weights between
        # forward and backward; the checker must flag a large error
        params, clips, sents, index, loss = audit_case(
            seed=1, num_clips=4, d_v=4, d_s=4, d_h=4, n_sentences=1)
        maps, cache = forward(params, clips, sents, index)
        analytic = backward(cache, loss.upstream(maps))
        numeric, crossed = staged_finite_difference(
            params, clips, sents, index, loss, 1e-5)
        tampered = analytic.copy()
        sl = params.layout.slices["w_s"]
        tampered[sl] *= 1.5
        denom = np.maximum(np.maximum(np.abs(tampered), np.abs(numeric)), 1e-8)
        rel = np.abs(tampered - numeric) / denom
        assert np.where(crossed, 0.0, rel).max() > 1e-2
