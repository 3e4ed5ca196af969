"""Attention paths: hand-checked values, identity-at-init gates, masking
semantics, and permutation/isolation invariants."""
import numpy as np
import pytest

from roikit import tensor as T
from roikit.attention import (BoxGuidanceParams, CrossAttnParams, EmbedInjectParams,
                              RoiSelfAttnParams, box_guidance, cross_attention,
                              embedding_injection_baseline, fourier_box_features,
                              masked_instance_attention, roi_self_attention,
                              spatial_to_tokens, tokens_to_spatial)
from roikit.precision import precision
from roikit.roi_ops import RoiBox, RoiBoxBatch
from roikit.verify import gradcheck


def _params(c=4, d=3, dk=4, seed=0):
    return CrossAttnParams.init(c, d, dk, np.random.default_rng(seed))


def _batch(box_lists, capacity=None):
    return RoiBoxBatch.from_lists(box_lists, capacity=capacity)


def test_single_token_attention_is_value_projection():
    # With one caption token the softmax is identically 1, so every query
    # receives exactly v @ wo regardless of the query content.
    with precision("f64"):
        p = _params()
        caption = T.tensor(np.random.default_rng(1).standard_normal((1, 1, 3)))
        q1 = T.tensor(np.random.default_rng(2).standard_normal((1, 5, 4)))
        q2 = T.tensor(np.random.default_rng(3).standard_normal((1, 5, 4)))
        o1 = cross_attention(q1, caption, p).data
        o2 = cross_attention(q2, caption, p).data
    np.testing.assert_allclose(o1, o2, rtol=0, atol=1e-12)
    expected = (caption.data @ p.wv.data) @ p.wo.data
    np.testing.assert_allclose(o1[0, 0], expected[0, 0], rtol=0, atol=1e-12)


def test_duplicate_tokens_equal_single_token():
    # Two identical keys split the softmax 50/50 over identical values.
    with precision("f64"):
        p = _params()
        tok = np.random.default_rng(4).standard_normal((1, 1, 3))
        q = T.tensor(np.random.default_rng(5).standard_normal((1, 6, 4)))
        one = cross_attention(q, T.tensor(tok), p).data
        two = cross_attention(q, T.tensor(np.concatenate([tok, tok], axis=1)), p).data
    np.testing.assert_allclose(one, two, rtol=0, atol=1e-12)


def test_key_mask_drops_token_exactly():
    with precision("f64"):
        p = _params()
        rng = np.random.default_rng(6)
        keep = rng.standard_normal((1, 1, 3))
        junk = rng.standard_normal((1, 1, 3)) * 100.0
        q = T.tensor(rng.standard_normal((1, 4, 4)))
        both = np.concatenate([keep, junk], axis=1)
        masked = cross_attention(q, T.tensor(both), p,
                                 key_mask=np.array([[[True, False]]])).data
        only = cross_attention(q, T.tensor(keep), p).data
    np.testing.assert_allclose(masked, only, rtol=0, atol=1e-12)


def test_cross_attention_shape_errors():
    p = _params(c=4, d=3)
    with pytest.raises(T.ShapeError):
        cross_attention(T.tensor(np.zeros((1, 2, 5))), T.tensor(np.zeros((1, 2, 3))), p)
    with pytest.raises(T.ShapeError):
        cross_attention(T.tensor(np.zeros((1, 2, 4))), T.tensor(np.zeros((1, 2, 7))), p)


def test_cross_attention_gradients():
    rng = np.random.default_rng(7)
    p = _params(seed=8)
    caption = rng.standard_normal((1, 3, 3))
    probe = rng.standard_normal((1, 5, 4))
    ok, margin = gradcheck(
        lambda q: T.tsum(T.mul(cross_attention(q, T.tensor(caption), p),
                               T.tensor(probe))),
        rng.standard_normal((1, 5, 4)))
    assert ok, f"margin {margin}"


def test_roi_self_attention_identity_at_init():
    # The output projection is zero-initialized, so the residual block starts
    # as an exact identity.
    with precision("f64"):
        p = RoiSelfAttnParams.init(4, 3, np.random.default_rng(9))
        x = np.random.default_rng(10).standard_normal((2, 2, 4, 3, 3))
        out = roi_self_attention(T.tensor(x), p).data
    np.testing.assert_array_equal(out, x)


def test_roi_self_attention_instances_are_isolated():
    # Perturbing instance 0's crop must not change instance 1's output.
    with precision("f64"):
        rng = np.random.default_rng(11)
        p = RoiSelfAttnParams.init(4, 3, rng)
        p.attn.wo.data = rng.standard_normal(p.attn.wo.shape)
        x = rng.standard_normal((1, 2, 4, 3, 3))
        base = roi_self_attention(T.tensor(x), p).data
        x2 = x.copy()
        x2[0, 0] += 1.0
        pert = roi_self_attention(T.tensor(x2), p).data
    np.testing.assert_array_equal(pert[0, 1], base[0, 1])
    assert np.abs(pert[0, 0] - base[0, 0]).max() > 0


def test_spatial_token_round_trip():
    x = np.random.default_rng(12).standard_normal((2, 3, 4, 5))
    back = tokens_to_spatial(spatial_to_tokens(T.tensor(x)), 4, 5)
    np.testing.assert_array_equal(back.data, x.astype(back.data.dtype))


def test_masked_baseline_full_box_equals_unmasked():
    with precision("f64"):
        rng = np.random.default_rng(13)
        p = _params(seed=14)
        feat = T.tensor(rng.standard_normal((1, 4, 8, 8)))
        captions = T.tensor(rng.standard_normal((1, 1, 2, 3)))
        batch = _batch([[RoiBox(0.0, 0.0, 1.0, 1.0)]])
        out = masked_instance_attention(feat, captions, batch, p).data
        tokens = spatial_to_tokens(feat)
        ref = cross_attention(T.reshape(tokens, (1, 1, 64, 4)), captions, p)
        ref = T.moveaxis(T.reshape(ref, (1, 1, 8, 8, 4)), 4, 2).data
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


def test_masked_baseline_zero_outside_mask_and_tiles_partition():
    with precision("f64"):
        rng = np.random.default_rng(15)
        p = _params(seed=16)
        feat = T.tensor(rng.standard_normal((1, 4, 8, 8)))
        captions = T.tensor(rng.standard_normal((1, 2, 2, 3)))
        left, right = RoiBox(0.0, 0.0, 0.5, 1.0), RoiBox(0.5, 0.0, 1.0, 1.0)
        out = masked_instance_attention(feat, captions, _batch([[left, right]]), p).data
    # Left instance writes only the left half; right only the right half.
    assert np.abs(out[0, 0, :, :, 4:]).max() == 0.0
    assert np.abs(out[0, 1, :, :, :4]).max() == 0.0
    assert np.abs(out[0, 0, :, :, :4]).max() > 0
    assert np.abs(out[0, 1, :, :, 4:]).max() > 0


def test_masked_baseline_invalid_slot_contributes_zero():
    with precision("f64"):
        rng = np.random.default_rng(17)
        p = _params(seed=18)
        feat = T.tensor(rng.standard_normal((1, 4, 4, 4)))
        captions = T.tensor(rng.standard_normal((1, 2, 2, 3)))
        batch = _batch([[RoiBox(0.0, 0.0, 1.0, 1.0)]], capacity=2)
        out = masked_instance_attention(feat, captions, batch, p).data
    assert np.abs(out[0, 1]).max() == 0.0


def test_fourier_features_shape_and_local_frame():
    batch = _batch([[RoiBox(0.1, 0.2, 0.5, 0.9)], [RoiBox(0.3, 0.3, 0.6, 0.6)]])
    feats = fourier_box_features(batch)
    assert feats.shape == (2, 1, 64)
    # Local frame collapses every box to (0,0,1,1): all rows identical.
    local = fourier_box_features(batch, local_frame=True)
    np.testing.assert_array_equal(local[0], local[1])
    assert np.abs(feats[0] - feats[1]).max() > 0


def test_box_guidance_identity_with_no_valid_boxes():
    with precision("f64"):
        p = BoxGuidanceParams.init(4, np.random.default_rng(19))
        p.gate.data = np.array([1.5])  # even with an open gate
        x = np.random.default_rng(20).standard_normal((2, 4, 4, 4))
        out = box_guidance(T.tensor(x), _batch([[], []], capacity=2), p)
    np.testing.assert_array_equal(out.data, x)


def test_box_guidance_identity_at_zero_gate():
    with precision("f64"):
        p = BoxGuidanceParams.init(4, np.random.default_rng(21))
        x = np.random.default_rng(22).standard_normal((1, 4, 4, 4))
        batch = _batch([[RoiBox(0.2, 0.2, 0.8, 0.8)]])
        out = box_guidance(T.tensor(x), batch, p)
    # tanh(0) = 0 exactly; only the token round trip touches the values.
    np.testing.assert_allclose(out.data, x, rtol=0, atol=1e-12)


def test_box_guidance_permutation_invariance():
    # Attention over box tokens is a set operation; reordering slots changes
    # only floating-point summation order.
    with precision("f64"):
        rng = np.random.default_rng(23)
        p = BoxGuidanceParams.init(4, rng)
        p.gate.data = np.array([0.7])
        x = rng.standard_normal((1, 4, 6, 6))
        a = RoiBox(0.1, 0.1, 0.4, 0.5)
        b = RoiBox(0.5, 0.3, 0.9, 0.8)
        o1 = box_guidance(T.tensor(x), _batch([[a, b]]), p).data
        o2 = box_guidance(T.tensor(x), _batch([[b, a]]), p).data
    np.testing.assert_allclose(o1, o2, rtol=1e-10, atol=1e-10)


def test_box_guidance_mixed_batch_leaves_empty_item_unchanged():
    with precision("f64"):
        rng = np.random.default_rng(24)
        p = BoxGuidanceParams.init(4, rng)
        p.gate.data = np.array([0.9])
        x = rng.standard_normal((2, 4, 4, 4))
        batch = _batch([[RoiBox(0.2, 0.2, 0.7, 0.7)], []], capacity=1)
        out = box_guidance(T.tensor(x), batch, p).data
    np.testing.assert_allclose(out[1], x[1], rtol=0, atol=1e-12)
    assert np.abs(out[0] - x[0]).max() > 0


def test_embedding_baseline_identity_at_zero_gate():
    with precision("f64"):
        rng = np.random.default_rng(25)
        p = EmbedInjectParams.init(4, 3, rng)
        x = rng.standard_normal((1, 4, 4, 4))
        captions = T.tensor(rng.standard_normal((1, 2, 2, 3)))
        batch = _batch([[RoiBox(0.1, 0.1, 0.6, 0.6), RoiBox(0.4, 0.4, 0.9, 0.9)]])
        out = embedding_injection_baseline(T.tensor(x), captions, batch, p)
    np.testing.assert_allclose(out.data, x, rtol=0, atol=1e-12)


def test_embedding_baseline_gate_open_changes_output():
    with precision("f64"):
        rng = np.random.default_rng(26)
        p = EmbedInjectParams.init(4, 3, rng)
        p.gate.data = np.array([1.0])
        x = rng.standard_normal((1, 4, 4, 4))
        captions = T.tensor(rng.standard_normal((1, 1, 2, 3)))
        batch = _batch([[RoiBox(0.1, 0.1, 0.6, 0.6)]])
        out = embedding_injection_baseline(T.tensor(x), captions, batch, p)
    assert np.abs(out.data - x).max() > 0
    assert out.shape == (1, 4, 4, 4)
