import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rcfuse.errors import EmptyMask, EmptyReferenceSet
from rcfuse.geometry import InstanceMask, ReferencePointSet
from rcfuse.surface_fit import (BBox2D, FitConfig, SurfaceCoefficients, build_depth_enhanced_mask, evaluate_surface,
                                extract_bbox, fit_surface, predict_mask_depth, surface_fit_loss)

IDENT = (0.0, 0.0, 1.0)
SIZE = (64, 48)


def _box_mask(u1, v1, u2, v2, iid=1, size=SIZE):
    uu, vv = np.meshgrid(np.arange(u1, u2 + 1), np.arange(v1, v2 + 1))
    return InstanceMask(iid, np.column_stack([uu.ravel(), vv.ravel()]), size)


def _coef(rho, norm=IDENT, shape="quadratic"):
    return SurfaceCoefficients(rho, shape, 1.0, norm)


def test_extract_bbox_examples():
    assert extract_bbox(InstanceMask(1, np.array([[3, 4]]), SIZE)) == BBox2D(3, 4, 3, 4)
    assert extract_bbox(InstanceMask(1, np.array([[1, 2], [5, 7]]), SIZE)) == BBox2D(1, 2, 5, 7)
    with pytest.raises(EmptyMask):
        extract_bbox(InstanceMask(1, np.zeros((0, 2)), SIZE))


def test_depth_enhanced_mask_examples():
    a = _box_mask(0, 0, 4, 4, 1)
    b = _box_mask(10, 10, 14, 14, 2)
    c = _box_mask(20, 20, 22, 22, 3)
    ra = ReferencePointSet([[1, 1, 4.0], [2, 2, 6.0]])
    rb = ReferencePointSet([[11, 11, 9.0]])
    md = build_depth_enhanced_mask([(a, ra), (b, rb), (c, ReferencePointSet.empty())], SIZE)
    assert md.shape == (48, 64)
    assert np.all(md[a.v, a.u] == 5.0)
    assert np.all(md[b.v, b.u] == 9.0)
    assert np.all(md[c.v, c.u] == 0.0)
    assert np.count_nonzero(md) == len(a) + len(b)


def test_depth_enhanced_mask_overlap_rule():
    a = _box_mask(0, 0, 4, 4, 1)
    b = _box_mask(3, 3, 8, 8, 2)
    one = ReferencePointSet([[1, 1, 4.0]])
    two = ReferencePointSet([[5, 5, 9.0], [6, 6, 9.0]])
    md = build_depth_enhanced_mask([(a, one), (b, two)], SIZE)
    assert md[3, 3] == 9.0            # more references wins
    md = build_depth_enhanced_mask([(b, ReferencePointSet([[5, 5, 9.0]])), (a, one)], SIZE)
    assert md[3, 3] == 4.0            # tie goes to the lower id


def test_evaluate_surface_examples():
    assert evaluate_surface(_coef([0, 0, 0, 0, 0, 7]), 123.0, -4.0) == 7.0
    assert evaluate_surface(_coef([1, 0, 0, 0, 0, 0]), 2, 3) == 4.0
    assert evaluate_surface(_coef([1, 1, 1, 1, 1, 1]), 1, 1) == 6.0
    out = evaluate_surface(_coef([0, 0, 0, 1, 0, 0]), np.arange(3), np.zeros(3))
    assert out.tolist() == [0.0, 1.0, 2.0]


def _refs_from(coef, mask, n, rng):
    pick = rng.choice(len(mask), n, replace=False)
    u, v = mask.u[pick], mask.v[pick]
    return ReferencePointSet(np.column_stack([u, v, evaluate_surface(coef, u, v)]))


def test_exact_quadratic_recovery():
    rng = np.random.default_rng(0)
    mask = _box_mask(5, 5, 50, 40)
    norm = (27.5, 22.5, 45.0)
    truth = _coef([0.8, -0.5, 0.3, 1.0, -2.0, 12.0], norm)
    refs = _refs_from(truth, mask, 50, rng)
    coef = fit_surface(refs, mask, FitConfig(lam=0.0, ridge=0.0))
    assert coef.shape_used == "quadratic"
    assert np.sqrt(np.mean((predict_mask_depth(coef, mask) - predict_mask_depth(truth, mask)) ** 2)) <= 1e-6


def test_single_reference_falls_back_to_constant():
    mask = _box_mask(0, 0, 9, 9)
    coef = fit_surface(ReferencePointSet([[3, 3, 8.0]]), mask, FitConfig())
    assert coef.shape_used == "constant"
    assert np.allclose(predict_mask_depth(coef, mask), 8.0)
    assert np.all(coef.rho[:5] == 0)


def test_plane_interpolates_three_points():
    mask = _box_mask(0, 0, 20, 20)
    pts = np.array([[0.0, 0.0, 5.0], [20.0, 0.0, 7.0], [0.0, 20.0, 4.0]])
    coef = fit_surface(ReferencePointSet(pts), mask, FitConfig(shape="plane", lam=0.0, ridge=0.0))
    assert coef.shape_used == "plane"
    assert np.all(coef.rho[:3] == 0)
    # oracle: solve d = p*u + q*v + r directly in raw pixel coordinates
    a = np.column_stack([pts[:, 0], pts[:, 1], np.ones(3)])
    p, q, r = np.linalg.solve(a, pts[:, 2])
    uu, vv = mask.u, mask.v
    assert np.allclose(predict_mask_depth(coef, mask), p * uu + q * vv + r, atol=1e-12)
    assert surface_fit_loss([(ReferencePointSet(pts), mask, coef)], 0.0) <= 1e-24


def test_fallback_for_collinear_references():
    mask = _box_mask(0, 0, 20, 20)
    pts = ReferencePointSet([[u, 5.0, 5.0 + 0.1 * u] for u in range(0, 20, 2)])
    coef = fit_surface(pts, mask, FitConfig(lam=0.0))
    assert coef.shape_used in ("plane", "constant")
    assert coef.condition_estimate <= 1e8
    again = fit_surface(pts, mask, FitConfig(lam=0.0))
    assert again.shape_used == coef.shape_used and np.array_equal(again.rho, coef.rho)


def test_fit_errors():
    mask = _box_mask(0, 0, 3, 3)
    with pytest.raises(EmptyReferenceSet):
        fit_surface(ReferencePointSet.empty(), mask)
    with pytest.raises(ValueError):
        FitConfig(shape="cubic")
    with pytest.raises(ValueError):
        FitConfig(lam=-1)
    with pytest.raises(ValueError):
        FitConfig(cond_max=1)


def test_surface_fit_loss_examples():
    px = InstanceMask(1, np.array([[2, 2]]), SIZE)
    refs = ReferencePointSet([[2, 2, 5.0]])
    assert surface_fit_loss([(refs, px, _coef([0, 0, 0, 0, 0, 5]))], 1.0) == 0.0
    off = _coef([0, 0, 0, 0, 0, 3])
    assert surface_fit_loss([(refs, px, off)], 0.0) == pytest.approx(4.0)
    assert surface_fit_loss([(refs, px, off)], 1.0) == pytest.approx(8.0)
    # plain sum over instances
    assert surface_fit_loss([(refs, px, off)] * 3, 1.0) == pytest.approx(24.0)


def test_coefficients_dict_round_trip():
    c = _coef([1, 2, 3, 4, 5, 6], (1.5, 2.5, 3.0), "quadratic")
    back = SurfaceCoefficients.from_dict(c.to_dict())
    assert np.array_equal(back.rho, c.rho) and back.normalization == c.normalization


@settings(max_examples=60, deadline=None)
@given(st.floats(0.1, 10.0), st.integers(0, 10_000))
def test_target_linearity(k, seed):
    rng = np.random.default_rng(seed)
    mask = _box_mask(0, 0, 30, 25)
    refs = ReferencePointSet(np.column_stack([rng.integers(0, 31, 15), rng.integers(0, 26, 15), rng.uniform(5, 20, 15)]))
    cfg = FitConfig(lam=1.0, ridge=0.0)
    base = predict_mask_depth(fit_surface(refs, mask, cfg), mask)
    scaled = predict_mask_depth(fit_surface(refs.scaled(k), mask, cfg), mask)
    assert np.allclose(scaled, k * base, rtol=1e-9, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(-40, 40), st.floats(-40, 40), st.floats(0.2, 5.0))
def test_normalization_invariance(seed, du, dv, ks):
    rng = np.random.default_rng(seed)
    mask = _box_mask(3, 2, 40, 30)
    truth = _coef(np.r_[rng.uniform(-1, 1, 5), 10.0], (21.5, 16.0, 37.0))
    refs = _refs_from(truth, mask, 20, rng)
    refs = ReferencePointSet(refs.uvd + np.c_[np.zeros((20, 2)), rng.normal(0, 0.05, 20)])
    cfg = FitConfig(lam=1.0, ridge=0.0)
    a = fit_surface(refs, mask, cfg)
    b = fit_surface(refs, mask, cfg, normalization=(21.5 + du, 16.0 + dv, 37.0 * ks))
    assert a.shape_used == b.shape_used == "quadratic"
    assert np.allclose(predict_mask_depth(a, mask), predict_mask_depth(b, mask), atol=1e-6)


def test_lambda_pulls_mean_together():
    rng = np.random.default_rng(5)
    mask = _box_mask(0, 0, 40, 40)
    u = rng.integers(0, 10, 10)
    v = rng.integers(0, 40, 10)
    refs = ReferencePointSet(np.column_stack([u, v, 10 + 0.2 * u + rng.normal(0, 0.3, 10)]))
    gaps = [abs(predict_mask_depth(fit_surface(refs, mask, FitConfig(lam=lam)), mask).mean() - refs.d.mean())
            for lam in (0.0, 1.0, 10.0, 100.0, 1e4)]
    assert all(b <= a + 1e-12 for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] < gaps[0]
