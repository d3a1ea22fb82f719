import json
import math

import mpmath
import numpy as np
import pytest

from occudiff import metrics as MT
from occudiff.sampler import PredictionResult


def rotation(d, seed):
    q, _ = np.linalg.qr(np.random.default_rng(seed).normal(size=(d, d)))
    return q


def frechet_mp(mu_a, sa, mu_b, sb):
    """Closed-form Frechet distance in 40-digit arithmetic."""
    mpmath.mp.dps = 40
    A, B = mpmath.matrix(sa.tolist()), mpmath.matrix(sb.tolist())
    ra = mpmath.sqrtm(A)
    cross = mpmath.sqrtm(ra * B * ra)
    tr = sum(A[i, i] + B[i, i] - 2 * cross[i, i] for i in range(A.rows))
    diff = sum((mpmath.mpf(x) - mpmath.mpf(y)) ** 2 for x, y in zip(mu_a, mu_b))
    return float(mpmath.re(diff + tr))


def test_fid_self_is_zero():
    a = np.random.default_rng(0).normal(size=(300, 16))
    assert abs(MT.fid(a, a)) < 1e-8


def test_fid_shared_eigenbasis_closed_form():
    d, n = 16, 5000
    rng = np.random.default_rng(1)
    R = rotation(d, 2)
    la, lb = rng.uniform(0.5, 2.0, d), rng.uniform(0.5, 4.0, d)
    mu_b = rng.normal(size=d) * 3.0
    a = rng.normal(size=(n, d)) * np.sqrt(la) @ R.T
    b = rng.normal(size=(n, d)) * np.sqrt(lb) @ R.T + mu_b
    exact = mu_b @ mu_b + np.sum((np.sqrt(la) - np.sqrt(lb)) ** 2)
    assert MT.fid(a, b) == pytest.approx(exact, rel=0.02)


def test_fid_general_covariances_closed_form():
    d, n = 6, 5000
    rng = np.random.default_rng(3)
    La = rng.normal(size=(d, d)) / math.sqrt(d)
    Lb = rng.normal(size=(d, d)) / math.sqrt(d) * 1.5
    mu_a, mu_b = rng.normal(size=d), rng.normal(size=d)
    sa, sb = La @ La.T + 0.2 * np.eye(d), Lb @ Lb.T + 0.1 * np.eye(d)
    a = rng.multivariate_normal(mu_a, sa, size=n)
    b = rng.multivariate_normal(mu_b, sb, size=n)
    exact = frechet_mp(mu_a, sa, mu_b, sb)
    assert MT.fid(a, b) == pytest.approx(exact, rel=0.02)
    # with exact moments plugged in, the estimator matches to float precision
    assert frechet_mp(a.mean(0), np.cov(a, rowvar=False), b.mean(0), np.cov(b, rowvar=False)) \
        == pytest.approx(MT.fid(a, b), rel=1e-9)


def test_fid_translation_and_symmetry():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(500, 10))
    c = rng.normal(size=10) * 3
    assert MT.fid(a, a + c) == pytest.approx(c @ c, rel=1e-9)
    b = rng.normal(size=(400, 10)) * 1.3
    assert MT.fid(a, b) == pytest.approx(MT.fid(b, a), rel=1e-9)
    assert MT.fid(a, b) >= 0


def test_fid_small_sets_need_regularisation():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(10, 16)), rng.normal(size=(10, 16))
    with pytest.raises(ValueError):
        MT.fid(a, b)
    assert math.isfinite(MT.fid(a, b, regularize=True))


def _permutation_null(a, b, n_perm, seed):
    pool = np.concatenate([a, b])
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(n_perm):
        p = rng.permutation(len(pool))
        vals.append(MT.kid(pool[p[:len(a)]], pool[p[len(a):]]))
    return np.mean(vals), np.std(vals, ddof=1)


def test_kid_same_distribution_within_permutation_null():
    rng = np.random.default_rng(6)
    a, b = rng.normal(size=(1000, 32)), rng.normal(size=(1000, 32))
    mean, sd = _permutation_null(a, b, 40, 0)
    assert abs(MT.kid(a, b) - mean) < 3 * sd
    halves = rng.normal(size=(1000, 32))
    assert abs(MT.kid(halves[:500], halves[500:]) - mean) < 3 * sd * math.sqrt(2) * 2


def test_kid_unbiased_over_splits():
    rng = np.random.default_rng(7)
    vals = [MT.kid(rng.normal(size=(100, 8)), rng.normal(size=(100, 8))) for _ in range(60)]
    assert abs(np.mean(vals)) < 3 * np.std(vals, ddof=1) / math.sqrt(len(vals))


def test_kid_detects_shift():
    rng = np.random.default_rng(8)
    a = rng.normal(size=(300, 16))
    b = rng.normal(size=(300, 16)) + 3.0
    _, sd = _permutation_null(a, rng.normal(size=(300, 16)), 20, 1)
    assert MT.kid(a, b) > 100 * sd


def test_kid_subsets_variant():
    rng = np.random.default_rng(9)
    a, b = rng.normal(size=(200, 8)), rng.normal(size=(200, 8)) + 1
    assert MT.kid(a, b, subsets=5, subset_size=100) > 0


def test_iou_identities():
    rng = np.random.default_rng(10)
    a = rng.integers(0, 2, (6, 6, 6))
    b = rng.integers(0, 2, (6, 6, 6))
    assert MT.iou(a, a) == 1.0
    assert MT.iou(a, 1 - a) == 0.0
    assert MT.iou(np.zeros((3, 3, 3)), np.zeros((3, 3, 3))) == 1.0
    assert MT.iou(a, b) == MT.iou(b, a)
    assert 0 <= MT.iou(a, b) <= 1
    inter = np.sum(a & b)
    assert MT.iou(a, b) == inter / np.sum(a | b)
    with pytest.raises(ValueError):
        MT.iou(a, np.zeros((2, 2, 2)))


def test_vp_vo():
    assert MT.vp_vo(PredictionResult(None, None, v_p=30, v_o=20)) == 1.5
    assert math.isnan(MT.vp_vo(PredictionResult(None, None, v_p=3, v_o=0)))


def test_embedder_frozen_and_discriminative():
    e1, e2 = MT.GridEmbedder(seed=3), MT.GridEmbedder(seed=3)
    g = np.random.default_rng(0).integers(0, 2, (16, 16, 16))
    assert np.array_equal(e1.embed(g), e2.embed(g))
    assert e1.embed(g).shape == (64,)
    assert not np.array_equal(e1.embed(g), MT.GridEmbedder(seed=4).embed(g))
    assert not np.array_equal(e1.embed(g), e1.embed(np.zeros((16, 16, 16))))
    with pytest.raises(ValueError):
        e1.embed(np.zeros((8, 8, 8)))


def test_evaluate_run_and_summary(tmp_path):
    rng = np.random.default_rng(11)
    emb = MT.GridEmbedder(dims=(8, 8, 8), dim=16, channels=(4, 8))
    gts = [rng.integers(0, 2, (8, 8, 8)) for _ in range(30)]
    preds = [np.where(rng.random((8, 8, 8)) < 0.1, 1 - g, g) for g in gts]
    bls = [np.zeros((8, 8, 8), int) for _ in gts]
    ss, bl = MT.evaluate_run(preds, bls, gts, emb, ids=list(range(30)), vp_vo_series=[1.0] * 30)
    assert ss.fid < bl.fid and ss.kid_x1000 < bl.kid_x1000
    assert ss.n_samples == 30 and not ss.regularized
    assert all(0 <= v <= 1 for v in ss.iou)
    # order given by ids, not input position
    perm = rng.permutation(30)
    ss2, _ = MT.evaluate_run([preds[i] for i in perm], [bls[i] for i in perm], [gts[i] for i in perm],
                             emb, ids=list(perm))
    assert ss2.fid == pytest.approx(ss.fid, rel=1e-9, abs=1e-9)
    with pytest.raises(ValueError):
        MT.evaluate_run(preds[:-1], bls, gts, emb)
    MT.write_summary(tmp_path / "summary.json", [ss, bl])
    data = json.loads((tmp_path / "summary.json").read_text())
    assert "SS" in json.dumps(data) and "BL" in json.dumps(data)
