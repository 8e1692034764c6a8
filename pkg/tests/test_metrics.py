import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from mrsynth.metrics import (
    BootstrapSpec, _icc21, dice, f1_bootstrap, f1_per_class, icc, normalize_pair, pearson, psnr,
    read_report, ssim, summarize, write_report,
)


def fixtures(n=100, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        gt = rng.random((8, 8, 8))
        pred = gt + rng.normal(0, rng.uniform(0.01, 0.5), gt.shape)
        yield pred, gt


@pytest.mark.slow
def test_psnr_ssim_match_oracle():
    for pred, gt in fixtures():
        assert abs(psnr(pred, gt) - oracles.psnr(pred, gt)) < 1e-9
        assert abs(ssim(pred, gt) - oracles.ssim(pred, gt)) < 1e-9


def test_dice_pearson_match_oracle():
    rng = np.random.default_rng(1)
    for pred, gt in fixtures(seed=2):
        a, b = pred > rng.uniform(0.2, 0.8), gt > rng.uniform(0.2, 0.8)
        assert abs(dice(a, b) - oracles.dice(a, b)) < 1e-9
        assert abs(pearson(pred, gt) - oracles.pearson(pred, gt)) < 1e-9


def test_f1_matches_oracle():
    rng = np.random.default_rng(3)
    classes = [0, 1, 2, 3]
    for _ in range(100):
        true = rng.integers(0, 4, 8**3 // 8)
        pred = np.where(rng.random(true.size) < 0.7, true, rng.integers(0, 4, true.size))
        ours = f1_per_class(pred, true, classes)
        for c in classes:
            ref = oracles.f1(pred.tolist(), true.tolist(), c)
            assert (math.isnan(ref) and math.isnan(ours[c])) or abs(ours[c] - ref) < 1e-9


def test_psnr_identical_is_capped():
    x = np.random.default_rng(0).random((8, 8, 8))
    assert psnr(x, x) == 100.0


def test_psnr_known_value():
    gt = np.zeros((10, 10, 10))
    gt[5:] = 1.0
    pred = gt + 0.1
    # percentiles of gt are exactly 0 and 1; clipping leaves 0.1 error on the zero half
    assert psnr(pred, gt) == pytest.approx(10 * math.log10(1 / (0.5 * 0.01)), abs=1e-9)


def test_ssim_identical_is_one():
    x = np.random.default_rng(0).random((9, 9, 9))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)


def test_ssim_can_be_negative():
    x = np.random.default_rng(0).random((9, 9, 9))
    assert ssim(1 - x, x) < 0


def test_ssim_rejects_small_volume():
    with pytest.raises(ValueError, match="window"):
        ssim(np.ones((6, 8, 8)), np.arange(384.0).reshape(6, 8, 8))


def test_normalization_anchored_on_gt():
    gt = np.linspace(0, 1, 1000).reshape(10, 10, 10)
    p, g = normalize_pair(gt * 5, gt)
    assert p.max() == 1.0 and g.min() == 0.0
    with pytest.raises(ValueError, match="dynamic range"):
        normalize_pair(gt, np.ones_like(gt))
    with pytest.raises(ValueError, match="shape"):
        normalize_pair(gt, gt[:5])


@given(st.integers(0, 10**6))
@settings(max_examples=30, deadline=None)
def test_metric_ranges(seed):
    rng = np.random.default_rng(seed)
    gt = rng.random((8, 8, 8))
    pred = rng.random((8, 8, 8))
    assert -1 <= ssim(pred, gt) <= 1
    assert -1 <= pearson(pred, gt) <= 1
    assert 0 <= dice(pred > 0.5, gt > 0.5) <= 1
    assert psnr(pred, gt) <= 100


def test_dice_empty_masks():
    z = np.zeros((3, 3, 3), bool)
    assert dice(z, z) == 1.0


def test_pearson_zero_variance():
    with pytest.raises(ValueError, match="zero variance"):
        pearson(np.ones(5), np.arange(5))


SHROUT_FLEISS = np.array([
    [9, 2, 5, 8], [6, 1, 3, 2], [8, 4, 6, 8], [7, 1, 2, 6], [10, 5, 6, 9], [6, 2, 4, 7],
], dtype=float)


def test_icc21_published_example():
    # two-way random, absolute agreement, single rater: 0.29 in the classic table
    assert _icc21(SHROUT_FLEISS) == pytest.approx(0.28976, abs=5e-5)


def test_icc_perfect_agreement():
    x = np.arange(10.0)
    est = icc(np.column_stack([x, x]))
    assert est.value == pytest.approx(1.0)
    assert est.ci_lo == pytest.approx(1.0) and est.n_defined == 100


def test_icc_rejects_degenerate():
    with pytest.raises(ValueError, match="degenerate"):
        icc(np.ones((5, 2)))
    with pytest.raises(ValueError, match="3 rows"):
        icc(np.ones((2, 2)))
    with pytest.raises(ValueError, match="n x 2"):
        icc(np.ones((5, 3)))


def test_f1_bootstrap_is_deterministic_and_matches_manual_resampling():
    rng = np.random.default_rng(7)
    true = rng.integers(0, 3, 60)
    pred = np.where(rng.random(60) < 0.8, true, rng.integers(0, 3, 60))
    spec = BootstrapSpec(seed=11)
    a = f1_bootstrap(pred, true, [0, 1, 2], spec)
    b = f1_bootstrap(pred, true, [0, 1, 2], spec)
    assert a == b
    # manual: 100 draws of 42 cases without replacement from a seeded generator
    draw = np.random.default_rng(11)
    pools = {c: [] for c in range(3)}
    for _ in range(100):
        idx = draw.choice(60, size=42, replace=False)
        assert len(set(idx.tolist())) == 42
        for c in range(3):
            pools[c].append(oracles.f1(pred[idx].tolist(), true[idx].tolist(), c))
    for c in range(3):
        lo, hi = np.percentile(pools[c], [2.5, 97.5])
        assert a[c].ci_lo == pytest.approx(lo, abs=1e-12)
        assert a[c].ci_hi == pytest.approx(hi, abs=1e-12)
        assert a[c].value == pytest.approx(oracles.f1(pred.tolist(), true.tolist(), c))
        assert a[c].n_defined == 100
    assert f1_bootstrap(pred, true, [0, 1, 2], BootstrapSpec(seed=12))[0] != a[0]


def test_f1_bootstrap_absent_class_is_nan():
    est = f1_bootstrap([0, 1, 0, 1], [0, 1, 1, 1], [0, 1, 2])
    assert math.isnan(est[2].value) and est[2].n_defined == 0


def test_f1_bootstrap_validation():
    with pytest.raises(ValueError, match="empty"):
        f1_bootstrap([], [], [0])
    with pytest.raises(ValueError, match="outside"):
        f1_bootstrap([0, 5], [0, 0], [0, 1])


def test_bootstrap_spec_validation():
    with pytest.raises(ValueError):
        BootstrapSpec(fraction=0)
    assert BootstrapSpec().subsample_size(10) == 7


def test_report_roundtrip(tmp_path):
    rows = [{"case_id": "c1", "metric": "psnr", "value": 31.5, "ci_lo": math.nan, "ci_hi": math.nan,
             "normalization": "percentile_995", "seed": 0}]
    write_report(tmp_path / "r.csv", rows)
    back = read_report(tmp_path / "r.csv")
    assert back == [{"case_id": "c1", "metric": "psnr", "value": "31.5", "ci_lo": "", "ci_hi": "",
                     "normalization": "percentile_995", "seed": "0"}]


def test_summarize():
    s = summarize([1, 2, 3, 4, 5])
    assert s == {"mean": 3.0, "median": 3.0, "q1": 2.0, "q3": 4.0, "n": 5}
