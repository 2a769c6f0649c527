import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regagg.metrics import MetricsReport, dasymetric_map, pixel_mae, region_mae
from regagg.regions import aggregate_oracle
from regagg.synthetic import make_region_maps


def test_pixel_mae():
    assert pixel_mae(np.zeros((2, 2)), np.ones((2, 2))) == 1.0
    assert pixel_mae(np.array([0.5, 1.0]), np.array([0.0, 1.0])) == 0.25
    with pytest.raises(ValueError):
        pixel_mae(np.zeros(2), np.zeros(3))


def test_region_mae_mask():
    est, lab = np.array([[1.0, 5.0], [3.0, 0.0]]), np.array([[2.0, 0.0], [3.0, 4.0]])
    mask = np.array([[True, False], [True, True]])
    assert region_mae(est, lab, mask) == pytest.approx((1 + 0 + 4) / 3)
    with pytest.raises(ValueError):
        region_mae(est, lab, np.zeros((2, 2), bool))


def test_dasymetric_hand_example():
    out = dasymetric_map(np.array([[1.0, 3.0]]), np.array([[1, 1]]), np.array([8.0]))
    np.testing.assert_allclose(out, [[2.0, 6.0]])


def test_dasymetric_zero_estimate_spreads_uniformly():
    out = dasymetric_map(np.zeros((2, 2)), np.array([[1, 1], [1, 2]]), np.array([6.0, 0.0]))
    np.testing.assert_allclose(out, [[2, 2], [2, 0]])


def test_dasymetric_masked_and_background_zeroed():
    regions = np.array([[1, 2], [0, 2]])
    out = dasymetric_map(np.ones((2, 2)), regions, np.array([3.0, 4.0]), np.array([True, False]))
    np.testing.assert_allclose(out, [[3, 0], [0, 0]])


def test_dasymetric_rejects_negative():
    with pytest.raises(ValueError):
        dasymetric_map(np.ones((1, 1)), np.ones((1, 1), int), np.array([-1.0]))
    with pytest.raises(ValueError):
        dasymetric_map(-np.ones((1, 1)), np.ones((1, 1), int), np.array([1.0]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 12), st.booleans())
def test_dasymetric_properties(seed, k, sparse):
    rng = np.random.default_rng(seed)
    regions = make_region_maps(rng, 1, k, 10, 10)[0]
    density = rng.random((10, 10))
    if sparse:
        density *= rng.random((10, 10)) < 0.2
    labels = rng.random(k) * 20
    mask = rng.random(k) > 0.2
    out = dasymetric_map(density, regions, labels, mask)
    sums = aggregate_oracle(out, regions, k)
    np.testing.assert_allclose(sums[mask], labels[mask], rtol=1e-9, atol=1e-9)
    assert np.all(sums[~mask] == 0)
    assert np.all(out >= 0)
    # zeros stay zero unless the whole region was zero
    est = aggregate_oracle(density, regions, k)
    keep_zero = (density == 0) & (est[regions - 1] > 0)
    assert np.all(out[keep_zero] == 0)
    np.testing.assert_allclose(dasymetric_map(out, regions, labels, mask), out, rtol=1e-9, atol=1e-12)


def test_report():
    rep = MetricsReport(0.1, 2.0, {"method": "ral"})
    assert rep.row() == {"method": "ral", "pixel_mae": 0.1, "region_mae": 2.0}
    assert "0.1" in rep.summary()
    with pytest.raises(ValueError):
        MetricsReport(-1.0, None)
