import numpy as np
import pytest
from hypothesis import given, strategies as st
from skimage.metrics import structural_similarity

from msdiff.metrics import (PSNR_CAP, MetricsReport, extract_profile, gaussian_window, mse,
                            psnr, ssim, write_profiles)
from msdiff.phantom import shepp_logan


def windowed_ssim_oracle(a, b, data_range):
    """Direct per-window SSIM with explicit weighted sums, no filtering tricks."""
    w1 = gaussian_window()
    w = np.outer(w1, w1)
    size = len(w1)
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    vals = []
    for i in range(a.shape[0] - size + 1):
        for j in range(a.shape[1] - size + 1):
            pa = a[i:i + size, j:j + size]
            pb = b[i:i + size, j:j + size]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va = (w * (pa - ma) ** 2).sum()
            vb = (w * (pb - mb) ** 2).sum()
            cv = (w * (pa - ma) * (pb - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cv + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_psnr_closed_form():
    a = np.zeros((8, 8))
    b = np.full((8, 8), 0.1)
    assert psnr(b, a, 1.0) == pytest.approx(20.0)
    assert psnr(a, a, 1.0) == PSNR_CAP
    with pytest.raises(ValueError):
        psnr(a, b, 0.0)
    with pytest.raises(ValueError):
        mse(a, np.zeros((4, 4)))


def test_ssim_matches_windowed_oracle(rng):
    a = rng.random((20, 17))
    b = a + 0.2 * rng.standard_normal((20, 17))
    assert ssim(a, b, 1.0) == pytest.approx(windowed_ssim_oracle(a, b, 1.0), rel=1e-10)


def test_ssim_matches_skimage(rng):
    truth = shepp_logan(64)
    recon = truth + 0.05 * rng.standard_normal(truth.shape)
    ref = structural_similarity(recon, truth, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False)
    assert ssim(recon, truth, 1.0) == pytest.approx(ref, abs=1e-6)


def test_ssim_constant_offset_closed_form():
    # A flat image against a shifted flat image: only the luminance term is left.
    a = np.full((16, 16), 0.3)
    b = a + 0.2
    c1 = 0.01**2
    expected = (2 * 0.3 * 0.5 + c1) / (0.3**2 + 0.5**2 + c1)
    assert ssim(a, b, 1.0) == pytest.approx(expected, rel=1e-12)


def test_ssim_negative_for_inverted_structure():
    truth = shepp_logan(64)
    assert ssim(1.0 - truth, truth, 1.0) < 0


def test_ssim_identity_and_guards(rng):
    a = rng.random((12, 12))
    assert ssim(a, a, 1.0) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)), 1.0)
    with pytest.raises(ValueError):
        ssim(a, a, -1.0)


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 1.0))
def test_metric_symmetry_and_bounds(seed, level):
    r = np.random.default_rng(seed)
    a = r.random((14, 14))
    b = a + level * r.standard_normal((14, 14))
    assert ssim(a, b, 1.0) == pytest.approx(ssim(b, a, 1.0), rel=1e-12)
    assert psnr(a, b, 1.0) == psnr(b, a, 1.0)
    assert -1.0 <= ssim(a, b, 1.0) <= 1.0


def test_report_defaults_to_truth_range(rng):
    truth = shepp_logan(32)
    rep = MetricsReport.compare(truth + 0.01, truth)
    assert rep.data_range == pytest.approx(1.0)
    assert rep.mse == pytest.approx(1e-4)
    assert rep.psnr == pytest.approx(40.0)
    flat = MetricsReport.compare(np.zeros((16, 16)), np.zeros((16, 16)))
    assert flat.data_range == 1.0 and flat.psnr == PSNR_CAP


def test_profile_crosses_ellipse_boundary():
    img = shepp_logan(64)
    row = extract_profile(img, 32, "row")
    # Each side crosses the skull ring twice: background -> skull -> brain.
    edges = np.flatnonzero(np.abs(np.diff(row)) > 0.5)
    assert len(edges) == 4
    assert row[edges[0] + 1] == pytest.approx(1.0) and row[edges[1] + 1] == pytest.approx(0.2)
    assert row[0] == 0 and row[-1] == 0
    col = extract_profile(img, 32, "column")
    assert np.array_equal(col, img[:, 32])
    with pytest.raises(IndexError):
        extract_profile(img, 64)
    with pytest.raises(ValueError):
        extract_profile(img, 0, "diagonal")


def test_write_profiles(tmp_path):
    write_profiles(tmp_path / "p.csv", {"truth": np.array([0.0, 1.0]), "fbp": np.array([0.5, 0.25])})
    assert (tmp_path / "p.csv").read_text().splitlines() == ["position,truth,fbp", "0,0,0.5", "1,1,0.25"]
    with pytest.raises(ValueError):
        write_profiles(tmp_path / "q.csv", {"a": np.zeros(2), "b": np.zeros(3)})
