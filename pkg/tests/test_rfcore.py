import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp
from scipy.signal import hilbert

from conftest import SMALL_SIZE, SMALL_SPEC
from oracles import bilinear_at, dft_analytic_envelope, pixel_polar_coords
from reconattack.errors import InvalidInputError
from reconattack.formats import pgm_bytes
from reconattack.phantom import PhantomSpec, generate_frame
from reconattack.rfcore import (
    ConvexGeometry, ReconParams, Reconstructor, RfFrame, attenuation_compensate, envelope,
    log_compress, map_to_pixels, plan_scan, reconstruct, resize_bilinear, scan_convert,
)


# -- envelope ---------------------------------------------------------------

def test_envelope_of_zero_line_is_zero():
    assert np.array_equal(envelope(np.zeros(64)), np.zeros(64))


def test_envelope_of_cosine_is_flat():
    n = np.arange(256)
    x = np.cos(2 * np.pi * 0.1 * n)
    env = envelope(x)
    assert np.allclose(env, dft_analytic_envelope(x), atol=1e-12)
    # 25.6 cycles in the window leak; the DFT oracle peaks at 0.020183 (n = 18, 237)
    assert np.max(np.abs(env[16:240] - 1.0)) == pytest.approx(0.0201830773, abs=1e-9)
    assert np.max(np.abs(env[20:236] - 1.0)) < 0.02


def test_envelope_matches_dft_oracle_on_random_lines():
    rng = np.random.default_rng(1234)
    for _ in range(100):
        x = rng.standard_normal(256)
        err = np.max(np.abs(envelope(x) - dft_analytic_envelope(x)))
        assert err < 1e-9 * np.max(np.abs(x))


@pytest.mark.parametrize("n", [16, 17, 255, 1024])
def test_envelope_agrees_with_scipy_hilbert(n):
    x = np.random.default_rng(n).standard_normal(n)
    assert np.allclose(envelope(x), np.abs(hilbert(x)), rtol=0, atol=1e-12)


def test_padded_envelope_matches_oracle_on_padded_line():
    x = np.random.default_rng(9).standard_normal(100)
    padded = np.concatenate([x, np.zeros(156)])
    assert np.allclose(envelope(x, n_fft=256), dft_analytic_envelope(padded)[:100], atol=1e-12)
    with pytest.raises(InvalidInputError):
        envelope(x, n_fft=50)


def test_padding_removes_wraparound_leak():
    # strong start, silent end: the circular transform leaks the start into the tail
    n = np.arange(512)
    x = np.where(n < 8, 1000.0, 0.0) * np.cos(0.5 * n)
    assert envelope(x)[-4:].max() > 10 * envelope(x, n_fft=1024)[-4:].max()


def test_envelope_works_row_wise():
    x = np.random.default_rng(0).standard_normal((3, 64))
    env = envelope(x)
    for row, e in zip(x, env):
        assert np.allclose(e, envelope(row), atol=0)


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_envelope_rejects_non_finite(bad):
    x = np.zeros(32)
    x[5] = bad
    with pytest.raises(InvalidInputError):
        envelope(x)


def test_envelope_rejects_short_lines():
    with pytest.raises(InvalidInputError):
        envelope(np.ones(15))


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, st.integers(16, 300),
                  elements=st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)))
def test_envelope_dominates_input(x):
    tol = 1e-9 * max(np.max(np.abs(x)), 1e-300)
    assert np.all(envelope(x) >= np.abs(x) - tol)


# -- attenuation compensation ---------------------------------------------------

def test_zero_beta_is_identity():
    env = np.random.default_rng(2).random(50)
    depths = np.linspace(0, 10, 50)
    assert np.array_equal(attenuation_compensate(env, 0.0, 2.5, depths), env)


def test_one_cm_gain():
    out = attenuation_compensate(np.array([1.0]), 0.9, 2.5, np.array([1.0]))
    # 2 * 0.9 * 2.5 * 1 = 4.5 dB
    assert out[0] == pytest.approx(10 ** (4.5 / 20), abs=1e-12)
    assert out[0] == pytest.approx(1.67880, abs=5e-6)


def test_doubling_depth_doubles_db_gain():
    out = attenuation_compensate(np.ones(2), 0.7, 3.0, np.array([1.3, 2.6]))
    g = 20 * np.log10(out)
    assert g[1] == pytest.approx(2 * g[0], rel=1e-12)


def test_compensation_rejects_negative_and_decreasing_depths():
    with pytest.raises(InvalidInputError):
        attenuation_compensate(np.ones(2), 0.9, 2.5, np.array([-0.1, 1.0]))
    with pytest.raises(InvalidInputError):
        attenuation_compensate(np.ones(2), 0.9, 2.5, np.array([1.0, 0.5]))
    with pytest.raises(InvalidInputError):
        attenuation_compensate(np.ones(3), 0.9, 2.5, np.array([1.0, 2.0]))


# -- log compression and pixel mapping -------------------------------------------

def test_log_compress_examples():
    assert log_compress(np.array([0.0]), 10, 55)[0] == 10
    assert log_compress(np.array([10 ** (55 / 20)]), 10, 55)[0] == pytest.approx(55, abs=1e-9)
    assert log_compress(np.array([10 ** (32.5 / 20)]), 10, 55)[0] == pytest.approx(32.5, abs=1e-9)
    assert log_compress(np.array([1e9]), 10, 55)[0] == 55


def test_map_to_pixels_examples():
    px = map_to_pixels(np.array([10.0, 55.0, 32.5, 19.0]), 10, 55)
    assert px.dtype == np.uint8
    assert px.tolist() == [0, 255, 128, 51]


# -- resize ------------------------------------------------------------------

def test_resize_identity_is_bit_identical():
    img = np.random.default_rng(3).integers(0, 256, (17, 23), dtype=np.uint8)
    assert np.array_equal(resize_bilinear(img, 17, 23), img)


def test_resize_constant():
    img = np.full((5, 7), 93, np.uint8)
    out = resize_bilinear(img, 11, 4)
    assert out.shape == (11, 4) and np.all(out == 93)


def test_resize_hand_example():
    out = resize_bilinear(np.array([[0, 255], [0, 255]], np.uint8), 2, 3)
    assert out.tolist() == [[0, 128, 255], [0, 128, 255]]


def test_resize_matches_textbook_bilinear():
    img = np.random.default_rng(4).integers(0, 256, (9, 13), dtype=np.uint8)
    out = resize_bilinear(img, 20, 7)
    for i in range(20):
        for j in range(7):
            y, x = i * 8 / 19, j * 12 / 6
            assert out[i, j] == np.floor(bilinear_at(img.astype(float), y, x) + 0.5)


# -- scan conversion ------------------------------------------------------------

GEOM = ConvexGeometry(radius=0.04, angular_span=np.deg2rad(50), depth_offset=0.04)


def test_scan_convert_constant_field_is_exact():
    polar = np.full((32, 200), 17.25)
    out = scan_convert(polar, GEOM, 2e-4, 40, 50, fill=-1.0)
    plan = plan_scan(GEOM, 32, 200, 2e-4, 40, 50)
    assert np.all(out[plan.mask] == 17.25)
    assert np.all(out[~plan.mask] == -1.0)


def test_scan_convert_corner_is_fill():
    out = scan_convert(np.ones((32, 200)), GEOM, 2e-4, 40, 50, fill=-7.0)
    assert out[0, 0] == -7.0 and out[0, -1] == -7.0 and out[-1, 0] == -7.0


def test_scan_convert_linear_depth_field():
    dr = 2e-4
    n_lines, n_samples = 32, 200
    radius = GEOM.depth_offset + np.arange(n_samples) * dr
    polar = np.tile(radius, (n_lines, 1))
    out = scan_convert(polar, GEOM, dr, 40, 50, fill=np.nan)
    plan = plan_scan(GEOM, n_lines, n_samples, dr, 40, 50)
    r_true, _ = pixel_polar_coords(plan.x, plan.z)
    err = np.abs(out[plan.mask] - r_true[plan.mask])
    assert plan.mask.sum() > 500
    assert np.max(err) < dr


def test_scan_convert_matches_independent_bilinear():
    rng = np.random.default_rng(5)
    polar = rng.random((32, 200))
    dr = 2e-4
    out = scan_convert(polar, GEOM, dr, 40, 50)
    plan = plan_scan(GEOM, 32, 200, dr, 40, 50)
    r, theta = pixel_polar_coords(plan.x, plan.z)
    li = (theta + GEOM.angular_span / 2) / (GEOM.angular_span / 31)
    si = (r - GEOM.depth_offset) / dr
    for i, j in zip(*np.nonzero(plan.mask)):
        assert out[i, j] == pytest.approx(bilinear_at(polar, li[i, j], si[i, j]), abs=1e-12)


def test_scan_convert_pixels_are_isotropic_and_cover_box():
    plan = plan_scan(GEOM, 32, 200, 2e-4, 40, 50)
    assert np.allclose(np.diff(plan.x[0]), plan.pixel_pitch)
    assert np.allclose(np.diff(plan.z[:, 0]), plan.pixel_pitch)
    r1 = GEOM.depth_offset + 199 * 2e-4
    assert plan.x[0, -1] - plan.x[0, 0] + plan.pixel_pitch >= 2 * r1 * np.sin(GEOM.angular_span / 2) - 1e-12


@pytest.mark.parametrize("radius", [0.0, -0.01])
def test_degenerate_geometry_rejected(radius):
    with pytest.raises(InvalidInputError):
        ConvexGeometry(radius=radius)


def test_small_output_rejected():
    with pytest.raises(InvalidInputError):
        scan_convert(np.ones((4, 20)), GEOM, 1e-4, 7, 20)


# -- types ------------------------------------------------------------------

def test_rf_frame_validation():
    geom = ConvexGeometry()
    with pytest.raises(InvalidInputError):
        RfFrame(np.zeros((1, 64)), 20e6, 2.5, geometry=geom)
    with pytest.raises(InvalidInputError):
        RfFrame(np.zeros((4, 8)), 20e6, 2.5, geometry=geom)
    with pytest.raises(InvalidInputError):
        RfFrame(np.zeros((4, 64)), 4e6, 2.5, geometry=geom)
    bad = np.zeros((4, 64))
    bad[1, 1] = np.nan
    with pytest.raises(InvalidInputError):
        RfFrame(bad, 20e6, 2.5, geometry=geom)


def test_recon_params_validation_and_defaults():
    assert ReconParams().as_tuple() == (0.9, 10.0, 55.0)
    with pytest.raises(InvalidInputError):
        ReconParams(0.9, 20, 20)
    with pytest.raises(InvalidInputError):
        ReconParams(-0.1, 10, 55)


# -- full reconstruction ------------------------------------------------------------

def _small_frame(seed, label=1, **kw):
    from dataclasses import replace
    return generate_frame(replace(SMALL_SPEC, seed=seed, **kw), label)


def test_zero_frame_reconstructs_to_black():
    frame = RfFrame(np.zeros((128, 3072)), 20e6, 2.5)
    img = reconstruct(frame, ReconParams())
    assert img.pixels.shape == (299, 299)
    assert not img.pixels.any()


def test_reconstruction_is_deterministic(default_fatty_frame):
    a = reconstruct(default_fatty_frame, ReconParams())
    b = reconstruct(default_fatty_frame, ReconParams())
    assert pgm_bytes(a.pixels) == pgm_bytes(b.pixels)


def test_out_of_sector_pixels_are_zero(default_fatty_frame):
    img = reconstruct(default_fatty_frame, ReconParams(1.3, 5, 50))
    assert img.pixels.dtype == np.uint8
    assert not img.pixels[~img.mask].any()
    assert img.pixels[img.mask].mean() > 50


def test_compensation_cancels_matching_true_attenuation():
    spec = PhantomSpec(beta_true_normal=0.9, noise_floor=0.0, seed=11)
    img = reconstruct(generate_frame(spec, 0), ReconParams(0.9, 10, 55))
    h = img.height
    px = img.pixels.astype(float)

    def roi(lo, hi):
        rows = slice(int(lo * h), int(hi * h))
        return px[rows][img.mask[rows]].mean()

    shallow, deep = roi(0.1, 0.4), roi(0.6, 0.9)
    assert abs(deep - shallow) / shallow < 0.10


def test_resize_path_keeps_sector_mask():
    frame = _small_frame(1)
    img = Reconstructor(frame, out_size=SMALL_SIZE, scan_size=(128, 128))(ReconParams())
    assert img.pixels.shape == SMALL_SIZE
    assert not img.pixels[~img.mask].any()


@pytest.mark.parametrize("seed", range(4))
def test_beta_monotonicity(seed):
    frame = _small_frame(seed)
    rec = Reconstructor(frame, SMALL_SIZE)
    rng = np.random.default_rng(seed)
    b = rng.uniform(0.5, 1.2)
    lo, hi = rng.uniform(5, 15), rng.uniform(50, 60)
    db1 = rec.compressed(ReconParams(b, -1e3, 1e3))
    db2 = rec.compressed(ReconParams(b + 0.1, -1e3, 1e3))
    assert np.all(db2[:, 1:] > db1[:, 1:])
    p1 = rec(ReconParams(b, lo, hi)).pixels
    p2 = rec(ReconParams(b + 0.1, lo, hi)).pixels
    assert np.all(p2 >= p1)


@settings(max_examples=25, deadline=None)
@given(st.floats(5, 14), st.floats(0.05, 1.0), st.integers(0, 3))
def test_raising_alpha_l_never_reduces_black_pixels(alpha_l, step, seed):
    rec = _cached_small_reconstructor(seed)
    a = rec(ReconParams(0.9, alpha_l, 55)).pixels
    b = rec(ReconParams(0.9, alpha_l + step, 55)).pixels
    m = rec.out_mask
    assert np.count_nonzero(b[m] == 0) >= np.count_nonzero(a[m] == 0)


_RECON_CACHE = {}


def _cached_small_reconstructor(seed):
    if seed not in _RECON_CACHE:
        _RECON_CACHE[seed] = Reconstructor(_small_frame(seed), SMALL_SIZE)
    return _RECON_CACHE[seed]


def test_compressed_values_stay_in_range():
    rec = _cached_small_reconstructor(0)
    db = rec.compressed(ReconParams(1.1, 12, 52))
    assert db.min() >= 12 and db.max() <= 52
