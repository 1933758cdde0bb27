import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from usray import imaging as im
from usray.transducer import TransducerArray, rx_weight_from_angle, steering_delays

FS = 40e6
C0 = 1540.0
NT = 256


def small_grid(angle=0.0, x=(-1.0, 1.0), z=(1.0, 3.0), d=0.1, n_elements=8):
    return im.build_grid(TransducerArray(n_elements, 0.3), angle, C0, x, z, d, d)


def test_build_grid_validation():
    arr = TransducerArray(8, 0.3)
    with pytest.raises(ValueError):
        im.build_grid(arr, 0.0, C0, (-1, 1), (1, 2), 0.0, 0.1)
    with pytest.raises(ValueError):
        im.build_grid(arr, 0.0, C0, (1, -1), (1, 2), 0.1, 0.1)


def test_on_axis_round_trip_delay():
    arr = TransducerArray(8, 0.3)
    xe = float(arr.centers[5])
    g = im.build_grid(arr, 0.0, C0, (xe, xe + 1.0), (7.0, 8.0), 1.0, 1.0)
    assert g.delays()[0, 0, 5] == pytest.approx(2 * 7.0e-3 / C0, rel=1e-14)


def test_delays_mirror_symmetry():
    g = small_grid(x=(-1.0, 1.0))
    tau = g.delays()
    assert np.allclose(tau, tau[:, ::-1, ::-1], rtol=1e-14, atol=0)


@pytest.mark.parametrize("angle", [0.0, 0.2, -0.15])
def test_grid_matches_per_pixel_oracle(angle):
    arr = TransducerArray(8, 0.3)
    g = small_grid(angle, d=0.5)
    tau, apod = g.delays(), g.apodization()
    fire = steering_delays(arr, angle, C0)
    for iz, z in enumerate(g.z):
        for ix, x in enumerate(g.x):
            # plane wave launched by element 0 at its firing time
            t_tx = fire[0] + ((x - arr.centers[0]) * math.sin(angle) + z * math.cos(angle)) * 1e-3 / C0
            for e, xe in enumerate(arr.centers):
                r = math.hypot(x - xe, z)
                assert tau[iz, ix, e] == pytest.approx(t_tx + r * 1e-3 / C0, rel=1e-12)
                w = rx_weight_from_angle(math.acos(z / r), arr.main_lobe, arr.cutoff)
                assert apod[iz, ix, e] == pytest.approx(w, abs=1e-12)
    assert np.all(tau >= 0) and np.all((apod >= 0) & (apod <= 1))


def test_das_zero_and_linearity():
    g = small_grid()
    rng = np.random.default_rng(1)
    assert not im.das_forward(np.zeros((8, NT)), g, FS).any()
    p1, p2 = rng.standard_normal((2, 8, NT))
    lhs = im.das_forward(2.5 * p1 - 0.7 * p2, g, FS)
    rhs = 2.5 * im.das_forward(p1, g, FS) - 0.7 * im.das_forward(p2, g, FS)
    assert np.allclose(lhs, rhs, rtol=0, atol=1e-12 * np.abs(lhs).max())


def test_das_single_sample_taps():
    g = small_grid()
    tau, apod = g.delays(), g.apodization()
    iz, ix, e0 = 7, 4, 3
    s = tau[iz, ix, e0] * FS
    k0, frac = int(math.floor(s)), s - math.floor(s)
    ch = np.zeros((8, NT))
    ch[e0, k0] = 1.0
    assert im.das_forward(ch, g, FS)[iz, ix] == pytest.approx(apod[iz, ix, e0] * (1 - frac), abs=1e-15)
    ch[e0, k0], ch[e0, k0 + 1] = 0.0, 1.0
    assert im.das_forward(ch, g, FS)[iz, ix] == pytest.approx(apod[iz, ix, e0] * frac, abs=1e-15)


def test_das_out_of_range_reads_are_zero():
    g = small_grid(z=(20.0, 21.0))  # delays beyond a short record
    assert not im.das_forward(np.ones((8, 64)), g, FS).any()


@pytest.mark.parametrize("angle", [0.0, 0.12])
def test_das_adjoint_dot_product(angle):
    g = small_grid(angle)
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        p = rng.standard_normal((8, NT))
        y = rng.standard_normal(g.shape)
        lhs = float(np.sum(im.das_forward(p, g, FS) * y))
        rhs = float(np.sum(p * im.das_adjoint(y, g, p.shape, FS)))
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs)))
    assert worst <= 1e-12


def test_das_adjoint_footprint():
    g = im.build_grid(TransducerArray(8, 0.3), 0.0, C0, (0.0, 1.0), (2.0, 3.0), 1.0, 1.0)
    y = np.zeros(g.shape)
    assert not im.das_adjoint(y, g, (8, NT), FS).any()
    y[0, 0] = 1.0
    assert np.count_nonzero(im.das_adjoint(y, g, (8, NT), FS)) == 2 * 8
    with pytest.raises(ValueError):
        im.das_adjoint(np.zeros((3, 3)), g, (8, NT), FS)


# -- envelope --------------------------------------------------------------------


def tone(amp, f_c=5.0, n=400, dz=None, phase=0.3):
    lam = C0 / (f_c * 1e6) * 1e3
    dz = lam / 20 if dz is None else dz
    z = 5.0 + dz * np.arange(n)
    rf = amp * np.cos(2 * np.pi * f_c * 1e6 * 2 * z * 1e-3 / C0 + phase)
    return rf[:, None] * np.ones((1, 3)), z


# whole samples per carrier period along depth, as the default grids use
@pytest.mark.parametrize("dz_frac", [1 / 20, 1 / 10])
def test_envelope_of_tone(dz_frac):
    lam = C0 / 5e6 * 1e3
    rf, z = tone(2.5, dz=lam * dz_frac)
    env, _ = im.envelope(rf, z, 5.0, C0, FS)
    interior = env[20:-20]
    assert np.all(np.abs(interior / 2.5 - 1.0) <= 0.05)


def test_envelope_zero_input_and_symmetry():
    z = np.linspace(5, 10, 100)
    env, tape = im.envelope(np.zeros((100, 4)), z, 5.0, C0, eps=1e-9)
    assert np.all(env == 1e-9)
    assert not im.envelope_vjp(tape, np.ones_like(env)).any()
    rf = np.random.default_rng(2).standard_normal((100, 4))
    assert np.array_equal(im.envelope(rf, z, 5.0, C0)[0], im.envelope(-rf, z, 5.0, C0)[0])


def test_envelope_nyquist_check():
    with pytest.raises(ValueError):
        im.envelope(np.zeros((4, 1)), np.arange(4.0), 25.0, C0, fs=40e6)


def test_envelope_vjp_dot_product():
    rng = np.random.default_rng(3)
    z = np.linspace(5, 8, 80)
    rf = rng.standard_normal((80, 5))
    v, u = rng.standard_normal((2, 80, 5))
    _, tape = im.envelope(rf, z, 5.0, C0)
    h = 1e-6
    fd = (im.envelope(rf + h * v, z, 5.0, C0)[0] - im.envelope(rf - h * v, z, 5.0, C0)[0]) / (2 * h)
    lhs, rhs = float(np.sum(fd * u)), float(np.sum(v * im.envelope_vjp(tape, u)))
    assert lhs == pytest.approx(rhs, rel=1e-7)


def test_moving_average_adjoint_exact():
    rng = np.random.default_rng(4)
    for width in (1, 4, 5):
        x, y = rng.standard_normal((2, 30, 3))
        lhs = np.sum(im.moving_average(x, width) * y)
        rhs = np.sum(x * im.moving_average_adjoint(y, width))
        assert lhs == pytest.approx(rhs, rel=1e-13)


# -- log compression -------------------------------------------------------------


def test_log_compress_levels():
    dr = 40.0
    env = np.array([[1.0, 10 ** (-dr / 20), 10 ** (-dr / 40), 1e-9]])
    img, _ = im.log_compress(env, dr)
    assert img[0, 0] == 1.0
    assert img[0, 1] == pytest.approx(0.0, abs=1e-15)
    assert img[0, 2] == pytest.approx(0.5)
    assert img[0, 3] == 0.0
    with pytest.raises(ValueError):
        im.log_compress(env, 0.0)


def test_log_compress_all_zero():
    img, tape = im.log_compress(np.zeros((3, 3)), 40.0)
    assert not img.any()
    assert not im.log_compress_vjp(tape, np.ones((3, 3))).any()


@pytest.mark.parametrize("detach", [True, False])
def test_log_compress_vjp_fd(detach):
    rng = np.random.default_rng(5)
    env = rng.uniform(0.05, 1.0, (12, 9))
    dr = 60.0  # keeps every pixel in the interior
    _, tape = im.log_compress(env, dr, detach_max=detach)
    m = env.max()

    def f(e):
        if detach:
            return np.clip(1 + 20 * np.log10(e / m) / dr, 0, 1)
        return im.log_compress(e, dr)[0]

    h = 1e-6
    g = rng.standard_normal(env.shape)
    # the brightest pixel sits on the clip boundary when the max is detached
    g.ravel()[np.argmax(env)] = 0.0
    vjp = im.log_compress_vjp(tape, g)
    for _ in range(5):
        v = rng.standard_normal(env.shape)
        fd = float(np.sum((f(env + h * v) - f(env - h * v)) / (2 * h) * g))
        assert fd == pytest.approx(float(np.sum(vjp * v)), rel=1e-6)
    if detach:
        interior = 20 / (math.log(10) * env * dr)
        interior.ravel()[np.argmax(env)] = 0.0
        assert np.allclose(im.log_compress_vjp(tape, np.ones_like(env)), interior)


def test_log_compress_clipped_pixels_zero_gradient():
    env = np.array([[1.0, 1e-4, 0.5]])
    img, tape = im.log_compress(env, 40.0)
    assert img[0, 1] == 0.0
    g = im.log_compress_vjp(tape, np.ones_like(env))
    assert g[0, 1] == 0.0


# -- full chain ------------------------------------------------------------------


def make_chain(n_angles=1, dr=80.0, **kw):
    arr = TransducerArray(8, 0.3)
    angles = np.linspace(-0.1, 0.1, n_angles) if n_angles > 1 else [0.0]
    lam = C0 / 5e6 * 1e3
    grids = im.build_grids(arr, angles, C0, (-1.0, 1.0), (1.0, 3.0), 0.1, lam / 10)
    return im.ImagingChain(grids, 5.0, FS, dr=dr, **kw)


@pytest.mark.parametrize(
    "kw",
    [
        {},
        {"n_angles": 3},
        {"tgc_db_per_mm": 0.5},
        {"fir": im.design_bandpass(2.0, 8.0, 40.0, 15)},
        {"detach_max": True},
    ],
)
def test_chain_linearized_dot_product(kw):
    chain = make_chain(**kw)
    n = len(chain.grids)
    rng = np.random.default_rng(6)
    p = [rng.standard_normal((8, NT)) for _ in range(n)]
    v = [rng.standard_normal((8, NT)) for _ in range(n)]
    img, tape = chain.forward(p)
    u = rng.standard_normal(img.pixels.shape)
    if kw.get("detach_max"):
        u.ravel()[tape[2].argmax] = 0.0  # on the clip boundary
    g = chain.vjp(tape, u)
    g = g if isinstance(g, list) else [g]
    h = 1e-6
    if kw.get("detach_max"):
        # the detached map keeps the normalisation of the operating point
        def image(q):
            return _detached_image(chain, q, tape[2].env_max)
    else:
        def image(q):
            return chain.forward(q)[0].pixels
    plus = image([a + h * b for a, b in zip(p, v)])
    minus = image([a - h * b for a, b in zip(p, v)])
    lhs = float(np.sum((plus - minus) / (2 * h) * u))
    rhs = sum(float(np.sum(a * b)) for a, b in zip(v, g))
    assert abs(lhs - rhs) <= 1e-6 * abs(rhs)


def _detached_image(chain, channels, env_max):
    rf = sum(im.das_forward(im.bandpass(c, chain.fir), gr, chain.fs) for c, gr in zip(channels, chain.grids))
    env, _ = im.envelope(rf * chain.gain, chain.grid.z, chain.f_c, chain.grid.c0)
    return np.clip(1 + 20 * np.log10(env / env_max) / chain.dr, 0, 1)


@settings(max_examples=20, deadline=None)
@given(st.floats(1e-6, 1e6))
def test_chain_scale_invariance(scale):
    chain = make_chain(dr=40.0)
    p = np.random.default_rng(8).standard_normal((8, NT))
    a = chain.forward(p)[0].pixels
    b = chain.forward(scale * p)[0].pixels
    assert np.allclose(a, b, atol=1e-10)
    assert a.min() >= 0 and a.max() == 1.0


def test_chain_rejects_mismatched_inputs():
    chain = make_chain(n_angles=2)
    with pytest.raises(ValueError):
        chain.forward(np.zeros((8, NT)))
    arr = TransducerArray(8, 0.3)
    with pytest.raises(ValueError):
        im.ImagingChain((small_grid(), im.build_grid(arr, 0.0, C0, (-2, 2), (1, 3), 0.1, 0.1)), 5.0, FS)


def test_tgc_identity_and_linearity():
    z = np.linspace(2, 30, 50)
    assert np.all(im.tgc_gain(z, 0.0) == 1.0)
    gain = im.tgc_gain(z, 0.3)
    assert gain[0] == 1.0 and gain[-1] == pytest.approx(10 ** (0.3 * 28 / 20))
    g = small_grid()
    gz = im.tgc_gain(g.z, 0.3)[:, None]
    rng = np.random.default_rng(9)
    p1, p2 = rng.standard_normal((2, 8, NT))
    lhs = gz * im.das_forward(p1 + 3 * p2, g, FS)
    rhs = gz * im.das_forward(p1, g, FS) + 3 * gz * im.das_forward(p2, g, FS)
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_bandpass_passes_centre_frequency():
    taps = im.design_bandpass(3.0, 7.0, 40.0, 31)
    t = np.arange(400) / 40.0
    x = np.sin(2 * np.pi * 5.0 * t)[None, :]
    y = im.bandpass(x, taps)
    assert np.abs(y[0, 100:300]).max() == pytest.approx(1.0, abs=0.05)
    slow = im.bandpass(np.ones((1, 400)), taps)
    assert np.abs(slow[0, 100:300]).max() < 0.05
    with pytest.raises(ValueError):
        im.design_bandpass(3.0, 7.0, 40.0, 30)
