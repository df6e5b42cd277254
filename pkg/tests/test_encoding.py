import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maxwellpi.encoding import (GOLDEN_ANGLE_DEG, EncodingError, KSpaceData, adjoint_fs,
                                add_noise, cartesian_mask, estimate_eps, estimate_sigma, fft_c,
                                forward_fs, forward_model, make_trajectory, normal_fs,
                                normal_symbol, simulate)
from maxwellpi.phantoms import birdcage_sens, shepp_logan

from conftest import crandn

TRAJS = {
    "cartesian": lambda: make_trajectory("cartesian", (24, 20), R_p=3, acs=4),
    "caipi": lambda: make_trajectory("caipi", (12, 10, 6), R_p=2, R_s=2, acs=2),
    "poisson": lambda: make_trajectory("poisson", (24, 20), R=3, acs=4, seed=2),
    "radial": lambda: make_trajectory("radial", (16, 12), n_spokes=9),
    "radial_uniform": lambda: make_trajectory("radial", (16, 16), n_spokes=7, golden=False,
                                              readout_len=20),
}


@pytest.mark.parametrize("name", sorted(TRAJS))
def test_adjoint_dot(name):
    traj = TRAJS[name]()
    rng = np.random.default_rng(0)
    x = crandn(rng, *traj.shape)
    y = crandn(rng, traj.n_samples)
    lhs = np.vdot(forward_fs(traj, x), y)
    rhs = np.vdot(x, adjoint_fs(traj, y))
    assert abs(lhs - rhs) <= 1e-10 * abs(lhs)


@pytest.mark.parametrize("name", sorted(TRAJS))
def test_normal_operator_matches_composition(name):
    traj = TRAJS[name]()
    x = crandn(np.random.default_rng(1), 2, *traj.shape)
    ref = adjoint_fs(traj, forward_fs(traj, x))
    assert np.allclose(normal_fs(traj, x), ref, rtol=0, atol=1e-12 * np.abs(ref).max())


@pytest.mark.parametrize("name", sorted(TRAJS))
def test_zero_image_and_reported_R(name):
    traj = TRAJS[name]()
    assert np.all(forward_fs(traj, np.zeros(traj.shape)) == 0)
    assert np.all(adjoint_fs(traj, np.zeros(traj.n_samples)) == 0)
    assert traj.R == np.prod(traj.shape) / traj.n_samples


def test_full_cartesian_is_unitary():
    traj = make_trajectory("cartesian", (16, 10))
    assert traj.mask.all() and traj.R == 1 and traj.n_samples == 160
    x = crandn(np.random.default_rng(2), 16, 10)
    assert np.allclose(adjoint_fs(traj, forward_fs(traj, x)), x, atol=1e-12)
    assert np.linalg.norm(forward_fs(traj, x)) == pytest.approx(np.linalg.norm(x), rel=1e-12)


def test_centered_fft_convention():
    # a unit impulse at the grid center has flat spectrum
    x = np.zeros((8, 6))
    x[4, 3] = 1
    assert np.allclose(fft_c(x, 2), 1 / math.sqrt(48))
    # DC lands at the center index
    assert np.argmax(np.abs(fft_c(np.ones((8, 6)), 2))) == 4 * 6 + 3


def test_cartesian_line_counts():
    traj = make_trajectory("cartesian", (320, 8), R_p=2, acs=16)
    rows = traj.mask[:, 0]
    regular = (np.arange(320) - 160) % 2 == 0
    acs = np.zeros(320, bool)
    acs[152:168] = True
    assert regular.sum() == 160 and acs.sum() == 16
    assert np.array_equal(rows, regular | acs)
    assert rows.sum() == 168


def test_cartesian_errors():
    with pytest.raises(EncodingError):
        cartesian_mask((8, 8), R_p=9)
    with pytest.raises(EncodingError):
        cartesian_mask((8, 8), acs=9)
    with pytest.raises(EncodingError):
        make_trajectory("spiral", (8, 8))


def test_caipi_shifts_slice_pattern():
    traj = make_trajectory("caipi", (8, 8, 2), R_p=1, R_s=2, acs=0)
    m = traj.mask[..., 0]
    assert traj.caipi_shift == 1
    assert np.array_equal(m[4], (np.arange(8) - 4) % 2 == 0)
    assert np.array_equal(m[5], (np.arange(8) - 5) % 2 == 0)


def test_poisson_disc_properties():
    t1 = make_trajectory("poisson", (48, 48), R=4, acs=8, seed=5)
    t2 = make_trajectory("poisson", (48, 48), R=4, acs=8, seed=5)
    assert np.array_equal(t1.mask, t2.mask)
    assert t1.mask[20:28, 20:28].all()
    assert abs(t1.R - 4) / 4 < 0.15
    # variable density: the inner half-radius disc is sampled more densely
    i, j = np.mgrid[:48, :48]
    r = np.hypot(i - 24, j - 24)
    inner = t1.mask[(r < 12) & ~((abs(i - 24) < 5) & (abs(j - 24) < 5))].mean()
    outer = t1.mask[r > 18].mean()
    assert inner > outer


def test_radial_geometry():
    traj = make_trajectory("radial", (32, 32), n_spokes=200, readout_len=256)
    assert traj.n_samples == 200 * 256
    k = traj.kcoords()
    assert np.all(k >= -np.pi) and np.all(k < np.pi + 1e-12)
    d = np.rad2deg(np.diff(traj.angles[:3]))
    assert np.allclose(np.mod(d, 360), 111.246, atol=1e-3)
    assert GOLDEN_ANGLE_DEG == pytest.approx(111.2461, abs=1e-4)


def test_radial_spoke_matches_fft_column():
    # a spoke at angle 0 with readout n hits the grid frequencies of axis 0
    n = 16
    traj = make_trajectory("radial", (n, n), n_spokes=1, readout_len=n)
    x = crandn(np.random.default_rng(3), n, n)
    assert np.allclose(forward_fs(traj, x), fft_c(x, 2)[:, n // 2], atol=1e-12)


def test_normal_symbol_cartesian_and_positivity():
    traj = make_trajectory("cartesian", (16, 8), R_p=2, acs=4)
    x = crandn(np.random.default_rng(4), 16, 8)
    sym = normal_symbol(traj)
    # Cartesian normal operators are exactly circulant with this symbol
    via_sym = np.fft.ifft2(np.fft.fft2(np.fft.ifftshift(x)) * sym)
    assert np.allclose(np.fft.fftshift(via_sym), normal_fs(traj, x), atol=1e-12)
    rad = normal_symbol(make_trajectory("radial", (16, 16), n_spokes=20))
    assert rad.min() >= 0 and rad.shape == (16, 16)


def test_forward_model_cases():
    traj = make_trajectory("cartesian", (8, 8))
    s = birdcage_sens((8, 8), 2)
    assert np.all(forward_model(np.zeros((8, 8)), s, traj) == 0)
    p = crandn(np.random.default_rng(5), 8, 8)
    y = forward_model(p, np.ones((1, 8, 8)), traj)
    assert np.allclose(y[0], fft_c(p, 2).ravel(), atol=1e-12)
    with pytest.raises(EncodingError):
        forward_model(p, np.ones((2, 4, 4)), traj)


def test_noise_snr_and_determinism():
    traj = make_trajectory("cartesian", (64, 64), R_p=2, acs=8)
    p = shepp_logan((64, 64))
    s = birdcage_sens((64, 64), 8)
    clean = simulate(p, s, traj)
    assert clean.samples.size >= 10_000
    assert add_noise(clean, math.inf).samples is clean.samples
    noisy = add_noise(clean, 20.0, seed=11)
    n = noisy.samples - clean.samples
    snr = 20 * np.log10(np.linalg.norm(clean.samples) / np.linalg.norm(n))
    assert abs(snr - 20.0) <= 0.5
    assert np.array_equal(add_noise(clean, 20.0, seed=11).samples, noisy.samples)
    assert not np.array_equal(add_noise(clean, 20.0, seed=12).samples, noisy.samples)
    # coils receive independent noise
    c = np.corrcoef(np.concatenate([n.real, n.imag], axis=1))
    assert np.abs(c - np.eye(len(c))).max() < 0.05


def test_estimate_eps_noiseless_and_scaling():
    traj = make_trajectory("cartesian", (32, 32), R_p=2)
    y = simulate(shepp_logan((32, 32)), birdcage_sens((32, 32), 2), traj)
    eps = estimate_eps(y)
    assert np.all(eps <= 1e-10 * np.linalg.norm(y.samples, axis=1))
    y1 = KSpaceData(np.zeros((1, 100)), make_trajectory("radial", (10, 10), n_spokes=10), sigma=0.5)
    y4 = KSpaceData(np.zeros((1, 400)), make_trajectory("radial", (10, 10), n_spokes=40), sigma=0.5)
    assert estimate_eps(y4)[0] == pytest.approx(2 * estimate_eps(y1)[0], rel=1e-12)
    assert estimate_eps(y1, factor=2.0)[0] == pytest.approx(2 * 0.5 * math.sqrt(200))


def test_estimate_eps_from_outer_kspace():
    # smooth object: outer k-space is noise dominated
    n = 64
    traj = make_trajectory("cartesian", (n, n))
    i, j = np.mgrid[:n, :n] - n / 2
    p = np.exp(-(i ** 2 + j ** 2) / 60)
    clean = simulate(p, birdcage_sens((n, n), 3), traj)
    sigma = 0.01 * np.abs(clean.samples).max()
    rng = np.random.default_rng(6)
    noisy = KSpaceData(clean.samples + sigma * crandn(rng, *clean.samples.shape), traj)
    est = estimate_eps(noisy)
    ref = sigma * math.sqrt(2 * noisy.K)
    assert np.all(np.abs(est - ref) <= 0.1 * ref)
    assert np.allclose(estimate_sigma(noisy), sigma, rtol=0.1)


def test_estimate_eps_rejects_tiny_data():
    y = KSpaceData(np.zeros((1, 16)), make_trajectory("cartesian", (4, 4)))
    with pytest.raises(EncodingError):
        estimate_eps(y)


def test_kspace_validation():
    traj = make_trajectory("cartesian", (4, 4))
    with pytest.raises(EncodingError):
        KSpaceData(np.zeros((1, 15)), traj)
    with pytest.raises(EncodingError):
        KSpaceData(np.zeros((1, 16)), traj, eps=-1.0)
    y = KSpaceData(np.zeros(16), traj, sigma=0.1)
    assert y.coils == 1 and y.K == 16 and y.sigma.shape == (1,)
    assert replace(y, eps=np.array([0.2])).eps[0] == 0.2


@settings(max_examples=25, deadline=None)
@given(st.integers(4, 12), st.integers(4, 12), st.integers(1, 3), st.integers(0, 10_000))
def test_cartesian_adjoint_property(n1, n2, R, seed):
    traj = make_trajectory("cartesian", (n1, n2), R_p=min(R, n1))
    rng = np.random.default_rng(seed)
    x = crandn(rng, n1, n2)
    y = crandn(rng, traj.n_samples)
    lhs = np.vdot(forward_fs(traj, x), y)
    assert abs(lhs - np.vdot(x, adjoint_fs(traj, y))) <= 1e-10 * max(abs(lhs), 1)
