import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gssfront.beamform import (apply_beamformer, mvdr_souden, mvdr_steering, psd_batch,
                               psd_recursive, psd_recursive_stack)
from gssfront.signal import MultiChannelWave, Spectrogram, StftParams, stft

from oracles import (distortionless_competitors, lagrangian_mvdr, random_pd, random_unit,
                     recursive_psd_closed_form)
from scenarios import FS, two_speaker_scene

PARAMS = StftParams(16, 4)  # 9 bins keeps the naive oracles fast


def random_spec(rng, c=3, n=12, params=PARAMS):
    data = rng.standard_normal((c, n, params.num_bins)) + 1j * rng.standard_normal((c, n, params.num_bins))
    return Spectrogram(data, params, FS)


def check_covariance(matrices):
    np.testing.assert_allclose(matrices, np.conj(np.swapaxes(matrices, -1, -2)), atol=1e-10)
    eig = np.linalg.eigvalsh(matrices)
    trace = np.real(np.trace(matrices, axis1=-2, axis2=-1))
    assert np.all(eig.min(axis=-1) >= -1e-8 * trace)


# ----------------------------------------------------------------------------
# batch PSD


def test_batch_matches_double_loop():
    rng = np.random.default_rng(0)
    spec = random_spec(rng)
    mask = rng.uniform(size=(spec.num_frames, spec.num_bins))
    phi = psd_batch(spec, mask)
    for f in range(spec.num_bins):
        num = np.zeros((3, 3), dtype=complex)
        den = 0.0
        for t in range(spec.num_frames):
            x = spec.data[:, t, f]
            num += mask[t, f] * np.outer(x, x.conj())
            den += mask[t, f]
        np.testing.assert_allclose(phi.matrices[f], num / den, atol=1e-12)
    check_covariance(phi.matrices)


def test_batch_constant_and_single_frame():
    rng = np.random.default_rng(1)
    x = random_unit(rng, 3)
    data = np.repeat(x[:, None, None], 5, axis=1) * np.ones((1, 1, PARAMS.num_bins))
    spec = Spectrogram(data, PARAMS, FS)
    phi = psd_batch(spec, np.ones((5, PARAMS.num_bins)))
    np.testing.assert_allclose(phi.matrices[2], np.outer(x, x.conj()), atol=1e-15)

    spec = random_spec(rng, n=5)
    mask = np.zeros((5, PARAMS.num_bins))
    mask[3] = 1
    phi = psd_batch(spec, mask)
    for f in range(PARAMS.num_bins):
        v = spec.data[:, 3, f]
        np.testing.assert_allclose(phi.matrices[f], np.outer(v, v.conj()), atol=1e-14)


def test_batch_zero_mask_fallback():
    spec = random_spec(np.random.default_rng(2))
    mask = np.ones((spec.num_frames, spec.num_bins))
    mask[:, 4] = 0
    phi = psd_batch(spec, mask)
    assert phi.fallback.tolist() == [f == 4 for f in range(spec.num_bins)]
    assert np.all(np.isfinite(phi.matrices))


@pytest.mark.parametrize("bad", [np.full((12, 9), 1.5), np.full((12, 9), -0.1), np.ones((11, 9))])
def test_mask_validation(bad):
    with pytest.raises(ValueError):
        psd_batch(random_spec(np.random.default_rng(3)), bad)


# ----------------------------------------------------------------------------
# recursive PSD


def test_recursive_three_frames_by_hand():
    alpha = 0.95
    rng = np.random.default_rng(4)
    spec = random_spec(rng, c=2, n=3)
    mask = np.array([[1.0], [0.3], [0.7]]) * np.ones((1, spec.num_bins))
    frames, final = psd_recursive(spec, mask, alpha)
    x = spec.data[:, :, 0].T
    outer = [np.outer(v, v.conj()) for v in x]
    w = [(1 - alpha) * alpha ** (2 - tau) * mask[tau, 0] for tau in range(3)]
    expected = sum(wi * o for wi, o in zip(w, outer)) / sum(w)
    np.testing.assert_allclose(final.matrices[0], expected, atol=1e-10)
    np.testing.assert_allclose(frames[0].matrices[0], outer[0], atol=1e-10)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31), alpha=st.floats(0.05, 0.995))
def test_recursive_matches_closed_form(seed, alpha):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng, c=2, n=10)
    mask = rng.uniform(size=(10, spec.num_bins)) * (rng.uniform(size=(10, spec.num_bins)) > 0.3)
    stack = psd_recursive_stack(spec, mask, alpha)
    for f in (0, 4, 8):
        oracle = recursive_psd_closed_form(spec.data[:, :, f].T, mask[:, f], alpha)
        for t, ref in enumerate(oracle):
            if ref is not None:
                np.testing.assert_allclose(stack[t, f], ref, atol=1e-10)
    check_covariance(stack)


def test_recursive_fixed_point_and_fallback():
    rng = np.random.default_rng(5)
    x = random_unit(rng, 2)
    data = np.repeat(x[:, None, None], 6, axis=1) * np.ones((1, 1, PARAMS.num_bins))
    spec = Spectrogram(data, PARAMS, FS)
    mask = np.ones((6, PARAMS.num_bins))
    mask[:2, 0] = 0
    frames, _ = psd_recursive(spec, mask, 0.9)
    for t, cov in enumerate(frames):
        np.testing.assert_allclose(cov.matrices[1], np.outer(x, x.conj()), atol=1e-12)
        assert cov.fallback[0] == (t < 2)


@pytest.mark.parametrize("alpha", [0.0, 1.0, -0.5, 1.2])
def test_recursive_rejects_alpha(alpha):
    spec = random_spec(np.random.default_rng(6))
    with pytest.raises(ValueError):
        psd_recursive(spec, np.ones((12, 9)), alpha)


# ----------------------------------------------------------------------------
# MVDR


def test_steering_identity_is_matched_filter():
    rng = np.random.default_rng(7)
    d = np.stack([random_unit(rng, 3) for _ in range(4)])
    bf = mvdr_steering(np.stack([np.eye(3)] * 4), d)
    np.testing.assert_allclose(bf.weights, d, atol=1e-12)


def test_steering_diag_example():
    phi = np.diag([1.0, 4.0]).astype(complex)[None]
    d = np.array([[1.0, 1.0]]) / np.sqrt(2)
    w = mvdr_steering(phi, d, loading=0.0).weights[0]
    np.testing.assert_allclose(w, np.array([8 / 5, 2 / 5]) / np.sqrt(2), atol=1e-12)
    np.testing.assert_allclose(w, lagrangian_mvdr(phi[0], d[0]), atol=1e-12)

    # generic solver over the constraint set: w = w0 + t * n with n orthogonal to d
    w0 = d[0] / np.vdot(d[0], d[0])
    n = np.array([1.0, -1.0]) / np.sqrt(2)
    ts = np.linspace(-2, 2, 40001)
    costs = [np.real(np.vdot(w0 + t * n, phi[0] @ (w0 + t * n))) for t in ts]
    best = w0 + ts[int(np.argmin(costs))] * n
    np.testing.assert_allclose(w, best, atol=1e-4)


@pytest.mark.parametrize("c", [2, 3, 4])
def test_steering_optimal_among_competitors(c):
    rng = np.random.default_rng(c)
    phi = random_pd(rng, c)
    d = random_unit(rng, c)
    w = mvdr_steering(phi[None], d[None], loading=0.0).weights[0]
    assert abs(np.vdot(w, d) - 1) < 1e-6
    power = np.real(np.vdot(w, phi @ w))
    oracle = lagrangian_mvdr(phi, d)
    assert abs(power - np.real(np.vdot(oracle, phi @ oracle))) < 1e-8
    v = distortionless_competitors(rng, d, 1000)
    np.testing.assert_allclose(v.conj() @ d, 1.0, atol=1e-10)
    competitor = np.real(np.einsum("kc,cd,kd->k", v.conj(), phi, v))
    assert np.all(power <= competitor + 1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), c=st.integers(2, 4))
def test_steering_distortionless_with_loading(seed, c):
    rng = np.random.default_rng(seed)
    phi = np.stack([random_pd(rng, c, cond=1e4) for _ in range(3)])
    d = np.stack([random_unit(rng, c) for _ in range(3)])
    bf = mvdr_steering(phi, d)
    np.testing.assert_allclose(np.einsum("fc,fc->f", bf.weights.conj(), d), 1.0, atol=1e-6)
    assert np.all(np.isfinite(bf.weights)) and not bf.failed.any()


def test_souden_identity():
    eye = np.eye(2, dtype=complex)[None]
    w = mvdr_souden(eye, eye, 0).weights[0]
    np.testing.assert_allclose(w, [0.5, 0.0], atol=1e-12)


def test_souden_rank_one_matches_steering_up_to_scalar():
    rng = np.random.default_rng(8)
    for c in (2, 3, 4):
        d = random_unit(rng, c)
        phi_x = 2.5 * np.outer(d, d.conj())
        ws = mvdr_souden(phi_x[None], np.eye(c)[None], 1).weights[0]
        expected = d * np.conj(d[1])
        np.testing.assert_allclose(ws, expected, atol=1e-6)
        wt = mvdr_steering(np.eye(c)[None], d[None]).weights[0]
        ratio = np.vdot(wt, ws) / np.vdot(wt, wt)
        np.testing.assert_allclose(ws, ratio * wt, atol=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_souden_eigen_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    c = 4
    phi_n = random_pd(rng, c)
    d = random_unit(rng, c) * rng.uniform(0.5, 2)
    phi_x = np.outer(d, d.conj())
    ws = mvdr_souden(phi_x[None], phi_n[None], 0).weights[0]
    assert np.all(np.isfinite(ws))
    _, vecs = np.linalg.eigh(phi_x)
    wt = mvdr_steering(phi_n[None], vecs[:, -1][None]).weights[0]
    ratio = np.vdot(wt, ws) / np.vdot(wt, wt)
    assert np.abs(ws - ratio * wt).max() < 1e-6


def test_souden_zero_target_falls_back():
    phi_x = np.zeros((2, 3, 3), dtype=complex)
    phi_x[1] = np.eye(3)
    bf = mvdr_souden(phi_x, np.stack([np.eye(3)] * 2), 2)
    assert bf.failed.tolist() == [True, False]
    np.testing.assert_allclose(bf.weights[0], [0, 0, 1])


def test_souden_rejects_ref_channel():
    with pytest.raises(ValueError):
        mvdr_souden(np.eye(2)[None], np.eye(2)[None], 2)


# ----------------------------------------------------------------------------
# application


def test_apply_reference_and_zero():
    spec = random_spec(np.random.default_rng(9))
    e0 = np.zeros((spec.num_bins, 3), dtype=complex)
    e0[:, 0] = 1
    assert np.array_equal(apply_beamformer(e0, spec).data[0], spec.data[0])
    assert not apply_beamformer(np.zeros_like(e0), spec).data.any()
    with pytest.raises(ValueError):
        apply_beamformer(np.zeros((4, 3)), spec)


def test_apply_time_varying_matches_per_frame():
    rng = np.random.default_rng(10)
    spec = random_spec(rng)
    w = rng.standard_normal((spec.num_frames, spec.num_bins, 3)) + 0j
    y = apply_beamformer(w, spec).data[0]
    for t in (0, 5):
        for f in (0, 3):
            assert y[t, f] == pytest.approx(np.vdot(w[t, f], spec.data[:, t, f]))


def test_distortionless_on_rank_one_scene():
    rng = np.random.default_rng(11)
    c, n = 4, 20
    s = rng.standard_normal((n, PARAMS.num_bins)) + 1j * rng.standard_normal((n, PARAMS.num_bins))
    d = np.stack([random_unit(rng, c) for _ in range(PARAMS.num_bins)])
    spec = Spectrogram(np.einsum("fc,nf->cnf", d, s), PARAMS, FS)
    phi_n = np.stack([random_pd(rng, c) for _ in range(PARAMS.num_bins)])
    y = apply_beamformer(mvdr_steering(phi_n, d), spec).data[0]
    np.testing.assert_allclose(y, s, atol=1e-8 * np.abs(s).max())


def test_interference_suppression_with_oracle_masks():
    truth = two_speaker_scene(3)
    target = truth.images[0]
    spec_t = stft(target)
    spec_r = stft(MultiChannelWave(truth.mixture.samples - target.samples, FS))
    p_t = np.abs(spec_t.data[0]) ** 2
    p_r = np.abs(spec_r.data[0]) ** 2
    mask_t = (p_t > p_r).astype(float)
    mix = stft(truth.mixture)
    bf = mvdr_souden(psd_batch(mix, mask_t), psd_batch(mix, 1 - mask_t), 0)
    out_t = apply_beamformer(bf, spec_t).data[0]
    out_r = apply_beamformer(bf, spec_r).data[0]
    active = np.abs(spec_t.data).sum(axis=(0, 2)) > 0
    snr = lambda a, b: 10 * np.log10(np.sum(np.abs(a[active]) ** 2) / np.sum(np.abs(b[active]) ** 2))
    best_raw = max(snr(spec_t.data[c], spec_r.data[c]) for c in range(mix.num_channels))
    assert snr(out_t, out_r) - best_raw >= 5.0
