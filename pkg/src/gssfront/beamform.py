"""Mask-weighted spatial covariance (PSD) estimation and MVDR beamforming.

Shapes (F: bins, C: channels, N: frames):
    covariance matrices   F x C x C
    beamformer weights    F x C      (or N x F x C when time-varying)
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.signal import lfilter

from .signal import Spectrogram

EPS = 1e-10
DEFAULT_LOADING = 1e-6
VARIANTS = ("steering-mvdr", "souden-mvdr")


@dataclass
class SpatialCovariance:
    matrices: np.ndarray
    weight: np.ndarray
    fallback: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.fallback is None:
            self.fallback = np.zeros(self.matrices.shape[:-2], dtype=bool)

    @property
    def num_channels(self) -> int:
        return self.matrices.shape[-1]


@dataclass
class BeamformerWeights:
    weights: np.ndarray
    variant: str
    ref_channel: Optional[int] = None
    steering: Optional[np.ndarray] = None
    failed: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown beamformer variant {self.variant!r}")
        if self.failed is None:
            self.failed = np.zeros(self.weights.shape[:-1], dtype=bool)


def hermitize(mat: np.ndarray) -> np.ndarray:
    return 0.5 * (mat + np.conj(np.swapaxes(mat, -1, -2)))


def _observations(spec: Spectrogram, mask: np.ndarray):
    x = np.transpose(spec.data, (2, 1, 0))  # F x N x C
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (spec.num_frames, spec.num_bins):
        raise ValueError(
            f"mask shape {mask.shape} does not match N x F = "
            f"{(spec.num_frames, spec.num_bins)}")
    if np.any(mask < 0) or np.any(mask > 1):
        raise ValueError("mask values must lie in [0, 1]")
    return x, mask.T  # F x N x C, F x N


def psd_batch(spec: Spectrogram, mask: np.ndarray) -> SpatialCovariance:
    x, m = _observations(spec, mask)
    num = np.einsum("fn,fnc,fnd->fcd", m, x, x.conj())
    weight = m.sum(axis=1)
    phi = hermitize(num / np.maximum(weight, EPS)[:, None, None])
    fallback = weight <= 0
    phi[fallback] = EPS * np.eye(spec.num_channels)
    return SpatialCovariance(phi, weight, fallback)


def psd_recursive(spec: Spectrogram, mask: np.ndarray, alpha: float = 0.95):
    """Mask-weighted recursive smoothing, normalized by the smoothed mask weight.

        N_t = alpha N_{t-1} + (1 - alpha) m_t x_t x_t^H
        W_t = alpha W_{t-1} + (1 - alpha) m_t
        Phi_t = N_t / W_t

    Returns (per-frame covariances N x F x C x C, final covariance).
    """
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    x, m = _observations(spec, mask)
    num_c = spec.num_channels
    outer = m[..., None, None] * x[..., :, None] * x[..., None, :].conj()  # F x N x C x C
    b, a = [1 - alpha], [1, -alpha]
    num = lfilter(b, a, outer, axis=1)
    weight = lfilter(b, a, m, axis=1)
    phi = hermitize(num / np.maximum(weight, EPS)[..., None, None])
    fallback = weight <= 0
    phi[fallback] = EPS * np.eye(num_c)
    phi = np.transpose(phi, (1, 0, 2, 3))
    weight, fallback = weight.T, fallback.T
    per_frame = [SpatialCovariance(phi[t], weight[t], fallback[t]) for t in range(phi.shape[0])]
    return per_frame, per_frame[-1]


def psd_recursive_stack(spec: Spectrogram, mask: np.ndarray, alpha: float = 0.95) -> np.ndarray:
    """Per-frame recursive covariances as one N x F x C x C array."""
    frames, _ = psd_recursive(spec, mask, alpha)
    return np.stack([p.matrices for p in frames])


def load(phi: np.ndarray, loading: float) -> np.ndarray:
    """Diagonal loading proportional to the average per-channel power."""
    num_c = phi.shape[-1]
    trace = np.real(np.trace(phi, axis1=-2, axis2=-1))
    return phi + (loading * trace / num_c)[..., None, None] * np.eye(num_c)


def mvdr_steering(phi_noise, steering: np.ndarray,
                  loading: float = DEFAULT_LOADING) -> BeamformerWeights:
    """w = Phi_n^-1 d / (d^H Phi_n^-1 d) per bin."""
    phi = phi_noise.matrices if isinstance(phi_noise, SpatialCovariance) else phi_noise
    steering = np.asarray(steering, dtype=np.complex128)
    loaded = load(phi, loading)
    weights = np.zeros(steering.shape, dtype=np.complex128)
    failed = np.zeros(steering.shape[:-1], dtype=bool)
    for idx in np.ndindex(*steering.shape[:-1]):
        d = steering[idx]
        try:
            numer = np.linalg.solve(loaded[idx], d)
        except np.linalg.LinAlgError:
            failed[idx] = True
            continue
        denom = np.vdot(d, numer)
        if not np.isfinite(denom) or abs(denom) < EPS:
            failed[idx] = True
            continue
        weights[idx] = numer / denom
    return BeamformerWeights(weights, "steering-mvdr", steering=steering, failed=failed)


def mvdr_souden(phi_target, phi_noise, ref_channel: int = 0,
                loading: float = DEFAULT_LOADING) -> BeamformerWeights:
    """w = (Phi_n^-1 Phi_x / tr(Phi_n^-1 Phi_x)) e_ref per bin.

    Bins where the trace is near zero (or the solve fails) fall back to a
    pass-through of the reference channel and are flagged in ``failed``.
    """
    phi_x = phi_target.matrices if isinstance(phi_target, SpatialCovariance) else phi_target
    phi_n = phi_noise.matrices if isinstance(phi_noise, SpatialCovariance) else phi_noise
    num_c = phi_x.shape[-1]
    if not 0 <= ref_channel < num_c:
        raise ValueError(f"ref_channel {ref_channel} out of range for {num_c} channels")
    batch = phi_x.shape[:-2]
    weights = np.zeros(batch + (num_c,), dtype=np.complex128)
    failed = np.zeros(batch, dtype=bool)
    try:
        ratio = np.linalg.solve(load(phi_n, loading), phi_x)
    except np.linalg.LinAlgError:
        ratio = np.full(phi_x.shape, np.nan, dtype=np.complex128)
        for idx in np.ndindex(*batch):
            try:
                ratio[idx] = np.linalg.solve(load(phi_n[idx], loading), phi_x[idx])
            except np.linalg.LinAlgError:
                pass
    trace = np.trace(ratio, axis1=-2, axis2=-1)
    ok = np.isfinite(trace) & (np.abs(trace) >= EPS)
    weights[ok] = ratio[ok][..., ref_channel] / trace[ok][..., None]
    failed[~ok] = True
    weights[~ok, ref_channel] = 1.0
    return BeamformerWeights(weights, "souden-mvdr", ref_channel=ref_channel, failed=failed)


def apply_beamformer(weights, spec: Spectrogram) -> Spectrogram:
    """y(t, f) = w(f)^H x(t, f); time-varying weights (N x F x C) are applied per frame."""
    w = weights.weights if isinstance(weights, BeamformerWeights) else np.asarray(weights)
    x = spec.data
    if w.ndim == 2:
        if w.shape != (spec.num_bins, spec.num_channels):
            raise ValueError(f"weights shape {w.shape} does not match F x C of the input")
        y = np.einsum("fc,cnf->nf", w.conj(), x)
    elif w.ndim == 3:
        if w.shape != (spec.num_frames, spec.num_bins, spec.num_channels):
            raise ValueError(f"weights shape {w.shape} does not match N x F x C of the input")
        y = np.einsum("nfc,cnf->nf", w.conj(), x)
    else:
        raise ValueError(f"weights must be F x C or N x F x C, got {w.shape}")
    return spec.with_data(y[None])
