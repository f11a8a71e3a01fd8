"""Multi-source localization from inter-channel phase and energy cues, and
target-speaker channel selection.

Localization is SRP-PHAT over an azimuth grid with far-field steering: the
phase transform keeps only inter-channel phase differences, and each
time-frequency bin is weighted by its (unit-mean normalized) magnitude.
"""
import logging
from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .segments import SegmentAnnotation, activity_matrix
from .signal import Spectrogram

logger = logging.getLogger(__name__)

SPEED_OF_SOUND = 343.0
DEFAULT_BAND = (300.0, 4000.0)
PHAT_FLOOR = 1e-12
CRITERIA = ("energy-phase", "max-snr")


class LocalizationError(ValueError):
    pass


@dataclass
class DoaEstimate:
    azimuth_deg: float
    score: float
    source_id: Optional[str] = None

    def __post_init__(self):
        self.azimuth_deg = float(self.azimuth_deg) % 360.0
        if not self.score >= 0:
            raise ValueError(f"score must be >= 0, got {self.score}")


@dataclass
class ChannelSelection:
    speaker: str
    channel_index: int
    criterion: str
    per_channel_scores: np.ndarray
    fallback: bool = False

    def __post_init__(self):
        if self.criterion not in CRITERIA:
            raise ValueError(f"unknown selection criterion {self.criterion!r}")


def _frame_index(frames, num_frames: int) -> np.ndarray:
    if frames is None:
        return np.arange(num_frames)
    if isinstance(frames, slice):
        return np.arange(num_frames)[frames]
    frames = np.asarray(frames)
    if frames.dtype == bool:
        return np.flatnonzero(frames)
    return frames.astype(int)


def gcc_phat(spec: Spectrogram, ch_a: int, ch_b: int, frames=None,
             max_tdoa: Optional[float] = None, upsample: int = 4) -> float:
    """Delay of channel ``ch_b`` relative to ``ch_a`` in seconds.

    The cross-power spectrum is averaged over ``frames`` before the phase
    transform; the correlation peak is refined by parabolic interpolation.
    """
    if ch_a == ch_b:
        raise ValueError("ch_a and ch_b must differ")
    idx = _frame_index(frames, spec.num_frames)
    if idx.size == 0:
        raise ValueError("frame range is empty")
    xa = spec.data[ch_a, idx]
    xb = spec.data[ch_b, idx]
    cross = np.mean(xb * xa.conj(), axis=0)
    mag = np.abs(cross)
    if mag.max() <= 1e-20:
        raise LocalizationError("insufficient energy")
    cross = cross / np.maximum(mag, PHAT_FLOOR)
    n = spec.params.fft_size * upsample
    cc = np.fft.irfft(cross, n=n)
    fs = spec.sample_rate * upsample
    max_shift = n // 2 - 1
    if max_tdoa is not None:
        max_shift = min(max_shift, int(np.ceil(max_tdoa * fs)))
    lags = np.arange(-max_shift, max_shift + 1)
    values = cc[lags % n]
    i = int(np.argmax(values))
    shift = float(lags[i])
    if 0 < i < len(values) - 1:
        left, mid, right = values[i - 1], values[i], values[i + 1]
        denom = left - 2 * mid + right
        if denom < 0:
            shift += 0.5 * (left - right) / denom
    return shift / fs


def plane_wave_delays(geometry: np.ndarray, azimuths_deg: np.ndarray,
                      c: float = SPEED_OF_SOUND) -> np.ndarray:
    """Arrival time (s) at each mic relative to the array centroid; A x C."""
    geometry = np.asarray(geometry, dtype=np.float64)
    rel = geometry - geometry.mean(axis=0)
    az = np.radians(np.asarray(azimuths_deg, dtype=np.float64))
    u = np.stack([np.cos(az), np.sin(az), np.zeros_like(az)], axis=-1)
    return -(u @ rel.T) / c


def _band(spec: Spectrogram, band_hz) -> np.ndarray:
    freqs = spec.frequencies
    lo, hi = band_hz
    sel = np.flatnonzero((freqs >= lo) & (freqs <= hi))
    if sel.size == 0:
        raise ValueError(f"no frequency bins inside band {band_hz}")
    return sel


def srp_map(spec: Spectrogram, geometry, frames=None, grid_deg: float = 1.0,
            band_hz=DEFAULT_BAND, c: float = SPEED_OF_SOUND) -> Tuple[np.ndarray, np.ndarray]:
    """Steered-response power over an azimuth grid.

    Per mic pair and time-frequency bin the contribution is
    w(t, f) * (1 + Re[phat(X_i X_j^*) e^{j w (tau_i - tau_j)}]) / 2, with w the
    bin magnitude normalized to unit mean, so the map is nonnegative and sums
    evidence over frames. Returns (azimuths in degrees, power).
    """
    if geometry is None:
        raise LocalizationError("microphone geometry is required for localization")
    geometry = np.asarray(geometry, dtype=np.float64)
    if geometry.shape != (spec.num_channels, 3):
        raise LocalizationError(
            f"geometry must list {spec.num_channels} positions, got shape {geometry.shape}")
    if spec.num_channels < 2:
        raise LocalizationError("localization needs at least 2 channels")
    idx = _frame_index(frames, spec.num_frames)
    if idx.size == 0:
        raise ValueError("frame range is empty")
    bins = _band(spec, band_hz)
    x = spec.data[:, idx][:, :, bins]  # C x T x F'
    omega = 2 * np.pi * spec.frequencies[bins]

    weight = np.mean(np.abs(x), axis=0)
    mean_w = weight.mean()
    if mean_w <= 0:
        raise LocalizationError("insufficient energy")
    weight = weight / mean_w

    azimuths = np.arange(0.0, 360.0, grid_deg)
    delays = plane_wave_delays(geometry, azimuths, c)  # A x C
    pairs = list(combinations(range(spec.num_channels), 2))
    power = np.zeros(azimuths.size)
    for i, j in pairs:
        cross = x[i] * x[j].conj()
        cross = cross / np.maximum(np.abs(cross), PHAT_FLOOR)
        # weighted sum over frames: F' vector per pair
        pooled = np.sum(weight * cross, axis=0)
        steer = np.exp(1j * np.outer(delays[:, i] - delays[:, j], omega))  # A x F'
        power += 0.5 * (weight.sum() + np.real(steer @ pooled))
    return azimuths, power / len(pairs)


def _speaker_frames(activity: np.ndarray, k: int, restrict: bool) -> Tuple[np.ndarray, bool]:
    """Frames of speaker k; only-speaker frames when available (second value: fell back)."""
    active = activity[k]
    if restrict:
        others = np.delete(activity[:-1], k, axis=0).any(axis=0)
        only = active & ~others
        if only.any():
            return only, False
    return active, restrict


def localize_sources(spec: Spectrogram, geometry, activities: Sequence[SegmentAnnotation],
                     grid_deg: float = 1.0, band_hz=DEFAULT_BAND, restrict: bool = True,
                     c: float = SPEED_OF_SOUND):
    """Per-speaker DOA from the SRP map over that speaker's (exclusive) frames.

    Returns (estimates by speaker, errors by speaker); a failing speaker never
    prevents the others from being localized.
    """
    activity = activity_matrix(activities, spec.num_frames, spec.params, spec.sample_rate)
    estimates: Dict[str, DoaEstimate] = {}
    errors: Dict[str, str] = {}
    for k, ann in enumerate(activities):
        frames, _ = _speaker_frames(activity, k, restrict)
        if not frames.any():
            errors[ann.speaker] = "no active frames"
            continue
        try:
            az, power = srp_map(spec, geometry, frames, grid_deg, band_hz, c)
        except LocalizationError as exc:
            if "geometry" in str(exc):
                raise
            errors[ann.speaker] = str(exc)
            continue
        best = int(np.argmax(power))
        estimates[ann.speaker] = DoaEstimate(az[best], float(power[best]), ann.speaker)
    return estimates, errors


def find_peaks_circular(power: np.ndarray, count: int) -> np.ndarray:
    """Indices of the ``count`` largest local maxima of a circular map."""
    left = np.roll(power, 1)
    right = np.roll(power, -1)
    peaks = np.flatnonzero((power > left) & (power >= right))
    order = np.argsort(-power[peaks], kind="stable")
    return peaks[order[:count]]


def _frame_power(spec: Spectrogram, bins=None) -> np.ndarray:
    x = spec.data if bins is None else spec.data[..., bins]
    return np.sum(np.abs(x) ** 2, axis=-1)  # C x N


def select_channel_energy_phase(spec: Spectrogram, geometry,
                                activities: Sequence[SegmentAnnotation], speaker: str,
                                doa: Optional[DoaEstimate] = None, band_hz=DEFAULT_BAND,
                                c: float = SPEED_OF_SOUND) -> ChannelSelection:
    """Score = target-only energy x phase coherence with the target's DOA.

    Energy is measured on frames where the target speaks and nobody else does,
    which keeps loud non-target speakers from attracting the selection. The
    phase factor maps the mean cosine between observed and DOA-predicted
    inter-channel phase (against every other channel) from [-1, 1] to [0, 1].
    """
    labels = [a.speaker for a in activities]
    if speaker not in labels:
        raise ValueError(f"speaker {speaker!r} not in annotations")
    k = labels.index(speaker)
    activity = activity_matrix(activities, spec.num_frames, spec.params, spec.sample_rate)
    if not activity[k].any():
        raise LocalizationError(f"speaker {speaker!r} has no active frames")
    if doa is None:
        estimates, errors = localize_sources(spec, geometry, activities, band_hz=band_hz, c=c)
        if speaker not in estimates:
            raise LocalizationError(f"localization failed for {speaker!r}: {errors.get(speaker)}")
        doa = estimates[speaker]
    frames, fallback = _speaker_frames(activity, k, restrict=True)
    if fallback:
        logger.warning("no target-only frames for %s; using all of its active frames", speaker)

    bins = _band(spec, band_hz)
    x = spec.data[:, frames][:, :, bins]
    energy = np.mean(np.sum(np.abs(x) ** 2, axis=-1), axis=-1)

    num_c = spec.num_channels
    delays = plane_wave_delays(geometry, [doa.azimuth_deg], c)[0]
    omega = 2 * np.pi * spec.frequencies[bins]
    coherence = np.zeros(num_c)
    for ch in range(num_c):
        cosines = []
        for ref in range(num_c):
            if ref == ch:
                continue
            observed = np.angle(x[ch] * x[ref].conj())
            predicted = -omega * (delays[ch] - delays[ref])
            cosines.append(np.mean(np.cos(observed - predicted)))
        coherence[ch] = (1 + np.mean(cosines)) / 2
    scores = energy * coherence
    # ties go to the lowest channel index
    return ChannelSelection(speaker, int(np.argmax(scores)), "energy-phase", scores, fallback)


def select_channel_max_snr(spec: Spectrogram, activities: Sequence[SegmentAnnotation],
                           speaker: str) -> ChannelSelection:
    """Score = mean power over the speaker's frames / mean power over speech-free frames."""
    labels = [a.speaker for a in activities]
    if speaker not in labels:
        raise ValueError(f"speaker {speaker!r} not in annotations")
    k = labels.index(speaker)
    activity = activity_matrix(activities, spec.num_frames, spec.params, spec.sample_rate)
    active = activity[k]
    if not active.any():
        raise LocalizationError(f"speaker {speaker!r} has no active frames")
    power = _frame_power(spec)
    silent = ~activity[:-1].any(axis=0)
    fallback = False
    if not silent.any():
        # quietest 10% of frames (by channel-averaged power) stand in for noise
        fallback = True
        total = power.mean(axis=0)
        count = max(1, int(np.ceil(0.1 * total.size)))
        silent = np.zeros_like(active)
        silent[np.argsort(total, kind="stable")[:count]] = True
    signal = power[:, active].mean(axis=1)
    noise = np.maximum(power[:, silent].mean(axis=1), 1e-12)
    scores = signal / noise
    return ChannelSelection(speaker, int(np.argmax(scores)), "max-snr", scores, fallback)
