"""Objective scores against oracle signals: SI-SDR, SNR gain, DOA error."""
import warnings
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

CAP_DB = 60.0


@dataclass
class EvalReport:
    si_sdr_db: float
    si_sdr_improvement_db: float
    snr_gain_db: Optional[float] = None
    doa_error_deg: Optional[float] = None
    channel_selection_correct: Optional[bool] = None

    def __post_init__(self):
        for name, value in asdict(self).items():
            if isinstance(value, float) and not np.isfinite(value):
                raise ValueError(f"{name} must be finite, got {value}")

    def to_dict(self) -> dict:
        return asdict(self)


def _ratio_db(num: float, den: float) -> float:
    if den <= 0:
        return CAP_DB if num > 0 else -CAP_DB
    if num <= 0:
        return -CAP_DB
    return float(np.clip(10 * np.log10(num / den), -CAP_DB, CAP_DB))


def _match_lengths(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        warnings.warn(f"length mismatch ({a.size} vs {b.size}); truncating to the shorter")
        n = min(a.size, b.size)
        a, b = a[:n], b[:n]
    if a.size == 0:
        raise ValueError("signals must contain at least one sample")
    return a, b


def si_sdr(estimate, reference) -> float:
    """Scale-invariant SDR in dB, capped at +-60 dB."""
    estimate, reference = _match_lengths(estimate, reference)
    ref_energy = np.dot(reference, reference)
    if ref_energy <= 0:
        raise ValueError("reference signal is all zeros")
    scale = np.dot(estimate, reference) / ref_energy
    target = scale * reference
    return _ratio_db(np.dot(target, target), np.sum((estimate - target) ** 2))


def snr(signal, target) -> float:
    """SNR of ``signal`` when ``target`` is its wanted component (residual = the rest)."""
    signal, target = _match_lengths(signal, target)
    return _ratio_db(np.dot(target, target), np.sum((signal - target) ** 2))


def snr_gain(enhanced, enhanced_target, raw, raw_target) -> float:
    """SNR(enhanced) - SNR(raw); each target is the oracle component inside that signal."""
    if enhanced_target is None or raw_target is None:
        raise ValueError("oracle target components are required for the SNR gain")
    return snr(enhanced, enhanced_target) - snr(raw, raw_target)


def doa_error(estimate_deg: float, truth_deg: float) -> float:
    """Absolute circular azimuth difference in degrees, in [0, 180]."""
    diff = (estimate_deg - truth_deg + 180.0) % 360.0 - 180.0
    return abs(float(diff))
