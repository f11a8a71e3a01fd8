"""Guided source separation: activity-guided CACGMM mask estimation and the
segment-wise enhancement chain (masks -> PSDs -> MVDR -> postfilter -> iSTFT).
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import gammaln, logsumexp

from . import beamform
from .segments import NOISE_LABEL, SegmentAnnotation, activity_matrix
from .signal import MultiChannelWave, Spectrogram, StftParams, istft, stft

logger = logging.getLogger(__name__)

NORM_FLOOR = 1e-12
QUAD_FLOOR = 1e-10
SHAPE_LOADING = 1e-6


@dataclass
class MaskSet:
    masks: np.ndarray  # (K + 1) x N x F
    class_labels: List[str]

    def index(self, label: str) -> int:
        return self.class_labels.index(label)

    def __getitem__(self, label: str) -> np.ndarray:
        return self.masks[self.index(label)]


@dataclass
class CacgmmState:
    shape_matrices: np.ndarray  # (K + 1) x F x C x C
    log_likelihood_trace: List[float] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)


def _normalize_shape(b: np.ndarray) -> np.ndarray:
    num_c = b.shape[-1]
    b = beamform.hermitize(b)
    b = b * (num_c / np.real(np.trace(b, axis1=-2, axis2=-1)))[..., None, None]
    b = b + SHAPE_LOADING * np.eye(num_c)
    return b * (num_c / np.real(np.trace(b, axis1=-2, axis2=-1)))[..., None, None]


def _pair_products(z: np.ndarray) -> np.ndarray:
    """zz[c, d] = z_c conj(z_d), C x C x F x T."""
    return z.transpose(2, 0, 1)[:, None] * z.transpose(2, 0, 1)[None].conj()


def _quadratic_form(zz: np.ndarray, precision: np.ndarray) -> np.ndarray:
    """z^H B^-1 z for every class, bin and frame (K x F x T), floored.

    Elementwise over (class, bin, frame) with a fixed channel-pair order, so a
    bin's result never depends on its position (no BLAS reductions)."""
    num_c = zz.shape[0]
    quad = np.zeros(precision.shape[:2] + zz.shape[-1:])
    for c in range(num_c):
        for d in range(num_c):
            quad += (precision[:, :, c, d, None] * zz[d, c]).real
    return np.maximum(quad, QUAD_FLOOR)


def _weighted_scatter(zz: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """sum_t weights[k, f, t] z zH, K x F x C x C."""
    num_c = zz.shape[0]
    out = np.empty(weights.shape[:2] + (num_c, num_c), dtype=np.complex128)
    for c in range(num_c):
        for d in range(c, num_c):
            out[:, :, c, d] = np.sum(weights * zz[c, d], axis=-1)
            out[:, :, d, c] = out[:, :, c, d].conj()
    return out


def _initial_posteriors(activity: np.ndarray) -> np.ndarray:
    """Speaker-active frames are shared uniformly among the active speakers;
    the noise class starts with the speaker-free frames only."""
    post = activity.astype(np.float64)
    speakers = post[:-1]
    any_speaker = speakers.sum(axis=0) > 0
    post[-1] = np.where(any_speaker, 0.0, 1.0)
    return post / post.sum(axis=0, keepdims=True)


def cacgmm_em(spec: Spectrogram, activity: np.ndarray, n_iter: int = 20,
              class_labels: Optional[Sequence[str]] = None) -> Tuple[MaskSet, CacgmmState]:
    """EM for a complex angular central Gaussian mixture with activity-tied weights.

    Every frequency bin is fitted independently. The time-varying mixture
    weight of class k is activity[k, t] normalized over the active classes.
    """
    num_c = spec.num_channels
    if num_c < 2:
        raise ValueError("mask estimation needs at least 2 channels")
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    activity = np.asarray(activity, dtype=bool)
    num_k, num_t = activity.shape
    if num_t != spec.num_frames:
        raise ValueError(f"activity has {num_t} frames, spectrogram has {spec.num_frames}")
    if not activity[-1].all():
        raise ValueError("the last (noise) class must be active on every frame")
    if class_labels is None:
        class_labels = [f"spk{k}" for k in range(num_k - 1)] + [NOISE_LABEL]
    class_labels = list(class_labels)

    x = np.transpose(spec.data, (2, 1, 0))  # F x T x C
    norm = np.linalg.norm(x, axis=-1)
    valid = norm >= NORM_FLOOR
    z = np.where(valid[..., None], x / np.maximum(norm, NORM_FLOOR)[..., None], 0)
    zz = _pair_products(z)
    with np.errstate(divide="ignore"):
        weight_log = np.log(activity / activity.sum(axis=0, keepdims=True))  # -inf: inactive
    log_norm = gammaln(num_c) - math.log(2) - num_c * math.log(math.pi)

    warnings = []
    silent = ~activity.any(axis=1)
    for k in np.flatnonzero(silent):
        msg = f"class {class_labels[k]} has no active frames; mask left at zero"
        warnings.append(msg)
        logger.warning(msg)

    shape = np.broadcast_to(np.eye(num_c, dtype=np.complex128),
                            (num_k, spec.num_bins, num_c, num_c)).copy()
    precision = shape.copy()
    post = np.broadcast_to(_initial_posteriors(activity)[:, None, :],
                           (num_k, spec.num_bins, num_t)).copy()
    post = post * valid[None]
    trace = []
    for _ in range(n_iter):
        # M-step: one fixed-point (Tyler) update of each shape matrix
        quad = _quadratic_form(zz, precision)
        gamma_sum = post.sum(axis=-1)  # K x F
        scaled = post / quad
        cov = _weighted_scatter(zz, scaled)
        update = gamma_sum > 0
        cov = num_c * cov / np.maximum(gamma_sum, 1e-300)[..., None, None]
        shape[update] = _normalize_shape(cov[update])
        precision = np.linalg.inv(shape)
        _, logdet = np.linalg.slogdet(shape)

        # E-step
        quad = _quadratic_form(zz, precision)
        log_density = log_norm - logdet[..., None] - num_c * np.log(quad)
        with np.errstate(invalid="ignore"):
            joint = weight_log[:, None, :] + log_density
        total = logsumexp(joint, axis=0)  # F x T
        trace.append(float(total[valid].sum()))
        post = np.exp(joint - total[None])
        post = post * valid[None]

    # frames without energy: uniform over the active classes
    uniform = activity / activity.sum(axis=0, keepdims=True)
    post = np.where(valid[None], post, uniform[:, None, :])
    post[~np.broadcast_to(activity[:, None, :], post.shape)] = 0.0
    masks = np.transpose(post, (0, 2, 1))
    return MaskSet(masks, class_labels), CacgmmState(shape, trace, warnings)


# ----------------------------------------------------------------------------
# enhancement chain


@dataclass(frozen=True)
class GssConfig:
    stft: StftParams = StftParams()
    context_s: float = 15.0
    activity_margin_s: float = 0.0
    n_iter: int = 20
    mask_floor: Optional[float] = None
    psd: str = "recursive"
    alpha: float = 0.95
    adaptive: bool = False
    variant: str = "souden-mvdr"
    loading: float = beamform.DEFAULT_LOADING
    ref_channel: int = 0

    def __post_init__(self):
        if self.context_s < 0 or self.activity_margin_s < 0:
            raise ValueError("context_s and activity_margin_s must be >= 0")
        if self.n_iter < 1:
            raise ValueError("n_iter must be >= 1")
        if self.mask_floor is not None and not 0 <= self.mask_floor <= 1:
            raise ValueError("mask_floor must lie in [0, 1]")
        if self.psd not in ("recursive", "batch"):
            raise ValueError(f"psd must be 'recursive' or 'batch', got {self.psd!r}")
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.variant not in beamform.VARIANTS:
            raise ValueError(f"unknown beamformer variant {self.variant!r}")
        if self.loading < 0:
            raise ValueError("loading must be >= 0")


@dataclass
class SegmentFilter:
    """Everything needed to re-apply the enhancement of one target segment."""
    start: int  # segment bounds in samples
    end: int
    window: Tuple[int, int]  # processed (context-extended) span in samples
    weights: np.ndarray  # F x C, or N x F x C when adaptive
    post_mask: Optional[np.ndarray]  # N x F
    failed_bins: int = 0


@dataclass
class GssResult:
    target: str
    filters: List[SegmentFilter]
    output: np.ndarray
    sample_rate: int
    warnings: List[str] = field(default_factory=list)


def _principal_steering(phi_x: np.ndarray, ref_channel: int) -> np.ndarray:
    _, vecs = np.linalg.eigh(phi_x)
    d = vecs[..., -1]
    ref = d[..., ref_channel]
    phase = np.where(np.abs(ref) > 0, np.conj(ref) / np.maximum(np.abs(ref), 1e-300), 1)
    return d * phase[..., None]


def _weights(spec: Spectrogram, target_mask, noise_mask, config: GssConfig):
    if config.psd == "batch":
        phi_x = beamform.psd_batch(spec, target_mask).matrices
        phi_n = beamform.psd_batch(spec, noise_mask).matrices
    else:
        phi_x = beamform.psd_recursive_stack(spec, target_mask, config.alpha)
        phi_n = beamform.psd_recursive_stack(spec, noise_mask, config.alpha)
        if not config.adaptive:
            phi_x, phi_n = phi_x[-1], phi_n[-1]
    ref = config.ref_channel
    if config.variant == "souden-mvdr":
        bf = beamform.mvdr_souden(phi_x, phi_n, ref, config.loading)
        return bf.weights, int(bf.failed.sum())
    steering = _principal_steering(phi_x, ref)
    bf = beamform.mvdr_steering(phi_n, steering, config.loading)
    # rescale so the target is reproduced as observed at the reference channel
    gain = np.abs(steering[..., ref])
    return bf.weights * gain[..., None], int(bf.failed.sum())


def estimate_filters(wave: MultiChannelWave, annotations: Sequence[SegmentAnnotation],
                     target: str, config: GssConfig = GssConfig(),
                     cache: Optional[Dict] = None) -> GssResult:
    """Estimate one time-invariant (or adaptive) filter per target segment.

    Each segment is processed on a window extended by ``context_s`` on both
    sides; mask estimation results are shared through ``cache`` between
    segments (and targets) whose windows coincide.
    """
    labels = [a.speaker for a in annotations]
    if target not in labels:
        raise ValueError(f"target {target!r} not in annotations")
    target_ann = annotations[labels.index(target)]
    if not target_ann.intervals:
        raise ValueError(f"target {target!r} has no segments")
    fs = wave.sample_rate
    params = config.stft
    cache = {} if cache is None else cache
    warnings = []
    filters = []
    for s, e in target_ann.intervals:
        start = int(round(s * fs))
        end = min(int(round(e * fs)), wave.num_samples)
        if end <= start:
            raise ValueError(f"target {target!r}: segment [{s}, {e}) lies outside the audio")
        ws = max(0, int(round((s - config.context_s) * fs)))
        we = min(wave.num_samples, int(round((e + config.context_s) * fs)))
        if we - ws < params.fft_size:
            ws = max(0, min(ws, we - params.fft_size))
            we = min(wave.num_samples, ws + params.fft_size)
        key = (ws, we, params, config.activity_margin_s, config.n_iter, tuple(annotations))
        if key not in cache:
            chunk = MultiChannelWave(wave.samples[:, ws:we], fs)
            spec = stft(chunk, params)
            shifted = [_shift(a, ws / fs) for a in annotations]
            act = activity_matrix(shifted, spec.num_frames, params, fs, config.activity_margin_s)
            masks, state = cacgmm_em(spec, act, config.n_iter, labels + [NOISE_LABEL])
            cache[key] = (spec, masks, state)
        spec, masks, state = cache[key]
        warnings.extend(state.warnings)
        k = masks.index(target)
        target_mask = masks.masks[k]
        noise_mask = np.clip(masks.masks.sum(axis=0) - target_mask, 0.0, 1.0)
        if not target_mask.any():
            raise ValueError(f"target {target!r} has no active frames in segment [{s}, {e})")
        weights, failed = _weights(spec, target_mask, noise_mask, config)
        if failed:
            warnings.append(f"{target} [{s:.3f}, {e:.3f}): {failed} bins fell back")
        post = None
        if config.mask_floor is not None:
            post = np.maximum(target_mask, config.mask_floor)
        filters.append(SegmentFilter(start, end, (ws, we), weights, post, failed))
    result = GssResult(target, filters, np.zeros(0), fs, warnings)
    result.output = apply_filters(result, wave, params)
    return result


def _shift(ann: SegmentAnnotation, offset: float) -> SegmentAnnotation:
    return SegmentAnnotation(ann.speaker, tuple((s - offset, e - offset) for s, e in ann.intervals))


def apply_filters(result: GssResult, wave: MultiChannelWave,
                  params: StftParams = StftParams()) -> np.ndarray:
    """Run ``wave`` through the per-segment filters of ``result`` and concatenate
    the segment outputs. Linear in ``wave``, so it also maps oracle images."""
    pieces = []
    for flt in result.filters:
        ws, we = flt.window
        spec = stft(MultiChannelWave(wave.samples[:, ws:we], wave.sample_rate), params)
        y = beamform.apply_beamformer(flt.weights, spec)
        if flt.post_mask is not None:
            y = y.with_data(y.data * flt.post_mask[None])
        out = istft(y, we - ws).samples[0]
        pieces.append(out[flt.start - ws:flt.end - ws])
    return np.concatenate(pieces) if pieces else np.zeros(0)


def gss_enhance(wave: MultiChannelWave, annotations: Sequence[SegmentAnnotation],
                target: str, config: GssConfig = GssConfig(),
                cache: Optional[Dict] = None) -> np.ndarray:
    """Enhanced mono signal of ``target``: its segments, cut and concatenated."""
    return estimate_filters(wave, annotations, target, config, cache).output


def cut_segments(signal: np.ndarray, annotation: SegmentAnnotation, sample_rate: int) -> np.ndarray:
    """Concatenate the samples of ``signal`` (last axis) covered by the annotation."""
    pieces = []
    for s, e in annotation.intervals:
        start = int(round(s * sample_rate))
        end = min(int(round(e * sample_rate)), signal.shape[-1])
        pieces.append(signal[..., start:end])
    return np.concatenate(pieces, axis=-1)
