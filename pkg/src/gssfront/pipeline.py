"""Session-level orchestration: localize, select channels, enhance, evaluate."""
import json
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import metrics
from .config import PipelineConfig
from .gss import apply_filters, cut_segments, estimate_filters
from .localization import (ChannelSelection, DoaEstimate, LocalizationError, localize_sources,
                           select_channel_energy_phase, select_channel_max_snr)
from .segments import SegmentAnnotation
from .signal import MultiChannelWave, stft
from .wavio import read_wav

logger = logging.getLogger(__name__)

# annotations may overrun the audio by this much (rounding in RTTM files)
DURATION_SLACK = 0.01


class InputError(ValueError):
    """Invalid user input (maps to exit code 2)."""


@dataclass
class SessionTruth:
    """Oracle data written by the simulator: per-speaker images and DOAs."""
    images: Dict[str, MultiChannelWave]
    doas_deg: Dict[str, float] = field(default_factory=dict)

    @classmethod
    def load(cls, truth_dir) -> "SessionTruth":
        truth_dir = Path(truth_dir)
        path = truth_dir / "truth.json"
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read {path}: {exc}") from None
        images = {spk: read_wav(truth_dir / name) for spk, name in doc["images"].items()}
        return cls(images, {spk: float(v) for spk, v in doc["doas_deg"].items()})


@dataclass
class SpeakerOutcome:
    speaker: str
    output: Optional[np.ndarray] = None
    selection: Optional[ChannelSelection] = None
    doa: Optional[DoaEstimate] = None
    report: Optional[metrics.EvalReport] = None
    warnings: List[str] = field(default_factory=list)
    error: Optional[str] = None


@dataclass
class SessionOutcome:
    speakers: Dict[str, SpeakerOutcome]
    localization_errors: Dict[str, str]
    timings: Dict[str, float]


class _Timer:
    def __init__(self):
        self.timings: Dict[str, float] = {}

    @contextmanager
    def __call__(self, name):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - start


def validate_inputs(wave: MultiChannelWave, annotations: Sequence[SegmentAnnotation]) -> None:
    if wave.num_channels < 2:
        raise InputError("need ≥ 2 channels")
    if not annotations or not any(a.intervals for a in annotations):
        raise InputError("no speakers in the annotation")
    for ann in annotations:
        if ann.end > wave.duration + DURATION_SLACK:
            raise InputError(
                f"speaker {ann.speaker}: segment ends at {ann.end:.3f} s, beyond the "
                f"audio duration {wave.duration:.3f} s")


def oracle_channel(image: MultiChannelWave, annotation: SegmentAnnotation) -> int:
    """Channel receiving the most energy of a speaker's image over its segments."""
    cut = cut_segments(image.samples, annotation, image.sample_rate)
    return int(np.argmax(np.sum(cut ** 2, axis=-1)))


def evaluate_speaker(output: np.ndarray, mixture: MultiChannelWave, image: MultiChannelWave,
                     annotation: SegmentAnnotation, ref_channel: int,
                     output_target: Optional[np.ndarray] = None) -> metrics.EvalReport:
    """Scores of an enhanced output against the oracle image at ``ref_channel``.

    The raw baseline is the best input channel, each channel being scored
    against its own oracle image.
    """
    fs = mixture.sample_rate
    raw = cut_segments(mixture.samples, annotation, fs)
    ref = cut_segments(image.samples, annotation, fs)
    score = metrics.si_sdr(output, ref[ref_channel])
    raw_scores = [metrics.si_sdr(raw[c], ref[c]) for c in range(raw.shape[0])]
    gain = None
    if output_target is not None:
        raw_snr = max(metrics.snr(raw[c], ref[c]) for c in range(raw.shape[0]))
        gain = metrics.snr(output, output_target) - raw_snr
    return metrics.EvalReport(
        si_sdr_db=score,
        si_sdr_improvement_db=score - max(raw_scores),
        snr_gain_db=gain,
    )


def run_session(wave: MultiChannelWave, annotations: Sequence[SegmentAnnotation],
                config: PipelineConfig = PipelineConfig(),
                truth: Optional[SessionTruth] = None,
                cache: Optional[Dict] = None) -> SessionOutcome:
    """Enhance every annotated speaker of a recording.

    A failure while processing one speaker is recorded on that speaker and
    never aborts the others. ``cache`` holds mask estimates and may be shared
    between runs that differ only in beamformer settings.
    """
    validate_inputs(wave, annotations)
    timer = _Timer()
    geometry = wave.geometry if config.geometry is None else np.asarray(config.geometry)
    loc = config.localization
    c = config.speed_of_sound
    speakers = [a for a in annotations if a.intervals]
    outcomes = {a.speaker: SpeakerOutcome(a.speaker) for a in speakers}

    with timer("stft"):
        spec = stft(wave, config.stft)

    doas: Dict[str, DoaEstimate] = {}
    loc_errors: Dict[str, str] = {}
    if geometry is not None:
        if np.shape(geometry) != (wave.num_channels, 3):
            raise InputError(
                f"geometry lists {len(geometry)} positions for {wave.num_channels} channels")
        with timer("localization"):
            doas, loc_errors = localize_sources(
                spec, geometry, speakers, loc.grid_deg, loc.band_hz, loc.restrict, c)
    elif config.selection_criterion == "energy-phase":
        raise InputError("energy-phase channel selection needs microphone geometry")

    cache = {} if cache is None else cache
    for ann in speakers:
        out = outcomes[ann.speaker]
        out.doa = doas.get(ann.speaker)
        try:
            with timer("selection"):
                if config.selection_criterion == "energy-phase":
                    if out.doa is None:
                        raise LocalizationError(
                            f"no DOA for {ann.speaker}: {loc_errors.get(ann.speaker)}")
                    out.selection = select_channel_energy_phase(
                        spec, geometry, speakers, ann.speaker, out.doa, loc.band_hz, c)
                else:
                    out.selection = select_channel_max_snr(spec, speakers, ann.speaker)
            if out.selection.fallback:
                out.warnings.append(f"{out.selection.criterion} selection used fallback frames")
            with timer("gss"):
                gss_config = config.gss_config(out.selection.channel_index)
                result = estimate_filters(wave, speakers, ann.speaker, gss_config, cache)
            out.output = result.output
            out.warnings.extend(result.warnings)
            if truth is not None and ann.speaker in truth.images:
                with timer("evaluation"):
                    image = truth.images[ann.speaker]
                    target = apply_filters(result, image, config.stft)
                    report = evaluate_speaker(out.output, wave, image, ann,
                                              out.selection.channel_index, target)
                    if out.doa is not None and ann.speaker in truth.doas_deg:
                        report.doa_error_deg = metrics.doa_error(
                            out.doa.azimuth_deg, truth.doas_deg[ann.speaker])
                    report.channel_selection_correct = (
                        out.selection.channel_index == oracle_channel(image, ann))
                    out.report = report
        except (ValueError, np.linalg.LinAlgError, FloatingPointError) as exc:
            logger.error("speaker %s failed: %s", ann.speaker, exc)
            out.error = f"{type(exc).__name__}: {exc}"
    return SessionOutcome(outcomes, loc_errors, timer.timings)
