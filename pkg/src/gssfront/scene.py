"""Free-field multi-channel scene simulator with ground truth.

Every source-to-microphone path is a pure delay (applied as a linear phase
ramp in the frequency domain, so fractional delays are exact) with a 1/d gain.
"""
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import scipy.fft

from .segments import SegmentAnnotation
from .signal import MultiChannelWave

SIGNAL_KINDS = ("noise", "tone", "speech-like", "wav")
MIN_DISTANCE = 0.1


class SceneError(ValueError):
    """Invalid scene description; the message names the offending field."""


@dataclass
class SourceSpec:
    signal: np.ndarray
    position: Sequence[float]
    onset: float = 0.0
    label: Optional[str] = None


@dataclass
class SceneSpec:
    mic_positions: np.ndarray
    sources: List[SourceSpec]
    noise_snr_db: Optional[float] = None
    sample_rate: int = 16000
    speed_of_sound: float = 343.0
    seed: int = 0

    def __post_init__(self):
        mics = np.asarray(self.mic_positions, dtype=np.float64)
        if mics.ndim != 2 or mics.shape[0] < 2:
            raise SceneError("mic_positions: at least 2 microphones are required")
        if mics.shape[1] != 3:
            raise SceneError("mic_positions: each microphone needs an [x, y, z] position")
        if not np.all(np.isfinite(mics)):
            raise SceneError("mic_positions: positions must be finite")
        self.mic_positions = mics
        if not self.sources:
            raise SceneError("sources: at least 1 source is required")
        for i, src in enumerate(self.sources):
            pos = np.asarray(src.position, dtype=np.float64)
            if pos.shape != (3,):
                raise SceneError(f"sources[{i}].position: expected an [x, y, z] position")
            if not np.all(np.isfinite(pos)):
                raise SceneError(f"sources[{i}].position: position must be finite")
            if np.any(np.linalg.norm(mics - pos, axis=1) == 0):
                raise SceneError(f"sources[{i}].position: coincides with a microphone")
            src.position = pos
            sig = np.asarray(src.signal, dtype=np.float64)
            if sig.ndim != 1 or sig.size == 0:
                raise SceneError(f"sources[{i}].signal: empty or not mono")
            src.signal = sig
            if not (src.onset >= 0):
                raise SceneError(f"sources[{i}].onset: must be >= 0")
            if src.label is None:
                src.label = f"spk{i}"
        labels = [src.label for src in self.sources]
        if len(set(labels)) != len(labels):
            raise SceneError("sources: labels must be unique")
        if self.sample_rate <= 0 or int(self.sample_rate) != self.sample_rate:
            raise SceneError("sample_rate: must be a positive integer")
        if not (self.speed_of_sound > 0):
            raise SceneError("speed_of_sound: must be positive")
        if self.noise_snr_db is not None and math.isnan(self.noise_snr_db):
            raise SceneError("noise_snr_db: must be a number")
        if self.seed < 0:
            raise SceneError("seed: must be an unsigned integer")


@dataclass
class SceneTruth:
    mixture: MultiChannelWave
    images: List[MultiChannelWave]
    doas_deg: np.ndarray
    activities: List[SegmentAnnotation]
    noise: np.ndarray
    labels: List[str] = field(default_factory=list)


def azimuth_deg(points: np.ndarray, origin: np.ndarray) -> np.ndarray:
    delta = np.atleast_2d(points) - origin
    return np.degrees(np.arctan2(delta[:, 1], delta[:, 0])) % 360.0


def fractional_delay(signal: np.ndarray, delays: np.ndarray, gains: np.ndarray,
                     length: int) -> np.ndarray:
    """Delay (in samples, may be fractional) and scale ``signal`` once per output row."""
    nfft = scipy.fft.next_fast_len(2 * length)
    spec = np.fft.rfft(signal, n=nfft)
    omega = 2 * np.pi * np.arange(spec.size) / nfft
    ramps = gains[:, None] * np.exp(-1j * omega[None, :] * delays[:, None])
    return np.fft.irfft(spec[None, :] * ramps, n=nfft, axis=-1)[:, :length]


def simulate(spec: SceneSpec) -> SceneTruth:
    fs = spec.sample_rate
    mics = spec.mic_positions
    dists = [np.linalg.norm(mics - src.position, axis=1) for src in spec.sources]
    onsets = [int(round(src.onset * fs)) for src in spec.sources]
    max_delay = max(d.max() for d in dists) / spec.speed_of_sound * fs
    length = max(o + src.signal.size for o, src in zip(onsets, spec.sources))
    length += int(math.ceil(max_delay)) + 1

    images = []
    activities = []
    for src, d, onset in zip(spec.sources, dists, onsets):
        placed = np.zeros(length)
        placed[onset:onset + src.signal.size] = src.signal
        delays = d / spec.speed_of_sound * fs
        gains = 1.0 / np.maximum(d, MIN_DISTANCE)
        images.append(fractional_delay(placed, delays, gains, length))
        activities.append(derive_activities(placed, fs, speaker=src.label))

    clean = np.sum(images, axis=0)
    rng = np.random.default_rng(spec.seed)
    noise = rng.standard_normal(clean.shape)
    snr = spec.noise_snr_db
    if snr is None or math.isinf(snr) and snr > 0:
        noise = np.zeros_like(clean)
    else:
        # scale the realized noise so the mixture SNR is exact
        power = np.mean(clean ** 2)
        noise *= math.sqrt(power / 10 ** (snr / 10) / np.mean(noise ** 2))
    mixture = clean + noise

    centroid = mics.mean(axis=0)
    doas = azimuth_deg(np.array([src.position for src in spec.sources]), centroid)
    return SceneTruth(
        mixture=MultiChannelWave(mixture, fs, mics),
        images=[MultiChannelWave(img, fs, mics) for img in images],
        doas_deg=doas,
        activities=activities,
        noise=noise,
        labels=[src.label for src in spec.sources],
    )


def derive_activities(signal: np.ndarray, sample_rate: int, frame: float = 0.02,
                      threshold_db: float = 40.0, speaker: str = "spk") -> SegmentAnnotation:
    """Intervals whose frame RMS lies within ``threshold_db`` of the loudest frame.

    Gaps of at most one frame between active runs are bridged.
    """
    if frame <= 0:
        raise ValueError("frame must be positive")
    signal = np.asarray(signal, dtype=np.float64)
    flen = max(int(round(frame * sample_rate)), 1)
    n_frames = -(-signal.size // flen)
    padded = np.zeros(n_frames * flen)
    padded[:signal.size] = signal
    counts = np.full(n_frames, flen)
    counts[-1] = signal.size - flen * (n_frames - 1)
    rms = np.sqrt((padded.reshape(n_frames, flen) ** 2).sum(axis=1) / counts)
    peak = rms.max() if n_frames else 0.0
    if peak <= 0:
        return SegmentAnnotation(speaker, ())
    active = rms > peak * 10 ** (-threshold_db / 20)

    runs = []
    start = None
    for i, a in enumerate(active):
        if a and start is None:
            start = i
        elif not a and start is not None:
            runs.append([start, i])
            start = None
    if start is not None:
        runs.append([start, n_frames])
    merged = [runs[0]]
    for s, e in runs[1:]:
        if s - merged[-1][1] <= 1:
            merged[-1][1] = e
        else:
            merged.append([s, e])
    intervals = tuple(
        (s * flen / sample_rate, min(e * flen, signal.size) / sample_rate) for s, e in merged)
    return SegmentAnnotation(speaker, intervals)


# ----------------------------------------------------------------------------
# source signal generators


def white_noise_burst(duration: float, sample_rate: int, rng: np.random.Generator,
                      amplitude: float = 0.1) -> np.ndarray:
    return amplitude * rng.standard_normal(int(round(duration * sample_rate)))


def tone(duration: float, sample_rate: int, frequency: float,
         amplitude: float = 0.1) -> np.ndarray:
    t = np.arange(int(round(duration * sample_rate))) / sample_rate
    return amplitude * np.sin(2 * np.pi * frequency * t)


def _smooth_track(rng, n, sample_rate, rate_hz):
    """Random band-limited track in [-1, 1] with roughly ``rate_hz`` variations per second."""
    knots = max(int(n / sample_rate * rate_hz) + 2, 2)
    values = rng.uniform(-1, 1, knots)
    return np.interp(np.linspace(0, knots - 1, n), np.arange(knots), values)


def speech_like(duration: float, sample_rate: int, rng: np.random.Generator,
                amplitude: float = 0.1) -> np.ndarray:
    """Voiced harmonic signal with moving formants and a syllabic envelope.

    Sparse in time-frequency like speech, which is what mask estimation relies on.
    """
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    f0 = rng.uniform(95, 220) * (1 + 0.15 * _smooth_track(rng, n, sample_rate, 3))
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    formants = [(rng.uniform(300, 800), 90), (rng.uniform(900, 2200), 120),
                (rng.uniform(2300, 3400), 180)]
    tracks = [c * (1 + 0.2 * _smooth_track(rng, n, sample_rate, 4)) for c, _ in formants]

    voiced = np.zeros(n)
    n_harm = int(0.45 * sample_rate / 95)
    for h in range(1, n_harm + 1):
        fh = h * f0
        below = fh < 0.45 * sample_rate
        if not below.any():
            break
        env = 0.05 * np.ones(n)
        for track, (_, bw) in zip(tracks, formants):
            env += np.exp(-0.5 * ((fh - track) / bw) ** 2)
        env /= np.sqrt(h)
        voiced += below * env * np.sin(h * phase + rng.uniform(0, 2 * np.pi))

    # syllables of 120-300 ms separated by short dips, never fully silent
    syllables = np.zeros(n)
    pos = 0.0
    while pos < duration:
        dur = rng.uniform(0.12, 0.3)
        mask = (t >= pos) & (t < pos + dur)
        syllables[mask] = rng.uniform(0.5, 1.0) * np.sin(np.pi * (t[mask] - pos) / dur) ** 2
        pos += dur + rng.uniform(0.0, 0.06)
    envelope = 0.04 + syllables
    ramp = min(int(0.01 * sample_rate), n // 2)
    if ramp:
        fade = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        envelope[:ramp] *= fade
        envelope[n - ramp:] *= fade[::-1]
    out = envelope * voiced
    rms = np.sqrt(np.mean(out ** 2))
    return amplitude * out / max(rms, 1e-12)


# ----------------------------------------------------------------------------
# JSON serialization


def _field(doc, key, where, kind=None, default=...):
    if key not in doc:
        if default is ...:
            raise SceneError(f"{where}{key}: missing required field")
        return default
    value = doc[key]
    if kind is not None and not isinstance(value, kind) or isinstance(value, bool):
        raise SceneError(f"{where}{key}: expected {getattr(kind, '__name__', kind)}")
    return value


def _signal_from_doc(doc, where, sample_rate, rng, base_dir):
    if not isinstance(doc, dict):
        raise SceneError(f"{where}: expected an object")
    kind = _field(doc, "type", where, str)
    if kind not in SIGNAL_KINDS:
        raise SceneError(f"{where}type: unknown signal type {kind!r}, expected {SIGNAL_KINDS}")
    amplitude = float(_field(doc, "amplitude", where, (int, float), 0.1))
    if kind == "wav":
        from .wavio import read_wav
        path = Path(_field(doc, "path", where, str))
        if not path.is_absolute():
            path = base_dir / path
        try:
            wave = read_wav(path)
        except (OSError, ValueError) as exc:
            raise SceneError(f"{where}path: cannot read WAV ({exc})") from None
        if wave.sample_rate != sample_rate:
            raise SceneError(f"{where}path: sample rate {wave.sample_rate} != {sample_rate}")
        return wave.samples[0]
    duration = float(_field(doc, "duration", where, (int, float)))
    if duration <= 0:
        raise SceneError(f"{where}duration: must be positive")
    if kind == "noise":
        return white_noise_burst(duration, sample_rate, rng, amplitude)
    if kind == "tone":
        freq = float(_field(doc, "frequency", where, (int, float)))
        return tone(duration, sample_rate, freq, amplitude)
    return speech_like(duration, sample_rate, rng, amplitude)


def scene_from_dict(doc: dict, base_dir=".") -> SceneSpec:
    """Build a SceneSpec from its JSON form; generated signals are seeded from ``seed``."""
    if not isinstance(doc, dict):
        raise SceneError("scene: expected a JSON object")
    base_dir = Path(base_dir)
    mics = _field(doc, "mic_positions", "", list)
    if len(mics) < 2:
        raise SceneError("mic_positions: at least 2 microphones are required")
    for i, m in enumerate(mics):
        if (not isinstance(m, list) or len(m) != 3
                or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in m)):
            raise SceneError(f"mic_positions[{i}]: expected an [x, y, z] list of numbers")
    sample_rate = _field(doc, "sample_rate", "", int, 16000)
    if sample_rate <= 0:
        raise SceneError("sample_rate: must be a positive integer")
    seed = _field(doc, "seed", "", int, 0)
    if seed < 0:
        raise SceneError("seed: must be an unsigned integer")
    snr = doc.get("noise_snr_db")
    if isinstance(snr, str) and snr.lower() in ("inf", "+inf", "infinity"):
        snr = math.inf
    if snr is not None and (isinstance(snr, bool) or not isinstance(snr, (int, float))):
        raise SceneError("noise_snr_db: expected a number, null or \"inf\"")
    speed = _field(doc, "speed_of_sound", "", (int, float), 343.0)

    sources_doc = _field(doc, "sources", "", list)
    rng = np.random.default_rng([seed, 1])
    sources = []
    for i, sdoc in enumerate(sources_doc):
        where = f"sources[{i}]."
        if not isinstance(sdoc, dict):
            raise SceneError(f"sources[{i}]: expected an object")
        pos = _field(sdoc, "position", where, list)
        if len(pos) != 3 or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in pos):
            raise SceneError(f"{where}position: expected an [x, y, z] list of numbers")
        onset = float(_field(sdoc, "onset", where, (int, float), 0.0))
        label = _field(sdoc, "label", where, str, None)
        signal = _signal_from_doc(
            _field(sdoc, "signal", where, dict), f"{where}signal.", sample_rate, rng, base_dir)
        sources.append(SourceSpec(signal, pos, onset, label))
    return SceneSpec(
        mic_positions=np.asarray(mics, dtype=np.float64),
        sources=sources,
        noise_snr_db=None if snr is None else float(snr),
        sample_rate=sample_rate,
        speed_of_sound=float(speed),
        seed=seed,
    )


def load_scene(path) -> SceneSpec:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SceneError(f"scene: malformed JSON ({exc})") from None
    return scene_from_dict(doc, base_dir=path.parent)
