"""Multi-channel waveforms and the STFT analysis/synthesis pair.

Shapes used throughout the package:
    wave samples:      C x T
    spectrogram data:  C x N x F   (channels, frames, one-sided bins)
"""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

WINDOWS = ("sqrt-hann", "hann")


@dataclass(frozen=True)
class MultiChannelWave:
    samples: np.ndarray
    sample_rate: int
    geometry: Optional[np.ndarray] = None

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim == 1:
            samples = samples[None, :]
        if samples.ndim != 2:
            raise ValueError(f"samples must be C x T, got shape {samples.shape}")
        object.__setattr__(self, "samples", samples)
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be a positive integer, got {self.sample_rate}")
        object.__setattr__(self, "sample_rate", int(self.sample_rate))
        if self.geometry is not None:
            geometry = np.asarray(self.geometry, dtype=np.float64)
            if geometry.ndim != 2 or geometry.shape != (samples.shape[0], 3):
                raise ValueError(
                    f"geometry must hold one 3-vector per channel ({samples.shape[0]}), "
                    f"got shape {geometry.shape}")
            object.__setattr__(self, "geometry", geometry)

    @property
    def num_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.num_samples / self.sample_rate

    def channel(self, index: int) -> np.ndarray:
        return self.samples[index]


def get_window(name: str, size: int) -> np.ndarray:
    # periodic Hann: exact COLA for any hop dividing size by at least 2
    hann = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(size) / size)
    if name == "hann":
        return hann
    if name == "sqrt-hann":
        return np.sqrt(hann)
    raise ValueError(f"unknown window {name!r}, expected one of {WINDOWS}")


@dataclass(frozen=True)
class StftParams:
    fft_size: int = 512
    hop: int = 128
    window: str = "sqrt-hann"

    def __post_init__(self):
        n = self.fft_size
        if n < 2 or n & (n - 1):
            raise ValueError(f"fft_size must be a power of two, got {n}")
        if self.hop <= 0 or n % self.hop:
            raise ValueError(f"hop ({self.hop}) must divide fft_size ({n})")
        if self.window not in WINDOWS:
            raise ValueError(f"unknown window {self.window!r}, expected one of {WINDOWS}")
        ola = overlap_add_profile(self)
        if not np.allclose(ola, ola[0], rtol=0, atol=1e-10) or ola[0] <= 0:
            raise ValueError(
                f"{self.window} window with hop {self.hop} is not overlap-add constant")

    @property
    def num_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def analysis_window(self) -> np.ndarray:
        return get_window(self.window, self.fft_size)

    @property
    def synthesis_window(self) -> np.ndarray:
        return get_window(self.window, self.fft_size)

    def frame_center(self, frame, sample_rate: int):
        """Time in seconds of a frame's center (reflection padding aligns it with hop * frame)."""
        return np.asarray(frame) * self.hop / sample_rate

    def num_frames(self, num_samples: int) -> int:
        return num_samples // self.hop + 1


def overlap_add_profile(params: StftParams) -> np.ndarray:
    """Sum of analysis*synthesis windows shifted by every multiple of hop, over one hop."""
    prod = get_window(params.window, params.fft_size) ** 2
    return prod.reshape(-1, params.hop).sum(axis=0)


@dataclass(frozen=True)
class Spectrogram:
    data: np.ndarray
    params: StftParams = field(default_factory=StftParams)
    sample_rate: int = 16000

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3:
            raise ValueError(f"spectrogram data must be C x N x F, got shape {data.shape}")
        if data.shape[-1] != self.params.num_bins:
            raise ValueError(
                f"bin count {data.shape[-1]} does not match fft_size {self.params.fft_size} "
                f"(expected {self.params.num_bins})")
        if not np.all(np.isfinite(data)):
            raise ValueError("spectrogram contains NaN or Inf")
        object.__setattr__(self, "data", data.astype(np.complex128, copy=False))

    @property
    def num_channels(self) -> int:
        return self.data.shape[0]

    @property
    def num_frames(self) -> int:
        return self.data.shape[1]

    @property
    def num_bins(self) -> int:
        return self.data.shape[2]

    @property
    def frequencies(self) -> np.ndarray:
        return np.arange(self.num_bins) * self.sample_rate / self.params.fft_size

    def frame_times(self) -> np.ndarray:
        return self.params.frame_center(np.arange(self.num_frames), self.sample_rate)

    def with_data(self, data: np.ndarray) -> "Spectrogram":
        return Spectrogram(data, self.params, self.sample_rate)


def stft(wave: MultiChannelWave, params: StftParams = StftParams()) -> Spectrogram:
    n = params.fft_size
    pad = n // 2
    x = wave.samples
    if x.shape[1] < n:
        raise ValueError(
            f"signal of {x.shape[1]} samples is shorter than one frame ({n} samples)")
    x = np.pad(x, ((0, 0), (pad, pad)), mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(x, n, axis=-1)[:, ::params.hop]
    data = np.fft.rfft(frames * params.analysis_window, axis=-1)
    return Spectrogram(data, params, wave.sample_rate)


def istft(spec: Spectrogram, target_length: int) -> MultiChannelWave:
    params = spec.params
    n, hop = params.fft_size, params.hop
    if spec.num_bins != params.num_bins:
        raise ValueError(f"bin count {spec.num_bins} inconsistent with fft_size {n}")
    frames = np.fft.irfft(spec.data, n=n, axis=-1) * params.synthesis_window
    num_frames = spec.num_frames
    length = hop * (num_frames - 1) + n
    out = np.zeros((spec.num_channels, length))
    norm = np.zeros(length)
    wprod = params.analysis_window * params.synthesis_window
    for i in range(num_frames):
        out[:, i * hop:i * hop + n] += frames[:, i]
        norm[i * hop:i * hop + n] += wprod
    nonzero = norm > 1e-10
    out[:, nonzero] /= norm[nonzero]
    out = out[:, n // 2:]
    if out.shape[1] >= target_length:
        out = out[:, :target_length]
    else:
        out = np.pad(out, ((0, 0), (0, target_length - out.shape[1])))
    return MultiChannelWave(out, spec.sample_rate)
