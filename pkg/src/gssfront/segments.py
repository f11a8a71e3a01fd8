"""Speaker activity annotations, RTTM I/O and frame-level activity matrices."""
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from .signal import StftParams

NOISE_LABEL = "noise"


@dataclass(frozen=True)
class SegmentAnnotation:
    speaker: str
    intervals: Tuple[Tuple[float, float], ...] = field(default_factory=tuple)

    def __post_init__(self):
        intervals = tuple((float(s), float(e)) for s, e in self.intervals)
        for s, e in intervals:
            if not (np.isfinite(s) and np.isfinite(e)) or e <= s:
                raise ValueError(f"speaker {self.speaker}: invalid interval [{s}, {e})")
        for (_, e0), (s1, _) in zip(intervals, intervals[1:]):
            if s1 < e0:
                raise ValueError(
                    f"speaker {self.speaker}: intervals must be sorted and non-overlapping")
        object.__setattr__(self, "intervals", intervals)

    @classmethod
    def from_unsorted(cls, speaker: str, intervals: Iterable[Tuple[float, float]]):
        """Sort and merge possibly overlapping intervals."""
        merged: List[List[float]] = []
        for s, e in sorted(intervals):
            if merged and s <= merged[-1][1]:
                merged[-1][1] = max(merged[-1][1], e)
            else:
                merged.append([s, e])
        return cls(speaker, tuple((s, e) for s, e in merged))

    @property
    def total_duration(self) -> float:
        return sum(e - s for s, e in self.intervals)

    @property
    def end(self) -> float:
        return self.intervals[-1][1] if self.intervals else 0.0

    def is_active(self, times: np.ndarray, context: float = 0.0) -> np.ndarray:
        times = np.asarray(times, dtype=np.float64)
        active = np.zeros(times.shape, dtype=bool)
        for s, e in self.intervals:
            active |= (times >= s - context) & (times < e + context)
        return active


def read_rttm(path) -> List[SegmentAnnotation]:
    """Parse SPEAKER lines; onset, duration and label are fields 4, 5 and 8."""
    per_speaker: Dict[str, list] = {}
    with open(path) as fid:
        for lineno, line in enumerate(fid, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#") or parts[0] != "SPEAKER":
                continue
            if len(parts) < 8:
                raise ValueError(f"{path}:{lineno}: expected at least 8 fields")
            try:
                onset, duration = float(parts[3]), float(parts[4])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad onset/duration") from None
            if duration <= 0 or onset < 0:
                raise ValueError(f"{path}:{lineno}: onset must be >= 0 and duration > 0")
            per_speaker.setdefault(parts[7], []).append((onset, onset + duration))
    return [SegmentAnnotation.from_unsorted(spk, iv) for spk, iv in per_speaker.items()]


def format_rttm(annotations: Sequence[SegmentAnnotation], file_id: str = "session") -> str:
    lines = []
    for ann in annotations:
        for s, e in ann.intervals:
            lines.append(
                f"SPEAKER {file_id} 1 {s:.3f} {e - s:.3f} <NA> <NA> {ann.speaker} <NA> <NA>")
    return "".join(line + "\n" for line in lines)


def activity_matrix(annotations: Sequence[SegmentAnnotation], n_frames: int,
                    params: StftParams, sample_rate: int,
                    context: float = 0.0) -> np.ndarray:
    """Binary (K + 1) x N matrix; the last row is the always-active noise class.

    A speaker is active on a frame when the frame center falls inside one of its
    intervals dilated by ``context`` seconds on both sides.
    """
    centers = params.frame_center(np.arange(n_frames), sample_rate)
    activity = np.zeros((len(annotations) + 1, n_frames), dtype=bool)
    for k, ann in enumerate(annotations):
        activity[k] = ann.is_active(centers, context)
    activity[-1] = True
    return activity
