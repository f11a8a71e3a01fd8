"""WAV and JSON file helpers. Writes go through a temp file and an atomic rename."""
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .signal import MultiChannelWave


def read_wav(path) -> MultiChannelWave:
    """Read 16-bit PCM or 32-bit float RIFF audio as a C x T float wave."""
    sample_rate, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        data = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    if data.ndim == 1:
        data = data[:, None]
    return MultiChannelWave(data.T, sample_rate)


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fid:
            fid.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    """Write 32-bit float audio; ``samples`` is T (mono) or C x T."""
    samples = np.asarray(samples, dtype=np.float32)
    if samples.ndim == 2:
        samples = samples.T
    buf = io.BytesIO()
    wavfile.write(buf, int(sample_rate), samples)
    atomic_write_bytes(path, buf.getvalue())


def write_json(path, doc) -> None:
    atomic_write_bytes(path, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())


def write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode())
