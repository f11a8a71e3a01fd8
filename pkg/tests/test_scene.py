import json
import math

import numpy as np
import pytest

from gssfront.scene import (SceneError, SceneSpec, SourceSpec, derive_activities,
                            scene_from_dict, simulate, tone)
from gssfront.signal import MultiChannelWave, stft
from gssfront.localization import gcc_phat

from scenarios import FS, polar

PAIR = np.array([[-0.05, 0, 0], [0.05, 0, 0]])


def noise(seconds, seed=0):
    return np.random.default_rng(seed).standard_normal(int(seconds * FS))


def test_equidistant_source_gives_identical_channels():
    truth = simulate(SceneSpec(PAIR, [SourceSpec(noise(0.5), [0, 2.0, 0.3])], None, FS))
    img = truth.images[0].samples
    np.testing.assert_allclose(img[0], img[1], atol=1e-9)


def test_broadside_and_endfire_delays():
    # broadside (90 deg): no inter-channel delay
    truth = simulate(SceneSpec(PAIR, [SourceSpec(noise(1.0), polar(90, 50.0))], None, FS))
    img = truth.images[0].samples
    np.testing.assert_allclose(img[0], img[1], atol=1e-9)
    assert truth.doas_deg[0] == pytest.approx(90.0)

    # endfire (0 deg): the far mic (index 0) lags by spacing / c
    truth = simulate(SceneSpec(PAIR, [SourceSpec(noise(1.0), polar(0, 50.0))], None, FS))
    spec = stft(truth.mixture)
    tdoa = gcc_phat(spec, 1, 0)
    assert tdoa == pytest.approx(0.1 / 343.0, abs=0.5 / FS)


def test_two_source_mixture_is_sum_of_images():
    sources = [SourceSpec(noise(0.7, 1), polar(30, 2.0)), SourceSpec(noise(0.5, 2), polar(200, 1.0), 0.3)]
    truth = simulate(SceneSpec(PAIR, sources, math.inf, FS))
    direct = np.zeros_like(truth.mixture.samples)
    for img in truth.images:
        direct += img.samples
    np.testing.assert_allclose(truth.mixture.samples, direct, atol=1e-9)
    assert not truth.noise.any()


@pytest.mark.parametrize("n_sources", [1, 2, 3])
def test_additivity_with_noise(n_sources):
    sources = [SourceSpec(noise(0.4, i), polar(100 * i, 1.5 + i), 0.1 * i) for i in range(n_sources)]
    truth = simulate(SceneSpec(PAIR, sources, 5.0, FS, seed=7))
    residual = truth.mixture.samples - np.sum([im.samples for im in truth.images], axis=0)
    np.testing.assert_allclose(residual, truth.noise, atol=1e-9)
    clean = np.sum([im.samples for im in truth.images], axis=0)
    snr = 10 * np.log10(np.mean(clean ** 2) / np.mean(truth.noise ** 2))
    assert snr == pytest.approx(5.0, abs=1e-9)


def test_determinism():
    spec = lambda: SceneSpec(PAIR, [SourceSpec(noise(0.3), polar(10, 1.0))], 10.0, FS, seed=3)
    a, b = simulate(spec()), simulate(spec())
    assert np.array_equal(a.mixture.samples, b.mixture.samples)
    assert np.array_equal(a.images[0].samples, b.images[0].samples)


@pytest.mark.parametrize("azimuth", [0.0, 35.0, 120.0, 250.0])
def test_far_field_tdoa_matches_plane_wave(azimuth):
    src = polar(azimuth, 200.0)
    truth = simulate(SceneSpec(PAIR, [SourceSpec(noise(0.5), src)], None, FS))
    dists = np.linalg.norm(PAIR - src, axis=1)
    # impulse response peaks: check via delay difference of exact paths vs plane wave
    exact = (dists[0] - dists[1]) / 343.0
    plane = np.dot(PAIR[1] - PAIR[0], [np.cos(np.radians(azimuth)), np.sin(np.radians(azimuth)), 0]) / 343.0
    assert abs(exact - plane) < 1.0 / FS
    tdoa = gcc_phat(stft(truth.mixture), 1, 0)
    assert abs(tdoa - plane) < 1.0 / FS


def test_gain_floor():
    close = [0.0, 0.0, 0.01]
    truth = simulate(SceneSpec(PAIR, [SourceSpec(noise(0.2), np.array(PAIR[0]) + close)], None, FS))
    peak = np.abs(truth.images[0].samples[0]).max() / np.abs(noise(0.2)).max()
    assert peak <= 1 / 0.1 + 1e-6


@pytest.mark.parametrize("spec_kwargs,match", [
    (dict(mic_positions=[[0, 0, 0]]), "at least 2 microphones"),
    (dict(sources=[]), "at least 1 source"),
    (dict(sources=[SourceSpec(np.zeros(0), [1, 0, 0])]), "signal"),
    (dict(sources=[SourceSpec(np.ones(10), [np.nan, 0, 0])]), "position"),
    (dict(sources=[SourceSpec(np.ones(10), [-0.05, 0, 0])]), "coincides"),
    (dict(sources=[SourceSpec(np.ones(10), [1, 0, 0], -1.0)]), "onset"),
])
def test_scene_validation(spec_kwargs, match):
    kwargs = dict(mic_positions=PAIR, sources=[SourceSpec(np.ones(10), [1, 0, 0])])
    kwargs.update(spec_kwargs)
    with pytest.raises(SceneError, match=match):
        SceneSpec(**kwargs)


# ----------------------------------------------------------------------------
# activities


def test_constant_tone_single_interval():
    sig = tone(2.0, FS, 440.0)
    ann = derive_activities(sig, FS, speaker="a")
    assert ann.intervals == ((0.0, 2.0),)


def _brute_force_rms(signal, flen):
    out = []
    for start in range(0, len(signal), flen):
        chunk = signal[start:start + flen]
        out.append(math.sqrt(sum(v * v for v in chunk) / len(chunk)))
    return out


def test_tone_burst_interval():
    sig = np.zeros(3 * FS)
    sig[FS:2 * FS] = tone(1.0, FS, 300.0)
    frame = 0.02
    ann = derive_activities(sig, FS, frame=frame, threshold_db=40.0)

    flen = int(frame * FS)
    rms = _brute_force_rms(sig, flen)
    active = [i for i, r in enumerate(rms) if r > max(rms) * 10 ** (-40 / 20)]
    expected = (active[0] * frame, (active[-1] + 1) * frame)
    assert len(ann.intervals) == 1
    s, e = ann.intervals[0]
    assert s == pytest.approx(expected[0]) and e == pytest.approx(expected[1])
    assert abs(s - 1.0) <= frame and abs(e - 2.0) <= frame


def test_silent_signal_empty():
    assert derive_activities(np.zeros(1000), FS).intervals == ()


def test_short_gaps_bridged():
    sig = tone(1.0, FS, 200.0)
    sig[8000:8320] = 0  # exactly one 20 ms frame
    assert len(derive_activities(sig, FS).intervals) == 1
    sig[8000:9600] = 0
    assert len(derive_activities(sig, FS).intervals) == 2


def test_activities_within_duration():
    sources = [SourceSpec(noise(0.5), polar(0, 1.0), 0.2), SourceSpec(noise(0.5, 1), polar(90, 1.0), 0.6)]
    truth = simulate(SceneSpec(PAIR, sources, 20.0, FS))
    for ann in truth.activities:
        for s, e in ann.intervals:
            assert 0 <= s < e <= truth.mixture.duration


# ----------------------------------------------------------------------------
# JSON


def scene_doc(**overrides):
    doc = {
        "mic_positions": [[-0.05, 0, 0], [0.05, 0, 0]],
        "sources": [{"signal": {"type": "noise", "duration": 0.5}, "position": [1, 1, 0]}],
        "noise_snr_db": 20,
        "sample_rate": FS,
        "seed": 1,
    }
    doc.update(overrides)
    return doc


def test_json_scene_all_signal_kinds(tmp_path):
    from gssfront.wavio import write_wav
    write_wav(tmp_path / "src.wav", np.sin(np.arange(4000) / 5.0) * 0.1, FS)
    doc = scene_doc(sources=[
        {"signal": {"type": "noise", "duration": 0.5}, "position": [1, 1, 0]},
        {"signal": {"type": "tone", "duration": 0.5, "frequency": 500}, "position": [1, -1, 0], "onset": 0.2},
        {"signal": {"type": "speech-like", "duration": 0.5}, "position": [-1, 1, 0]},
        {"signal": {"type": "wav", "path": "src.wav"}, "position": [-1, -1, 0], "label": "w"},
    ], noise_snr_db="inf")
    spec = scene_from_dict(json.loads(json.dumps(doc)), tmp_path)
    assert [s.label for s in spec.sources] == ["spk0", "spk1", "spk2", "w"]
    assert spec.noise_snr_db == math.inf
    truth = simulate(spec)
    assert len(truth.images) == 4


@pytest.mark.parametrize("overrides,field", [
    (dict(mic_positions=[]), "mic_positions"),
    (dict(mic_positions=[[0, 0, 0], [1, 0]]), "mic_positions[1]"),
    (dict(sources=[{"signal": {"type": "noise", "duration": 0.5}, "position": [1, 1]}]), "sources[0].position"),
    (dict(sources=[{"signal": {"type": "buzz", "duration": 0.5}, "position": [1, 1, 0]}]), "sources[0].signal.type"),
    (dict(sources=[{"signal": {"type": "tone", "duration": 0.5}, "position": [1, 1, 0]}]), "sources[0].signal.frequency"),
    (dict(sources=[{"position": [1, 1, 0]}]), "sources[0].signal"),
    (dict(seed=-1), "seed"),
    (dict(noise_snr_db="loud"), "noise_snr_db"),
])
def test_json_errors_name_field(overrides, field):
    with pytest.raises(SceneError) as info:
        scene_from_dict(scene_doc(**overrides))
    assert str(info.value).startswith(field)
