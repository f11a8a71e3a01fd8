"""Command-line front end: simulate | localize | enhance | evaluate.

Exit codes: 0 success, 2 input/validation error, 3 numerical failure.
"""
import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import metrics
from .config import ConfigError, PipelineConfig, apply_overrides, config_from_dict, parse_geometry
from .localization import LocalizationError, localize_sources
from .pipeline import InputError, SessionTruth, evaluate_speaker, oracle_channel, run_session
from .scene import SceneError, load_scene, simulate
from .segments import SegmentAnnotation, format_rttm, read_rttm
from .signal import stft
from .wavio import read_wav, write_json, write_text, write_wav

logger = logging.getLogger("gssfront")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


class CliError(Exception):
    def __init__(self, message, code=EXIT_INPUT):
        super().__init__(message)
        self.code = code


def _load_json(path, what):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise CliError(f"cannot read {what} {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{what} {path}: malformed JSON ({exc})") from None


def _load_config(args) -> PipelineConfig:
    config = PipelineConfig()
    if getattr(args, "config", None):
        config = config_from_dict(_load_json(args.config, "config"), config)
    band = None
    if getattr(args, "band_low", None) is not None or getattr(args, "band_high", None) is not None:
        lo, hi = config.localization.band_hz
        band = [args.band_low if args.band_low is not None else lo,
                args.band_high if args.band_high is not None else hi]
    overrides = {
        "stft.fft_size": getattr(args, "fft_size", None),
        "stft.hop": getattr(args, "hop", None),
        "stft.window": getattr(args, "window", None),
        "gss.context_s": getattr(args, "context", None),
        "gss.n_iter": getattr(args, "n_iter", None),
        "gss.mask_floor": getattr(args, "mask_floor", None),
        "beamform.variant": getattr(args, "variant", None),
        "beamform.psd": getattr(args, "psd", None),
        "beamform.alpha": getattr(args, "alpha", None),
        "beamform.loading": getattr(args, "loading", None),
        "localization.grid_deg": getattr(args, "grid_deg", None),
        "localization.band_hz": band,
        "selection_criterion": getattr(args, "criterion", None),
        "output_dir": getattr(args, "out_dir", None),
    }
    if getattr(args, "adaptive", False):
        overrides["beamform.adaptive"] = True
    config = apply_overrides(config, overrides)
    if getattr(args, "geometry", None):
        geometry = parse_geometry(_load_json(args.geometry, "geometry"))
        config = config_from_dict({"geometry": [list(p) for p in geometry]}, config)
    return config


def _load_audio(path):
    try:
        return read_wav(path)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read WAV {path}: {exc}") from None


def _load_rttm(path):
    try:
        return read_rttm(path)
    except OSError as exc:
        raise CliError(f"cannot read RTTM {path}: {exc.strerror}") from None


# ----------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    scene = load_scene(args.scene)
    truth = simulate(scene)
    out = Path(args.out_dir)
    fs = scene.sample_rate
    write_wav(out / "mixture.wav", truth.mixture.samples, fs)
    images = {}
    for label, image in zip(truth.labels, truth.images):
        images[label] = f"image_{label}.wav"
        write_wav(out / images[label], image.samples, fs)
    write_text(out / "activities.rttm", format_rttm(truth.activities, "mixture"))
    write_json(out / "geometry.json", scene.mic_positions.tolist())
    write_json(out / "truth.json", {
        "sample_rate": fs,
        "labels": truth.labels,
        "doas_deg": {lab: float(d) for lab, d in zip(truth.labels, truth.doas_deg)},
        "positions": {lab: src.position.tolist() for lab, src in zip(truth.labels, scene.sources)},
        "mic_positions": scene.mic_positions.tolist(),
        "images": images,
        "noise_snr_db": scene.noise_snr_db,
        "seed": scene.seed,
    })
    print(f"wrote mixture, {len(images)} image(s), RTTM and truth to {out}")
    return EXIT_OK


def cmd_localize(args) -> int:
    config = _load_config(args)
    wave = _load_audio(args.mixture)
    if wave.num_channels < 2:
        raise CliError("need ≥ 2 channels")
    if config.geometry is None:
        raise CliError("microphone geometry is required (--geometry or config 'geometry')")
    if len(config.geometry) != wave.num_channels:
        raise CliError(
            f"geometry lists {len(config.geometry)} positions for {wave.num_channels} channels")
    annotations = _load_rttm(args.rttm)
    if not annotations:
        raise CliError("no speakers in the RTTM")
    spec = stft(wave, config.stft)
    loc = config.localization
    estimates, errors = localize_sources(spec, np.asarray(config.geometry), annotations,
                                         loc.grid_deg, loc.band_hz, loc.restrict,
                                         config.speed_of_sound)
    doc = {
        "doas": [{"speaker": e.source_id, "azimuth_deg": e.azimuth_deg, "score": e.score}
                 for e in estimates.values()],
        "errors": errors,
    }
    json.dump(doc, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")
    return EXIT_OK


def _selection_doc(sel):
    if sel is None:
        return None
    return {"channel_index": sel.channel_index, "criterion": sel.criterion,
            "per_channel_scores": [float(v) for v in sel.per_channel_scores],
            "fallback": sel.fallback}


def cmd_enhance(args) -> int:
    config = _load_config(args)
    if not config.output_dir:
        raise CliError("an output directory is required (--out-dir or config 'output_dir')")
    out = Path(config.output_dir)
    wave = _load_audio(args.mixture)
    annotations = _load_rttm(args.rttm)
    if not annotations:
        raise CliError("no speakers in the RTTM")
    truth = SessionTruth.load(args.truth) if args.truth else None
    outcome = run_session(wave, annotations, config, truth)

    speakers = {}
    failures = {}
    reports = {}
    for spk, res in outcome.speakers.items():
        ann = next(a for a in annotations if a.speaker == spk)
        entry = {
            "segments": [list(iv) for iv in ann.intervals],
            "selection": _selection_doc(res.selection),
            "doa": None if res.doa is None else {
                "azimuth_deg": res.doa.azimuth_deg, "score": res.doa.score},
            "warnings": res.warnings,
            "output": None,
        }
        if res.error is not None:
            failures[spk] = res.error
        else:
            entry["output"] = f"{spk}.wav"
            write_wav(out / entry["output"], res.output, wave.sample_rate)
        if res.report is not None:
            reports[spk] = res.report.to_dict()
        speakers[spk] = entry
    manifest_config = config.to_dict()
    manifest_config.pop("output_dir")
    write_json(out / "manifest.json", {
        "mixture": str(args.mixture),
        "rttm": str(args.rttm),
        "config": manifest_config,
        "speakers": speakers,
        "failures": failures,
        "localization_errors": outcome.localization_errors,
        "timings_file": "timings.json",
    })
    write_json(out / "timings.json", {k: round(v, 6) for k, v in outcome.timings.items()})
    if truth is not None:
        write_json(out / "report.json", reports)
    ok = len(speakers) - len(failures)
    print(f"enhanced {ok}/{len(speakers)} speaker(s) into {out}")
    for spk, msg in failures.items():
        print(f"  {spk} failed: {msg}", file=sys.stderr)
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_evaluate(args) -> int:
    """Score enhanced outputs against simulator truth (SI-SDR based; the SNR
    gain needs the beamformer filters and is only reported by ``enhance``)."""
    out = Path(args.enhanced_dir)
    manifest = _load_json(out / "manifest.json", "manifest")
    truth = SessionTruth.load(args.truth)
    mixture = _load_audio(args.mixture or manifest["mixture"])
    reports = {}
    for spk, entry in manifest["speakers"].items():
        if entry.get("output") is None or spk not in truth.images:
            continue
        ann = SegmentAnnotation(spk, tuple(tuple(iv) for iv in entry["segments"]))
        enhanced = _load_audio(out / entry["output"]).samples[0]
        ref_channel = entry["selection"]["channel_index"]
        report = evaluate_speaker(enhanced, mixture, truth.images[spk], ann, ref_channel)
        if entry.get("doa") and spk in truth.doas_deg:
            report.doa_error_deg = metrics.doa_error(entry["doa"]["azimuth_deg"],
                                                     truth.doas_deg[spk])
        report.channel_selection_correct = ref_channel == oracle_channel(truth.images[spk], ann)
        reports[spk] = report.to_dict()
    if args.output:
        write_json(args.output, reports)
    json.dump(reports, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")
    return EXIT_OK


# ----------------------------------------------------------------------------


def _add_pipeline_options(p):
    p.add_argument("--config", help="pipeline configuration JSON")
    p.add_argument("--geometry", help="JSON list of [x, y, z] mic positions in meters")
    p.add_argument("--fft-size", type=int)
    p.add_argument("--hop", type=int)
    p.add_argument("--window", choices=["sqrt-hann", "hann"])
    p.add_argument("--grid-deg", type=float)
    p.add_argument("--band-low", type=float, help="localization band lower edge (Hz)")
    p.add_argument("--band-high", type=float, help="localization band upper edge (Hz)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gssfront", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render a scene JSON into WAV/RTTM/truth files")
    p.add_argument("scene")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("localize", help="print per-speaker DOA estimates as JSON")
    p.add_argument("mixture")
    p.add_argument("rttm")
    _add_pipeline_options(p)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("enhance", help="write one enhanced WAV per RTTM speaker")
    p.add_argument("mixture")
    p.add_argument("rttm")
    p.add_argument("--out-dir")
    p.add_argument("--truth", help="simulator output directory; enables report.json")
    _add_pipeline_options(p)
    p.add_argument("--context", type=float, help="context extension per segment (s)")
    p.add_argument("--n-iter", type=int)
    p.add_argument("--mask-floor", type=float)
    p.add_argument("--variant", choices=["souden-mvdr", "steering-mvdr"])
    p.add_argument("--psd", choices=["recursive", "batch"])
    p.add_argument("--alpha", type=float, help="recursive smoothing forgetting factor")
    p.add_argument("--loading", type=float, help="relative diagonal loading")
    p.add_argument("--adaptive", action="store_true", help="per-frame beamformer weights")
    p.add_argument("--criterion", choices=["energy-phase", "max-snr"])
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("evaluate", help="score an enhance output directory against truth")
    p.add_argument("enhanced_dir")
    p.add_argument("--truth", required=True)
    p.add_argument("--mixture", help="defaults to the path recorded in the manifest")
    p.add_argument("--output", help="also write the report JSON here")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (InputError, SceneError, ConfigError, LocalizationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
