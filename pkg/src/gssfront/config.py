"""Pipeline configuration: defaults, JSON file, command-line overrides."""
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, List, Optional, Tuple

from .beamform import DEFAULT_LOADING, VARIANTS
from .gss import GssConfig
from .localization import CRITERIA, DEFAULT_BAND
from .signal import StftParams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GssSection:
    context_s: float = 15.0
    n_iter: int = 20
    mask_floor: Optional[float] = None


@dataclass(frozen=True)
class BeamformSection:
    variant: str = "souden-mvdr"
    psd: str = "recursive"
    alpha: float = 0.998
    loading: float = DEFAULT_LOADING
    adaptive: bool = False


@dataclass(frozen=True)
class LocalizationSection:
    grid_deg: float = 1.0
    band_hz: Tuple[float, float] = DEFAULT_BAND
    restrict: bool = True


@dataclass(frozen=True)
class PipelineConfig:
    stft: StftParams = StftParams()
    gss: GssSection = GssSection()
    beamform: BeamformSection = BeamformSection()
    localization: LocalizationSection = LocalizationSection()
    selection_criterion: str = "energy-phase"
    speed_of_sound: float = 343.0
    geometry: Optional[Tuple[Tuple[float, float, float], ...]] = None
    output_dir: Optional[str] = None

    def __post_init__(self):
        if self.selection_criterion not in CRITERIA:
            raise ConfigError(
                f"selection_criterion: expected one of {CRITERIA}, got {self.selection_criterion!r}")
        if self.localization.grid_deg <= 0 or self.localization.grid_deg > 90:
            raise ConfigError("localization.grid_deg: must lie in (0, 90]")
        lo, hi = self.localization.band_hz
        if not 0 <= lo < hi:
            raise ConfigError("localization.band_hz: expected [low, high] with 0 <= low < high")
        if self.beamform.variant not in VARIANTS:
            raise ConfigError(f"beamform.variant: expected one of {VARIANTS}")
        if self.speed_of_sound <= 0:
            raise ConfigError("speed_of_sound: must be positive")
        try:
            self.gss_config()
        except ValueError as exc:
            msg = str(exc)
            first = msg.split()[0]
            section = "beamform" if first in ("alpha", "psd", "loading") else "gss"
            raise ConfigError(f"{section}.{msg}") from None

    def gss_config(self, ref_channel: int = 0) -> GssConfig:
        return GssConfig(
            stft=self.stft,
            context_s=self.gss.context_s,
            n_iter=self.gss.n_iter,
            mask_floor=self.gss.mask_floor,
            psd=self.beamform.psd,
            alpha=self.beamform.alpha,
            adaptive=self.beamform.adaptive,
            variant=self.beamform.variant,
            loading=self.beamform.loading,
            ref_channel=ref_channel,
        )

    def to_dict(self) -> Dict[str, Any]:
        doc = asdict(self)
        doc["localization"]["band_hz"] = list(self.localization.band_hz)
        if self.geometry is not None:
            doc["geometry"] = [list(p) for p in self.geometry]
        return doc


_SECTIONS = {"stft": StftParams, "gss": GssSection, "beamform": BeamformSection,
             "localization": LocalizationSection}
_NUMBER = (int, float)
_OPTIONAL_FLOATS = {"gss.mask_floor"}


def _coerce(path: str, value, default):
    if path in _OPTIONAL_FLOATS:
        if value is None:
            return None
        default = 0.0
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, _NUMBER):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise ConfigError(f"{path}: expected a list of {len(default)} numbers")
        return tuple(_coerce(f"{path}[{i}]", v, d) for i, (v, d) in enumerate(zip(value, default)))
    return value


def _section(name: str, cls, doc) -> Any:
    if not isinstance(doc, dict):
        raise ConfigError(f"{name}: expected an object")
    base = cls()
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"{name}.{sorted(unknown)[0]}: unknown field")
    values = {k: _coerce(f"{name}.{k}", v, getattr(base, k)) for k, v in doc.items()}
    try:
        return cls(**{**asdict(base), **values})
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from None


def _geometry(value, path="geometry"):
    if value is None:
        return None
    if not isinstance(value, list) or len(value) < 2:
        raise ConfigError(f"{path}: expected a list of at least 2 [x, y, z] positions")
    out = []
    for i, p in enumerate(value):
        if (not isinstance(p, list) or len(p) != 3
                or not all(isinstance(v, _NUMBER) and not isinstance(v, bool) for v in p)):
            raise ConfigError(f"{path}[{i}]: expected an [x, y, z] list of numbers")
        out.append(tuple(float(v) for v in p))
    return tuple(out)


def config_from_dict(doc: Dict[str, Any], base: PipelineConfig = PipelineConfig()) -> PipelineConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config: expected a JSON object")
    changes = {}
    for key, value in doc.items():
        if key in _SECTIONS:
            current = asdict(getattr(base, key))
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: expected an object")
            changes[key] = _section(key, _SECTIONS[key], {**current, **value})
        elif key == "geometry":
            changes[key] = _geometry(value)
        elif key == "selection_criterion":
            changes[key] = _coerce(key, value, "")
        elif key == "speed_of_sound":
            changes[key] = _coerce(key, value, 1.0)
        elif key == "output_dir":
            if value is not None and not isinstance(value, str):
                raise ConfigError("output_dir: expected a string")
            changes[key] = value
        else:
            raise ConfigError(f"{key}: unknown field")
    try:
        return replace(base, **changes)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def apply_overrides(config: PipelineConfig, overrides: Dict[str, Any]) -> PipelineConfig:
    """Apply dotted-path overrides such as {"beamform.alpha": 0.99}; None values are skipped."""
    doc: Dict[str, Any] = {}
    for path, value in overrides.items():
        if value is None:
            continue
        head, _, tail = path.partition(".")
        if tail:
            doc.setdefault(head, {})[tail] = value
        else:
            doc[head] = value
    return config_from_dict(doc, config) if doc else config


def parse_geometry(doc) -> Tuple[Tuple[float, float, float], ...]:
    return _geometry(doc)
