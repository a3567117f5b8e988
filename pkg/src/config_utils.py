"""
Pipeline configuration: defaults < config file (JSON or TOML) < explicit flags.

COCAI_SEED (environment or .env) is a last-resort seed, used only when neither
the config file nor a flag sets one.
"""

import json
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, Optional, Tuple

from dotenv import load_dotenv

from conformal import METHODS
from errors import ConfigError
from series_core import DEFAULT_FRACTIONS

load_dotenv()

FORECASTER_KINDS = ('climatology', 'persistence')
DEFAULT_K_CANDIDATES = tuple(range(4, 21))


@dataclass(frozen=True)
class PipelineConfig:
    data: Optional[str] = None
    models: Optional[str] = None
    reports: Optional[str] = None
    channels: Tuple[str, ...] = ('0',)
    target_len: int = 40
    alpha: float = 0.1
    threshold: float = 0.9
    channel_thresholds: Dict[str, float] = field(default_factory=dict)
    k_candidates: Tuple[int, ...] = DEFAULT_K_CANDIDATES
    k: Optional[int] = None
    method: str = 'bounded_copula'
    min_width: float = 1e-6
    group_col: Optional[str] = 'group'
    seed: int = 0
    forecaster: str = 'climatology'
    fractions: Tuple[float, ...] = DEFAULT_FRACTIONS
    elbow_rho: float = 0.05
    workers: int = 1

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        for name, value in [('threshold', self.threshold), *self.channel_thresholds.items()]:
            if not 0 < value < 1:
                raise ConfigError(f"threshold for {name} must lie in (0, 1), got {value}")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.forecaster not in FORECASTER_KINDS:
            raise ConfigError(f"forecaster must be one of {FORECASTER_KINDS}, got {self.forecaster!r}")
        if self.target_len < 1:
            raise ConfigError(f"target_len must be >= 1, got {self.target_len}")
        if self.min_width < 0:
            raise ConfigError(f"min_width must be >= 0, got {self.min_width}")
        if not self.k_candidates or min(self.k_candidates) < 4:
            raise ConfigError(f"k_candidates must be non-empty and >= 4, got {self.k_candidates}")
        if self.k is not None and self.k < 4:
            raise ConfigError(f"k must be >= 4, got {self.k}")
        if len(self.fractions) != 4 or any(f < 0 for f in self.fractions) or sum(self.fractions) > 1 + 1e-9:
            raise ConfigError(f"fractions must be 4 nonnegative numbers with sum <= 1, got {self.fractions}")
        if not 0 < self.elbow_rho < 1:
            raise ConfigError(f"elbow_rho must lie in (0, 1), got {self.elbow_rho}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if not self.channels:
            raise ConfigError("channels must name at least one target channel")

    def threshold_for(self, channel_name, channel_index=None):
        for key in (channel_name, str(channel_index)):
            if key in self.channel_thresholds:
                return self.channel_thresholds[key]
        return self.threshold

    def to_dict(self):
        out = asdict(self)
        for key in ('channels', 'k_candidates', 'fractions'):
            out[key] = list(out[key])
        return out


# ============================================================================
# Parsing helpers for flag / file values
# ============================================================================

def parse_threshold(text):
    """'0.9' or 'level=0.95,speed=0.9' (optionally mixed with a bare default)."""
    default, per_channel = None, {}
    for part in str(text).split(','):
        part = part.strip()
        if not part:
            continue
        try:
            if '=' in part:
                name, value = part.split('=', 1)
                per_channel[name.strip()] = float(value)
            else:
                default = float(part)
        except ValueError:
            raise ConfigError(f"threshold: cannot parse {part!r}")
    return default, per_channel


def parse_k_candidates(value):
    """'4-20', '4,6,8' or a list of ints."""
    if isinstance(value, (list, tuple)):
        return tuple(int(v) for v in value)
    text = str(value).strip()
    try:
        if '-' in text and ',' not in text:
            lo, hi = (int(v) for v in text.split('-', 1))
            return tuple(range(lo, hi + 1))
        return tuple(int(v) for v in text.split(',') if v.strip())
    except ValueError:
        raise ConfigError(f"k_candidates: cannot parse {value!r}")


def parse_channels(value):
    if isinstance(value, (list, tuple)):
        return tuple(str(v) for v in value)
    return tuple(v.strip() for v in str(value).split(',') if v.strip())


def resolve_channels(channels, channel_names):
    """Map channel names or integer indices to column indices of the series."""
    out = []
    for c in channels:
        if c in channel_names:
            out.append(channel_names.index(c))
        elif c.lstrip('-').isdigit() and 0 <= int(c) < len(channel_names):
            out.append(int(c))
        else:
            raise ConfigError(f"channels: unknown channel {c!r} (available: {list(channel_names)})")
    return tuple(out)


def _read_config_file(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        text = path.read_text()
        data = tomllib.loads(text) if path.suffix == '.toml' else json.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"config file {path} could not be parsed: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a table/object at the top level")
    return data


def _normalise(values):
    out = dict(values)
    if 'threshold' in out and isinstance(out['threshold'], str):
        default, per_channel = parse_threshold(out['threshold'])
        out.pop('threshold')
        if default is not None:
            out['threshold'] = default
        if per_channel:
            out['channel_thresholds'] = {**out.get('channel_thresholds', {}), **per_channel}
    if 'channels' in out:
        out['channels'] = parse_channels(out['channels'])
    if 'k_candidates' in out:
        out['k_candidates'] = parse_k_candidates(out['k_candidates'])
    if 'fractions' in out:
        out['fractions'] = tuple(float(f) for f in out['fractions'])
    return out


def build_config(flags=None, config_path=None):
    """Merge defaults, an optional config file and explicitly given flags (None = not given)."""
    known = {f.name for f in fields(PipelineConfig)}
    merged = {}
    if config_path:
        file_values = _read_config_file(config_path)
        unknown = set(file_values) - known
        if unknown:
            raise ConfigError(f"config file {config_path}: unknown fields {sorted(unknown)}")
        merged.update(_normalise(file_values))
    given = {k: v for k, v in (flags or {}).items() if v is not None and k in known}
    given = _normalise(given)
    if 'channel_thresholds' in given:
        given['channel_thresholds'] = {**merged.get('channel_thresholds', {}), **given['channel_thresholds']}
    merged.update(given)
    if 'seed' not in merged and os.environ.get('COCAI_SEED'):
        try:
            merged['seed'] = int(os.environ['COCAI_SEED'])
        except ValueError:
            raise ConfigError(f"COCAI_SEED must be an integer, got {os.environ['COCAI_SEED']!r}")
    try:
        return PipelineConfig(**merged)
    except TypeError as e:
        raise ConfigError(str(e))
