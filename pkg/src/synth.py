"""
Synthetic multivariate series with a daily profile, coupled noise and
planted anomalies.

Every channel is a sinusoid plus offset plus Gaussian noise; the noise of a
channel can load on the innovations of other channels, which produces
cross-channel correlation. Series are i.i.d. given the config (one derived
random stream per series), so conformal guarantees apply to any split.
"""

import json
import math
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import pandas as pd
from loguru import logger

from datetime_utils import make_timestamps
from errors import ConfigError
from series_core import MultivariateSeries

INJECTION_KINDS = ('level_shift', 'spike', 'noise_burst', 'drift', 'flatline')
LABEL_COLUMNS = ['series_id', 'channel', 'kind', 'start_step', 'duration', 'magnitude']
WET, DRY = 'wet', 'dry'


@dataclass(frozen=True)
class ChannelRecipe:
    name: str
    amplitude: float = 1.0
    phase: float = 0.0
    offset: float = 0.0
    noise_std: float = 0.1
    # loading of this channel's noise on the innovations of other channels (by index)
    coupling: Dict[int, float] = field(default_factory=dict)
    ar: float = 0.0


def default_recipes(d):
    return tuple(
        ChannelRecipe(name=f'ch{i}', amplitude=1.0 + 0.25 * i, phase=2 * math.pi * i / d, offset=5.0 * (i + 1),
                      noise_std=0.2, coupling={i - 1: 0.5} if i else {})
        for i in range(d)
    )


@dataclass(frozen=True)
class SynthConfig:
    n_series: int = 1000
    T: int = 240
    d: int = 5
    daily_period: float = 240.0
    recipes: Tuple[ChannelRecipe, ...] = ()
    seed: int = 0
    start: Optional[str] = None
    step_minutes: float = 6.0
    wet_fraction: float = 0.0
    wet_scale: float = 1.5

    def __post_init__(self):
        if not self.recipes:
            object.__setattr__(self, 'recipes', default_recipes(self.d))
        object.__setattr__(self, 'recipes', tuple(self.recipes))
        self.validate()

    def validate(self):
        for name in ('n_series', 'T', 'd'):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if self.daily_period <= 0:
            raise ConfigError(f"daily_period must be > 0, got {self.daily_period}")
        if len(self.recipes) != self.d:
            raise ConfigError(f"{len(self.recipes)} channel recipes for d={self.d}")
        if len({r.name for r in self.recipes}) != self.d:
            raise ConfigError("channel recipe names must be distinct")
        if not 0 <= self.wet_fraction <= 1:
            raise ConfigError(f"wet_fraction must lie in [0, 1], got {self.wet_fraction}")
        if self.wet_scale <= 0:
            raise ConfigError(f"wet_scale must be > 0, got {self.wet_scale}")
        for idx, r in enumerate(self.recipes):
            if r.noise_std < 0 or not math.isfinite(r.noise_std):
                raise ConfigError(f"channel {r.name}: noise_std must be finite and >= 0, got {r.noise_std}")
            if not -1 < r.ar < 1:
                raise ConfigError(f"channel {r.name}: ar must lie in (-1, 1), got {r.ar}")
            for j, c in r.coupling.items():
                if not 0 <= j < self.d or j == idx:
                    raise ConfigError(f"channel {r.name}: coupling target {j} must be another channel index")
            if sum(c * c for c in r.coupling.values()) > 1:
                raise ConfigError(f"channel {r.name}: squared coupling coefficients must sum to <= 1")

    @property
    def channel_names(self):
        return tuple(r.name for r in self.recipes)


@dataclass(frozen=True)
class AnomalyInjection:
    kind: str
    channel: int
    start_step: int
    duration: int
    magnitude: float
    series_id: Optional[str] = None

    def __post_init__(self):
        if self.kind not in INJECTION_KINDS:
            raise ConfigError(f"unknown injection kind {self.kind!r}, expected one of {INJECTION_KINDS}")
        if self.duration < 1:
            raise ConfigError(f"injection duration must be >= 1, got {self.duration}")
        if self.kind == 'spike' and self.duration != 1:
            raise ConfigError(f"spike injections last one step, got duration {self.duration}")
        if not math.isfinite(self.magnitude):
            raise ConfigError(f"injection magnitude must be finite, got {self.magnitude}")

    @property
    def window(self):
        return slice(self.start_step, self.start_step + self.duration)


# ============================================================================
# Config files
# ============================================================================

def _read_mapping(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}")
    try:
        return tomllib.loads(text) if path.suffix == '.toml' else json.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"config file {path} is not valid {'TOML' if path.suffix == '.toml' else 'JSON'}: {e}")


def synth_config_from_dict(data, **overrides):
    data = {**data, **{k: v for k, v in overrides.items() if v is not None}}
    known = set(SynthConfig.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown synth config fields: {sorted(unknown)}")
    recipes = data.pop('recipes', None) or ()
    parsed = []
    for i, r in enumerate(recipes):
        r = dict(r)
        r.setdefault('name', f'ch{i}')
        r['coupling'] = {int(k): float(v) for k, v in (r.get('coupling') or {}).items()}
        try:
            parsed.append(ChannelRecipe(**r))
        except TypeError as e:
            raise ConfigError(f"channel recipe {i}: {e}")
    if parsed and 'd' not in data:
        data['d'] = len(parsed)
    return SynthConfig(recipes=tuple(parsed), **data)


def load_synth_config(path, **overrides):
    return synth_config_from_dict(_read_mapping(path), **overrides)


def load_injections(path):
    """Injection file: a JSON/TOML list of injections, or {"injections": [...]}."""
    data = _read_mapping(path)
    entries = data.get('injections', []) if isinstance(data, dict) else data
    out = []
    for i, entry in enumerate(entries):
        try:
            out.append(AnomalyInjection(**entry))
        except TypeError as e:
            raise ConfigError(f"injection {i} in {path}: {e}")
    return out


# ============================================================================
# Generation
# ============================================================================

def _innovations(rng, T, recipes):
    d = len(recipes)
    raw = rng.standard_normal((T, d))
    for i, r in enumerate(recipes):
        if r.ar:
            # stationary AR(1) with unit marginal variance
            scale = math.sqrt(1 - r.ar ** 2)
            for step in range(1, T):
                raw[step, i] = r.ar * raw[step - 1, i] + scale * raw[step, i]
    noise = np.empty_like(raw)
    for i, r in enumerate(recipes):
        loadings = sum(c * c for c in r.coupling.values())
        noise[:, i] = math.sqrt(1 - loadings) * raw[:, i]
        for j, c in r.coupling.items():
            noise[:, i] += c * raw[:, j]
    return noise


def generate(config):
    tau = np.arange(config.T, dtype=float)
    profile = np.column_stack([
        r.offset + r.amplitude * np.sin(2 * math.pi * tau / config.daily_period + r.phase) for r in config.recipes
    ])
    noise_std = np.array([r.noise_std for r in config.recipes])
    if config.start is None:
        timestamps = np.arange(config.T, dtype=np.int64)
    else:
        timestamps = make_timestamps(config.start, config.T, config.step_minutes)

    out = []
    for i in range(config.n_series):
        rng = np.random.default_rng([config.seed, i])
        group = None
        scale = 1.0
        if config.wet_fraction > 0:
            group = WET if rng.random() < config.wet_fraction else DRY
            scale = config.wet_scale if group == WET else 1.0
        values = profile + scale * noise_std * _innovations(rng, config.T, config.recipes)
        if scale != 1.0:
            values = values + (scale - 1.0) * (profile - np.array([r.offset for r in config.recipes]))
        out.append(MultivariateSeries(f's{i:05d}', timestamps, values, config.channel_names, group=group))
    logger.info(f"Generated {len(out)} series ({config.T} steps x {config.d} channels, seed {config.seed})")
    return out


def channel_scales(config, series):
    """Noise std per channel for one generated series (wet series are scaled)."""
    scale = config.wet_scale if series.group == WET else 1.0
    return scale * np.array([r.noise_std for r in config.recipes])


# ============================================================================
# Injection
# ============================================================================

def inject(series, injections, scales=None, target_length=None):
    """Apply injections; returns (mutated series, T x d boolean label mask).

    Magnitudes are in units of `scales` (per-channel noise std, default 1).
    With `target_length` set, every window must sit inside the trailing target.
    """
    values = np.array(series.values, dtype=float)
    labels = np.zeros(values.shape, dtype=bool)
    scales = np.ones(series.d) if scales is None else np.asarray(scales, dtype=float)
    first_target = 0 if target_length is None else series.T - target_length
    for inj in injections:
        if not 0 <= inj.channel < series.d:
            raise ConfigError(f"series {series.series_id}: injection channel {inj.channel} out of range")
        if inj.start_step < first_target or inj.start_step + inj.duration > series.T:
            raise ConfigError(f"series {series.series_id}: {inj.kind} window [{inj.start_step}, "
                              f"{inj.start_step + inj.duration}) outside the target region starting at {first_target}")
        w, c = inj.window, inj.channel
        if np.any(labels[w, c]):
            raise ConfigError(f"series {series.series_id}: overlapping injections on channel {c} at steps {inj.start_step}+")
        labels[w, c] = True
        size = inj.magnitude * scales[c]
        segment = values[w, c]
        if inj.kind in ('level_shift', 'spike'):
            values[w, c] = segment + size
        elif inj.kind == 'drift':
            values[w, c] = segment + size * np.arange(1, inj.duration + 1) / inj.duration
        elif inj.kind == 'noise_burst':
            steps = np.arange(inj.duration, dtype=float)
            trend = np.polyval(np.polyfit(steps, segment, 1), steps) if inj.duration > 1 else segment
            values[w, c] = trend + (1.0 + inj.magnitude) * (segment - trend)
        elif inj.kind == 'flatline':
            anchor = values[inj.start_step - 1, c] if inj.start_step > 0 else segment[0]
            values[w, c] = anchor
    mutated = series.replace_values(np.where(series.mask, values, np.nan), mask=series.mask)
    return mutated, labels


def random_injections(series_ids, n_channels, target_length, T, fraction, kinds=('level_shift',), magnitude=3.0,
                      duration=None, seed=0, channels=None):
    """One random injection on a random `fraction` of the series, inside the target window.

    `channels` restricts the injected channel to these indices (default: any channel).
    """
    pool = tuple(range(n_channels)) if channels is None else tuple(int(c) for c in channels)
    if not pool or any(not 0 <= c < n_channels for c in pool):
        raise ConfigError(f"injection channels {channels} must be indices below {n_channels}")
    rng = np.random.default_rng(seed)
    duration = duration or max(1, target_length // 2)
    plan = []
    for sid in sorted(series_ids):
        if rng.random() >= fraction:
            continue
        kind = kinds[rng.integers(len(kinds))]
        length = 1 if kind == 'spike' else min(duration, target_length)
        start = T - target_length + int(rng.integers(target_length - length + 1))
        plan.append(AnomalyInjection(kind, pool[rng.integers(len(pool))], start, length, magnitude, series_id=sid))
    return plan


def labels_frame(injections):
    return pd.DataFrame([{k: getattr(inj, k) for k in LABEL_COLUMNS} for inj in injections], columns=LABEL_COLUMNS)


def read_labels(path):
    df = pd.read_csv(path, dtype={'series_id': str, 'kind': str})
    missing = set(LABEL_COLUMNS) - set(df.columns)
    if missing:
        raise ConfigError(f"labels file {path} is missing columns {sorted(missing)}")
    return df
