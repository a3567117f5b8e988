"""
Data model, CSV ingestion, target extraction and dataset splitting for
multivariate time-series.

CSV long format, one row per (series, time step):

    series_id,timestamp,<channel...>[,group]

An empty channel cell is a missing observation (mask = False). Rows of a
series must be contiguous and in time order.
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger

from datetime_utils import format_timestamps, parse_timestamps, step_of
from errors import ParseError, SchemaError, SpecError, SplitError, ValidationError

ID_COLUMN = 'series_id'
TIME_COLUMN = 'timestamp'
GROUP_COLUMN = 'group'
DEFAULT_FRACTIONS = (0.5, 0.2, 0.2, 0.1)
SPLIT_PARTS = ('train', 'calib_cp', 'calib_ad', 'test')


def _frozen(arr, dtype):
    out = np.array(arr, dtype=dtype)
    out.setflags(write=False)
    return out


# ============================================================================
# Domain types
# ============================================================================

@dataclass(frozen=True, eq=False)
class MultivariateSeries:
    """A T x d panel; row = time step, column = channel."""
    series_id: str
    timestamps: np.ndarray
    values: np.ndarray
    channel_names: Tuple[str, ...]
    mask: Optional[np.ndarray] = None
    group: Optional[str] = None

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ValidationError(f"series {self.series_id}: values must be a non-empty T x d matrix, got shape {values.shape}")
        mask = np.isfinite(values) if self.mask is None else np.array(self.mask, dtype=bool)
        if mask.shape != values.shape:
            raise ValidationError(f"series {self.series_id}: mask shape {mask.shape} != values shape {values.shape}")
        if not np.all(np.isfinite(values[mask])):
            raise ValidationError(f"series {self.series_id}: observed cells must be finite")
        names = tuple(str(c) for c in self.channel_names)
        if len(names) != values.shape[1] or len(set(names)) != len(names):
            raise ValidationError(f"series {self.series_id}: need {values.shape[1]} distinct channel names, got {names}")
        timestamps = np.asarray(self.timestamps)
        if timestamps.shape != (values.shape[0],):
            raise ValidationError(f"series {self.series_id}: {timestamps.size} timestamps for {values.shape[0]} rows")
        if step_of(timestamps) is None:
            raise ValidationError(f"series {self.series_id}: timestamps are not strictly increasing with a constant step")

        values = np.where(mask, values, np.nan)
        object.__setattr__(self, 'values', _frozen(values, float))
        object.__setattr__(self, 'mask', _frozen(mask, bool))
        object.__setattr__(self, 'timestamps', _frozen(timestamps, timestamps.dtype))
        object.__setattr__(self, 'channel_names', names)
        object.__setattr__(self, 'series_id', str(self.series_id))

    @property
    def T(self):
        return self.values.shape[0]

    @property
    def d(self):
        return self.values.shape[1]

    @property
    def step(self):
        return step_of(self.timestamps)

    def channel_index(self, name):
        try:
            return self.channel_names.index(name)
        except ValueError:
            raise SpecError(f"series {self.series_id} has no channel '{name}' (channels: {list(self.channel_names)})")

    def replace_values(self, values, mask=None):
        """Copy with new values (mask defaults to the finite cells)."""
        return MultivariateSeries(self.series_id, self.timestamps, values, self.channel_names,
                                  mask=mask, group=self.group)


@dataclass(frozen=True)
class TargetSpec:
    """Target = trailing `target_length` steps on `target_channels`."""
    target_channels: Tuple[int, ...]
    target_length: int

    def __post_init__(self):
        channels = tuple(int(c) for c in self.target_channels)
        if not channels:
            raise SpecError("target_channels must be non-empty")
        if len(set(channels)) != len(channels):
            raise SpecError(f"target_channels must be distinct, got {channels}")
        if any(c < 0 for c in channels):
            raise SpecError(f"target channel index out of range: {channels}")
        if int(self.target_length) < 1:
            raise SpecError(f"target_length must be >= 1, got {self.target_length}")
        object.__setattr__(self, 'target_channels', channels)
        object.__setattr__(self, 'target_length', int(self.target_length))

    @property
    def n_channels(self):
        return len(self.target_channels)

    def validate(self, series):
        if self.target_length > series.T:
            raise SpecError(f"target_length {self.target_length} exceeds series {series.series_id} length {series.T}")
        bad = [c for c in self.target_channels if c >= series.d]
        if bad:
            raise SpecError(f"target channel index {bad} out of range for series {series.series_id} with d={series.d}")

    def target_cells(self, T, d):
        """Boolean T x d matrix, True on target cells."""
        cells = np.zeros((T, d), dtype=bool)
        cells[T - self.target_length:, list(self.target_channels)] = True
        return cells

    def to_dict(self):
        return {'target_channels': list(self.target_channels), 'target_length': self.target_length}

    @classmethod
    def from_dict(cls, data):
        return cls(tuple(data['target_channels']), data['target_length'])


@dataclass(frozen=True, eq=False)
class ContextWindow:
    """Conditioning information x: every cell of the series that is not target.

    `values` keeps the full T x d shape with NaN on target (and missing)
    cells; `in_context` marks the cells that belong to x.
    """
    series_id: str
    values: np.ndarray
    in_context: np.ndarray
    observed: np.ndarray
    target_length: int

    @property
    def n_cells(self):
        return int(self.in_context.sum())

    def history(self, channel):
        """Observed pre-target values of one channel, in time order."""
        pre = slice(0, self.values.shape[0] - self.target_length)
        keep = self.observed[pre, channel]
        return self.values[pre, channel][keep]


@dataclass(frozen=True)
class DatasetSplit:
    train: List[str]
    calib_cp: List[str]
    calib_ad: List[str]
    test: List[str]
    group_key: Optional[Dict[str, str]] = None

    def __post_init__(self):
        seen = set()
        for part in SPLIT_PARTS:
            ids = getattr(self, part)
            overlap = seen.intersection(ids)
            if overlap or len(set(ids)) != len(ids):
                raise SplitError(f"split parts are not disjoint: {sorted(overlap)[:5]} repeated in '{part}'")
            seen.update(ids)

    def subset(self, series, part):
        wanted = set(getattr(self, part))
        return [s for s in series if s.series_id in wanted]

    def to_dict(self):
        return {part: list(getattr(self, part)) for part in SPLIT_PARTS} | {'group_key': self.group_key}

    @classmethod
    def from_dict(cls, data):
        return cls(*(list(data[part]) for part in SPLIT_PARTS), group_key=data.get('group_key'))


# ============================================================================
# CSV ingestion
# ============================================================================

def load_csv(path, schema=None, group_col=GROUP_COLUMN, expected_step=None):
    """Read a long-format CSV into a list of MultivariateSeries.

    schema: channel names expected in the header (None = every non-reserved column).
    expected_step: if given, every series must use exactly this step (in the
    units of the parsed timestamps: integer steps or nanoseconds).
    """
    path = Path(path)
    _check_field_counts(path)
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, skip_blank_lines=True)
    except pd.errors.ParserError as e:
        raise ParseError(f"{path}: {e}")
    except pd.errors.EmptyDataError:
        raise SchemaError(f"{path}: missing header row")

    header = list(df.columns)
    for col in (ID_COLUMN, TIME_COLUMN):
        if col not in header:
            raise SchemaError(f"{path}: header has no '{col}' column")
    reserved = {ID_COLUMN, TIME_COLUMN, group_col}
    present = [c for c in header if c not in reserved]
    if schema is None:
        channels = present
    else:
        channels = list(schema)
        missing = [c for c in channels if c not in header]
        if missing:
            raise SchemaError(f"{path}: schema channels {missing} not in header")
        unknown = [c for c in present if c not in channels]
        if unknown:
            raise SchemaError(f"{path}: unknown channel columns {unknown}")
    if not channels:
        raise SchemaError(f"{path}: no channel columns")

    if df.empty:
        return []

    values = _parse_channel_block(df, channels, path)
    ids = df[ID_COLUMN].to_numpy()
    out = []
    for sid in pd.unique(ids):
        rows = np.flatnonzero(ids == sid)
        if sid == '':
            raise ParseError("empty series_id", line=int(rows[0]) + 2)
        if np.any(np.diff(rows) != 1):
            raise ValidationError(f"series {sid}: rows are not contiguous in {path}")
        try:
            timestamps = parse_timestamps(df[TIME_COLUMN].iloc[rows].to_numpy())
        except (ValueError, TypeError) as e:
            raise ParseError(f"series {sid}: bad timestamp ({e})", line=int(rows[0]) + 2)
        group = None
        if group_col in df.columns:
            labels = set(df[group_col].iloc[rows])
            if len(labels) != 1:
                raise ValidationError(f"series {sid}: group label is not constant ({sorted(labels)})")
            group = labels.pop() or None
        series = MultivariateSeries(sid, timestamps, values[rows], channels, group=group)
        if expected_step is not None and series.T > 1 and series.step != expected_step:
            raise ValidationError(f"series {sid}: step {series.step} != expected {expected_step}")
        out.append(series)

    logger.info(f"Loaded {len(out)} series with {len(channels)} channels from {path}")
    return out


def _check_field_counts(path):
    """Every non-blank row must have as many fields as the header."""
    with open(path, newline='') as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            return
        for row in reader:
            if row and len(row) != len(header):
                raise ParseError(f"{path}: row has {len(row)} fields, header has {len(header)}", line=reader.line_num)


def _parse_channel_block(df, channels, path):
    block = df[channels].apply(lambda col: col.str.strip())
    numeric = block.apply(pd.to_numeric, errors='coerce')
    bad = numeric.isna() & (block != '') & ~block.isin(['nan', 'NaN', 'NA'])
    if bad.to_numpy().any():
        row, col = np.argwhere(bad.to_numpy())[0]
        raise ParseError(f"{path}: non-numeric value '{block.iat[row, col]}' in channel '{channels[col]}'",
                         line=int(row) + 2)
    return numeric.to_numpy(dtype=float)


def write_csv(series_list, path, group_col=GROUP_COLUMN):
    """Write series in the long CSV format read by `load_csv`."""
    series_list = list(series_list)
    if not series_list:
        raise ValidationError("nothing to write")
    channels = list(series_list[0].channel_names)
    with_group = any(s.group is not None for s in series_list)
    frames = []
    for s in series_list:
        if list(s.channel_names) != channels:
            raise SchemaError(f"series {s.series_id} channels {s.channel_names} differ from {channels}")
        frame = pd.DataFrame(np.where(s.mask, s.values, np.nan), columns=channels)
        frame.insert(0, TIME_COLUMN, format_timestamps(s.timestamps))
        frame.insert(0, ID_COLUMN, s.series_id)
        if with_group:
            frame[group_col] = s.group or ''
        frames.append(frame)
    pd.concat(frames, ignore_index=True).to_csv(path, index=False, na_rep='')


# ============================================================================
# Target extraction
# ============================================================================

def extract_target(s, spec, require_observed=True):
    """Split a series into (context x, target y).

    y is the t x d' matrix of the trailing steps on the target channels.
    x holds every other cell; the two are a cell-wise partition of the series.
    """
    spec.validate(s)
    target = spec.target_cells(s.T, s.d)
    rows = slice(s.T - spec.target_length, s.T)
    cols = list(spec.target_channels)
    y = s.values[rows][:, cols].copy()
    if require_observed and not np.all(s.mask[rows][:, cols]):
        raise ValidationError(f"series {s.series_id}: target cells are not all observed")

    in_context = ~target
    x_values = np.where(in_context & s.mask, s.values, np.nan)
    context = ContextWindow(s.series_id, _frozen(x_values, float), _frozen(in_context, bool),
                            _frozen(in_context & s.mask, bool), spec.target_length)
    return context, y


# ============================================================================
# Dataset splitting
# ============================================================================

def _part_sizes(n, fractions):
    """Largest-remainder allocation of n items to the split parts."""
    fractions = np.asarray(fractions, dtype=float)
    total = int(np.floor(fractions.sum() * n + 1e-9))
    raw = fractions * n
    sizes = np.floor(raw + 1e-9).astype(int)
    remainder = raw - sizes
    for idx in np.argsort(-remainder, kind='stable')[:max(total - sizes.sum(), 0)]:
        sizes[idx] += 1
    return sizes


def split_dataset(series, fractions=DEFAULT_FRACTIONS, seed=0, stratify=True):
    """Deterministic train / conformal-calibration / anomaly-calibration / test split.

    Series are ordered by id before shuffling, so the result does not depend on
    the order of the input list. When series carry group labels and `stratify`
    is set, each group is split separately with the same fractions.
    """
    series = list(series)
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != len(SPLIT_PARTS):
        raise SplitError(f"need {len(SPLIT_PARTS)} fractions, got {len(fractions)}")
    if any(f < 0 for f in fractions) or sum(fractions) > 1 + 1e-9:
        raise SplitError(f"fractions must be nonnegative with sum <= 1, got {fractions}")
    if not series:
        raise SplitError("cannot split an empty series list")
    n_parts = sum(f > 0 for f in fractions)
    if len(series) < n_parts:
        raise SplitError(f"{len(series)} series cannot fill {n_parts} nonzero split parts")
    ids = [s.series_id for s in series]
    if len(set(ids)) != len(ids):
        raise SplitError("series ids are not unique")

    group_key = {s.series_id: s.group for s in series if s.group is not None} or None
    if stratify and group_key:
        groups = {}
        for s in series:
            groups.setdefault(s.group or '', []).append(s.series_id)
    else:
        groups = {'': ids}

    rng = np.random.default_rng(seed)
    parts = {part: [] for part in SPLIT_PARTS}
    for label in sorted(groups):
        members = sorted(groups[label])
        order = rng.permutation(len(members))
        sizes = _part_sizes(len(members), fractions)
        start = 0
        for part, size in zip(SPLIT_PARTS, sizes):
            parts[part].extend(members[i] for i in order[start:start + size])
            start += size

    split = DatasetSplit(*(sorted(parts[p]) for p in SPLIT_PARTS), group_key=group_key)
    logger.info("Split sizes: " + ", ".join(f"{p}={len(getattr(split, p))}" for p in SPLIT_PARTS))
    return split
