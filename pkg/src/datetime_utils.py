"""
Timestamp helpers for series ingestion.

A series timestamp column holds either integer step indices or RFC 3339
instants. Both are normalised to a 1-D numpy array: int64 for steps,
datetime64[ns] (UTC, naive) for instants.
"""

import numpy as np
import pandas as pd

_INT_PATTERN = r'^[+-]?\d+$'


def parse_timestamps(raw):
    """Parse a column of timestamp strings. Raises ValueError on junk."""
    col = pd.Series(raw, dtype='string').str.strip()
    if len(col) and col.str.match(_INT_PATTERN).all():
        return col.astype('int64').to_numpy()
    parsed = pd.to_datetime(col, utc=True, format='ISO8601')
    if parsed.isna().any():
        raise ValueError("empty timestamp")
    return parsed.dt.tz_localize(None).to_numpy(dtype='datetime64[ns]')


def is_instant(timestamps):
    return np.issubdtype(np.asarray(timestamps).dtype, np.datetime64)


def step_of(timestamps):
    """Constant step between consecutive timestamps, or None if not uniform.

    Single-row series have no measurable step; 0 is returned for them.
    """
    ts = np.asarray(timestamps)
    if ts.size < 2:
        return 0
    diffs = np.diff(ts.astype('int64'))
    if diffs[0] <= 0 or not np.all(diffs == diffs[0]):
        return None
    return int(diffs[0])


def format_timestamps(timestamps):
    """Canonical text form: integers stay integers, instants become RFC 3339 UTC."""
    ts = np.asarray(timestamps)
    if is_instant(ts):
        return [pd.Timestamp(v).strftime('%Y-%m-%dT%H:%M:%SZ') for v in ts]
    return [str(int(v)) for v in ts]


def make_timestamps(start, n_steps, step_minutes):
    """Uniform grid of `n_steps` instants starting at `start` (RFC 3339 string)."""
    origin = pd.Timestamp(start)
    if origin.tzinfo is not None:
        origin = origin.tz_convert('UTC').tz_localize(None)
    step = np.timedelta64(int(round(step_minutes * 60)), 's')
    return (np.datetime64(origin.to_datetime64(), 'ns') + np.arange(n_steps) * step).astype('datetime64[ns]')
