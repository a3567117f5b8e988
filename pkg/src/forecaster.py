"""
Quantile forecasters for the target window.

`Forecaster` is the contract the pipeline needs from a predictive model: given
the context x of a series it returns the empirical quantile range
[q_l(x), q_u(x)] of orders alpha/2 and 1 - alpha/2 for every target cell. Any
sample-based model plugs in by computing those quantiles before returning.

Two deterministic baselines are provided:
- climatology: per target cell, the distribution of values observed at that
  position across the training series.
- persistence: last observed pre-target value held flat, widened by per-horizon
  residual quantiles learned on the training series.
"""

import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from loguru import logger

from errors import ContractError, FitError, SpecError, ValidationError
from series_core import TargetSpec, extract_target

FORMAT_TAG = 'cocai-forecaster/1'
QUANTILE_METHOD = 'inverted_cdf'


@dataclass(frozen=True, eq=False)
class QuantileRange:
    """Per-cell band for the target window; rows = steps, columns = channels."""
    lower: np.ndarray
    upper: np.ndarray
    alpha: float
    channels: Tuple[int, ...] = (0,)

    def __post_init__(self):
        lower = np.array(self.lower, dtype=float)
        upper = np.array(self.upper, dtype=float)
        if lower.ndim == 1:
            lower, upper = lower[:, None], upper[:, None]
        if lower.shape != upper.shape or lower.ndim != 2:
            raise ContractError(f"lower {lower.shape} and upper {upper.shape} must be matching t x d' matrices")
        if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
            raise ContractError("quantile range entries must be finite")
        if np.any(lower > upper):
            raise ContractError("quantile range has lower > upper")
        if not 0 < self.alpha < 1:
            raise ContractError(f"alpha must lie in (0, 1), got {self.alpha}")
        channels = tuple(int(c) for c in self.channels)
        if len(channels) != lower.shape[1]:
            raise ContractError(f"{len(channels)} channel labels for {lower.shape[1]} columns")
        lower.setflags(write=False)
        upper.setflags(write=False)
        object.__setattr__(self, 'lower', lower)
        object.__setattr__(self, 'upper', upper)
        object.__setattr__(self, 'channels', channels)

    @property
    def horizon(self):
        return self.lower.shape[0]

    def column(self, channel):
        """Single-channel range for series channel index `channel`."""
        if channel not in self.channels:
            raise ContractError(f"channel {channel} not in quantile range channels {self.channels}")
        pos = self.channels.index(channel)
        return QuantileRange(self.lower[:, pos], self.upper[:, pos], self.alpha, (channel,))


class Forecaster(ABC):
    """Fitted quantile forecaster for one TargetSpec."""
    kind = None

    def __init__(self, spec, channel_names):
        self.spec = spec
        self.channel_names = tuple(channel_names)
        self._bands = {}
        self._bands_lock = threading.Lock()

    def _band_at(self, alpha):
        """Read-only (lower, upper) tables at `alpha`, computed once per alpha and shared across threads."""
        with self._bands_lock:
            band = self._bands.get(alpha)
            if band is None:
                band = _band(self.tables, alpha)
                for table in band:
                    table.setflags(write=False)
                self._bands[alpha] = band
        return band

    @abstractmethod
    def _quantiles(self, context, alpha):
        """Return (lower, upper) t x d' arrays."""

    def predict_quantiles(self, context, spec, alpha):
        """Quantile range for one query context. Never reads target cells."""
        if spec != self.spec:
            raise SpecError(f"forecaster was fitted for {self.spec}, asked for {spec}")
        if not 0 < alpha < 1:
            raise ContractError(f"alpha must lie in (0, 1), got {alpha}")
        lower, upper = self._quantiles(context, alpha)
        return QuantileRange(lower, upper, alpha, self.spec.target_channels)

    def predict_series(self, series, alpha):
        """Convenience: extract the target of a full series and predict it."""
        context, y = extract_target(series, self.spec)
        return self.predict_quantiles(context, self.spec, alpha), y

    @abstractmethod
    def _tables(self):
        """JSON-ready fitted state."""

    def to_dict(self):
        return {
            'format': FORMAT_TAG,
            'kind': self.kind,
            'spec': self.spec.to_dict(),
            'channel_names': list(self.channel_names),
            'tables': self._tables(),
        }

    @staticmethod
    def from_dict(data):
        if data.get('format') != FORMAT_TAG:
            raise ValidationError(f"unsupported forecaster format {data.get('format')!r}, expected {FORMAT_TAG}")
        cls = {'climatology': ClimatologyForecaster, 'persistence': PersistenceForecaster}.get(data['kind'])
        if cls is None:
            raise ValidationError(f"unknown forecaster kind {data['kind']!r}")
        return cls(TargetSpec.from_dict(data['spec']), data['channel_names'],
                   [[np.asarray(cell, dtype=float) for cell in row] for row in data['tables']])


def _check_train(train, spec):
    if not train:
        raise FitError("training set is empty")
    first = train[0]
    for s in train:
        if (s.T, s.channel_names) != (first.T, first.channel_names):
            raise FitError(f"series {s.series_id} shape/channels differ from {first.series_id}")
    spec.validate(first)
    return first


def _band(tables, alpha):
    """Quantiles of order alpha/2 and 1 - alpha/2 of each cell's sorted sample."""
    lower = np.array([[np.quantile(cell, alpha / 2, method=QUANTILE_METHOD) for cell in row] for row in tables])
    upper = np.array([[np.quantile(cell, 1 - alpha / 2, method=QUANTILE_METHOD) for cell in row] for row in tables])
    return lower, upper


# ============================================================================
# Climatology baseline
# ============================================================================

class ClimatologyForecaster(Forecaster):
    kind = 'climatology'

    def __init__(self, spec, channel_names, tables):
        super().__init__(spec, channel_names)
        # tables[tau][j]: sorted observed values at that clock position
        self.tables = tables

    def _quantiles(self, context, alpha):
        return self._band_at(alpha)

    def _tables(self):
        return [[cell.tolist() for cell in row] for row in self.tables]


def fit_climatology(train, spec):
    first = _check_train(train, spec)
    t = spec.target_length
    rows = slice(first.T - t, first.T)
    cols = list(spec.target_channels)
    stack = np.stack([s.values[rows][:, cols] for s in train])
    observed = np.stack([s.mask[rows][:, cols] for s in train])
    tables = []
    for tau in range(t):
        row = []
        for j in range(len(cols)):
            cell = np.sort(stack[observed[:, tau, j], tau, j])
            if cell.size == 0:
                raise FitError(f"no training observations at target step {tau}, channel {cols[j]}")
            row.append(cell)
        tables.append(row)
    logger.info(f"Fitted climatology forecaster on {len(train)} series, horizon {t}")
    return ClimatologyForecaster(spec, first.channel_names, tables)


# ============================================================================
# Persistence baseline
# ============================================================================

class PersistenceForecaster(Forecaster):
    kind = 'persistence'

    def __init__(self, spec, channel_names, tables):
        super().__init__(spec, channel_names)
        # tables[tau][j]: sorted residuals actual - held-flat forecast
        self.tables = tables

    def _quantiles(self, context, alpha):
        point = np.array([_last_observed(context, c) for c in self.spec.target_channels])
        lo, hi = self._band_at(alpha)
        return point[None, :] + lo, point[None, :] + hi

    def _tables(self):
        return [[cell.tolist() for cell in row] for row in self.tables]


def _last_observed(context, channel):
    history = context.history(channel)
    if history.size < context.target_length:
        raise FitError(f"series {context.series_id}: channel {channel} has {history.size} observed "
                       f"pre-target steps, need {context.target_length}")
    return history[-1]


def fit_persistence(train, spec):
    _check_train(train, spec)
    t = spec.target_length
    residuals = [[[] for _ in spec.target_channels] for _ in range(t)]
    for s in train:
        context, y = extract_target(s, spec, require_observed=False)
        rows = slice(s.T - t, s.T)
        observed = s.mask[rows][:, list(spec.target_channels)]
        for j, channel in enumerate(spec.target_channels):
            last = _last_observed(context, channel)
            for tau in np.flatnonzero(observed[:, j]):
                residuals[tau][j].append(y[tau, j] - last)
    tables = []
    for tau, row in enumerate(residuals):
        if any(len(cell) == 0 for cell in row):
            raise FitError(f"no training residuals at horizon step {tau}")
        tables.append([np.sort(np.asarray(cell, dtype=float)) for cell in row])
    logger.info(f"Fitted persistence forecaster on {len(train)} series, horizon {t}")
    return PersistenceForecaster(spec, train[0].channel_names, tables)


FORECASTERS = {'climatology': fit_climatology, 'persistence': fit_persistence}
