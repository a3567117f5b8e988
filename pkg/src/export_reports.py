"""
Report tables and files written by the score / eval / compare commands.

All writers produce byte-deterministic output: rows are sorted, floats use a
fixed format and no timestamps are recorded.
"""

import json
from pathlib import Path

import numpy as np
import pandas as pd
from loguru import logger

from anomaly import AnomalyReport
from errors import ValidationError

FLOAT_FORMAT = '%.10g'


def write_frame(df, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator='\n')
    logger.info(f"Wrote {path} ({len(df)} rows)")


def write_reports_jsonl(reports, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ordered = sorted(reports, key=lambda r: (r.series_id, r.channel))
    with open(path, 'w') as f:
        for r in ordered:
            f.write(json.dumps(r.to_dict(), sort_keys=True) + '\n')
    logger.info(f"Wrote {len(ordered)} reports to {path}")


def read_reports_jsonl(path):
    with open(path) as f:
        return [AnomalyReport.from_dict(json.loads(line)) for line in f if line.strip()]


def skipped_frame(skipped):
    rows = [{'series_id': s.series_id, 'channel': s.channel, 'reason': s.reason} for s in skipped]
    return pd.DataFrame(rows, columns=['series_id', 'channel', 'reason']).sort_values(['series_id', 'channel'])


def _pct(count, n):
    return 100.0 * count / n if n else 0.0


# ============================================================================
# Flag breakdown
# ============================================================================

def flag_table(results, channel_names, anomaly_models):
    """One row per (channel, group): #obs, K, nu, coverage and the flag breakdown.

    `results` maps (channel, group) to a BatchResult.
    """
    rows = []
    for key in sorted(results, key=lambda k: (k[0], k[1] or '')):
        channel, group = key
        summary = results[key].summary
        model = anomaly_models[key]
        n = summary['n_scored']
        row = {'channel': channel_names[channel], 'group': group or '', 'n_obs': n, 'n_skipped': summary['n_skipped'],
               'K': model.K, 'nu': model.nu, 'coverage_pct': 100.0 * summary['coverage']}
        for name in ('gaussian_inside', 'gaussian_outside', 'student_inside', 'student_outside',
                     'flagged_inside', 'flagged_outside', 'unflagged_inside', 'unflagged_outside'):
            row[name] = summary[name]
            row[f'{name}_pct'] = _pct(summary[name], n)
        row['flag_rate'] = summary['flag_rate']
        rows.append(row)
    return pd.DataFrame(rows)


# ============================================================================
# Interval comparison (EQR vs conformalized)
# ============================================================================

def _interval_stats(lower, upper, y, prefix):
    width = upper - lower
    median = np.median(y)
    covered = np.all((lower <= y) & (y <= upper), axis=1)
    rel = 100.0 * width.mean() / abs(median) if median != 0 else np.nan
    return {f'{prefix}_avg_width': float(width.mean()), f'{prefix}_avg_rel_width_pct': float(rel),
            f'{prefix}_coverage_pct': 100.0 * float(covered.mean())}


def interval_table(results, channel_names):
    """Average width, relative width and joint coverage of the EQR and the conformalized band."""
    rows = []
    for key in sorted(results, key=lambda k: (k[0], k[1] or '')):
        channel, group = key
        reports = [r for r in results[key].reports if r.region is not None]
        if not reports:
            continue
        y = np.vstack([r.y for r in reports])
        row = {'channel': channel_names[channel], 'group': group or '', 'n_obs': len(reports),
               'median': float(np.median(y))}
        row.update(_interval_stats(np.vstack([r.region.eqr_lower[:, 0] for r in reports]),
                                   np.vstack([r.region.eqr_upper[:, 0] for r in reports]), y, 'eqr'))
        row.update(_interval_stats(np.vstack([r.region.lower[:, 0] for r in reports]),
                                   np.vstack([r.region.upper[:, 0] for r in reports]), y, 'conformal'))
        rows.append(row)
    return pd.DataFrame(rows)


# ============================================================================
# Adjustment comparison across calibration methods
# ============================================================================

def adjustment_row(model, coverage, channel_name, seed):
    eps = np.asarray(model.epsilon, dtype=float)
    return {'method': model.method, 'channel': channel_name, 'group': model.group_label or '', 'seed': seed,
            'coverage_pct': 100.0 * coverage, 'sum_eps': float(eps.sum()), 'mean_eps': float(eps.mean()),
            'std_eps': float(eps.std()), 'infeasible': model.infeasible}


def adjustment_summary(rows):
    """Per method: mean held-out coverage, mean and std of the adjustments across runs."""
    df = pd.DataFrame(rows)
    if df.empty:
        return df
    grouped = df.groupby(['method', 'channel', 'group'], sort=True)
    return grouped.agg(runs=('seed', 'count'), coverage_pct=('coverage_pct', 'mean'),
                       min_coverage_pct=('coverage_pct', 'min'), mean_eps=('mean_eps', 'mean'),
                       std_eps=('std_eps', 'mean'), sum_eps=('sum_eps', 'mean')).reset_index()


# ============================================================================
# Detection metrics against injected labels
# ============================================================================

def evaluate(reports, labels):
    """Detection rate per injection kind, false-flag rate on clean series, confusion counts.

    `labels` is the label frame written by the synth command. A series counts
    as flagged on an injected channel when that channel's report is flagged.
    """
    flags = {(r.series_id, r.channel): bool(r.flagged) for r in reports}
    scored_ids = {sid for sid, _ in flags}
    unmatched = sorted(set(labels['series_id']) - scored_ids)
    if unmatched:
        raise ValidationError(f"labels reference series with no report: {unmatched[:20]}"
                              f"{' ...' if len(unmatched) > 20 else ''}")

    rows = []
    tp = fn = 0
    unscored = 0
    for kind, part in labels.groupby('kind', sort=True):
        hits = [flags.get((sid, int(ch))) for sid, ch in zip(part['series_id'], part['channel'])]
        unscored += sum(h is None for h in hits)
        hits = [h for h in hits if h is not None]
        detected = int(sum(hits))
        rows.append({'kind': kind, 'n_injected': len(hits), 'n_detected': detected,
                     'detection_rate': detected / len(hits) if hits else np.nan})
        tp += detected
        fn += len(hits) - detected
    if unscored:
        logger.warning(f"{unscored} injections sit on channels that were not scored")

    injected = set(labels['series_id'])
    clean = {}
    for (sid, _), flagged in flags.items():
        if sid not in injected:
            clean[sid] = clean.get(sid, False) or flagged
    fp = int(sum(clean.values()))
    tn = len(clean) - fp
    confusion = {
        'true_positive': tp, 'false_negative': fn, 'false_positive': fp, 'true_negative': tn,
        'n_clean': len(clean), 'false_flag_rate': fp / len(clean) if clean else None,
        'precision': tp / (tp + fp) if tp + fp else None, 'recall': tp / (tp + fn) if tp + fn else None,
    }
    by_kind = pd.DataFrame(rows, columns=['kind', 'n_injected', 'n_detected', 'detection_rate'])
    return by_kind, confusion
