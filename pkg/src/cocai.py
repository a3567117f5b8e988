"""
Command-line workflow for conformal prediction regions and copula-based
anomaly scores.

    python src/cocai.py synth --n 1000 --seed 7 --out data/corpus.csv
    python src/cocai.py calibrate --data data/corpus.csv --models models/run1 --channels ch0,ch1
    python src/cocai.py score --models models/run1 --data data/new.csv --reports reports/run1 --plot
    python src/cocai.py eval --reports reports/run1/reports.jsonl --labels data/labels.csv --out reports/run1
    python src/cocai.py elbow --models models/run1 --data data/corpus.csv --out reports/rss.csv
    python src/cocai.py compare --data data/corpus.csv --seeds 20 --out reports/compare

Exit codes: 0 ok, 1 runtime error, 2 configuration error.
"""

import argparse
import os
import sys
import traceback
from pathlib import Path

import pandas as pd
from dotenv import load_dotenv
from loguru import logger

from anomaly import (BatchResult, SkipRecord, batch_score, calibrate_anomaly, conformalized_target,
                     distance_series, rethreshold, summarize)
from conformal import METHODS, NonconformityScores, calibrate_copula_cpts, conformalize, joint_coverage
from config_utils import build_config, parse_threshold, resolve_channels
from errors import CalibrationError, CocaiError, ConfigError, SpecError, ValidationError
from export_reports import (adjustment_row, adjustment_summary, evaluate, flag_table, interval_table,
                            read_reports_jsonl, skipped_frame, write_frame, write_reports_jsonl)
from forecaster import FORECASTERS
from plot_utils import plot_report
from series_core import TargetSpec, load_csv, split_dataset, write_csv
from splines import select_K
from storage_manager import BundleStorageManager, model_key
from synth import (INJECTION_KINDS, SynthConfig, channel_scales, generate, inject, labels_frame, load_injections,
                   load_synth_config, random_injections, read_labels)

load_dotenv()


def configure_logging(verbose=False, quiet=False):
    level = 'DEBUG' if verbose else 'WARNING' if quiet else os.environ.get('COCAI_LOG_LEVEL', 'INFO')
    logger.remove()
    logger.add(sys.stderr, level=level, format='{time:HH:mm:ss} | {level: <7} | {message}')


# ============================================================================
# Shared pipeline steps
# ============================================================================

def _groups_of(series):
    labels = sorted({s.group for s in series if s.group is not None})
    return labels or [None]


def _members(series, group):
    return [s for s in series if group is None or s.group == group]


def _target_spec(cfg, channel_names):
    return TargetSpec(resolve_channels(cfg.channels, list(channel_names)), cfg.target_len)


def _calibration_scores(forecaster, series, channel, alpha):
    ranges, targets = [], []
    for s in series:
        qrange, y = forecaster.predict_series(s, alpha)
        ranges.append(qrange)
        targets.append(y)
    return NonconformityScores.stack(ranges, targets, channel)


def heldout_regions(forecaster, series, model):
    regions, targets = [], []
    for s in series:
        qrange, y = forecaster.predict_series(s, model.alpha)
        regions.append(conformalize(qrange.column(model.channel), model))
        targets.append(y[:, qrange.channels.index(model.channel)])
    return regions, targets


def calibrate_conformal(forecaster, cp_series, spec, cfg, group, method=None, seed=None):
    models = []
    for channel in spec.target_channels:
        members = _members(cp_series, group)
        if not members:
            raise CalibrationError(f"channel {channel} group {group}: conformal calibration set empty")
        scores = _calibration_scores(forecaster, members, channel, cfg.alpha)
        models.append(calibrate_copula_cpts(scores, cfg.alpha, split_seed=cfg.seed if seed is None else seed,
                                            method=method or cfg.method, channel=channel, group_label=group))
    return models


def run_calibration(series, cfg):
    """split -> forecaster on train -> conformal per (channel, group) -> anomaly per (channel, group)."""
    if not series:
        raise ValidationError("input corpus is empty")
    spec = _target_spec(cfg, series[0].channel_names)
    split = split_dataset(series, cfg.fractions, cfg.seed)
    forecaster = FORECASTERS[cfg.forecaster](split.subset(series, 'train'), spec)
    cp_series = split.subset(series, 'calib_cp')
    ad_series = split.subset(series, 'calib_ad')
    conformal_models, anomaly_models = [], []
    for group in _groups_of(series):
        for model in calibrate_conformal(forecaster, cp_series, spec, cfg, group):
            conformal_models.append(model)
            anomaly_models.append(calibrate_anomaly(_members(ad_series, group), forecaster, model, model.channel,
                                                    cfg.k_candidates, min_width=cfg.min_width, k=cfg.k,
                                                    rho=cfg.elbow_rho))
    return forecaster, split, conformal_models, anomaly_models


def _pipeline_flags(args):
    keys = ('data', 'models', 'reports', 'channels', 'target_len', 'alpha', 'threshold', 'k_candidates', 'k',
            'method', 'min_width', 'group_col', 'seed', 'forecaster', 'fractions', 'elbow_rho', 'workers')
    return {k: getattr(args, k, None) for k in keys}


def _require(path, what):
    if not path:
        raise ConfigError(f"--{what} is required")
    return path


# ============================================================================
# Subcommands
# ============================================================================

def cmd_synth(args):
    overrides = {'n_series': args.n, 'T': args.T, 'd': args.d, 'seed': args.seed, 'wet_fraction': args.wet_fraction}
    if args.config:
        config = load_synth_config(args.config, **overrides)
    else:
        config = SynthConfig(**{k: v for k, v in overrides.items() if v is not None})
    corpus = generate(config)

    injections = []
    if args.inject:
        injections = load_injections(args.inject)
    if args.anomaly_fraction:
        kinds = tuple(args.kinds.split(',')) if args.kinds else ('level_shift',)
        unknown = [k for k in kinds if k not in INJECTION_KINDS]
        if unknown:
            raise ConfigError(f"--kinds: unknown injection kinds {unknown}")
        channels = resolve_channels(args.channels.split(','), list(config.channel_names)) if args.channels else None
        injections += random_injections([s.series_id for s in corpus], config.d, args.target_len, config.T,
                                         args.anomaly_fraction, kinds, args.magnitude, args.duration,
                                         seed=config.seed + 1, channels=channels)
    if injections:
        by_id = {}
        for inj in injections:
            if inj.series_id is None:
                raise ConfigError(f"injection {inj} does not name a series_id")
            by_id.setdefault(inj.series_id, []).append(inj)
        unknown = sorted(set(by_id) - {s.series_id for s in corpus})
        if unknown:
            raise ConfigError(f"injections name unknown series {unknown[:10]}")
        corpus = [inject(s, by_id[s.series_id], channel_scales(config, s), args.target_len)[0]
                  if s.series_id in by_id else s for s in corpus]

    out = Path(_require(args.out, 'out'))
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(corpus, out)
    logger.info(f"Wrote {len(corpus)} series to {out}")
    if args.inject or args.anomaly_fraction:
        labels_path = Path(args.labels or out.with_name(out.stem + '_labels.csv'))
        write_frame(labels_frame(sorted(injections, key=lambda i: (i.series_id, i.channel, i.start_step))),
                    labels_path)
    return 0


def cmd_calibrate(args):
    cfg = build_config(_pipeline_flags(args), args.config)
    data = _require(cfg.data, 'data')
    models = _require(cfg.models, 'models')
    series = load_csv(data, group_col=cfg.group_col)
    forecaster, split, conformal_models, anomaly_models = run_calibration(series, cfg)
    BundleStorageManager(models).write_bundle(cfg, forecaster, split, conformal_models, anomaly_models)
    return 0


def _check_compatible(series, forecaster):
    t = forecaster.spec.target_length
    short = [s.series_id for s in series if s.T < t]
    if short:
        raise SpecError(f"series {short[:10]} are shorter than the bundle target length t={t}")


def score_corpus(bundle, series, cfg, workers=1):
    """batch_score every (channel, group) model of the bundle; returns results keyed by (channel, group)."""
    names = bundle.forecaster.channel_names
    results = {}
    for key in sorted(bundle.anomaly, key=lambda k: (k[0], k[1] or '')):
        channel, group = key
        members = _members(series, group)
        if not members:
            continue
        threshold = cfg.threshold_for(names[channel], channel)
        results[key] = batch_score(bundle.anomaly[key], members, bundle.forecaster, bundle.conformal[key],
                                   threshold, workers=workers)
    known = {g for _, g in bundle.anomaly}
    if None not in known:
        orphans = [s for s in series if s.group not in known]
        for channel in bundle.forecaster.spec.target_channels:
            key = (channel, None)
            skipped = [SkipRecord(s.series_id, channel, f"no model for group {s.group!r}") for s in orphans]
            if skipped:
                results[key] = BatchResult([], skipped, summarize([], skipped))
    return results


def cmd_score(args):
    storage = BundleStorageManager(_require(args.models, 'models'))
    bundle = storage.load_bundle()
    flags = {'threshold': args.threshold, 'workers': args.workers}
    cfg = build_config({**bundle.config, **{k: v for k, v in flags.items() if v is not None}})
    reports_dir = Path(_require(args.reports, 'reports'))
    names = bundle.forecaster.channel_names

    series = load_csv(_require(args.data, 'data'), schema=list(names), group_col=cfg.group_col)
    _check_compatible(series, bundle.forecaster)
    results = score_corpus(bundle, series, cfg, workers=cfg.workers) if series else {}

    reports = [r for res in results.values() for r in res.reports]
    skipped = [s for res in results.values() for s in res.skipped]
    write_reports_jsonl(reports, reports_dir / 'reports.jsonl')
    scored = {k: v for k, v in results.items() if k in bundle.anomaly}
    write_frame(flag_table(scored, names, bundle.anomaly), reports_dir / 'flags.csv')
    write_frame(interval_table(scored, names), reports_dir / 'intervals.csv')
    write_frame(skipped_frame(skipped), reports_dir / 'skipped.csv')
    if args.plot:
        for r in reports:
            plot_report(r, reports_dir / 'plots' / f"{model_key(r.series_id, names[r.channel])}.svg", names[r.channel])
    logger.info(f"Scored {len(reports)} (series, channel) pairs, skipped {len(skipped)}")
    return 0


def cmd_eval(args):
    reports_path = Path(_require(args.reports, 'reports'))
    if not reports_path.exists():
        raise ValidationError(f"reports file {reports_path} does not exist")
    reports = read_reports_jsonl(reports_path)
    if args.threshold is not None:
        default, per_channel = parse_threshold(args.threshold)
        if per_channel:
            raise ConfigError("eval --threshold takes a single value")
        reports = [rethreshold(r, default) for r in reports]
    labels = read_labels(_require(args.labels, 'labels'))
    by_kind, confusion = evaluate(reports, labels)
    out = Path(args.out or reports_path.parent)
    write_frame(by_kind, out / 'eval_by_kind.csv')
    write_frame(pd.DataFrame([confusion]), out / 'eval_summary.csv')
    logger.info(f"False-flag rate on clean series: {confusion['false_flag_rate']}; recall: {confusion['recall']}")
    return 0


def cmd_elbow(args):
    bundle = BundleStorageManager(_require(args.models, 'models')).load_bundle()
    names = bundle.forecaster.channel_names
    cfg = build_config({**bundle.config, 'k_candidates': args.k_candidates})
    series = load_csv(_require(args.data, 'data'), schema=list(names), group_col=cfg.group_col)
    ad_series = bundle.split.subset(series, 'calib_ad')
    if not ad_series:
        raise CalibrationError("anomaly calibration set empty: none of the bundle's calib_ad series are in --data")
    frames = []
    for key in sorted(bundle.anomaly, key=lambda k: (k[0], k[1] or '')):
        channel, group = key
        model = bundle.anomaly[key]
        deltas = []
        for s in _members(ad_series, group):
            region, y = conformalized_target(s, bundle.forecaster, bundle.conformal[key], channel, model.min_width)
            deltas.append(distance_series(region, y, channel).delta)
        candidates = [k for k in cfg.k_candidates if k <= model.basis.t]
        k_star, curve = select_K(deltas, candidates, cfg.elbow_rho)
        frame = curve.to_frame()
        frame.insert(0, 'group', group or '')
        frame.insert(0, 'channel', names[channel])
        frame['selected'] = frame['K'] == k_star
        frames.append(frame)
        logger.info(f"{names[channel]} / {group}: K*={k_star} (bundle uses K={model.K})")
    write_frame(pd.concat(frames, ignore_index=True), _require(args.out, 'out'))
    return 0


def cmd_compare(args):
    """Seed sweep: bounded vs uniform calibration, held-out coverage and adjustment size."""
    cfg = build_config(_pipeline_flags(args), args.config)
    series = load_csv(_require(cfg.data, 'data'), group_col=cfg.group_col)
    if not series:
        raise ValidationError("input corpus is empty")
    spec = _target_spec(cfg, series[0].channel_names)
    names = series[0].channel_names
    rows = []
    for seed in range(cfg.seed, cfg.seed + args.seeds):
        split = split_dataset(series, cfg.fractions, seed)
        forecaster = FORECASTERS[cfg.forecaster](split.subset(series, 'train'), spec)
        cp_series, test_series = split.subset(series, 'calib_cp'), split.subset(series, 'test')
        for group in _groups_of(series):
            tests = _members(test_series, group)
            if not tests:
                raise CalibrationError(f"group {group}: test split empty")
            for method in METHODS:
                for model in calibrate_conformal(forecaster, cp_series, spec, cfg, group, method=method, seed=seed):
                    regions, targets = heldout_regions(forecaster, tests, model)
                    rows.append(adjustment_row(model, joint_coverage(regions, targets), names[model.channel], seed))
    out = Path(_require(args.out, 'out'))
    write_frame(pd.DataFrame(rows), out / 'compare_runs.csv')
    write_frame(adjustment_summary(rows), out / 'compare_summary.csv')
    return 0


# ============================================================================
# Argument parsing
# ============================================================================

def _add_pipeline_args(p):
    p.add_argument('--config', help='JSON or TOML config file (flags win on conflict)')
    p.add_argument('--data', help='long-format series CSV')
    p.add_argument('--channels', help='target channels, names or indices, comma separated')
    p.add_argument('--target-len', dest='target_len', type=int, help='target window length t')
    p.add_argument('--alpha', type=float, help='target miscoverage (default 0.1)')
    p.add_argument('--method', choices=METHODS, help='conformal calibration method')
    p.add_argument('--group-col', dest='group_col', help='column holding the regime group label')
    p.add_argument('--seed', type=int, help='split and calibration seed (falls back to COCAI_SEED)')
    p.add_argument('--forecaster', choices=sorted(FORECASTERS), help='quantile forecaster baseline')
    p.add_argument('--fractions', type=lambda v: tuple(float(x) for x in v.split(',')),
                   help='train,calib_cp,calib_ad,test fractions')


def build_parser():
    parser = argparse.ArgumentParser(prog='cocai', description=__doc__.split('\n\n')[0])
    parser.add_argument('-v', '--verbose', action='store_true', help='debug logging')
    parser.add_argument('-q', '--quiet', action='store_true', help='warnings and errors only')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('synth', help='generate a synthetic corpus (optionally with injected anomalies)')
    p.add_argument('--config', help='synth config file (JSON or TOML)')
    p.add_argument('--n', type=int, help='number of series')
    p.add_argument('--T', type=int, help='steps per series')
    p.add_argument('--d', type=int, help='channels per series')
    p.add_argument('--seed', type=int)
    p.add_argument('--wet-fraction', dest='wet_fraction', type=float, help='share of series in the wet group')
    p.add_argument('--inject', help='injection file (JSON or TOML)')
    p.add_argument('--anomaly-fraction', dest='anomaly_fraction', type=float, default=0.0,
                   help='inject one random anomaly into this share of series')
    p.add_argument('--kinds', help=f'injection kinds for random anomalies ({",".join(INJECTION_KINDS)})')
    p.add_argument('--channels', help='channels random anomalies may hit, names or indices (default: all)')
    p.add_argument('--magnitude', type=float, default=3.0, help='random anomaly magnitude in noise-std units')
    p.add_argument('--duration', type=int, help='random anomaly duration (default half the target window)')
    p.add_argument('--target-len', dest='target_len', type=int, default=40, help='target window injections must hit')
    p.add_argument('--out', help='output CSV')
    p.add_argument('--labels', help='labels CSV (default <out>_labels.csv)')
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser('calibrate', help='fit forecaster, conformal and anomaly models into a bundle')
    _add_pipeline_args(p)
    p.add_argument('--models', help='bundle directory to write')
    p.add_argument('--k-candidates', dest='k_candidates', help="basis counts for the elbow search, e.g. '4-20'")
    p.add_argument('--k', type=int, help='fixed basis count (skips the elbow search)')
    p.add_argument('--elbow-rho', dest='elbow_rho', type=float, help='relative RSS improvement threshold')
    p.add_argument('--min-width', dest='min_width', type=float, help='minimum interval width floor')
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser('score', help='score series against a bundle')
    p.add_argument('--models', help='bundle directory')
    p.add_argument('--data', help='series CSV to score')
    p.add_argument('--reports', help='output directory for reports')
    p.add_argument('--threshold', help="flag threshold: '0.9' or per channel 'level=0.95,speed=0.9'")
    p.add_argument('--workers', type=int, help='scoring threads')
    p.add_argument('--plot', action='store_true', help='write one SVG per scored series and channel')
    p.set_defaults(func=cmd_score)

    p = sub.add_parser('eval', help='detection metrics against injected labels')
    p.add_argument('--reports', help='reports.jsonl written by score')
    p.add_argument('--labels', help='labels CSV written by synth')
    p.add_argument('--threshold', help='re-derive flags at this threshold without re-scoring')
    p.add_argument('--out', help='output directory (default: next to the reports)')
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser('elbow', help='RSS-vs-K curve on the anomaly calibration series of a bundle')
    p.add_argument('--models', help='bundle directory')
    p.add_argument('--data', help='corpus the bundle was calibrated on')
    p.add_argument('--k-candidates', dest='k_candidates', default='4-30')
    p.add_argument('--out', help='output CSV')
    p.set_defaults(func=cmd_elbow)

    p = sub.add_parser('compare', help='bounded vs uniform conformal calibration over a seed sweep')
    _add_pipeline_args(p)
    p.add_argument('--seeds', type=int, default=20, help='number of consecutive seeds')
    p.add_argument('--out', help='output directory')
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose, args.quiet)
    try:
        return args.func(args)
    except CocaiError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except Exception as e:
        frame = traceback.extract_tb(e.__traceback__)[-1]
        logger.error(f"Error occurred in {os.path.basename(frame.filename)} at line {frame.lineno}: {e}")
        return 1


if __name__ == '__main__':
    sys.exit(main())
