import json

import pandas as pd
import pytest

from cocai import main

PIPELINE = ['--channels', 'ch0', '--target-len', '10', '--fractions', '0.2,0.5,0.2,0.1', '--seed', '0']


def _snapshot(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob('*')) if p.is_file()}


def _run(*argv):
    return main(['-q', *[str(a) for a in argv]])


@pytest.fixture(scope='module')
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp('cocai')
    assert _run('synth', '--n', 1000, '--T', 40, '--d', 2, '--seed', 3, '--out', root / 'clean.csv') == 0
    assert _run('synth', '--n', 200, '--T', 40, '--d', 2, '--seed', 4, '--anomaly-fraction', 0.3,
                '--target-len', 10, '--channels', 'ch0', '--out', root / 'new.csv') == 0
    assert _run('calibrate', '--data', root / 'clean.csv', '--models', root / 'models', '--k-candidates', '4-8',
                *PIPELINE) == 0
    assert _run('score', '--models', root / 'models', '--data', root / 'new.csv', '--reports', root / 'reports') == 0
    return root


def test_synth_writes_corpus_and_labels(workspace):
    corpus = pd.read_csv(workspace / 'new.csv')
    assert list(corpus.columns) == ['series_id', 'timestamp', 'ch0', 'ch1']
    assert corpus['series_id'].nunique() == 200
    labels = pd.read_csv(workspace / 'new_labels.csv')
    assert 30 <= len(labels) <= 90
    assert set(labels['kind']) == {'level_shift'}
    assert (labels['start_step'] >= 30).all()
    assert set(labels['channel']) == {0}
    assert not (workspace / 'clean_labels.csv').exists()


def test_calibrate_writes_verified_bundle(workspace):
    manifest = json.loads((workspace / 'models' / 'manifest.json').read_text())
    assert {'forecaster.json', 'split.json', 'conformal/ch0_all.json', 'anomaly/ch0_all.json'} <= set(manifest['files'])
    assert manifest['config']['channels'] == ['ch0']


def test_score_outputs(workspace):
    reports = (workspace / 'reports' / 'reports.jsonl').read_text().splitlines()
    assert len(reports) == 200
    first = json.loads(reports[0])
    assert first['series_id'] == 's00000' and first['channel'] == 0
    assert 0.0 <= first['a_gaussian'] <= 1.0
    intervals = pd.read_csv(workspace / 'reports' / 'intervals.csv')
    assert intervals.loc[0, 'eqr_coverage_pct'] < intervals.loc[0, 'conformal_coverage_pct']
    flags = pd.read_csv(workspace / 'reports' / 'flags.csv')
    assert flags.loc[0, 'n_obs'] == 200
    assert pd.read_csv(workspace / 'reports' / 'skipped.csv').empty


def test_eval_against_labels(workspace):
    assert _run('eval', '--reports', workspace / 'reports' / 'reports.jsonl',
                '--labels', workspace / 'new_labels.csv') == 0
    summary = pd.read_csv(workspace / 'reports' / 'eval_summary.csv')
    assert summary.loc[0, 'n_clean'] + len(pd.read_csv(workspace / 'new_labels.csv')) == 200
    by_kind = pd.read_csv(workspace / 'reports' / 'eval_by_kind.csv')
    assert by_kind['kind'].tolist() == ['level_shift']
    n_labels = len(pd.read_csv(workspace / 'new_labels.csv'))
    assert by_kind.loc[0, 'n_injected'] == n_labels
    assert by_kind.loc[0, 'detection_rate'] >= 0.5
    assert summary.loc[0, 'true_positive'] == by_kind.loc[0, 'n_detected'] > 0


def test_higher_threshold_only_changes_flags(workspace):
    assert _run('score', '--models', workspace / 'models', '--data', workspace / 'new.csv',
                '--reports', workspace / 'reports_95', '--threshold', '0.95') == 0
    base = [json.loads(line) for line in (workspace / 'reports' / 'reports.jsonl').read_text().splitlines()]
    strict = [json.loads(line) for line in (workspace / 'reports_95' / 'reports.jsonl').read_text().splitlines()]
    assert [r['a_student'] for r in base] == [r['a_student'] for r in strict]
    assert sum(r['flagged'] for r in strict) <= sum(r['flagged'] for r in base)
    assert all(r['threshold'] == 0.95 for r in strict)


def test_eval_rethreshold_matches_rescoring(workspace, tmp_path):
    assert _run('eval', '--reports', workspace / 'reports' / 'reports.jsonl', '--labels', workspace / 'new_labels.csv',
                '--threshold', '0.95', '--out', tmp_path) == 0
    assert _run('eval', '--reports', workspace / 'reports_95' / 'reports.jsonl',
                '--labels', workspace / 'new_labels.csv', '--out', tmp_path / 'direct') == 0
    assert (tmp_path / 'eval_summary.csv').read_bytes() == (tmp_path / 'direct' / 'eval_summary.csv').read_bytes()


def test_score_with_plots(workspace, tmp_path):
    head = pd.read_csv(workspace / 'new.csv')
    head[head['series_id'].isin(['s00000', 's00001'])].to_csv(tmp_path / 'two.csv', index=False)
    assert _run('score', '--models', workspace / 'models', '--data', tmp_path / 'two.csv',
                '--reports', tmp_path / 'reports', '--plot') == 0
    assert sorted(p.name for p in (tmp_path / 'reports' / 'plots').iterdir()) == ['s00000_ch0.svg', 's00001_ch0.svg']


def test_elbow_curve(workspace, tmp_path):
    out = tmp_path / 'rss.csv'
    assert _run('elbow', '--models', workspace / 'models', '--data', workspace / 'clean.csv',
                '--k-candidates', '4-10', '--out', out) == 0
    curve = pd.read_csv(out)
    assert curve['K'].tolist() == list(range(4, 11))
    assert curve['selected'].sum() == 1
    assert (curve['total_rss'].diff().dropna() <= 0).all()


def test_compare_methods(workspace, tmp_path):
    assert _run('compare', '--data', workspace / 'clean.csv', '--seeds', 2, '--out', tmp_path, *PIPELINE) == 0
    runs = pd.read_csv(tmp_path / 'compare_runs.csv')
    assert len(runs) == 4
    paired = runs.pivot_table(index='seed', columns='method', values='sum_eps')
    assert (paired['bounded_copula'] <= paired['uniform_level'] + 1e-9).all()
    summary = pd.read_csv(tmp_path / 'compare_summary.csv')
    assert set(summary['method']) == {'bounded_copula', 'uniform_level'}


def test_synth_with_injection_file(tmp_path):
    plan = tmp_path / 'inject.json'
    plan.write_text(json.dumps([{'series_id': 's00001', 'kind': 'spike', 'channel': 1, 'start_step': 35,
                                 'duration': 1, 'magnitude': 5.0}]))
    assert _run('synth', '--n', 3, '--T', 40, '--d', 2, '--inject', plan, '--target-len', 10,
                '--out', tmp_path / 'c.csv') == 0
    labels = pd.read_csv(tmp_path / 'c_labels.csv')
    assert labels.to_dict('records') == [{'series_id': 's00001', 'channel': 1, 'kind': 'spike', 'start_step': 35,
                                          'duration': 1, 'magnitude': 5.0}]


# ============================================================================
# Exit codes
# ============================================================================

def test_configuration_errors_exit_2(workspace, tmp_path):
    assert _run('calibrate', '--data', workspace / 'clean.csv', '--models', tmp_path / 'm', '--alpha', 1.5) == 2
    assert _run('calibrate', '--models', tmp_path / 'm') == 2
    assert _run('calibrate', '--data', workspace / 'clean.csv', '--models', tmp_path / 'm', '--channels', 'nope') == 2
    assert _run('synth', '--n', 3, '--inject', tmp_path / 'missing.json', '--out', tmp_path / 'c.csv') == 2
    assert _run('synth', '--n', 3, '--anomaly-fraction', 0.5, '--channels', 'ch9', '--out', tmp_path / 'c.csv') == 2
    with pytest.raises(SystemExit) as err:
        _run('calibrate', '--method', 'gradient')
    assert err.value.code == 2


def test_incompatible_data_exits_2(workspace, tmp_path):
    assert _run('synth', '--n', 3, '--T', 5, '--d', 2, '--out', tmp_path / 'short.csv') == 0
    assert _run('score', '--models', workspace / 'models', '--data', tmp_path / 'short.csv',
                '--reports', tmp_path / 'r') == 2
    assert _run('synth', '--n', 3, '--T', 40, '--d', 3, '--out', tmp_path / 'wide.csv') == 0
    assert _run('score', '--models', workspace / 'models', '--data', tmp_path / 'wide.csv',
                '--reports', tmp_path / 'r') == 2


def test_runtime_errors_exit_1(workspace, tmp_path):
    assert _run('score', '--models', tmp_path / 'absent', '--data', workspace / 'new.csv',
                '--reports', tmp_path / 'r') == 1
    assert _run('eval', '--reports', tmp_path / 'none.jsonl', '--labels', workspace / 'new_labels.csv') == 1


def test_failed_calibration_leaves_no_bundle(workspace, tmp_path):
    # 20 conformal series at alpha=0.01 cannot be calibrated
    assert _run('calibrate', '--data', workspace / 'clean.csv', '--models', tmp_path / 'm', '--alpha', 0.01,
                *PIPELINE[:4], '--fractions', '0.5,0.02,0.2,0.1') == 1
    assert not (tmp_path / 'm').exists()


# ============================================================================
# Determinism
# ============================================================================

def _pipeline(root, monkeypatch):
    monkeypatch.chdir(root)
    assert _run('synth', '--n', 1000, '--T', 40, '--d', 2, '--seed', 8, '--anomaly-fraction', 0.2,
                '--target-len', 10, '--out', 'data/corpus.csv') == 0
    assert _run('calibrate', '--data', 'data/corpus.csv', '--models', 'models/run', '--k-candidates', '4-6',
                *PIPELINE) == 0
    assert _run('score', '--models', 'models/run', '--data', 'data/corpus.csv', '--reports', 'reports/run') == 0
    return _snapshot(root)


def test_identical_seeds_give_identical_bytes(tmp_path, monkeypatch):
    (tmp_path / 'a').mkdir()
    (tmp_path / 'b').mkdir()
    first = _pipeline(tmp_path / 'a', monkeypatch)
    second = _pipeline(tmp_path / 'b', monkeypatch)
    assert first.keys() == second.keys()
    assert 'models/run/manifest.json' in first and 'reports/run/reports.jsonl' in first
    for name in first:
        assert first[name] == second[name], name
