"""end-to-end tests of the command line verbs on a tiny run"""

import json
import os

import pytest

import numerics as nx
from cli import compare, icl_slope, main, markdown_table, summarize
from data import INDEX_NAME
from evaluate import REPORT_NAME
from train import FINAL_CHECKPOINT

CONFIG = """
[maze]
width = 7
height = 7
n_objects = 3
window_radius = 1

[data]
n_envs = 2
stream_length = 12

[model]
d_model = 8
n_layers = 1
n_heads = 2
d_key = 4
d_value = 4
mlp_ratio = 2

[train]
slots = 2
segment_length = 4
epochs = 1
lr = 0.01

[eval]
n_envs = 1
max_steps = 40
task_cap = 20
icl_bucket = 20
rsd_burn_in = 5
"""

@pytest.fixture(autouse=True)
def restore_precision():
    """the cli sets the process-wide float type"""

    prev = nx.Precision.dtype

    yield

    nx.Precision.dtype = prev

@pytest.fixture
def config_path(tmp_path):
    path = os.path.join(tmp_path, 'run.cfg')

    with open(path, 'w', encoding='utf-8') as f:
        f.write(CONFIG)

    return path

def _last_error(capsys):
    err = [line for line in capsys.readouterr().err.splitlines() if line.strip()]

    return json.loads(err[-1])

def _read(path):
    with open(path, 'rb') as f:
        return f.read()

def test_gen_data_refuses_then_overwrites(tmp_path, config_path, capsys):
    data = os.path.join(tmp_path, 'data')

    assert main(['--config', config_path, 'gen-data', '--out', data, '--verify']) == 0

    first = _read(os.path.join(data, INDEX_NAME))

    assert main(['--config', config_path, 'gen-data', '--out', data]) == 3
    assert _last_error(capsys)['error'] == 'DataError'

    assert main(['gen-data', '--out', data, '--config', config_path, '--force']) == 0
    assert _read(os.path.join(data, INDEX_NAME)) == first

def test_train_eval_analyze(tmp_path, config_path, capsys):
    data = os.path.join(tmp_path, 'data')
    base = ['--config', config_path]

    assert main(base + ['gen-data', '--out', data]) == 0

    report_dirs = []

    for mode in ('stateful', 'stateless'):
        run = os.path.join(tmp_path, mode)
        out = os.path.join(tmp_path, f"eval_{mode}")
        overrides = ['--set', f"train.mode={mode}"]

        assert main(base + overrides + ['train', '--data', data, '--out', run]) == 0
        assert os.path.exists(os.path.join(run, FINAL_CHECKPOINT))

        assert main(base + overrides + ['eval', '--checkpoint', os.path.join(run, FINAL_CHECKPOINT),
                                        '--data', data, '--out', out]) == 0

        with open(os.path.join(out, REPORT_NAME), 'r', encoding='utf-8') as f:
            assert json.load(f)['train_mode'] == mode

        report_dirs.append(out)

    analysis = os.path.join(tmp_path, 'analysis')

    assert main(['analyze'] + report_dirs + ['--out', analysis, '--plot',
                                             '--logs', os.path.join(tmp_path, 'stateful', 'train_log.csv'),
                                             '--norms', os.path.join(report_dirs[0], 'memory_norms.csv')]) == 0

    with open(os.path.join(analysis, 'analysis.md'), 'r', encoding='utf-8') as f:
        table = f.read()

    assert 'ΔSR' in table and 'RSD ratio' in table
    assert os.path.exists(os.path.join(analysis, 'analysis.png'))

    # a checkpoint of another geometry is refused
    bad = base + ['--set', 'model.d_model=16', 'eval', '--checkpoint',
                  os.path.join(tmp_path, 'stateful', FINAL_CHECKPOINT), '--out', os.path.join(tmp_path, 'bad')]
    capsys.readouterr()

    assert main(bad) == 2

    error = _last_error(capsys)

    assert error == {'error': 'ConfigError', 'exit_code': 2, 'message': error['message']}
    assert 'model hash' in error['message']

def test_train_rejects_mismatched_data(tmp_path, config_path, capsys):
    data = os.path.join(tmp_path, 'data')

    assert main(['--config', config_path, 'gen-data', '--out', data]) == 0
    assert main(['--config', config_path, '--seed', '7', 'train', '--data', data,
                 '--out', os.path.join(tmp_path, 'run')]) == 2
    assert _last_error(capsys)['exit_code'] == 2

def test_config_errors(tmp_path, capsys):
    assert main(['--config', os.path.join(tmp_path, 'missing.cfg'), 'selfcheck', '--suite', 'oracle']) == 2
    assert main(['--set', 'maze.colour=blue', 'selfcheck', '--suite', 'oracle']) == 2
    assert main(['--set', 'novalue', 'selfcheck', '--suite', 'oracle']) == 2
    assert _last_error(capsys)['error'] == 'ConfigError'

def test_missing_dataset_is_a_data_error(tmp_path, config_path):
    assert main(['--config', config_path, 'train', '--data', os.path.join(tmp_path, 'nothing'),
                 '--out', os.path.join(tmp_path, 'run')]) == 3

def test_selfcheck_oracle_suite():
    assert main(['selfcheck', '--suite', 'oracle']) == 0

def _report(mode, sr, steps, rsd, curve):
    return {'train_mode': mode, 'policy': 'net', 'success_rate': sr, 'steps_to_goal': steps, 'rsd_mean': rsd,
            'icl_curve': [{'bucket_start': i * 500, 'count': 1, 'success_rate': y} for i, y in enumerate(curve)]}

def test_analysis_math():
    reports = [_report('stateful', 0.8, 100.0, 0.1, [0.5, 0.7, 0.9]),
               _report('stateful', 0.6, 120.0, 0.3, [0.5, 0.6, 0.7]),
               _report('stateless', 0.5, 150.0, 0.4, [0.5, 0.5, 0.5])]

    assert icl_slope(reports[0]) == pytest.approx(0.4)
    assert icl_slope(_report('x', 0, 0, 0, [0.5, None])) is None

    summary = summarize(reports)
    deltas = compare(summary)

    assert summary['stateful']['runs'] == 2
    assert deltas['delta_success_rate'] == pytest.approx(0.2)
    assert deltas['delta_steps_to_goal'] == pytest.approx(-40.0)
    assert deltas['delta_icl_slope'] == pytest.approx(0.3)
    assert deltas['rsd_ratio'] == pytest.approx(0.5)

    table = markdown_table(summary, deltas)

    assert '| ΔSR | 0.2000 |' in table

def test_compare_with_one_side_missing():
    summary = summarize([_report('stateful', 0.8, 100.0, 0.1, [0.5, 0.7])])
    deltas = compare(summary)

    assert set(deltas.values()) == {None}
    assert 'n/a' in markdown_table(summary, deltas)
