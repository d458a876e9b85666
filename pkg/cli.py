"""
command line entry point: gen-data, train, eval, analyze, selfcheck

usage: python3 cli.py [--config FILE] [--seed N] [--threads N] [--precision f32|f64] [--force] <verb> ...

Every failure prints one json line {"error", "exit_code", "message"} to stderr
and exits with the error's code (2 config, 3 data, 4 numeric, 5 selfcheck).
"""

import argparse
import glob
import json
import os
import sys
import time

import numpy as np
from scipy.stats import linregress

import numerics as nx
from data import INDEX_NAME, build_dataset, load_streams, read_index, verify_replay
from evaluate import check_disjoint, read_report, run_evaluation, write_report
from networks import load_checkpoint
from plotting import Plotter
from selfcheck import SUITES, run_selfcheck
from settings import RunConfig
from timerutil import Timers
from train import read_log, run_training
from util import ConfigError, ConNavError, DataError, SelfCheckError, fatal, sha256_hex, to_time_str

def load_config(args) -> RunConfig:
    """config file (or defaults) plus command-line overrides"""

    path = getattr(args, 'config', None)
    config = RunConfig.from_file(path) if path else RunConfig()

    for item in getattr(args, 'set', None) or []:
        if '=' not in item:
            raise ConfigError(f"--set expects section.key=value, got '{item}'")

        key, value = item.split('=', 1)
        config.override(key.strip(), value.strip())

    if getattr(args, 'seed', None) is not None:
        config.override('seeds.master', args.seed)

    if getattr(args, 'threads', None) is not None:
        config.override('run.threads', args.threads)

    if getattr(args, 'precision', None) is not None:
        config.override('run.precision', args.precision)

    nx.Precision.set(config.run.precision)

    return config

def _existing_outputs(out_dir):
    if not os.path.isdir(out_dir):
        return []

    return sorted(glob.glob(os.path.join(out_dir, 'stream_*.cons')) + glob.glob(os.path.join(out_dir, INDEX_NAME)))

def cmd_gen_data(args):
    """generate the training streams and their index"""

    config = load_config(args)
    out_dir = args.out or config.paths.data_dir
    existing = _existing_outputs(out_dir)

    if existing:
        if not getattr(args, 'force', False):
            raise DataError(f"{out_dir} already holds {len(existing)} dataset files; use --force to overwrite")

        for path in existing:
            os.remove(path)

    index = build_dataset(config, out_dir, config.run.threads)

    if args.verify:
        for ds in load_streams(out_dir):
            verify_replay(ds)

        print(f"Replay verified for {len(index['streams'])} streams")

    with open(os.path.join(out_dir, INDEX_NAME), 'rb') as f:
        index_hash = sha256_hex(f.read())

    print(f"Wrote {len(index['streams'])} streams x {config.data.stream_length} records to {out_dir} "
          f"(index {index_hash[:12]}, config {config.hash()[:12]})")

    return {'index_hash': index_hash, 'streams': len(index['streams'])}

def _check_data_matches(config: RunConfig, index: dict, data_dir):
    data_config = RunConfig.from_text(index['config'])

    for section in ('maze', 'data'):
        if getattr(data_config, section).items() != getattr(config, section).items():
            raise ConfigError(f"[{section}] of the config differs from the one {data_config.hash()[:12]} "
                              f"that generated {data_dir}")

    if data_config.seeds.master != config.seeds.master:
        raise ConfigError(f"seeds.master {config.seeds.master} differs from the dataset's {data_config.seeds.master}")

def cmd_train(args):
    """train one protocol on a generated dataset"""

    config = load_config(args)
    data_dir = args.data or config.paths.data_dir
    out_dir = args.out or config.paths.train_dir

    index = read_index(data_dir)
    _check_data_matches(config, index, data_dir)
    streams = load_streams(data_dir)

    return run_training(config, streams, out_dir, resume=args.resume, stop_after=args.stop_after)

def cmd_eval(args):
    """roll out a checkpoint (or a reference policy) in the eval mazes"""

    config = load_config(args)
    out_dir = args.out or config.paths.eval_dir
    net = None
    train_mode = None

    if args.policy == 'net':
        if not args.checkpoint:
            raise ConfigError("eval --policy net needs --checkpoint")

        ckpt = load_checkpoint(args.checkpoint)

        if ckpt.config.model_hash() != config.model_hash():
            raise ConfigError(f"checkpoint {args.checkpoint} model hash {ckpt.config.model_hash()[:12]} differs "
                              f"from the eval config's {config.model_hash()[:12]}")

        net = ckpt.net
        train_mode = ckpt.config.train.mode

    data_dir = args.data or config.paths.data_dir

    if os.path.exists(os.path.join(data_dir, INDEX_NAME)):
        check_disjoint(config, read_index(data_dir))
    else:
        print(f"No dataset index in {data_dir}; skipping the train/eval overlap check")

    report, traces = run_evaluation(config, net, args.policy, config.run.threads, train_mode)
    write_report(report, traces, out_dir)

    print(f"Eval ({args.policy}, {config.eval.state_handling}): success rate {report['success_rate']:.3f}, "
          f"steps to goal {report['steps_to_goal']:.1f}, {report['n_tasks']} tasks, RSD {report['rsd_mean']}")
    Timers.print_stats('run_evaluation')

    return report

def icl_slope(report):
    """least-squares slope of success rate vs bucket start, per 1000 steps (None with < 2 buckets)"""

    points = [(b['bucket_start'], b['success_rate']) for b in report['icl_curve'] if b['success_rate'] is not None]

    if len(points) < 2:
        return None

    xs, ys = zip(*points)

    if len(set(xs)) < 2:
        return None

    return float(linregress(xs, ys).slope) * 1000.0

def _mean(values):
    values = [v for v in values if v is not None]

    return float(np.mean(values)) if values else None

def summarize(reports):
    """seed-averaged metrics per training mode"""

    groups = {}

    for report in reports:
        mode = report.get('train_mode') or report.get('policy', 'unknown')
        groups.setdefault(mode, []).append(report)

    rv = {}

    for mode, group in sorted(groups.items()):
        rv[mode] = {'runs': len(group),
                    'success_rate': _mean([r['success_rate'] for r in group]),
                    'steps_to_goal': _mean([r['steps_to_goal'] for r in group]),
                    'icl_slope_per_1k_steps': _mean([icl_slope(r) for r in group]),
                    'rsd': _mean([r['rsd_mean'] for r in group])}

    return rv

def compare(summary):
    """stateful minus stateless deltas and the RSD ratio (None when a side is missing)"""

    a = summary.get('stateful')
    b = summary.get('stateless')

    def diff(key):
        if a is None or b is None or a[key] is None or b[key] is None:
            return None

        return a[key] - b[key]

    ratio = None

    if a is not None and b is not None and a['rsd'] is not None and b['rsd']:
        ratio = a['rsd'] / b['rsd']

    return {'delta_success_rate': diff('success_rate'), 'delta_steps_to_goal': diff('steps_to_goal'),
            'delta_icl_slope': diff('icl_slope_per_1k_steps'), 'rsd_ratio': ratio}

def _fmt(value):
    if value is None:
        return 'n/a'

    return f"{value:.4f}" if isinstance(value, float) else str(value)

def markdown_table(summary, deltas):
    'comparison table in markdown'

    modes = list(summary)
    lines = ["| metric | " + " | ".join(modes) + " |", "|---" * (len(modes) + 1) + "|"]

    for key in ('runs', 'success_rate', 'steps_to_goal', 'icl_slope_per_1k_steps', 'rsd'):
        lines.append(f"| {key} | " + " | ".join(_fmt(summary[m][key]) for m in modes) + " |")

    lines.append("")
    lines.append("| comparison (stateful vs stateless) | value |")
    lines.append("|---|---|")
    lines.append(f"| ΔSR | {_fmt(deltas['delta_success_rate'])} |")
    lines.append(f"| ΔSteps | {_fmt(deltas['delta_steps_to_goal'])} |")
    lines.append(f"| ΔICL slope (per 1k steps) | {_fmt(deltas['delta_icl_slope'])} |")
    lines.append(f"| RSD ratio | {_fmt(deltas['rsd_ratio'])} |")

    return "\n".join(lines) + "\n"

def cmd_analyze(args):
    """compare eval reports of stateful and stateless runs"""

    reports = [read_report(path) for path in args.reports]
    summary = summarize(reports)
    deltas = compare(summary)
    table = markdown_table(summary, deltas)

    print(table)

    if args.out:
        os.makedirs(args.out, exist_ok=True)

        with open(os.path.join(args.out, 'analysis.md'), 'w', encoding='utf-8') as f:
            f.write(table)

        with open(os.path.join(args.out, 'analysis.json'), 'w', encoding='utf-8') as f:
            f.write(json.dumps({'summary': summary, 'comparison': deltas, 'reports': list(args.reports)},
                               indent=2, sort_keys=True))
            f.write("\n")

        if args.plot:
            _plot(reports, args)

    return {'summary': summary, 'comparison': deltas}

def _plot(reports, args):
    plotter = Plotter()
    labels = []
    rsds = []

    for path, report in zip(args.reports, reports):
        run_name = os.path.basename(os.path.normpath(path if os.path.isdir(path) else os.path.dirname(path) or '.'))
        label = f"{report.get('train_mode') or report.get('policy')}:{run_name}"
        labels.append(label)
        rsds.append(report['rsd_mean'])
        plotter.plot_icl_curve(report, label)

    for log_path in args.logs or []:
        plotter.plot_losses(read_log(log_path), os.path.basename(os.path.dirname(log_path)))

    plotter.plot_rsd_bars(labels, rsds)

    for path in args.norms or []:
        trace = np.loadtxt(path, delimiter=',', skiprows=1, usecols=(0, 2))
        first_env = trace[trace[:, 0] == 0][:, 1]
        plotter.plot_norm_trace(first_env, os.path.basename(os.path.dirname(path)))

    out = os.path.join(args.out, 'analysis.png')
    plotter.save(out)
    print(f"Saved {out}")

def cmd_selfcheck(args):
    """run the invariant suites; any failure exits with code 5"""

    start = time.perf_counter()
    passed, results = run_selfcheck(args.suite)

    print(f"selfcheck finished in {to_time_str(time.perf_counter() - start)}")

    if not passed:
        failed = [name for name, r in results.items() if not r['passed']]
        raise SelfCheckError(f"failed suites: {', '.join(failed)}")

    return results

def make_parser():
    """argparse parser; global flags are accepted before or after the verb"""

    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument('--config', help="config file (flat key = value with [section] headers)")
    common.add_argument('--seed', type=int, help="overrides seeds.master")
    common.add_argument('--threads', type=int, help="worker processes; 1 gives bit-identical outputs")
    common.add_argument('--force', action='store_true', help="overwrite existing outputs")
    common.add_argument('--precision', choices=('f32', 'f64'), help="float type for tensors and files")
    common.add_argument('--set', action='append', metavar='SECTION.KEY=VALUE', help="override one config value")

    parser = argparse.ArgumentParser(description='Stateful linear-attention navigation: data, training, eval.',
                                     parents=[common])
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('gen-data', parents=[common], help="generate training streams")
    p.add_argument('--out', default=None, help="dataset directory (default paths.data_dir)")
    p.add_argument('--verify', action='store_true', help="re-derive every record after writing")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser('train', parents=[common], help="train a policy")
    p.add_argument('--data', default=None, help="dataset directory (default paths.data_dir)")
    p.add_argument('--out', default=None, help="run directory (default paths.train_dir)")
    p.add_argument('--resume', action='store_true', help="continue from checkpoint_latest.ckpt")
    p.add_argument('--stop-after', type=int, default=None, help="stop after this many optimizer steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('eval', parents=[common], help="evaluate in unseen mazes")
    p.add_argument('--checkpoint', default=None, help="checkpoint file")
    p.add_argument('--policy', choices=('net', 'expert', 'random'), default='net')
    p.add_argument('--data', default=None, help="training dataset, for the overlap check")
    p.add_argument('--out', default=None, help="report directory (default paths.eval_dir)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser('analyze', parents=[common], help="compare eval reports")
    p.add_argument('reports', nargs='+', help="eval_report.json files or eval directories")
    p.add_argument('--out', default=None, help="write analysis.md / analysis.json here")
    p.add_argument('--plot', action='store_true', help="also write analysis.png (needs --out)")
    p.add_argument('--logs', nargs='*', help="train_log.csv files to plot")
    p.add_argument('--norms', nargs='*', help="memory_norms.csv files to plot")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser('selfcheck', parents=[common], help="run the invariant suites")
    p.add_argument('--suite', action='append', choices=tuple(SUITES), help="run only this suite (repeatable)")
    p.set_defaults(func=cmd_selfcheck)

    return parser

def main(argv=None):
    """main entry point, returns the exit code"""

    args = make_parser().parse_args(argv)

    try:
        args.func(args)
    except ConNavError as e:
        fatal(f"{type(e).__name__}: {e}")
        print(json.dumps({'error': type(e).__name__, 'exit_code': e.exit_code, 'message': str(e)}), file=sys.stderr)

        return e.exit_code

    return 0

if __name__ == "__main__":
    sys.exit(main())
