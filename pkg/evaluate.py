"""
Closed-loop evaluation in unseen mazes

Each eval env runs one stream of at most max_steps steps. Goals are issued
one after another, a task ends on arrival or at the per-task cap, and the next
goal follows immediately. The memory is carried across tasks (continuous) or
zeroed at every task boundary (reset_per_task).
"""

import csv
import json
import os
from typing import List, Optional, Sequence

import numpy as np

import numerics as nx
from maze import MazeEnv, expert_action, generate_maze, next_goal, shortest_path_len, step
from networks import PolicyNet, policy_step
from parallel import run_parallel
from settings import EvalSettings, RunConfig
from timerutil import timed
from util import ContractError, DataError, derive_seed

REPORT_NAME = 'eval_report.json'
ICL_NAME = 'icl_curve.csv'
NORMS_NAME = 'memory_norms.csv'

class TaskResult:
    'one task of an eval stream'

    def __init__(self, env_index, ordinal, goal_id, start_step, steps_used, success, shortest_path, truncated=False):
        self.env_index = env_index
        self.ordinal = ordinal
        self.goal_id = goal_id
        self.start_step = start_step
        self.steps_used = steps_used
        self.success = success
        self.shortest_path = shortest_path
        self.truncated = truncated # ended by the stream limit before the cap

    def to_dict(self):
        'json-ready fields'

        return {'env_index': self.env_index, 'ordinal': self.ordinal, 'goal_id': self.goal_id,
                'start_step': self.start_step, 'steps_used': self.steps_used, 'success': self.success,
                'shortest_path': self.shortest_path, 'truncated': self.truncated}

class Policy:
    """acts in an env; subclasses may keep a memory"""

    def reset_memory(self):
        'forget everything (task boundary in reset_per_task mode)'

    def act(self, env: MazeEnv) -> int:
        'action for the current observation'

        raise NotImplementedError

    def memory_norm(self) -> float:
        'norm of the current memory state'

        return 0.0

class NetPolicy(Policy):
    """greedy argmax over the network's action distribution"""

    def __init__(self, net: PolicyNet, norm_kind='frobenius'):
        assert norm_kind in ('frobenius', 'head_sum'), f"unknown norm {norm_kind}"

        self.net = net
        self.norm_kind = norm_kind
        self.state = net.zero_state(1)

    def reset_memory(self):
        self.state = self.net.zero_state(1)

    def act(self, env: MazeEnv) -> int:
        obs = env.observe()

        with nx.no_grad():
            dist, self.state = policy_step(self.net, self.state, obs.window, obs.goal_id, obs.prev_action)

        return int(dist.greedy())

    def memory_norm(self) -> float:
        if self.norm_kind == 'frobenius':
            return float(self.state.frobenius_norms()[0])

        return float(self.state.head_norm_sums()[0])

class ExpertPolicy(Policy):
    'the BFS oracle as a policy'

    def act(self, env: MazeEnv) -> int:
        return expert_action(env, env.goal)

class RandomPolicy(Policy):
    'uniform over the four moves'

    def __init__(self, seed=0):
        self.rng = np.random.default_rng(seed)

    def act(self, env: MazeEnv) -> int:
        return int(self.rng.integers(4))

def _issue_goal(goal_rng, env: MazeEnv, previous):
    goal = next_goal(goal_rng, env, previous)

    # only after a timeout can the agent stand on the new goal
    while env.agent == env.object_cell(goal):
        goal = next_goal(goal_rng, env, goal)

    return goal

@timed
def rollout(policy: Policy, env: MazeEnv, settings: EvalSettings, goal_rng: np.random.Generator, env_index=0):
    """one CON eval stream

    returns (list of TaskResult, memory-norm trace with one entry per step, taken before acting)
    """

    results: List[TaskResult] = []
    trace = []
    t = 0
    goal = None

    while t < settings.max_steps:
        goal = _issue_goal(goal_rng, env, goal)
        env.set_goal(goal)
        shortest = shortest_path_len(env, env.agent, env.object_cell(goal))

        if settings.state_handling == 'reset_per_task':
            policy.reset_memory()

        start = t
        steps = 0
        success = False

        while steps < settings.task_cap and t < settings.max_steps:
            trace.append(policy.memory_norm())
            outcome = step(env, policy.act(env))
            steps += 1
            t += 1

            if outcome.reached_goal:
                success = True
                break

        truncated = not success and steps < settings.task_cap
        results.append(TaskResult(env_index, len(results), goal, start, steps, success, shortest, truncated))

    return results, np.array(trace, dtype=np.float64)

def success_rate(results: Sequence[TaskResult]) -> float:
    'fraction of tasks that succeeded'

    if not results:
        raise ContractError("success_rate of no results")

    return sum(1 for r in results if r.success) / len(results)

def steps_to_goal(results: Sequence[TaskResult], cap) -> float:
    """mean steps per task; failures count the cap, or the steps available if cut by the stream end"""

    if not results:
        raise ContractError("steps_to_goal of no results")

    total = 0

    for r in results:
        if r.success or r.truncated:
            total += r.steps_used
        else:
            total += cap

    return total / len(results)

def icl_curve(results: Sequence[TaskResult], bucket_width=500, max_steps=5000) -> List[dict]:
    """tasks binned by start step into [0, w), [w, 2w), ... below max_steps

    each bucket: bucket_start, count, success_rate (None when empty)
    """

    assert bucket_width >= 1

    n_buckets = max(1, -(-max_steps // bucket_width))
    counts = np.zeros(n_buckets, dtype=np.int64)
    wins = np.zeros(n_buckets, dtype=np.int64)

    for r in results:
        b = min(r.start_step // bucket_width, n_buckets - 1)
        counts[b] += 1
        wins[b] += int(r.success)

    return [{'bucket_start': i * bucket_width, 'count': int(counts[i]),
             'success_rate': float(wins[i] / counts[i]) if counts[i] else None} for i in range(n_buckets)]

def memory_rsd(trace, burn_in=100, ddof=0) -> float:
    """std / mean of the norm trace after burn_in steps"""

    trace = np.asarray(trace, dtype=np.float64)

    if len(trace) <= burn_in:
        raise ContractError(f"norm trace of length {len(trace)} is not longer than burn-in {burn_in}")

    tail = trace[burn_in:]
    mean = float(np.mean(tail))

    if mean == 0.0:
        raise ContractError("memory_rsd of a zero-mean trace")

    return float(np.std(tail, ddof=ddof)) / mean

def eval_env(config: RunConfig, env_index) -> MazeEnv:
    'the eval maze for an index (reserved seed range)'

    m = config.maze
    seed = derive_seed(config.seeds.eval, env_index, 'eval')

    return generate_maze(seed, m.width, m.height, m.n_objects, m.window_radius, m.loop_fraction)

def make_policy(kind, net: Optional[PolicyNet], settings: EvalSettings, env_index=0, seed=0) -> Policy:
    'net, expert or random'

    if kind == 'net':
        assert net is not None, "net policy needs a network"
        return NetPolicy(net, settings.rsd_norm)

    if kind == 'expert':
        return ExpertPolicy()

    assert kind == 'random', f"unknown policy kind {kind}"

    return RandomPolicy(derive_seed(seed, env_index, 'random_policy'))

def _rollout_worker(args):
    config_text, kind, net, env_index = args
    config = RunConfig.from_text(config_text)
    env = eval_env(config, env_index)
    goal_rng = np.random.default_rng(derive_seed(config.seeds.eval, env_index, 'eval_goal'))
    policy = make_policy(kind, net, config.eval, env_index, config.seeds.eval)

    return rollout(policy, env, config.eval, goal_rng, env_index)

def check_disjoint(config: RunConfig, train_index: dict):
    """eval envs must not coincide with any training env (seed or content hash)"""

    train_seeds = {entry['env_seed'] for entry in train_index['streams']}
    train_hashes = {entry['env_hash'] for entry in train_index['streams']}

    for i in range(config.eval.n_envs):
        seed = derive_seed(config.seeds.eval, i, 'eval')

        if seed in train_seeds or eval_env(config, i).hash() in train_hashes:
            raise DataError(f"eval env {i} (seed {seed}) also appears in the training data")

@timed
def run_evaluation(config: RunConfig, net: Optional[PolicyNet], policy_kind='net', threads=1,
                   train_mode: Optional[str] = None):
    """roll out config.eval.n_envs envs, returns (report dict, per-env norm traces)"""

    jobs = [(config.to_text(), policy_kind, net, i) for i in range(config.eval.n_envs)]
    outputs = run_parallel(_rollout_worker, jobs, threads, label='eval')

    results = [r for env_results, _ in outputs for r in env_results]
    traces = [trace for _, trace in outputs]

    return build_report(config, results, traces, policy_kind, train_mode), traces

def build_report(config: RunConfig, results: List[TaskResult], traces, policy_kind='net',
                 train_mode: Optional[str] = None) -> dict:
    """EvalReport as an ordered dict (stable key order)"""

    ev = config.eval
    rsds = []

    for trace in traces:
        try:
            rsds.append(memory_rsd(trace, ev.rsd_burn_in, ev.rsd_ddof))
        except ContractError:
            rsds.append(None) # too short or all-zero (e.g. stateless policies)

    valid_rsds = [x for x in rsds if x is not None]
    all_norms = np.concatenate([np.asarray(t, dtype=np.float64) for t in traces]) if traces else np.zeros(0)
    optimal = sum(r.shortest_path for r in results if r.success) / max(1, sum(1 for r in results if r.success))

    report = {
        'config_hash': config.hash(),
        'model_hash': config.model_hash(),
        'policy': policy_kind,
        'train_mode': train_mode,
        'eval_seed': config.seeds.eval,
        'n_envs': ev.n_envs,
        'max_steps': ev.max_steps,
        'task_cap': ev.task_cap,
        'state_handling': ev.state_handling,
        'n_tasks': len(results),
        'n_success': sum(1 for r in results if r.success),
        'n_truncated': sum(1 for r in results if r.truncated),
        'success_rate': success_rate(results),
        'steps_to_goal': steps_to_goal(results, ev.task_cap),
        'mean_shortest_path_of_successes': optimal,
        'icl_curve': icl_curve(results, ev.icl_bucket, ev.max_steps),
        'rsd_norm': ev.rsd_norm,
        'rsd_burn_in': ev.rsd_burn_in,
        'rsd_per_env': rsds,
        'rsd_mean': float(np.mean(valid_rsds)) if valid_rsds else None,
        'memory_norm_summary': {
            'mean': float(np.mean(all_norms)) if all_norms.size else None,
            'std': float(np.std(all_norms)) if all_norms.size else None,
            'min': float(np.min(all_norms)) if all_norms.size else None,
            'max': float(np.max(all_norms)) if all_norms.size else None,
        },
        'config': config.to_text(),
        'tasks': [r.to_dict() for r in results],
    }

    return report

def write_report(report: dict, traces, out_dir):
    """eval_report.json, icl_curve.csv and memory_norms.csv"""

    os.makedirs(out_dir, exist_ok=True)

    with open(os.path.join(out_dir, REPORT_NAME), 'w', encoding='utf-8') as f:
        f.write(json.dumps(report, indent=2))
        f.write("\n")

    with open(os.path.join(out_dir, ICL_NAME), 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(['bucket_start', 'count', 'success_rate'])

        for b in report['icl_curve']:
            writer.writerow([b['bucket_start'], b['count'], '' if b['success_rate'] is None else repr(b['success_rate'])])

    with open(os.path.join(out_dir, NORMS_NAME), 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(['env', 'step', 'memory_norm'])

        for env_index, trace in enumerate(traces):
            for t, value in enumerate(trace):
                writer.writerow([env_index, t, repr(float(value))])

def read_report(path) -> dict:
    'load an eval_report.json (file or directory)'

    if os.path.isdir(path):
        path = os.path.join(path, REPORT_NAME)

    try:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except OSError as e:
        raise DataError(f"cannot read eval report {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise DataError(f"eval report {path} is not json: {e}") from None
