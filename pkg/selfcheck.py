"""
Invariant suites run by `cli.py selfcheck`

chunk_equivalence: chunked linear attention with state carryover equals the unsplit pass
gradient: policy gradients match central differences; truncated gradients equal the
    gradients taken with the incoming state held constant
oracle: BFS equals Floyd-Warshall on small mazes; the expert policy is optimal

Each suite returns (passed, details).
"""

import time

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import floyd_warshall
from termcolor import cprint

import numerics as nx
from evaluate import ExpertPolicy, rollout
from lin_attn import AttentionConfig, LinearAttention, MemoryState, forward_chunk, step
from maze import DR, DC, bfs_distances, expert_action, generate_maze
from maze import step as env_step
from networks import PolicyNet, cell_vocab_size, forward_segment
from settings import EvalSettings
from train import nll_loss
from util import to_time_str

CHUNK_TOLERANCES = {np.float32: 1e-5, np.float64: 1e-10}

def _random_cell(rng, dtype):
    decay = bool(rng.integers(2))
    normalized = bool(rng.integers(2))
    feature = 'identity' if not normalized and rng.random() < 0.25 else 'elu_plus_one'

    cfg = AttentionConfig(int(rng.integers(1, 4)), int(rng.integers(1, 7)), int(rng.integers(1, 7)), feature,
                          decay, normalized, test_mode=True)
    cell = LinearAttention(cfg, dtype)

    if cell.decay_logits is not None:
        cell.decay_logits.data[...] = rng.normal(2.0, 1.0, size=cell.decay_logits.shape)

    return cell

def _max_rel_diff(a_list, b_list):
    a = np.concatenate([x.reshape(-1) for x in a_list])
    b = np.concatenate([x.reshape(-1) for x in b_list])

    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))

def chunk_case(rng, dtype):
    """one random (config, split) case, returns the max relative difference"""

    cell = _random_cell(rng, dtype)
    cfg = cell.config
    batch = int(rng.integers(1, 4))
    steps = int(rng.integers(2, 13))
    n_splits = int(rng.integers(1, min(3, steps - 1) + 1))
    splits = sorted(rng.choice(np.arange(1, steps), size=n_splits, replace=False).tolist())
    bounds = [0] + splits + [steps]

    def seq(width):
        return [nx.tensor(rng.normal(size=(batch, cfg.n_heads, width)), dtype=dtype) for _ in range(steps)]

    qs, ks, vs = seq(cfg.d_key), seq(cfg.d_key), seq(cfg.d_value)

    with nx.no_grad():
        zero = MemoryState.zeros(cfg, 1, batch, dtype)
        full_hs, full_state = forward_chunk(cell, zero, qs, ks, vs, detach_incoming=False)

        state = zero
        chunk_hs = []

        for a, b in zip(bounds[:-1], bounds[1:]):
            hs, state = forward_chunk(cell, state, qs[a:b], ks[a:b], vs[a:b], detach_incoming=True)
            chunk_hs += hs

        state_by_step = zero
        step_hs = []

        for q, k, v in zip(qs, ks, vs):
            h, state_by_step = step(cell, state_by_step, q, k, v)
            step_hs.append(h)

    assert state.step_counts == full_state.step_counts == [steps]

    full = [h.data for h in full_hs] + [full_state.mats[0].data]

    return max(_max_rel_diff([h.data for h in chunk_hs] + [state.mats[0].data], full),
               _max_rel_diff([h.data for h in step_hs] + [state_by_step.mats[0].data], full))

def chunk_equivalence_suite(n_cases=50, seed=0):
    """n_cases random cases at each precision"""

    details = {}
    passed = True

    for dtype in (np.float32, np.float64):
        rng = np.random.default_rng(seed)
        worst = max(chunk_case(rng, dtype) for _ in range(n_cases))
        tol = CHUNK_TOLERANCES[dtype]
        name = np.dtype(dtype).name

        details[name] = {'max_rel_diff': worst, 'tolerance': tol, 'cases': n_cases}
        passed = passed and worst <= tol

    return passed, details

def tiny_policy(seed=0, dtype=np.float64, **overrides):
    """a small float64 network whose gradients sit well above difference noise"""

    kwargs = dict(d_model=8, n_layers=1, n_heads=2, d_key=4, d_value=4, n_objects=3, window_radius=1,
                  mlp_ratio=2, init_std=0.5, seed=seed, dtype=dtype)
    kwargs.update(overrides)

    return PolicyNet(**kwargs)

def random_segment(rng, net: PolicyNet, batch, steps):
    """random (windows, goals, prev_actions, expert_actions) for a network's vocabulary"""

    w = net.window_width
    windows = rng.integers(0, cell_vocab_size(net.n_objects), size=(batch, steps, w, w))
    goals = rng.integers(0, net.n_objects, size=(batch, steps))
    prev = rng.integers(0, 5, size=(batch, steps))
    experts = rng.integers(0, 4, size=(batch, steps))

    return windows, goals, prev, experts

def policy_gradient_error(seed=0, steps=3, max_coords=400):
    'max relative error of the full policy loss gradient'

    rng = np.random.default_rng(seed)
    net = tiny_policy(seed)
    windows, goals, prev, experts = random_segment(rng, net, 1, steps)
    mask = np.ones(experts.shape, dtype=bool)

    def fn(_params):
        logits, _ = forward_segment(net, net.zero_state(1), windows, goals, prev)
        return nll_loss(logits, experts, mask)

    return nx.finite_difference_check(fn, net.parameters(), step=1e-5, max_coords=max_coords,
                                      rng=np.random.default_rng(seed), floor=1e-6)

def _grads(net):
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in net.parameters()]

def truncation_gradients(seed=0, steps=4):
    """gradients of the second segment's loss three ways

    returns (truncated, constant incoming state, full BPTT), lists aligned with net.parameters()
    """

    rng = np.random.default_rng(seed)
    net = tiny_policy(seed)
    windows, goals, prev, experts = random_segment(rng, net, 1, 2 * steps)
    mask = np.ones((1, steps), dtype=bool)
    first = slice(0, steps)
    second = slice(steps, 2 * steps)

    _, live = forward_segment(net, net.zero_state(1), windows[:, first], goals[:, first], prev[:, first])

    def second_loss(state, detach_incoming):
        net.zero_grad()
        logits, _ = forward_segment(net, state, windows[:, second], goals[:, second], prev[:, second],
                                    detach_incoming=detach_incoming)
        nx.backward(nll_loss(logits, experts[:, second], mask))

        return _grads(net)

    truncated = second_loss(live, True)
    constant = second_loss(live.split()[0], False)
    full = second_loss(live, False)
    net.zero_grad()

    return truncated, constant, full

def gradient_suite(seed=0, tolerance=1e-4):
    'finite differences plus truncation semantics'

    fd_error = policy_gradient_error(seed)
    truncated, constant, full = truncation_gradients(seed)

    trunc_vs_const = max(float(np.max(np.abs(a - b))) for a, b in zip(truncated, constant))
    trunc_vs_full = max(float(np.max(np.abs(a - b))) for a, b in zip(truncated, full))

    details = {'fd_max_rel_error': fd_error, 'fd_tolerance': tolerance,
               'truncated_vs_constant_state': trunc_vs_const, 'truncated_vs_full_bptt': trunc_vs_full}
    passed = fd_error <= tolerance and trunc_vs_const <= 1e-6 and trunc_vs_full > 1e-8

    return passed, details

def floyd_warshall_distances(free):
    """all-pairs distances over free cells, returns (cell index map, distance matrix)"""

    cells = [tuple(rc) for rc in np.argwhere(free)]
    index = {cell: i for i, cell in enumerate(cells)}
    rows, cols = [], []

    for (r, c), i in index.items():
        for a in range(4):
            j = index.get((r + int(DR[a]), c + int(DC[a])))

            if j is not None:
                rows.append(i)
                cols.append(j)

    n = len(cells)
    adj = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))

    return index, floyd_warshall(adj, directed=True, unweighted=True)

def oracle_case(seed, loop_fraction):
    """BFS vs Floyd-Warshall and expert optimality on one 7x7 maze; returns a list of failures"""

    failures = []
    env = generate_maze(seed, 7, 7, n_objects=3, window_radius=1, loop_fraction=loop_fraction)
    index, fw = floyd_warshall_distances(env.free.astype(bool))

    for (r, c), i in index.items():
        bfs = bfs_distances(env.free, r, c)

        for (r2, c2), j in index.items():
            expected = -1 if np.isinf(fw[i, j]) else int(fw[i, j])

            if bfs[r2, c2] != expected:
                failures.append(f"seed {seed}: bfs {(r, c)}->{(r2, c2)} = {bfs[r2, c2]}, floyd-warshall {expected}")

    for goal in range(env.n_objects):
        dist = env.distance_field(env.object_cell(goal))

        for cell in index:
            if cell == env.object_cell(goal) or dist[cell] < 0:
                continue

            walker = env.copy()
            walker.agent = cell
            env_step(walker, expert_action(walker, goal))

            if dist[walker.agent] != dist[cell] - 1:
                failures.append(f"seed {seed}: expert move from {cell} to goal {goal} does not descend")

    settings = EvalSettings(max_steps=200, task_cap=60)
    results, _ = rollout(ExpertPolicy(), env, settings, np.random.default_rng(seed))

    for r in results:
        if r.truncated:
            continue

        if not r.success or r.steps_used != r.shortest_path:
            failures.append(f"seed {seed}: expert task {r.ordinal} took {r.steps_used} steps, shortest "
                            f"{r.shortest_path}, success={r.success}")

    return failures

def oracle_suite(n_seeds=20):
    'all mazes up to 7x7, with and without loops'

    failures = []

    for seed in range(n_seeds):
        for loop_fraction in (0.0, 0.3):
            failures += oracle_case(seed, loop_fraction)

    return not failures, {'mazes': 2 * n_seeds, 'failures': failures[:10], 'num_failures': len(failures)}

SUITES = {
    'chunk_equivalence': chunk_equivalence_suite,
    'gradient': gradient_suite,
    'oracle': oracle_suite,
}

def run_selfcheck(names=None):
    """run the named suites (default all), print a line each, returns (all passed, details per suite)"""

    names = list(SUITES) if names is None else names
    rv = {}
    all_passed = True

    for name in names:
        start = time.perf_counter()
        passed, details = SUITES[name]()
        diff = time.perf_counter() - start

        color = 'green' if passed else 'red'
        cprint(f"selfcheck {name}: {'PASS' if passed else 'FAIL'} in {to_time_str(diff)} {details}", color)

        rv[name] = {'passed': passed, 'details': details, 'secs': round(diff, 3)}
        all_passed = all_passed and passed

    return all_passed, rv
