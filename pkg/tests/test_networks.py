"""tests for the policy network and checkpoints"""

import os

import numpy as np
import pytest

import numerics as nx
from networks import (PolicyNet, encode_observation, forward_segment, load_checkpoint, parameter_count,
                      parameter_hash, policy_step, save_checkpoint)
from selfcheck import policy_gradient_error, random_segment, tiny_policy
from settings import RunConfig
from util import ConfigError, DataError, DecodeError, VersionError, VocabularyError

def _config(**model):
    config = RunConfig()
    config.maze.n_objects = 3
    config.maze.window_radius = 1

    for key, value in dict(d_model=8, n_layers=2, n_heads=2, d_key=4, d_value=4, mlp_ratio=2, **model).items():
        config.model.set(key, value)

    return config

def test_parameter_count_matches_construction():
    rng = np.random.default_rng(0)

    for _ in range(5):
        kwargs = dict(d_model=int(rng.integers(2, 10)), n_layers=int(rng.integers(1, 4)),
                      n_heads=int(rng.integers(1, 4)), d_key=int(rng.integers(1, 6)), d_value=int(rng.integers(1, 6)),
                      n_objects=int(rng.integers(2, 7)), window_radius=int(rng.integers(0, 3)),
                      mlp_ratio=int(rng.integers(1, 5)), decay_enabled=bool(rng.integers(2)))
        net = PolicyNet(**kwargs, dtype=np.float32)

        assert len(net) == parameter_count(**kwargs)

def test_default_geometry_count():
    config = RunConfig()
    net = PolicyNet.from_config(config, np.float32)

    assert len(net) == parameter_count(128, 4, 4, 32, 32, 6, 2, 4, True)

def test_same_seed_same_weights():
    a = tiny_policy(seed=3)
    b = tiny_policy(seed=3)
    c = tiny_policy(seed=4)

    assert parameter_hash(a) == parameter_hash(b)
    assert parameter_hash(a) != parameter_hash(c)

def test_encode_observation_is_deterministic_and_goal_sensitive():
    net = tiny_policy()
    window = np.ones((3, 3), dtype=np.int64)

    x1 = encode_observation(net, window, 0, 4).data
    x2 = encode_observation(net, window, 0, 4).data
    x3 = encode_observation(net, window, 1, 4).data

    assert x1.shape == (8,)
    assert np.array_equal(x1, x2)
    assert np.abs(x1 - x3).max() > 0

def test_vocabulary_errors():
    net = tiny_policy()
    window = np.ones((3, 3), dtype=np.int64)

    with pytest.raises(VocabularyError):
        encode_observation(net, window, 3, 4)

    with pytest.raises(VocabularyError):
        encode_observation(net, window, 0, 5)

    window[1, 1] = 5 # 2 + n_objects

    with pytest.raises(VocabularyError):
        encode_observation(net, window, 0, 4)

def test_window_shape_mismatch():
    net = tiny_policy()

    with pytest.raises(ConfigError):
        encode_observation(net, np.ones((5, 5), dtype=np.int64), 0, 4)

def test_policy_step_probabilities_sum_to_one():
    net = tiny_policy(dtype=np.float32, init_std=0.02)
    rng = np.random.default_rng(1)
    windows, goals, prev, _ = random_segment(rng, net, 1, 1)

    dist, state = policy_step(net, net.zero_state(1), windows[0, 0], int(goals[0, 0]), int(prev[0, 0]))

    assert abs(dist.probabilities.sum() - 1.0) <= 1e-6
    assert state.step_counts == [1]
    assert 0 <= int(dist.greedy()) < 4

def test_policy_step_is_pure():
    net = tiny_policy()
    rng = np.random.default_rng(2)
    windows, goals, prev, _ = random_segment(rng, net, 1, 3)
    _, state = forward_segment(net, net.zero_state(1), windows, goals, prev)

    d1, s1 = policy_step(net, state, windows[0, 0], int(goals[0, 0]), int(prev[0, 0]))
    d2, s2 = policy_step(net, state, windows[0, 0], int(goals[0, 0]), int(prev[0, 0]))

    assert np.array_equal(d1.logits.data, d2.logits.data)
    assert np.array_equal(s1.mats[0].data, s2.mats[0].data)
    assert state.step_counts == [3]

def test_stepwise_rollout_equals_segment():
    net = tiny_policy(dtype=np.float32, init_std=0.1)
    rng = np.random.default_rng(3)
    windows, goals, prev, _ = random_segment(rng, net, 1, 6)

    with nx.no_grad():
        logits, _ = forward_segment(net, net.zero_state(1), windows, goals, prev)
        state = net.zero_state(1)
        stepwise = []

        for t in range(6):
            dist, state = policy_step(net, state, windows[0, t], int(goals[0, t]), int(prev[0, t]))
            stepwise.append(dist.logits.data)

    assert np.max(np.abs(np.stack(stepwise) - logits.data[0])) <= 1e-5

def test_t1_segment_equals_policy_step():
    net = tiny_policy()
    rng = np.random.default_rng(4)
    windows, goals, prev, _ = random_segment(rng, net, 1, 1)

    logits, _ = forward_segment(net, net.zero_state(1), windows, goals, prev)
    dist, _ = policy_step(net, net.zero_state(1), windows[0, 0], int(goals[0, 0]), int(prev[0, 0]))

    assert np.array_equal(logits.data.reshape(-1), dist.logits.data)

def test_causality():
    net = tiny_policy()
    rng = np.random.default_rng(5)
    windows, goals, prev, _ = random_segment(rng, net, 2, 8)

    base, _ = forward_segment(net, net.zero_state(2), windows, goals, prev)

    goals2 = goals.copy()
    goals2[:, 5] = (goals2[:, 5] + 1) % 3
    changed, _ = forward_segment(net, net.zero_state(2), windows, goals2, prev)

    assert np.array_equal(base.data[:, :5], changed.data[:, :5])
    assert np.abs(base.data[:, 5] - changed.data[:, 5]).max() > 0

def test_chunked_segment_equals_full():
    net = tiny_policy(dtype=np.float32, init_std=0.1)
    rng = np.random.default_rng(6)
    windows, goals, prev, _ = random_segment(rng, net, 2, 8)

    with nx.no_grad():
        full, _ = forward_segment(net, net.zero_state(2), windows, goals, prev)
        a, mid = forward_segment(net, net.zero_state(2), windows[:, :4], goals[:, :4], prev[:, :4])
        b, _ = forward_segment(net, mid, windows[:, 4:], goals[:, 4:], prev[:, 4:], detach_incoming=True)

    chunked = np.concatenate([a.data, b.data], axis=1)

    assert np.max(np.abs(chunked - full.data)) <= 1e-5

def test_slots_are_independent():
    net = tiny_policy()
    rng = np.random.default_rng(7)
    windows, goals, prev, _ = random_segment(rng, net, 2, 4)

    both, _ = forward_segment(net, net.zero_state(2), windows, goals, prev)
    alone, _ = forward_segment(net, net.zero_state(1), windows[1:], goals[1:], prev[1:])

    assert np.max(np.abs(both.data[1] - alone.data[0])) <= 1e-12

def test_state_geometry_mismatch():
    net = tiny_policy()
    other = tiny_policy(n_heads=1)
    rng = np.random.default_rng(8)
    windows, goals, prev, _ = random_segment(rng, net, 1, 2)

    with pytest.raises(ConfigError):
        forward_segment(net, other.zero_state(1), windows, goals, prev)

    with pytest.raises(ConfigError):
        forward_segment(net, net.zero_state(2), windows, goals, prev)

def test_full_policy_gradient_check():
    assert policy_gradient_error(seed=0) <= 1e-4

def test_checkpoint_round_trip(tmp_path):
    config = _config()
    net = PolicyNet.from_config(config, np.float32)
    path = os.path.join(tmp_path, 'net.ckpt')
    rng = np.random.default_rng(9)
    windows, goals, prev, _ = random_segment(rng, net, 2, 3)

    save_checkpoint(path, net, config, progress={'epoch': 1, 'batch': 0, 'global_step': 7})
    ckpt = load_checkpoint(path)

    assert ckpt.config_hash == config.hash()
    assert ckpt.progress['global_step'] == 7
    assert ckpt.adam_state is None and ckpt.slot_states is None
    assert parameter_hash(ckpt.net) == parameter_hash(net)

    with nx.no_grad():
        a, _ = forward_segment(net, net.zero_state(2), windows, goals, prev)
        b, _ = forward_segment(ckpt.net, ckpt.net.zero_state(2), windows, goals, prev)

    assert np.array_equal(a.data, b.data)

def test_checkpoint_with_states_and_moments(tmp_path):
    config = _config(normalized=True)
    net = PolicyNet.from_config(config, np.float64)
    path = os.path.join(tmp_path, 'net.ckpt')
    rng = np.random.default_rng(10)
    windows, goals, prev, _ = random_segment(rng, net, 2, 3)
    _, state = forward_segment(net, net.zero_state(2), windows, goals, prev)
    adam = {'step': 5, 'm': [np.full(p.shape, 0.5) for p in net.parameters()],
            'v': [np.full(p.shape, 0.25) for p in net.parameters()]}

    save_checkpoint(path, net, config, adam, state.split() + [None])
    ckpt = load_checkpoint(path)

    assert ckpt.adam_state['step'] == 5
    assert all(np.all(m == 0.5) for m in ckpt.adam_state['m'])
    assert ckpt.slot_states[2] is None
    assert np.array_equal(ckpt.slot_states[1].mats[1].data, state.mats[1].data[1:2])
    assert np.array_equal(ckpt.slot_states[0].norms[0].data, state.norms[0].data[0:1])

def test_checkpoint_errors(tmp_path):
    config = _config()
    net = PolicyNet.from_config(config, np.float32)
    path = os.path.join(tmp_path, 'net.ckpt')
    save_checkpoint(path, net, config)

    with open(path, 'rb') as f:
        raw = f.read()

    with pytest.raises(DataError):
        load_checkpoint(os.path.join(tmp_path, 'missing.ckpt'))

    bad = os.path.join(tmp_path, 'bad.ckpt')

    with open(bad, 'wb') as f:
        f.write(b'NOPE' + raw[4:])

    with pytest.raises(DecodeError):
        load_checkpoint(bad)

    with open(bad, 'wb') as f:
        f.write(raw[:4] + b'\x09\x00' + raw[6:])

    with pytest.raises(VersionError):
        load_checkpoint(bad)

    with open(bad, 'wb') as f:
        f.write(raw[:-10])

    with pytest.raises(DecodeError):
        load_checkpoint(bad)

@pytest.mark.parametrize('dtype, code', [(np.float32, 0), (np.float64, 1)])
def test_checkpoint_dtype_code(tmp_path, dtype, code):
    config = _config()
    net = PolicyNet.from_config(config, dtype)
    path = os.path.join(tmp_path, 'net.ckpt')
    save_checkpoint(path, net, config)

    with open(path, 'rb') as f:
        raw = f.read()

    assert raw[6] == code # after magic and version
    assert load_checkpoint(path).net.dtype == np.dtype(dtype)
