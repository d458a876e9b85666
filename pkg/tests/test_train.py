"""tests for the loss, optimizer, state carryover and the training loop"""

import json
import math
import os

import numpy as np
import pytest

import numerics as nx
from data import SegmentLoader, generate_stream
from networks import forward_segment
from selfcheck import gradient_suite, tiny_policy
from settings import MazeSettings, RunConfig, TrainSettings
from train import (LOG_NAME, SUMMARY_NAME, Adam, SlotStateRegistry, batch_loss, clip_grad_norm, lr_at, nll_loss,
                   read_log, run_training, train_step)
from util import ConfigError, ContractError

SMALL = MazeSettings(width=7, height=7, n_objects=3, window_radius=1)

def _logits(arr):
    return nx.tensor(np.asarray(arr, dtype=np.float64), dtype=np.float64)

def test_uniform_logits_give_log4():
    loss = nll_loss(_logits(np.zeros((2, 3, 4))), np.zeros((2, 3), dtype=int), np.ones((2, 3), dtype=bool))

    assert loss.item() == pytest.approx(1.386294, abs=1e-6)

def test_confident_correct_logits_give_zero():
    experts = np.array([[0, 3, 1]])
    logits = np.zeros((1, 3, 4))
    logits[0, np.arange(3), experts[0]] = 100.0

    assert nll_loss(_logits(logits), experts, np.ones((1, 3), dtype=bool)).item() <= 1e-8

def test_masked_loss_matches_loop():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(3, 5, 4)) * 3
    experts = rng.integers(0, 4, size=(3, 5))
    mask = rng.random((3, 5)) < 0.6
    mask[0, 0] = True

    total = 0.0

    for b in range(3):
        for t in range(5):
            if mask[b, t]:
                row = logits[b, t]
                log_z = np.log(np.sum(np.exp(row - row.max()))) + row.max()
                total -= row[experts[b, t]] - log_z

    expected = total / mask.sum()

    assert abs(nll_loss(_logits(logits), experts, mask).item() - expected) <= 1e-10

def test_loss_errors():
    with pytest.raises(ContractError):
        nll_loss(_logits(np.zeros((1, 2, 4))), np.zeros((1, 2), dtype=int), np.zeros((1, 2), dtype=bool))

    with pytest.raises(ContractError):
        nll_loss(_logits(np.zeros((1, 2, 4))), np.zeros((1, 3), dtype=int), np.ones((1, 3), dtype=bool))

def test_linear_schedule():
    assert lr_at(0, 100, 1e-3) == 1e-3
    assert lr_at(50, 100, 1e-3) == pytest.approx(5e-4)
    assert lr_at(100, 100, 1e-3) == 0.0

    with pytest.raises(ContractError):
        lr_at(101, 100, 1e-3)

    with pytest.raises(ContractError):
        lr_at(0, 0, 1e-3)

def test_first_adam_step_moves_by_lr():
    p = nx.parameter(np.array([1.0, -2.0, 0.5]), np.float64)
    p.grad = np.array([0.3, -4.0, 0.0])
    opt = Adam([p])

    opt.step(0.1)

    assert np.allclose(p.data, [0.9, -1.9, 0.5], atol=1e-6)
    assert opt.state()['step'] == 1

def test_adam_matches_scalar_reference():
    start = [1.0, -2.0, 0.5]
    target = [0.3, 0.1, -1.0]
    scales = [1.0, 4.0, 0.25]
    b1, b2, eps = 0.9, 0.999, 1e-8

    p = nx.parameter(np.array(start), np.float64)
    opt = Adam([p], b1, b2, eps)

    ref = list(start)
    m = [0.0] * 3
    v = [0.0] * 3

    for t in range(1, 9):
        lr = lr_at(t - 1, 8, 0.05)
        p.grad = 2.0 * np.array(scales) * (p.data - np.array(target))
        opt.step(lr)

        for i in range(3):
            g = 2.0 * scales[i] * (ref[i] - target[i])
            m[i] = b1 * m[i] + (1.0 - b1) * g
            v[i] = b2 * v[i] + (1.0 - b2) * g * g
            m_hat = m[i] / (1.0 - b1 ** t)
            v_hat = v[i] / (1.0 - b2 ** t)
            ref[i] -= lr * m_hat / (math.sqrt(v_hat) + eps)

        assert np.max(np.abs(p.data - np.array(ref))) <= 1e-12

    assert opt.t == 8

def test_adam_state_round_trip():
    p = nx.parameter(np.ones(2), np.float64)
    p.grad = np.array([1.0, 2.0])
    opt = Adam([p])
    opt.step(0.01)

    other = Adam([nx.parameter(np.ones(2), np.float64)])
    other.load_state(opt.state())

    assert other.t == 1
    assert np.array_equal(other.m[0], opt.m[0])

def test_clip_grad_norm():
    a = nx.parameter(np.zeros(1), np.float64)
    b = nx.parameter(np.zeros(1), np.float64)
    a.grad = np.array([3.0])
    b.grad = np.array([4.0])

    assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    assert np.allclose([a.grad[0], b.grad[0]], [0.6, 0.8])

    assert clip_grad_norm([a, b], 10.0) == pytest.approx(1.0)
    assert np.allclose([a.grad[0], b.grad[0]], [0.6, 0.8])

def _loader(lengths=(12, 12)):
    streams = [generate_stream(0, i, n, SMALL) for i, n in enumerate(lengths)]
    loader = SegmentLoader(streams, len(lengths), 4)
    loader.start_epoch(0)

    return loader

def _perturbed(batch, rng):
    windows = batch.windows.copy()
    windows[:, :, 1, 1] = rng.integers(1, 5, size=windows.shape[:2])

    return windows

def test_stateless_registry_is_always_zero():
    net = tiny_policy()
    loader = _loader()
    registry = SlotStateRegistry(net, 2, 'stateless')

    for _ in range(2):
        batch = loader.next_batch()
        incoming = registry.incoming(batch)

        assert incoming.is_zero()

        with nx.no_grad():
            _, final = batch_loss(net, batch, incoming)

        registry.store(final, batch)

        assert registry.all_zero()

def test_stateful_registry_carries_detached_values():
    net = tiny_policy()
    loader = _loader()
    registry = SlotStateRegistry(net, 2, 'stateful')

    batch = loader.next_batch()
    assert registry.incoming(batch).is_zero()

    _, final = batch_loss(net, batch, registry.incoming(batch))
    registry.store(final, batch)

    assert not registry.all_zero()
    assert not any(s.has_history() for s in registry.states)

    batch = loader.next_batch()
    incoming = registry.incoming(batch)

    assert np.array_equal(incoming.mats[0].data, final.mats[0].data)

def test_first_batch_losses_match_across_modes():
    net = tiny_policy()
    batch = _loader().next_batch()

    losses = []

    for mode in ('stateful', 'stateless'):
        registry = SlotStateRegistry(net, 2, mode)

        with nx.no_grad():
            loss, _ = batch_loss(net, batch, registry.incoming(batch))

        losses.append(loss.item())

    assert losses[0] == losses[1]

def _second_batch_loss(mode, first_windows):
    net = tiny_policy()
    loader = _loader()
    registry = SlotStateRegistry(net, 2, mode)

    first = loader.next_batch()
    first.windows = first_windows(first)

    with nx.no_grad():
        _, final = batch_loss(net, first, registry.incoming(first))
        registry.store(final, first)
        second = loader.next_batch()
        loss, _ = batch_loss(net, second, registry.incoming(second))

    return loss.item()

def test_stateful_loss_depends_on_previous_batch():
    rng = np.random.default_rng(3)

    def same(batch):
        return batch.windows

    def changed(batch):
        return _perturbed(batch, rng)

    assert _second_batch_loss('stateful', same) != _second_batch_loss('stateful', changed)
    assert _second_batch_loss('stateless', same) == _second_batch_loss('stateless', changed)

def test_truncation_and_gradient_suite():
    passed, details = gradient_suite(seed=1)

    assert passed, details

def test_gradient_stops_at_segment_boundary():
    net = tiny_policy()
    loader = _loader()
    registry = SlotStateRegistry(net, 2, 'stateful')
    first = loader.next_batch()
    _, final = batch_loss(net, first, registry.incoming(first))

    assert final.has_history()

    registry.store(final, first)
    second = loader.next_batch()
    _, end = forward_segment(net, registry.incoming(second), second.windows, second.goals, second.prev_actions,
                             detach_incoming=True)

    assert not registry.states[0].has_history()
    assert end.has_history()

def _step_node_counts(mode):
    net = tiny_policy()
    loader = _loader()
    registry = SlotStateRegistry(net, 2, mode)
    optimizer = Adam(net.parameters())
    settings = TrainSettings()
    counts = []

    while True:
        batch = loader.next_batch()

        if batch is None:
            break

        counts.append(train_step(net, batch, registry, optimizer, settings, 1e-2).node_count)

    return counts

def test_graph_does_not_grow_across_batches():
    stateful = _step_node_counts('stateful')

    assert len(stateful) >= 2 and stateful[0] > 0
    assert len(set(stateful)) == 1

    # carried state adds no nodes from earlier batches
    assert _step_node_counts('stateless') == stateful

def _train_config(mode='stateful', epochs=2):
    config = RunConfig()

    for key, value in SMALL.items():
        config.maze.set(key, value)

    for key, value in dict(d_model=8, n_layers=1, n_heads=2, d_key=4, d_value=4, mlp_ratio=2).items():
        config.model.set(key, value)

    config.data.n_envs = 3
    config.data.stream_length = 12
    config.train.mode = mode
    config.train.slots = 2
    config.train.segment_length = 4
    config.train.epochs = epochs
    config.train.lr = 1e-2
    config.train.print_every = 1000
    config.validate()

    return config

def _train_streams(config):
    return [generate_stream(config.seeds.master, i, config.data.stream_length, config.maze)
            for i in range(config.data.n_envs)]

def test_training_is_deterministic(tmp_path):
    config = _train_config()
    streams = _train_streams(config)

    a = run_training(config, streams, os.path.join(tmp_path, 'a'))
    b = run_training(config, streams, os.path.join(tmp_path, 'b'))

    assert a['param_hash'] == b['param_hash']
    assert a['steps'] == 12
    assert np.isfinite(a['final_loss'])

def test_modes_train_differently(tmp_path):
    stateful = _train_config('stateful')
    stateless = _train_config('stateless')

    a = run_training(stateful, _train_streams(stateful), os.path.join(tmp_path, 'a'))
    b = run_training(stateless, _train_streams(stateless), os.path.join(tmp_path, 'b'))

    assert a['param_hash'] != b['param_hash']

@pytest.mark.parametrize('stop_after', [3, 6, 7])
def test_resume_matches_uninterrupted(tmp_path, stop_after):
    config = _train_config()
    streams = _train_streams(config)
    full = run_training(config, streams, os.path.join(tmp_path, 'full'))

    out = os.path.join(tmp_path, 'resumed')
    stopped = run_training(config, streams, out, stop_after=stop_after)

    assert stopped['stopped'] and stopped['global_step'] == stop_after

    resumed = run_training(config, streams, out, resume=True)

    assert resumed['param_hash'] == full['param_hash']
    assert [int(r['step']) for r in read_log(os.path.join(out, LOG_NAME))] == list(range(12))

def test_resume_errors(tmp_path):
    config = _train_config()
    streams = _train_streams(config)

    with pytest.raises(ConfigError):
        run_training(config, streams, str(tmp_path), resume=True)

    run_training(config, streams, str(tmp_path), stop_after=2)
    other = config.copy()
    other.train.lr = 5e-3

    with pytest.raises(ConfigError):
        run_training(other, streams, str(tmp_path), resume=True)

def test_log_and_summary(tmp_path):
    config = _train_config(epochs=1)
    summary = run_training(config, _train_streams(config), str(tmp_path))
    rows = read_log(os.path.join(tmp_path, LOG_NAME))

    assert len(rows) == 6
    assert {r['epoch'] for r in rows} == {'0'}
    assert float(rows[-1]['lr']) < float(rows[0]['lr'])
    assert len(rows[0]['mem_norms'].split(';')) == 2

    with open(os.path.join(tmp_path, LOG_NAME), 'r', encoding='utf-8') as f:
        assert f.readline().strip() == f"# config_hash={config.hash()}"

    with open(os.path.join(tmp_path, SUMMARY_NAME), 'r', encoding='utf-8') as f:
        assert json.load(f) == summary

def test_loss_drops_on_a_repeated_stream(tmp_path):
    config = _train_config(epochs=30)
    config.data.n_envs = 1
    config.data.stream_length = 8
    config.train.slots = 1
    config.train.segment_length = 8
    config.train.lr = 3e-2
    config.validate()

    summary = run_training(config, _train_streams(config), str(tmp_path))

    assert summary['steps'] == 30
    assert summary['final_loss'] < summary['first_loss']
