"""tests for stream generation, dataset files and the segment loader"""

import json
import os

import numpy as np
import pytest

from data import (INDEX_NAME, SegmentLoader, build_dataset, dataset_from_bytes, dataset_to_bytes, generate_stream,
                  load_streams, read_dataset, stream_file_name, verify_replay, write_dataset)
from maze import expert_action, step
from networks import START_TOKEN
from settings import MazeSettings, RunConfig
from util import ConfigError, DataError, DecodeError, IntegrityError, VersionError, derive_seed

SMALL = MazeSettings(width=7, height=7, n_objects=3, window_radius=1)

def _stream(env_index=0, length=60, master=0):
    return generate_stream(master, env_index, length, SMALL)

def _small_config(n_envs=3, length=40):
    config = RunConfig()

    for key, value in SMALL.items():
        config.maze.set(key, value)

    config.data.n_envs = n_envs
    config.data.stream_length = length

    return config

def test_stream_is_deterministic():
    assert _stream(2) == _stream(2)
    assert not _stream(2) == _stream(3)

def test_stream_length_and_columns():
    ds = _stream(length=37)

    assert ds.length == 37
    assert np.array_equal(ds.t, np.arange(37))
    assert ds.windows.shape == (37, 3, 3)
    assert ds.prev_actions[0] == START_TOKEN
    assert ds.new_task[0]
    assert ds.env_seed == derive_seed(0, 0, 'train')

def test_task_accounting():
    ds = _stream(length=300)
    reached = int(ds.reached.sum())
    started = int(ds.new_task.sum())

    assert reached >= 1
    assert reached in (started, started - 1)

    # the task after a reached record starts on the next record
    for i in np.flatnonzero(ds.reached)[:-1]:
        assert ds.new_task[i + 1]

def test_goals_never_repeat_back_to_back():
    ds = _stream(length=300)
    starts = np.flatnonzero(ds.new_task)
    goals = ds.goals[starts]

    assert np.all(goals[1:] != goals[:-1])

def test_expert_labels_match_bfs():
    ds = _stream(length=80)
    env = ds.env.copy()
    env.reset()

    for i in range(ds.length):
        env.set_goal(int(ds.goals[i]))
        assert expert_action(env, int(ds.goals[i])) == ds.expert_actions[i]
        step(env, int(ds.expert_actions[i]))

def test_verify_replay_accepts_and_rejects():
    ds = _stream(length=80)
    verify_replay(ds)

    ds.expert_actions[10] = (ds.expert_actions[10] + 1) % 4

    with pytest.raises(IntegrityError):
        verify_replay(ds)

def test_zero_length_is_config_error():
    with pytest.raises(ConfigError):
        generate_stream(0, 0, 0, SMALL)

def test_bytes_round_trip():
    ds = _stream(length=25)

    assert dataset_from_bytes(dataset_to_bytes(ds)) == ds

def test_file_round_trip(tmp_path):
    ds = _stream(length=25)
    path = os.path.join(tmp_path, stream_file_name(0))
    write_dataset(ds, path)

    assert read_dataset(path) == ds

    with pytest.raises(DataError):
        read_dataset(os.path.join(tmp_path, 'missing.cons'))

def test_decode_errors():
    ds = _stream(length=20)
    raw = dataset_to_bytes(ds)
    record_size = (len(raw) - len(dataset_to_bytes(_stream(length=19)))) # one record

    with pytest.raises(DecodeError):
        dataset_from_bytes(b'XXXX' + raw[4:])

    with pytest.raises(VersionError):
        dataset_from_bytes(raw[:4] + b'\x07\x00' + raw[6:])

    with pytest.raises(DecodeError) as e:
        dataset_from_bytes(raw[:-3])

    assert e.value.position == len(raw) - record_size

    with pytest.raises(IntegrityError):
        dataset_from_bytes(raw[:-record_size])

    with pytest.raises(DecodeError):
        dataset_from_bytes(raw[:10])

def test_shuffled_t_is_integrity_error():
    ds = _stream(length=20)
    ds.t = ds.t.copy()
    ds.t[[3, 4]] = ds.t[[4, 3]]

    with pytest.raises(IntegrityError):
        dataset_from_bytes(dataset_to_bytes(ds))

def test_build_dataset_and_reload(tmp_path):
    config = _small_config()
    index = build_dataset(config, str(tmp_path))

    assert len(index['streams']) == 3
    assert index['config_hash'] == config.hash()

    streams = load_streams(str(tmp_path))

    assert [s.env_index for s in streams] == [0, 1, 2]
    assert all(s.length == 40 for s in streams)
    assert streams[1] == generate_stream(0, 1, 40, config.maze)

def test_build_dataset_is_idempotent(tmp_path):
    config = _small_config()
    a = os.path.join(tmp_path, 'a')
    b = os.path.join(tmp_path, 'b')
    build_dataset(config, a)
    build_dataset(config, b)

    for name in (INDEX_NAME, stream_file_name(0), stream_file_name(2)):
        with open(os.path.join(a, name), 'rb') as fa, open(os.path.join(b, name), 'rb') as fb:
            assert fa.read() == fb.read()

def test_tampered_stream_fails_hash_check(tmp_path):
    build_dataset(_small_config(), str(tmp_path))
    path = os.path.join(tmp_path, stream_file_name(1))

    with open(path, 'r+b') as f:
        f.seek(-1, os.SEEK_END)
        f.write(b'\x09')

    with pytest.raises(IntegrityError):
        load_streams(str(tmp_path))

    with open(os.path.join(tmp_path, INDEX_NAME), 'r', encoding='utf-8') as f:
        assert json.load(f)['streams'][1]['file'] == stream_file_name(1)

def _streams(lengths):
    return [generate_stream(0, i, n, SMALL) for i, n in enumerate(lengths)]

def test_segment_longer_than_stream():
    with pytest.raises(ConfigError):
        SegmentLoader(_streams([10, 30]), 2, 11)

def test_slot_affinity_and_coverage():
    streams = _streams([20, 12, 30, 8, 16])
    loader = SegmentLoader(streams, 2, 4, shuffle_seed=5)
    loader.start_epoch(0)

    seen = {i: 0 for i in range(len(streams))}
    last_start = {}
    n_batches = 0

    while True:
        batch = loader.next_batch()

        if batch is None:
            break

        n_batches += 1

        for s in range(batch.slots):
            if not batch.active[s]:
                assert not batch.mask[s].any()
                continue

            stream = int(batch.stream_ids[s])
            start = int(batch.starts[s])

            if batch.fresh[s]:
                assert start == 0
            else:
                assert last_start[s] == (stream, start - 4) # same slot continues the same stream

            last_start[s] = (stream, start)
            n = int(batch.mask[s].sum())
            seen[stream] += n

            assert np.array_equal(batch.expert_actions[s, :n], streams[stream].expert_actions[start:start + n])
            assert np.all(batch.prev_actions[s, n:] == START_TOKEN)

    assert seen == {i: s.length for i, s in enumerate(streams)}
    assert loader.plan(0) == n_batches

def test_first_batch_is_all_fresh():
    loader = SegmentLoader(_streams([8, 8, 8]), 3, 4)
    loader.start_epoch(0)
    batch = loader.next_batch()

    assert batch.fresh.all() and batch.active.all()
    assert not loader.next_batch().fresh.any()

def test_skip_matches_emitted_batches():
    streams = _streams([20, 12, 30, 8])
    loader = SegmentLoader(streams, 2, 4, shuffle_seed=1)
    loader.start_epoch(1)
    batches = []

    for _ in range(5):
        batches.append(loader.next_batch())

    other = SegmentLoader(streams, 2, 4, shuffle_seed=1)
    other.start_epoch(1)
    other.skip(4)
    resumed = other.next_batch()

    assert resumed.index == batches[4].index
    assert np.array_equal(resumed.windows, batches[4].windows)
    assert np.array_equal(resumed.fresh, batches[4].fresh)
    assert np.array_equal(resumed.stream_ids, batches[4].stream_ids)

    with pytest.raises(DataError):
        other.skip(1000)

def test_plan_leaves_state_untouched():
    loader = SegmentLoader(_streams([12, 12]), 1, 4)
    loader.start_epoch(0)
    first = loader.next_batch()
    loader.plan(3)
    second = loader.next_batch()

    assert first.stream_ids[0] == second.stream_ids[0]
    assert second.starts[0] == 4
