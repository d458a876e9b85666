"""
CON stream generation, the on-disk dataset format and the slot-affinity segment loader

A stream is one expert-driven rollout in one persistent maze: goals are issued
one after another and each is revealed only when the previous one is reached.
Records are stored columnar in memory and as fixed-width little-endian rows on disk.
"""

import json
import os
import struct
from typing import List, Optional

import numpy as np

from maze import MazeEnv, expert_action, generate_maze, next_goal, step
from networks import START_TOKEN
from parallel import run_parallel
from settings import MazeSettings, RunConfig
from timerutil import timed
from util import (ByteReader, ConfigError, DataError, DecodeError, IntegrityError, VersionError, derive_seed,
                  sha256_hex)

DATASET_MAGIC = b'CONS'
DATASET_VERSION = 1
INDEX_NAME = 'index.json'

REACHED_FLAG = 1
NEW_TASK_FLAG = 2

def record_dtype(window_radius):
    'fixed-width on-disk record'

    w = 2 * window_radius + 1

    return np.dtype([('t', '<u4'), ('goal', '<u2'), ('prev', 'u1'), ('expert', 'u1'), ('flags', 'u1'),
                     ('window', 'u1', (w, w))])

def stream_file_name(env_index):
    'file name of one stream'

    return f"stream_{env_index:05d}.cons"

class StreamRecord:
    'one step of a stream'

    def __init__(self, t, goal_id, window, prev_action, expert_action_, reached_goal, new_task):
        self.t = t
        self.goal_id = goal_id
        self.window = window
        self.prev_action = prev_action
        self.expert_action = expert_action_
        self.reached_goal = reached_goal
        self.new_task = new_task

class StreamDataset:
    """one stream: header plus L records held as columns"""

    def __init__(self, env: MazeEnv, master_seed, env_index, env_seed, goal_seed, t, goals, windows,
                 prev_actions, expert_actions, flags, version=DATASET_VERSION):
        self.version = version
        self.env = env
        self.master_seed = master_seed
        self.env_index = env_index
        self.env_seed = env_seed
        self.goal_seed = goal_seed
        self.t = t
        self.goals = goals
        self.windows = windows
        self.prev_actions = prev_actions
        self.expert_actions = expert_actions
        self.flags = flags

    @property
    def length(self):
        'number of records L'

        return len(self.t)

    @property
    def window_radius(self):
        'observation radius'

        return self.env.window_radius

    @property
    def n_objects(self):
        'objects in the env'

        return self.env.n_objects

    @property
    def reached(self) -> np.ndarray:
        'bool per record'

        return (self.flags & REACHED_FLAG) != 0

    @property
    def new_task(self) -> np.ndarray:
        'bool per record'

        return (self.flags & NEW_TASK_FLAG) != 0

    def record(self, i) -> StreamRecord:
        'row view'

        return StreamRecord(int(self.t[i]), int(self.goals[i]), self.windows[i], int(self.prev_actions[i]),
                            int(self.expert_actions[i]), bool(self.reached[i]), bool(self.new_task[i]))

    def __eq__(self, other):
        if not isinstance(other, StreamDataset):
            return False

        header = (self.version, self.env.serialize(), self.master_seed, self.env_index, self.env_seed,
                  self.goal_seed, self.window_radius)
        other_header = (other.version, other.env.serialize(), other.master_seed, other.env_index, other.env_seed,
                        other.goal_seed, other.window_radius)

        return header == other_header and all(np.array_equal(a, b) for a, b in zip(self.columns(), other.columns()))

    def columns(self):
        'record columns in canonical order'

        return (self.t, self.goals, self.windows, self.prev_actions, self.expert_actions, self.flags)

@timed
def generate_stream(master_seed, env_index, length, maze: Optional[MazeSettings] = None) -> StreamDataset:
    """expert rollout of exactly length records in the env for (master_seed, env_index)

    The stream is cut at length records even in the middle of a task.
    """

    if length < 1:
        raise ConfigError(f"stream length must be >= 1, got {length}")

    maze = MazeSettings() if maze is None else maze
    env_seed = derive_seed(master_seed, env_index, 'train')
    goal_seed = derive_seed(master_seed, env_index, 'goal')

    env = generate_maze(env_seed, maze.width, maze.height, maze.n_objects, maze.window_radius, maze.loop_fraction)
    header_env = env.copy()
    goal_rng = np.random.default_rng(goal_seed)

    w = 2 * maze.window_radius + 1
    goals = np.zeros(length, dtype=np.uint16)
    windows = np.zeros((length, w, w), dtype=np.uint8)
    prev_actions = np.zeros(length, dtype=np.uint8)
    expert_actions = np.zeros(length, dtype=np.uint8)
    flags = np.zeros(length, dtype=np.uint8)

    goal = next_goal(goal_rng, env, None)
    env.set_goal(goal)
    new_task = True

    for t in range(length):
        obs = env.observe()
        action = expert_action(env, goal)
        outcome = step(env, action)

        goals[t] = goal
        windows[t] = obs.window
        prev_actions[t] = obs.prev_action
        expert_actions[t] = action
        flags[t] = (REACHED_FLAG if outcome.reached_goal else 0) | (NEW_TASK_FLAG if new_task else 0)
        new_task = False

        if outcome.reached_goal:
            goal = next_goal(goal_rng, env, goal)
            env.set_goal(goal)
            new_task = True

    t_col = np.arange(length, dtype=np.uint32)

    return StreamDataset(header_env, master_seed, env_index, env_seed, goal_seed, t_col, goals, windows,
                         prev_actions, expert_actions, flags)

def dataset_to_bytes(ds: StreamDataset) -> bytes:
    """magic, u16 version, header block, then L fixed-width records"""

    env_bytes = ds.env.serialize()
    header = np.array([(ds.length, ds.window_radius, ds.n_objects, ds.master_seed, ds.env_index, ds.env_seed,
                        ds.goal_seed)],
                      dtype=[('length', '<u4'), ('radius', '<u2'), ('n_objects', '<u2'), ('master', '<u8'),
                             ('env_index', '<u8'), ('env_seed', '<u8'), ('goal_seed', '<u8')])

    records = np.zeros(ds.length, dtype=record_dtype(ds.window_radius))
    records['t'] = ds.t
    records['goal'] = ds.goals
    records['prev'] = ds.prev_actions
    records['expert'] = ds.expert_actions
    records['flags'] = ds.flags
    records['window'] = ds.windows

    return b''.join([DATASET_MAGIC, np.array([DATASET_VERSION], dtype='<u2').tobytes(),
                     np.array([len(env_bytes)], dtype='<u4').tobytes(), env_bytes, header.tobytes(),
                     records.tobytes()])

def dataset_from_bytes(buf: bytes, what='dataset') -> StreamDataset:
    """decode; framing errors report the byte offset"""

    reader = ByteReader(buf, what)

    if reader.take(4) != DATASET_MAGIC:
        raise DecodeError(f"{what}: bad magic", 0)

    (version,) = reader.unpack('<H')

    if version != DATASET_VERSION:
        raise VersionError(f"{what}: format version {version}, expected {DATASET_VERSION}")

    (env_len,) = reader.unpack('<I')
    env_pos = reader.pos
    env_bytes = reader.take(env_len)
    length, radius, n_objects, master, env_index, env_seed, goal_seed = reader.unpack('<IHHQQQQ')

    try:
        env = MazeEnv.deserialize(env_bytes, radius)
    except (struct.error, ValueError) as e:
        raise DecodeError(f"{what}: corrupt env block ({e})", env_pos) from None

    if env.n_objects != n_objects:
        raise IntegrityError(f"{what}: header says {n_objects} objects, env block has {env.n_objects}")

    dtype = record_dtype(radius)
    body = len(buf) - reader.pos
    whole, partial = divmod(body, dtype.itemsize)

    if partial:
        raise DecodeError(f"{what}: truncated record {whole} ({partial} of {dtype.itemsize} bytes)",
                          reader.pos + whole * dtype.itemsize)

    if whole != length:
        raise IntegrityError(f"{what}: header length {length} but {whole} records")

    records = np.frombuffer(reader.take(body), dtype=dtype)

    if not np.array_equal(records['t'], np.arange(length)):
        bad = int(np.argmax(records['t'] != np.arange(length)))
        raise IntegrityError(f"{what}: record {bad} has t={records['t'][bad]}, expected {bad}")

    return StreamDataset(env, master, env_index, env_seed, goal_seed, records['t'].astype(np.uint32),
                         records['goal'].astype(np.uint16), records['window'].astype(np.uint8),
                         records['prev'].astype(np.uint8), records['expert'].astype(np.uint8),
                         records['flags'].astype(np.uint8), version)

def write_dataset(ds: StreamDataset, path):
    'write one stream file'

    with open(path, 'wb') as f:
        f.write(dataset_to_bytes(ds))

def read_dataset(path) -> StreamDataset:
    'read one stream file'

    try:
        with open(path, 'rb') as f:
            buf = f.read()
    except OSError as e:
        raise DataError(f"cannot read dataset {path}: {e}") from None

    return dataset_from_bytes(buf, str(path))

def verify_replay(ds: StreamDataset):
    """replay the env from the header with the recorded actions

    every observation, expert action and flag must re-derive exactly
    """

    env = ds.env.copy()
    env.reset()

    for i in range(ds.length):
        rec = ds.record(i)

        if rec.new_task:
            env.set_goal(rec.goal_id)
        elif env.goal != rec.goal_id:
            raise IntegrityError(f"record {i}: goal changed to {rec.goal_id} without a new_task flag")

        obs = env.observe()

        if not np.array_equal(obs.window, rec.window) or obs.prev_action != rec.prev_action:
            raise IntegrityError(f"record {i}: replayed observation differs from the stored one")

        if expert_action(env, rec.goal_id) != rec.expert_action:
            raise IntegrityError(f"record {i}: stored expert action {rec.expert_action} is not the BFS action")

        if step(env, rec.expert_action).reached_goal != rec.reached_goal:
            raise IntegrityError(f"record {i}: reached_goal flag does not replay")

def _generate_stream_worker(args):
    master_seed, env_index, length, maze_items = args

    return generate_stream(master_seed, env_index, length, MazeSettings(**dict(maze_items)))

@timed
def build_dataset(config: RunConfig, out_dir, threads=1) -> dict:
    """generate config.data.n_envs streams into out_dir, write the index, return it"""

    os.makedirs(out_dir, exist_ok=True)
    maze_items = tuple(config.maze.items())
    jobs = [(config.seeds.master, i, config.data.stream_length, maze_items) for i in range(config.data.n_envs)]

    datasets = run_parallel(_generate_stream_worker, jobs, threads, label='gen-data')
    entries = []

    for ds in datasets:
        name = stream_file_name(ds.env_index)
        raw = dataset_to_bytes(ds)

        with open(os.path.join(out_dir, name), 'wb') as f:
            f.write(raw)

        entries.append({'file': name, 'env_index': ds.env_index, 'env_seed': ds.env_seed, 'length': ds.length,
                        'env_hash': ds.env.hash(), 'sha256': sha256_hex(raw)})

    index = {'version': DATASET_VERSION, 'config_hash': config.hash(), 'config': config.to_text(),
             'streams': entries}

    with open(os.path.join(out_dir, INDEX_NAME), 'w', encoding='utf-8') as f:
        f.write(json.dumps(index, indent=2, sort_keys=True))
        f.write("\n")

    return index

def read_index(data_dir) -> dict:
    'load index.json'

    path = os.path.join(data_dir, INDEX_NAME)

    try:
        with open(path, 'r', encoding='utf-8') as f:
            text = f.read()
    except OSError as e:
        raise DataError(f"cannot read dataset index {path}: {e}") from None

    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise DecodeError(f"dataset index {path} is not json: {e}", e.pos) from None

def load_streams(data_dir, check_hashes=True) -> List[StreamDataset]:
    'read every stream listed in the index'

    index = read_index(data_dir)
    rv = []

    for entry in index['streams']:
        path = os.path.join(data_dir, entry['file'])

        try:
            with open(path, 'rb') as f:
                raw = f.read()
        except OSError as e:
            raise DataError(f"cannot read dataset {path}: {e}") from None

        if check_hashes and sha256_hex(raw) != entry['sha256']:
            raise IntegrityError(f"{path}: content hash differs from the index")

        ds = dataset_from_bytes(raw, path)

        if ds.length != entry['length']:
            raise IntegrityError(f"{path}: {ds.length} records, index says {entry['length']}")

        rv.append(ds)

    return rv

class SegmentBatch:
    """B slots, each with T consecutive records of its own stream

    mask marks real records (padding is False). fresh marks slots that just
    started a new stream. active is False for slots with no stream left.
    """

    def __init__(self, index, windows, goals, prev_actions, expert_actions, mask, fresh, active, stream_ids,
                 starts):
        self.index = index
        self.slot_ids = list(range(len(fresh)))
        self.windows = windows
        self.goals = goals
        self.prev_actions = prev_actions
        self.expert_actions = expert_actions
        self.mask = mask
        self.fresh = fresh
        self.active = active
        self.stream_ids = stream_ids
        self.starts = starts

    @property
    def slots(self):
        'B'

        return len(self.fresh)

    @property
    def segment_length(self):
        'T'

        return self.mask.shape[1]

class SegmentLoader:
    """fixed slot affinity: a slot keeps its stream until the stream is exhausted

    Stream order is a permutation drawn per epoch from the shuffle seed; freed
    slots take the next unassigned stream in slot-id order.
    """

    def __init__(self, streams: List[StreamDataset], slots, segment_length, shuffle_seed=0):
        if not streams:
            raise ConfigError("segment loader needs at least one stream")

        if slots < 1 or segment_length < 1:
            raise ConfigError(f"slots and segment length must be >= 1, got {slots}, {segment_length}")

        shortest = min(s.length for s in streams)

        if segment_length > shortest:
            raise ConfigError(f"segment length T={segment_length} exceeds stream length L={shortest}")

        radii = {s.window_radius for s in streams}
        assert len(radii) == 1, f"streams mix window radii {radii}"

        self.streams = streams
        self.slots = slots
        self.segment_length = segment_length
        self.shuffle_seed = shuffle_seed
        self.width = 2 * radii.pop() + 1

        self.epoch = -1
        self.order: List[int] = []
        self.next_stream = 0
        self.assigned: List[Optional[int]] = []
        self.positions: List[int] = []
        self.batches_emitted = 0

    def start_epoch(self, epoch):
        'reset all slots and draw the stream order for this epoch'

        rng = np.random.default_rng(derive_seed(self.shuffle_seed, epoch, 'shuffle'))
        self.epoch = epoch
        self.order = [int(i) for i in rng.permutation(len(self.streams))]
        self.next_stream = 0
        self.assigned = [None] * self.slots
        self.positions = [0] * self.slots
        self.batches_emitted = 0

    def _advance_slots(self):
        """assign streams to free slots; returns fresh flags, or None at epoch end"""

        fresh = np.zeros(self.slots, dtype=bool)

        for s in range(self.slots):
            stream = self.assigned[s]

            if stream is not None and self.positions[s] >= self.streams[stream].length:
                self.assigned[s] = stream = None

            if stream is None and self.next_stream < len(self.order):
                self.assigned[s] = self.order[self.next_stream]
                self.positions[s] = 0
                self.next_stream += 1
                fresh[s] = True

        if all(a is None for a in self.assigned):
            return None

        return fresh

    def next_batch(self) -> Optional[SegmentBatch]:
        """the next SegmentBatch of the epoch, or None when every stream is consumed"""

        assert self.epoch >= 0, "call start_epoch() first"

        fresh = self._advance_slots()

        if fresh is None:
            return None

        b, t_len, w = self.slots, self.segment_length, self.width
        windows = np.zeros((b, t_len, w, w), dtype=np.uint8)
        goals = np.zeros((b, t_len), dtype=np.int64)
        prev_actions = np.full((b, t_len), START_TOKEN, dtype=np.int64)
        expert_actions = np.zeros((b, t_len), dtype=np.int64)
        mask = np.zeros((b, t_len), dtype=bool)
        active = np.zeros(b, dtype=bool)
        stream_ids = np.full(b, -1, dtype=np.int64)
        starts = np.full(b, -1, dtype=np.int64)

        for s in range(b):
            stream = self.assigned[s]

            if stream is None:
                continue

            ds = self.streams[stream]
            lo = self.positions[s]
            hi = min(lo + t_len, ds.length)
            n = hi - lo

            windows[s, :n] = ds.windows[lo:hi]
            goals[s, :n] = ds.goals[lo:hi]
            prev_actions[s, :n] = ds.prev_actions[lo:hi]
            expert_actions[s, :n] = ds.expert_actions[lo:hi]
            mask[s, :n] = True
            active[s] = True
            stream_ids[s] = stream
            starts[s] = lo

            self.positions[s] = hi

        rv = SegmentBatch(self.batches_emitted, windows, goals, prev_actions, expert_actions, mask, fresh, active,
                          stream_ids, starts)
        self.batches_emitted += 1

        return rv

    def _consume_segment(self):
        for s in range(self.slots):
            stream = self.assigned[s]

            if stream is not None:
                self.positions[s] = min(self.positions[s] + self.segment_length, self.streams[stream].length)

        self.batches_emitted += 1

    def skip(self, n):
        'advance n batches without building them (mid-epoch resume)'

        for _ in range(n):
            if self._advance_slots() is None:
                raise DataError(f"cannot skip {n} batches, epoch {self.epoch} has only {self.batches_emitted}")

            self._consume_segment()

    def plan(self, epoch=0) -> int:
        """number of batches in an epoch, without materializing them"""

        saved = (self.epoch, self.order, self.next_stream, list(self.assigned), list(self.positions),
                 self.batches_emitted)
        self.start_epoch(epoch)

        while self._advance_slots() is not None:
            self._consume_segment()

        count = self.batches_emitted
        (self.epoch, self.order, self.next_stream, self.assigned, self.positions, self.batches_emitted) = saved

        return count
