"""
The navigation policy: observation encoder, linear-attention decoder blocks and
the action head, plus checkpoint files.

Inputs for a segment are integer arrays: windows (B, T, w, w) of cell categories,
goals (B, T) and previous actions (B, T). Rows are flattened slot-major, so row
b * T + t holds slot b at time t.
"""

import json
import os
import struct
from typing import Dict, List, Optional

import numpy as np
from scipy.stats import truncnorm

import numerics as nx
from numerics import Tensor
from lin_attn import AttentionConfig, LinearAttention, MemoryState, forward_chunk, state_from_bytes, state_to_bytes
from settings import RunConfig
from timerutil import timed
from util import (ByteReader, ConfigError, DataError, DecodeError, VersionError, VocabularyError, pack_text,
                  sha256_hex)

N_ACTIONS = 4
START_TOKEN = 4 # previous action at the start of a stream
ACTION_VOCAB = N_ACTIONS + 1

def cell_vocab_size(n_objects):
    'wall, free, then one category per object id'

    return 2 + n_objects

class ActionDistribution:
    """logits over (North, East, South, West) and their softmax"""

    def __init__(self, logits: Tensor):
        assert logits.shape[-1] == N_ACTIONS, f"action logits have shape {logits.shape}"

        self.logits = logits

    @property
    def probabilities(self) -> np.ndarray:
        'softmax of the logits'

        rows = int(np.prod(self.logits.shape[:-1]))
        flat = nx.reshape(self.logits, (rows, N_ACTIONS))

        with nx.no_grad():
            probs = nx.softmax_rows(flat).data

        return probs.reshape(self.logits.shape)

    def greedy(self) -> np.ndarray:
        'argmax per row, ties to the first index'

        return np.argmax(self.logits.data, axis=-1)

class PolicyNet:
    """pi_theta: embeddings, n_layers pre-norm linear-attention blocks, action head"""

    def __init__(self, d_model, n_layers, n_heads, d_key, d_value, n_objects, window_radius, mlp_ratio=4,
                 feature_map='elu_plus_one', decay_enabled=True, normalized=False, decay_init=3.0,
                 init_std=0.02, seed=0, dtype=None, test_mode=False):

        if min(d_model, n_layers, mlp_ratio, n_objects) < 1 or window_radius < 0:
            raise ConfigError(f"invalid network geometry d_model={d_model}, n_layers={n_layers}, "
                              f"mlp_ratio={mlp_ratio}, n_objects={n_objects}, window_radius={window_radius}")

        self.d_model = d_model
        self.n_layers = n_layers
        self.mlp_ratio = mlp_ratio
        self.n_objects = n_objects
        self.window_radius = window_radius
        self.dtype = np.dtype(nx.Precision.dtype if dtype is None else dtype)
        self.attention = AttentionConfig(n_heads, d_key, d_value, feature_map, decay_enabled, normalized,
                                         decay_init, test_mode)

        rng = np.random.default_rng(seed)
        width = self.window_width
        hk, hv = n_heads * d_key, n_heads * d_value
        hidden = mlp_ratio * d_model

        def normal(*shape):
            vals = truncnorm.rvs(-2.0, 2.0, scale=init_std, size=shape, random_state=rng)
            return nx.parameter(vals, self.dtype)

        def const(value, *shape):
            return nx.parameter(np.full(shape, value), self.dtype)

        self.params: Dict[str, Tensor] = {}
        p = self.params

        p['embed.cell'] = normal(cell_vocab_size(n_objects), d_model)
        p['embed.goal'] = normal(n_objects, d_model)
        p['embed.action'] = normal(ACTION_VOCAB, d_model)
        p['embed.window_proj'] = normal(width * width * d_model, d_model)

        self.cells: List[LinearAttention] = []

        for i in range(n_layers):
            pre = f'blocks.{i}.'
            p[pre + 'norm1'] = const(1.0, d_model)
            p[pre + 'wq'] = normal(d_model, hk)
            p[pre + 'wk'] = normal(d_model, hk)
            p[pre + 'wv'] = normal(d_model, hv)
            p[pre + 'wo'] = normal(hv, d_model)

            cell = LinearAttention(self.attention, self.dtype)

            if cell.decay_logits is not None:
                p[pre + 'decay'] = cell.decay_logits

            self.cells.append(cell)

            p[pre + 'norm2'] = const(1.0, d_model)
            p[pre + 'mlp_in'] = normal(d_model, hidden)
            p[pre + 'mlp_in_bias'] = const(0.0, hidden)
            p[pre + 'mlp_out'] = normal(hidden, d_model)
            p[pre + 'mlp_out_bias'] = const(0.0, d_model)

        p['final_norm'] = const(1.0, d_model)
        p['head'] = normal(d_model, N_ACTIONS)
        p['head_bias'] = const(0.0, N_ACTIONS)

        assert len(self) == parameter_count(d_model, n_layers, n_heads, d_key, d_value, n_objects,
                                            window_radius, mlp_ratio, decay_enabled)

    @classmethod
    def from_config(cls, config: RunConfig, dtype=None) -> 'PolicyNet':
        'build from the model and maze sections'

        m = config.model

        return cls(m.d_model, m.n_layers, m.n_heads, m.d_key, m.d_value, config.maze.n_objects,
                   config.maze.window_radius, m.mlp_ratio, m.feature_map, m.decay_enabled, m.normalized,
                   m.decay_init, m.init_std, config.seeds.init, dtype)

    @property
    def window_width(self):
        'side of the egocentric window'

        return 2 * self.window_radius + 1

    def parameters(self) -> List[Tensor]:
        'parameter tensors in canonical order'

        return list(self.params.values())

    def named_parameters(self):
        'list of (name, Tensor) in canonical order'

        return list(self.params.items())

    def zero_grad(self):
        'clear accumulated gradients'

        for t in self.params.values():
            t.grad = None

    def zero_state(self, batch=1) -> MemoryState:
        'a zero memory state matching this network'

        return MemoryState.zeros(self.attention, self.n_layers, batch, self.dtype)

    def __len__(self):
        return sum(t.data.size for t in self.params.values())

def parameter_count(d_model, n_layers, n_heads, d_key, d_value, n_objects, window_radius, mlp_ratio=4,
                    decay_enabled=True) -> int:
    """closed-form scalar parameter count"""

    d = d_model
    w2 = (2 * window_radius + 1) ** 2
    hidden = mlp_ratio * d

    embed = (cell_vocab_size(n_objects) + n_objects + ACTION_VOCAB) * d + w2 * d * d
    block = 2 * d + 2 * d * n_heads * d_key + 2 * d * n_heads * d_value + d * hidden + hidden + hidden * d + d

    if decay_enabled:
        block += n_heads * d_key

    head = d + d * N_ACTIONS + N_ACTIONS

    return embed + n_layers * block + head

def _linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x @ w (+ b) for a 2-d x"""

    out = nx.matmul(x, w)

    if b is not None:
        bias = nx.expand(nx.reshape(b, (1, b.shape[0])), out.shape)
        out = nx.add(out, bias)

    return out

def _check_vocab(net: PolicyNet, windows, goals, prev_actions):
    n_cells = cell_vocab_size(net.n_objects)

    if windows.size and (windows.min() < 0 or windows.max() >= n_cells):
        bad = windows[(windows < 0) | (windows >= n_cells)][0]
        raise VocabularyError(f"cell category {bad} outside vocabulary of {n_cells}")

    if goals.size and (goals.min() < 0 or goals.max() >= net.n_objects):
        bad = goals[(goals < 0) | (goals >= net.n_objects)][0]
        raise VocabularyError(f"goal id {bad} outside [0, {net.n_objects})")

    if prev_actions.size and (prev_actions.min() < 0 or prev_actions.max() >= ACTION_VOCAB):
        bad = prev_actions[(prev_actions < 0) | (prev_actions >= ACTION_VOCAB)][0]
        raise VocabularyError(f"previous action {bad} outside [0, {ACTION_VOCAB})")

def _encode_rows(net: PolicyNet, windows, goals, prev_actions) -> Tensor:
    """fused inputs x for N rows: windows (N, w, w), goals (N,), prev_actions (N,)"""

    windows = np.asarray(windows)
    goals = np.asarray(goals)
    prev_actions = np.asarray(prev_actions)
    w = net.window_width

    if windows.ndim != 3 or windows.shape[1:] != (w, w):
        raise ConfigError(f"observation windows have shape {windows.shape}, network expects (N, {w}, {w})")

    _check_vocab(net, windows, goals, prev_actions)

    n = windows.shape[0]
    p = net.params

    cells = nx.embedding_lookup(p['embed.cell'], windows.reshape(n, w * w).astype(np.int64))
    x = nx.matmul(nx.reshape(cells, (n, w * w * net.d_model)), p['embed.window_proj'])
    x = nx.add(x, nx.embedding_lookup(p['embed.goal'], goals.reshape(n).astype(np.int64)))
    x = nx.add(x, nx.embedding_lookup(p['embed.action'], prev_actions.reshape(n).astype(np.int64)))

    return x

def encode_observation(net: PolicyNet, window, goal_id, prev_action) -> Tensor:
    """x_t = proj(window cell embeddings) + goal embedding + previous-action embedding, shape (d_model,)"""

    window = np.asarray(window)
    x = _encode_rows(net, window[None], np.array([goal_id]), np.array([prev_action]))

    return nx.reshape(x, (net.d_model,))

def _check_state(net: PolicyNet, state: MemoryState, batch):
    if state.config != net.attention or state.n_layers != net.n_layers:
        raise ConfigError(f"memory state ({state.n_layers} layers, {state.config}) does not match network "
                          f"({net.n_layers} layers, {net.attention})")

    if state.batch != batch:
        raise ConfigError(f"memory state has {state.batch} slots, inputs have {batch}")

    if state.dtype != net.dtype:
        raise ConfigError(f"memory state dtype {state.dtype} differs from network dtype {net.dtype}")

@timed
def forward_segment(net: PolicyNet, state: MemoryState, windows, goals, prev_actions, detach_incoming=False):
    """run T steps for B slots

    windows (B, T, w, w), goals (B, T), prev_actions (B, T)

    returns (logits Tensor (B, T, 4), state')
    """

    windows = np.asarray(windows)
    goals = np.asarray(goals)
    prev_actions = np.asarray(prev_actions)

    if windows.ndim != 4 or goals.shape != windows.shape[:2] or prev_actions.shape != windows.shape[:2]:
        raise ConfigError(f"segment input shapes {windows.shape}, {goals.shape}, {prev_actions.shape} do not align")

    batch, steps = goals.shape

    if steps < 1:
        raise ConfigError("segment length must be >= 1")

    _check_state(net, state, batch)

    cfg = net.attention
    h, dk, dv = cfg.n_heads, cfg.d_key, cfg.d_value
    p = net.params
    w = net.window_width

    x = _encode_rows(net, windows.reshape(batch * steps, w, w), goals.reshape(-1), prev_actions.reshape(-1))

    for i, cell in enumerate(net.cells):
        pre = f'blocks.{i}.'
        n1 = nx.rms_norm(x, p[pre + 'norm1'])

        q = nx.reshape(_linear(n1, p[pre + 'wq']), (batch, steps, h, dk))
        k = nx.reshape(_linear(n1, p[pre + 'wk']), (batch, steps, h, dk))
        v = nx.reshape(_linear(n1, p[pre + 'wv']), (batch, steps, h, dv))

        qs = [nx.select(q, t, axis=1) for t in range(steps)]
        ks = [nx.select(k, t, axis=1) for t in range(steps)]
        vs = [nx.select(v, t, axis=1) for t in range(steps)]

        hs, state = forward_chunk(cell, state, qs, ks, vs, detach_incoming, layer=i)

        att = nx.reshape(nx.stack(hs, axis=1), (batch * steps, h * dv))
        x = nx.add(x, _linear(att, p[pre + 'wo']))

        n2 = nx.rms_norm(x, p[pre + 'norm2'])
        hidden = nx.relu(_linear(n2, p[pre + 'mlp_in'], p[pre + 'mlp_in_bias']))
        x = nx.add(x, _linear(hidden, p[pre + 'mlp_out'], p[pre + 'mlp_out_bias']))

    logits = _linear(nx.rms_norm(x, p['final_norm']), p['head'], p['head_bias'])

    return nx.reshape(logits, (batch, steps, N_ACTIONS)), state

def policy_step(net: PolicyNet, state: MemoryState, window, goal_id, prev_action):
    """one step of the policy

    window is (w, w) for a single slot or (B, w, w) with goal_id / prev_action of length B

    returns (ActionDistribution, state')
    """

    window = np.asarray(window)
    single = window.ndim == 2

    if single:
        windows = window[None, None]
        goals = np.array([[goal_id]])
        prev = np.array([[prev_action]])
    else:
        windows = window[:, None]
        goals = np.asarray(goal_id).reshape(-1, 1)
        prev = np.asarray(prev_action).reshape(-1, 1)

    logits, state = forward_segment(net, state, windows, goals, prev, detach_incoming=False)
    shape = (N_ACTIONS,) if single else (windows.shape[0], N_ACTIONS)

    return ActionDistribution(nx.reshape(logits, shape)), state

def parameter_hash(net: PolicyNet) -> str:
    """sha256 over parameter names, shapes and little-endian values"""

    chunks = []

    for name, t in net.named_parameters():
        chunks.append(f"{name}:{t.shape}:{t.dtype}")
        chunks.append(t.data.astype(t.dtype.newbyteorder('<')).tobytes(order='C'))

    return sha256_hex(*chunks)

CHECKPOINT_MAGIC = b'CONP'
CHECKPOINT_VERSION = 1
DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

class Checkpoint:
    """decoded checkpoint contents"""

    def __init__(self, config: RunConfig, net: PolicyNet, adam_state=None, slot_states=None, progress=None):
        self.config = config
        self.net = net
        self.adam_state = adam_state # {'step': int, 'm': [ndarray], 'v': [ndarray]} in parameter order
        self.slot_states = slot_states # list of MemoryState (batch 1) or None per slot
        self.progress = progress or {}

    @property
    def config_hash(self):
        'hash of the embedded config'

        return self.config.hash()

def _pack_array(arr, dtype):
    return np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder('<')).tobytes()

@timed
def save_checkpoint(path, net: PolicyNet, config: RunConfig, adam_state=None, slot_states=None, progress=None):
    """write a checkpoint (atomically, via a temp file)

    layout: magic, u16 version, u8 dtype code, meta json, named parameters,
    optional adam moments, optional per-slot memory states

    Every float block uses the dtype code: 0 is 32-bit (the default f32 precision),
    1 is 64-bit for f64 runs, which keeps their resume bit-identical.
    """

    meta = {'config': config.to_text(), 'config_hash': config.hash(), 'model_hash': config.model_hash(),
            'param_hash': parameter_hash(net), 'progress': progress or {},
            'has_adam': adam_state is not None, 'has_states': slot_states is not None}

    parts = [CHECKPOINT_MAGIC, struct.pack('<HB', CHECKPOINT_VERSION, DTYPE_CODES[net.dtype]),
             pack_text(json.dumps(meta, sort_keys=True)), struct.pack('<I', len(net.params))]

    for name, t in net.named_parameters():
        raw_name = name.encode('utf-8')
        parts.append(struct.pack(f'<H{len(raw_name)}sB', len(raw_name), raw_name, t.ndim))
        parts.append(struct.pack(f'<{t.ndim}I', *t.shape))
        parts.append(_pack_array(t.data, net.dtype))

    if adam_state is not None:
        parts.append(struct.pack('<Q', adam_state['step']))

        for arr in list(adam_state['m']) + list(adam_state['v']):
            parts.append(_pack_array(arr, net.dtype))

    if slot_states is not None:
        parts.append(struct.pack('<I', len(slot_states)))

        for s in slot_states:
            if s is None:
                parts.append(struct.pack('<B', 0))
            else:
                raw = state_to_bytes(s)
                parts.append(struct.pack('<BQ', 1, len(raw)))
                parts.append(raw)

    tmp_path = f"{path}.tmp"

    with open(tmp_path, 'wb') as f:
        f.write(b''.join(parts))

    os.replace(tmp_path, path)

@timed
def load_checkpoint(path) -> Checkpoint:
    """read a checkpoint written by save_checkpoint"""

    try:
        with open(path, 'rb') as f:
            buf = f.read()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from None

    reader = ByteReader(buf, f"checkpoint {path}")

    if reader.take(4) != CHECKPOINT_MAGIC:
        raise DecodeError(f"{path} is not a checkpoint (bad magic)", 0)

    version, dtype_code = reader.unpack('<HB')

    if version != CHECKPOINT_VERSION:
        raise VersionError(f"checkpoint {path} has format version {version}, expected {CHECKPOINT_VERSION}")

    if dtype_code not in (0, 1):
        raise DecodeError(f"unknown dtype code {dtype_code}", reader.pos - 1)

    dtype = np.dtype(np.float32 if dtype_code == 0 else np.float64)
    meta_pos = reader.pos

    try:
        meta = json.loads(reader.text())
    except json.JSONDecodeError:
        raise DecodeError("checkpoint meta block is not json", meta_pos) from None

    config = RunConfig.from_text(meta['config'])
    net = PolicyNet.from_config(config, dtype)

    (count,) = reader.unpack('<I')

    if count != len(net.params):
        raise DataError(f"checkpoint has {count} parameter tensors, config implies {len(net.params)}")

    for name, t in net.named_parameters():
        (name_len,) = reader.unpack('<H')
        stored_name = reader.take(name_len).decode('utf-8', errors='replace')
        (ndim,) = reader.unpack('<B')
        shape = reader.unpack(f'<{ndim}I')

        if stored_name != name or tuple(shape) != t.shape:
            raise DataError(f"checkpoint tensor {stored_name}{tuple(shape)} does not match {name}{t.shape}")

        t.data = reader.array(dtype, t.data.size).reshape(t.shape)

    adam_state = None

    if meta['has_adam']:
        (step,) = reader.unpack('<Q')
        shapes = [t.shape for t in net.parameters()]
        moments = [reader.array(dtype, int(np.prod(s))).reshape(s) for s in shapes + shapes]
        adam_state = {'step': step, 'm': moments[:len(shapes)], 'v': moments[len(shapes):]}

    slot_states = None

    if meta['has_states']:
        (n_slots,) = reader.unpack('<I')
        slot_states = []

        for _ in range(n_slots):
            (present,) = reader.unpack('<B')

            if not present:
                slot_states.append(None)
                continue

            (size,) = reader.unpack('<Q')
            slot_states.append(state_from_bytes(reader.take(size), net.attention, net.n_layers))

    reader.expect_end()

    if parameter_hash(net) != meta['param_hash']:
        raise DataError(f"checkpoint {path}: parameter hash mismatch (file corrupt)")

    return Checkpoint(config, net, adam_state, slot_states, meta['progress'])
