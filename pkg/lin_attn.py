"""
Kernelized linear attention with an explicit, externally owned memory state

Per head, the memory is the running outer-product sum

    M_t = diag(lam) M_{t-1} + phi(k_t) v_t^T        h_t = phi(q_t)^T M_t

with lam = sigmoid(decay logits) when decay is enabled (lam = 1 otherwise). In
normalized mode a vector z_t accumulates phi(k_t) the same way and h_t is divided
by max(phi(q_t) . z_t, eps).

Tensors carry a leading slot axis: q, k (B, H, d_key), v (B, H, d_value),
M (B, H, d_key, d_value), z (B, H, d_key, 1).
"""

import struct
from typing import List, Optional, Sequence

import numpy as np

import numerics as nx
from numerics import Tensor
from util import ByteReader, ConfigError, ContractError, DataError, DecodeError, DimensionError, NumericError

NORM_EPS = 1e-6
FEATURE_MAPS = ('identity', 'elu_plus_one')

class AttentionConfig:
    """geometry and flags of a linear-attention cell"""

    def __init__(self, n_heads, d_key, d_value, feature_map='elu_plus_one', decay_enabled=True,
                 normalized=False, decay_init=3.0, test_mode=False):

        if min(n_heads, d_key, d_value) < 1:
            raise ConfigError(f"attention dims must be >= 1, got heads={n_heads}, d_key={d_key}, d_value={d_value}")

        if feature_map not in FEATURE_MAPS:
            raise ConfigError(f"unknown feature map '{feature_map}'")

        # identity features can be sign-indefinite; exact hand checks only
        if feature_map == 'identity' and not test_mode:
            raise ConfigError("feature_map=identity is only permitted in test mode")

        self.n_heads = int(n_heads)
        self.d_key = int(d_key)
        self.d_value = int(d_value)
        self.feature_map = feature_map
        self.decay_enabled = bool(decay_enabled)
        self.normalized = bool(normalized)
        self.decay_init = float(decay_init)
        self.test_mode = test_mode

    def __eq__(self, other):
        return isinstance(other, AttentionConfig) and self.echo() == other.echo()

    def echo(self):
        'tuple identifying the geometry and flags'

        return (self.n_heads, self.d_key, self.d_value, self.feature_map, self.decay_enabled, self.normalized)

    def __str__(self):
        return (f"AttentionConfig(heads={self.n_heads}, d_key={self.d_key}, d_value={self.d_value}, "
                f"phi={self.feature_map}, decay={self.decay_enabled}, normalized={self.normalized})")

class MemoryState:
    """persistent recurrent state: per layer M (and z), per layer step count

    Instances are treated as immutable; step and forward_chunk return new ones.
    """

    def __init__(self, config: AttentionConfig, mats: List[Tensor], norms: Optional[List[Tensor]],
                 step_counts: List[int]):

        assert len(mats) == len(step_counts)
        assert (norms is None) == (not config.normalized)

        self.config = config
        self.mats = list(mats)
        self.norms = None if norms is None else list(norms)
        self.step_counts = list(step_counts)

    @staticmethod
    def zeros(config: AttentionConfig, n_layers=1, batch=1, dtype=None) -> 'MemoryState':
        'zero-initialized state'

        h, dk, dv = config.n_heads, config.d_key, config.d_value
        mats = [nx.zeros((batch, h, dk, dv), dtype) for _ in range(n_layers)]
        norms = [nx.zeros((batch, h, dk, 1), dtype) for _ in range(n_layers)] if config.normalized else None

        return MemoryState(config, mats, norms, [0] * n_layers)

    @property
    def n_layers(self):
        'number of layers'

        return len(self.mats)

    @property
    def batch(self):
        'number of slots'

        return self.mats[0].shape[0]

    @property
    def dtype(self):
        'float type of the state'

        return self.mats[0].dtype

    def norm(self, layer):
        'z tensor of a layer, or None'

        return None if self.norms is None else self.norms[layer]

    def replace_layer(self, layer, mat, norm, step_count) -> 'MemoryState':
        'copy with one layer replaced'

        mats = list(self.mats)
        mats[layer] = mat
        norms = None

        if self.norms is not None:
            norms = list(self.norms)
            norms[layer] = norm

        counts = list(self.step_counts)
        counts[layer] = step_count

        return MemoryState(self.config, mats, norms, counts)

    def detached(self) -> 'MemoryState':
        'values only, no gradient history'

        norms = None if self.norms is None else [nx.detach(z) for z in self.norms]

        return MemoryState(self.config, [nx.detach(m) for m in self.mats], norms, self.step_counts)

    def has_history(self):
        'does any tensor still link to a graph'

        tensors = self.mats + (self.norms or [])

        return any(t.requires_grad or t.parents for t in tensors)

    def is_zero(self):
        'all entries exactly zero'

        tensors = self.mats + (self.norms or [])

        return all(not t.data.any() for t in tensors)

    def frobenius_norms(self) -> np.ndarray:
        """per-slot Frobenius norm of the full state (all layers, heads; M only)"""

        sq = np.zeros(self.batch, dtype=np.float64)

        for m in self.mats:
            sq += (m.data.astype(np.float64) ** 2).reshape(self.batch, -1).sum(axis=1)

        return np.sqrt(sq)

    def head_norm_sums(self) -> np.ndarray:
        """per-slot sum over (layer, head) of each head's Frobenius norm"""

        rv = np.zeros(self.batch, dtype=np.float64)

        for m in self.mats:
            per_head = np.sqrt((m.data.astype(np.float64) ** 2).sum(axis=(2, 3)))
            rv += per_head.sum(axis=1)

        return rv

    def split(self) -> List['MemoryState']:
        'one single-slot state per slot (values only)'

        rv = []

        for b in range(self.batch):
            mats = [nx.Tensor(m.data[b:b+1].copy()) for m in self.mats]
            norms = None if self.norms is None else [nx.Tensor(z.data[b:b+1].copy()) for z in self.norms]
            rv.append(MemoryState(self.config, mats, norms, self.step_counts))

        return rv

    @staticmethod
    def stack(states: Sequence['MemoryState']) -> 'MemoryState':
        'join single-slot states along the slot axis (values only)'

        assert states, "stack of no states"
        first = states[0]
        mats = []
        norms = [] if first.norms is not None else None

        for layer in range(first.n_layers):
            mats.append(nx.Tensor(np.concatenate([s.mats[layer].data for s in states], axis=0)))

            if norms is not None:
                norms.append(nx.Tensor(np.concatenate([s.norms[layer].data for s in states], axis=0)))

        counts = [max(s.step_counts[layer] for s in states) for layer in range(first.n_layers)]

        return MemoryState(first.config, mats, norms, counts)

class LinearAttention:
    """the recurrent cell; owns only the decay gate logits"""

    def __init__(self, config: AttentionConfig, dtype=None):
        self.config = config
        self.decay_logits = None

        if config.decay_enabled:
            self.decay_logits = nx.parameter(np.full((config.n_heads, config.d_key), config.decay_init), dtype)

    def parameters(self):
        'name -> Tensor'

        return {} if self.decay_logits is None else {'decay': self.decay_logits}

    def decay(self) -> Optional[Tensor]:
        'lam in (0, 1), shape (H, d_key), or None without decay'

        return None if self.decay_logits is None else nx.sigmoid(self.decay_logits)

def feature_map(x: Tensor, kind: str) -> Tensor:
    """phi: identity, or elu(x) + 1 (strictly positive)"""

    if kind == 'identity':
        return x

    assert kind == 'elu_plus_one', f"unknown feature map {kind}"

    return nx.shift(nx.elu(x), 1.0)

def _check_qkv(config, batch, q, k, v):
    h, dk, dv = config.n_heads, config.d_key, config.d_value

    for name, t, width in (('q', q, dk), ('k', k, dk), ('v', v, dv)):
        if t.shape != (batch, h, width):
            raise DimensionError(f"{name} has shape {t.shape}, expected {(batch, h, width)}", op='lin_attn')

def _decay_factors(cell, batch):
    """lam expanded to M's and z's shapes (computed once per chunk)"""

    lam = cell.decay()

    if lam is None:
        return None, None

    cfg = cell.config
    col = nx.reshape(lam, (1, cfg.n_heads, cfg.d_key, 1))
    decay_m = nx.expand(col, (batch, cfg.n_heads, cfg.d_key, cfg.d_value))
    decay_z = nx.expand(col, (batch, cfg.n_heads, cfg.d_key, 1)) if cfg.normalized else None

    return decay_m, decay_z

def _advance(cfg, m, z, q, k, v, decay_m, decay_z, layer):
    """one recurrence step on a layer's tensors, returns h, m, z"""

    batch = m.shape[0]
    h_, dk, dv = cfg.n_heads, cfg.d_key, cfg.d_value

    try:
        phi_q = feature_map(q, cfg.feature_map)
        phi_k = feature_map(k, cfg.feature_map)

        k_col = nx.reshape(phi_k, (batch, h_, dk, 1))
        outer = nx.matmul(k_col, nx.reshape(v, (batch, h_, 1, dv)))
        m = nx.add(nx.mul(decay_m, m) if decay_m is not None else m, outer)

        q_row = nx.reshape(phi_q, (batch, h_, 1, dk))
        h = nx.reshape(nx.matmul(q_row, m), (batch, h_, dv))

        if cfg.normalized:
            z = nx.add(nx.mul(decay_z, z) if decay_z is not None else z, k_col)
            denom = nx.clamp_min(nx.reshape(nx.matmul(q_row, z), (batch, h_, 1)), NORM_EPS)
            h = nx.mul(h, nx.expand(nx.reciprocal(denom), (batch, h_, dv)))
    except DimensionError:
        raise
    except NumericError as e:
        head = e.index[1] if e.index is not None and len(e.index) > 1 else '?'
        raise NumericError(f"linear attention layer {layer}, head {head}: {e}", op=e.op, index=e.index,
                           shape=e.shape) from None

    return h, m, z

def step(cell: LinearAttention, state: MemoryState, q: Tensor, k: Tensor, v: Tensor, layer=0):
    """advance one layer of the state by one time step

    returns (h, state')
    """

    if state.config != cell.config:
        raise ConfigError(f"state config {state.config} does not match cell {cell.config}")

    _check_qkv(cell.config, state.batch, q, k, v)
    decay_m, decay_z = _decay_factors(cell, state.batch)
    h, m, z = _advance(cell.config, state.mats[layer], state.norm(layer), q, k, v, decay_m, decay_z, layer)

    return h, state.replace_layer(layer, m, z, state.step_counts[layer] + 1)

def forward_chunk(cell: LinearAttention, state: MemoryState, qs: Sequence[Tensor], ks: Sequence[Tensor],
                  vs: Sequence[Tensor], detach_incoming: bool, layer=0):
    """T applications of step over one layer

    With detach_incoming the incoming state enters as a detached leaf, so the
    chunk's loss sends no gradient into whatever produced it. The returned state
    is live (still on the graph); the caller detaches it at the next boundary.

    returns (list of h, state')
    """

    if len(qs) < 1 or not len(qs) == len(ks) == len(vs):
        raise ContractError(f"forward_chunk needs T >= 1 equal-length sequences, got {len(qs)}, {len(ks)}, {len(vs)}")

    if state.config != cell.config:
        raise ConfigError(f"state config {state.config} does not match cell {cell.config}")

    m = state.mats[layer]
    z = state.norm(layer)

    if detach_incoming:
        m = nx.detach(m)
        z = None if z is None else nx.detach(z)

    decay_m, decay_z = _decay_factors(cell, state.batch)
    hs = []

    for q, k, v in zip(qs, ks, vs):
        _check_qkv(cell.config, state.batch, q, k, v)
        h, m, z = _advance(cell.config, m, z, q, k, v, decay_m, decay_z, layer)
        hs.append(h)

    return hs, state.replace_layer(layer, m, z, state.step_counts[layer] + len(qs))

STATE_MAGIC = b'MEMS'
FEATURE_IDS = {name: i for i, name in enumerate(FEATURE_MAPS)}
DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

def state_to_bytes(state: MemoryState) -> bytes:
    """serialize: config echo, step counts, then layer-major, slot, head-major, row-major floats

    Floats are 32-bit under the default f32 precision. An f64 run writes 64-bit
    floats instead; the dtype code byte after the feature id records which.
    """

    cfg = state.config
    flags = (1 if cfg.decay_enabled else 0) | (2 if cfg.normalized else 0)
    dtype = np.dtype(state.dtype)
    code = DTYPE_CODES[dtype]
    little = dtype.newbyteorder('<')

    parts = [STATE_MAGIC,
             struct.pack('<HHHHBBBI', state.n_layers, cfg.n_heads, cfg.d_key, cfg.d_value, flags,
                         FEATURE_IDS[cfg.feature_map], code, state.batch),
             struct.pack(f'<{state.n_layers}Q', *state.step_counts)]

    for layer in range(state.n_layers):
        parts.append(state.mats[layer].data.astype(little).tobytes(order='C'))

        if state.norms is not None:
            parts.append(state.norms[layer].data.astype(little).tobytes(order='C'))

    return b''.join(parts)

def state_from_bytes(buf: bytes, config: AttentionConfig, n_layers: int) -> MemoryState:
    """inverse of state_to_bytes; the echoed config must match"""

    reader = ByteReader(buf, 'memory state')

    if reader.take(4) != STATE_MAGIC:
        raise DecodeError("bad memory state magic", 0)

    layers, heads, dk, dv, flags, feat, code, batch = reader.unpack('<HHHHBBBI')
    feature = FEATURE_MAPS[feat] if feat < len(FEATURE_MAPS) else '?'
    echo = (heads, dk, dv, feature, bool(flags & 1), bool(flags & 2))

    if layers != n_layers or echo != config.echo():
        raise DataError(f"memory state echo {layers} layers, {echo} does not match {n_layers} layers, {config.echo()}")

    if code not in (0, 1):
        raise DecodeError(f"unknown memory state dtype code {code}", reader.pos - 5)

    dtype = np.float32 if code == 0 else np.float64
    counts = list(reader.unpack(f'<{layers}Q'))
    mats = []
    norms = [] if config.normalized else None

    for _ in range(layers):
        mat_shape = (batch, heads, dk, dv)
        mats.append(nx.Tensor(reader.array(dtype, np.prod(mat_shape)).reshape(mat_shape)))

        if norms is not None:
            z_shape = (batch, heads, dk, 1)
            norms.append(nx.Tensor(reader.array(dtype, np.prod(z_shape)).reshape(z_shape)))

    reader.expect_end()

    return MemoryState(config, mats, norms, counts)
