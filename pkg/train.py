"""
Stateful and stateless truncated-BPTT imitation training

stateful: each slot's batch starts from the detached final memory of the same
slot's previous batch (zero when the slot just started a new stream).
stateless: every batch starts from zero memory.
Either way gradients stop at the batch boundary.
"""

import csv
import json
import os
import time
from typing import List, Optional

import numpy as np

import numerics as nx
from numerics import Tensor
from data import SegmentBatch, SegmentLoader, StreamDataset
from lin_attn import MemoryState
from networks import N_ACTIONS, PolicyNet, forward_segment, load_checkpoint, parameter_hash, save_checkpoint
from settings import RunConfig, TrainSettings
from timerutil import Timers, timed
from util import ConfigError, ContractError, NumericError, to_time_str, warn

LATEST_CHECKPOINT = 'checkpoint_latest.ckpt'
FINAL_CHECKPOINT = 'checkpoint_final.ckpt'
LOG_NAME = 'train_log.csv'
SUMMARY_NAME = 'train_summary.json'

LOG_COLUMNS = ['step', 'epoch', 'batch', 'loss', 'lr', 'grad_norm', 'clipped', 'wall_secs', 'mem_norm_mean',
               'mem_norm_max', 'mem_norms']

def nll_loss(logits: Tensor, expert_actions, mask) -> Tensor:
    """mean over unmasked positions of -log softmax(logits)[expert action]

    logits (B, T, 4), expert_actions (B, T) ints, mask (B, T) bools
    """

    expert_actions = np.asarray(expert_actions)
    mask = np.asarray(mask, dtype=bool)

    if logits.shape[:-1] != expert_actions.shape or mask.shape != expert_actions.shape:
        raise ContractError(f"nll_loss shapes differ: logits {logits.shape}, actions {expert_actions.shape}, "
                            f"mask {mask.shape}")

    count = int(mask.sum())

    if count == 0:
        raise ContractError("nll_loss over an all-masked batch")

    rows = expert_actions.size
    weights = np.zeros((rows, N_ACTIONS), dtype=logits.dtype)
    flat_mask = mask.reshape(-1)
    weights[np.arange(rows)[flat_mask], expert_actions.reshape(-1)[flat_mask]] = 1.0 / count

    log_probs = nx.log_softmax_rows(nx.reshape(logits, (rows, N_ACTIONS)))

    return nx.scale(nx.sum(nx.mul(log_probs, nx.Tensor(weights))), -1.0)

def lr_at(step, total_steps, base) -> float:
    """linear decay from base at step 0 to 0 at total_steps"""

    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ContractError(f"lr_at needs 0 <= step <= total_steps, got step={step}, total={total_steps}")

    return base * (1.0 - step / total_steps)

class Adam:
    """bias-corrected adam over a fixed parameter list"""

    def __init__(self, params: List[Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self, lr):
        'one update from the accumulated .grad of every parameter'

        self.t += 1
        b1, b2 = self.beta1, self.beta2
        correct1 = 1.0 - b1 ** self.t
        correct2 = 1.0 - b2 ** self.t

        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue

            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g

            update = lr * (m / correct1) / (np.sqrt(v / correct2) + self.eps)
            p.data = (p.data - update).astype(p.dtype, copy=False)

    def state(self):
        'moments and step count, for checkpoints'

        return {'step': self.t, 'm': [a.copy() for a in self.m], 'v': [a.copy() for a in self.v]}

    def load_state(self, state):
        'restore from state()'

        assert len(state['m']) == len(self.params) == len(state['v'])

        self.t = int(state['step'])
        self.m = [np.array(a, dtype=p.dtype) for a, p in zip(state['m'], self.params)]
        self.v = [np.array(a, dtype=p.dtype) for a, p in zip(state['v'], self.params)]

def global_grad_norm(params: List[Tensor]) -> float:
    'l2 norm over all gradients'

    sq = 0.0

    for p in params:
        if p.grad is not None:
            sq += float(np.sum(p.grad.astype(np.float64) ** 2))

    return float(np.sqrt(sq))

def clip_grad_norm(params: List[Tensor], max_norm) -> float:
    """scale gradients so their global norm is at most max_norm, returns the norm before clipping"""

    norm = global_grad_norm(params)

    if norm > max_norm:
        factor = max_norm / norm

        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * factor).astype(p.dtype)

    return norm

class SlotStateRegistry:
    """slot_id -> single-slot MemoryState, values only"""

    def __init__(self, net: PolicyNet, slots, mode):
        assert mode in ('stateful', 'stateless'), f"unknown training mode {mode}"

        self.net = net
        self.slots = slots
        self.mode = mode
        self.states: List[MemoryState] = []
        self.reset_all()

    def reset_all(self):
        'every slot back to zero memory'

        self.states = [self.net.zero_state(1) for _ in range(self.slots)]

    def all_zero(self):
        'is every stored state exactly zero'

        return all(s.is_zero() for s in self.states)

    def incoming(self, batch: SegmentBatch) -> MemoryState:
        """batched state to start this batch from"""

        if self.mode == 'stateless':
            return self.net.zero_state(self.slots)

        rv = []

        for s in range(self.slots):
            if batch.fresh[s] or not batch.active[s]:
                rv.append(self.net.zero_state(1))
            else:
                rv.append(self.states[s])

        return MemoryState.stack(rv)

    def store(self, final: MemoryState, batch: SegmentBatch):
        """keep the final values of active slots (stateful only); split() drops graph history"""

        if self.mode == 'stateless':
            return

        for s, state in enumerate(final.split()):
            self.states[s] = state if batch.active[s] else self.net.zero_state(1)

        assert not any(s.has_history() for s in self.states)

    def load(self, states):
        'restore from a checkpoint list'

        if len(states) != self.slots:
            raise ConfigError(f"checkpoint holds {len(states)} slot states, trainer has {self.slots} slots")

        self.states = [self.net.zero_state(1) if s is None else s for s in states]

class StepResult:
    'what one optimizer step reports'

    def __init__(self, loss, grad_norm, clipped, mem_norms, node_count):
        self.loss = loss
        self.grad_norm = grad_norm
        self.clipped = clipped
        self.mem_norms = mem_norms
        self.node_count = node_count

def batch_loss(net: PolicyNet, batch: SegmentBatch, incoming: MemoryState):
    """forward the batch from incoming (detached on entry), returns (loss, final state)"""

    logits, final = forward_segment(net, incoming, batch.windows, batch.goals, batch.prev_actions,
                                    detach_incoming=True)

    return nll_loss(logits, batch.expert_actions, batch.mask), final

@timed
def train_step(net: PolicyNet, batch: SegmentBatch, registry: SlotStateRegistry, optimizer: Adam,
               settings: TrainSettings, lr) -> StepResult:
    """forward, backward, clip, adam update and state carryover for one SegmentBatch"""

    incoming = registry.incoming(batch)
    net.zero_grad()

    try:
        with nx.Graph() as graph:
            loss, final = batch_loss(net, batch, incoming)

        loss_value = loss.item()
        nx.backward(loss)
    except NumericError as e:
        slots = [f"slot {s}: stream {batch.stream_ids[s]} t={batch.starts[s]}" for s in batch.slot_ids
                 if batch.active[s]]
        raise NumericError(f"batch {batch.index}: {e} ({'; '.join(slots)})", e.op, e.index, e.shape) from None

    for name, p in net.named_parameters():
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NumericError(f"batch {batch.index}: non-finite gradient for {name}", op='backward')

    if settings.grad_clip > 0:
        grad_norm = clip_grad_norm(net.parameters(), settings.grad_clip)
        clipped = grad_norm > settings.grad_clip
    else:
        grad_norm = global_grad_norm(net.parameters())
        clipped = False

    optimizer.step(lr)

    for name, p in net.named_parameters():
        if not np.isfinite(p.data).all():
            raise NumericError(f"batch {batch.index}: parameter {name} became non-finite", op='adam')

    mem_norms = final.frobenius_norms()
    registry.store(final, batch)

    return StepResult(loss_value, grad_norm, clipped, mem_norms, graph.node_count())

class TrainLog:
    """append-only csv, one row per optimizer step, config hash in a comment line"""

    def __init__(self, path, config: RunConfig, keep_before_step=0):
        self.path = path
        rows = []

        if keep_before_step > 0 and os.path.exists(path):
            rows = [r for r in read_log(path) if int(r['step']) < keep_before_step]

        with open(path, 'w', newline='', encoding='utf-8') as f:
            f.write(f"# config_hash={config.hash()}\n")
            f.write(f"# mode={config.train.mode} grad_clip={config.train.grad_clip} precision={config.run.precision}\n")
            writer = csv.DictWriter(f, fieldnames=LOG_COLUMNS)
            writer.writeheader()

            for r in rows:
                writer.writerow(r)

    def append(self, step, epoch, batch_index, result: StepResult, lr, wall_secs):
        'one row'

        norms = result.mem_norms
        row = {'step': step, 'epoch': epoch, 'batch': batch_index, 'loss': repr(result.loss), 'lr': repr(lr),
               'grad_norm': repr(result.grad_norm), 'clipped': int(result.clipped), 'wall_secs': f"{wall_secs:.4f}",
               'mem_norm_mean': repr(float(np.mean(norms))), 'mem_norm_max': repr(float(np.max(norms))),
               'mem_norms': ';'.join(repr(float(x)) for x in norms)}

        with open(self.path, 'a', newline='', encoding='utf-8') as f:
            csv.DictWriter(f, fieldnames=LOG_COLUMNS).writerow(row)

def read_log(path) -> List[dict]:
    'rows of a train log as dicts of strings'

    with open(path, 'r', newline='', encoding='utf-8') as f:
        lines = [line for line in f if not line.startswith('#')]

    return list(csv.DictReader(lines))

def _restore(ckpt_path, config: RunConfig, net: PolicyNet, optimizer: Adam, registry: SlotStateRegistry):
    ckpt = load_checkpoint(ckpt_path)

    if ckpt.config_hash != config.hash():
        raise ConfigError(f"cannot resume from {ckpt_path}: config hash {ckpt.config_hash[:12]} differs from "
                          f"{config.hash()[:12]}")

    for p, q in zip(net.parameters(), ckpt.net.parameters()):
        p.data = q.data.copy()

    if ckpt.adam_state is not None:
        optimizer.load_state(ckpt.adam_state)

    if ckpt.slot_states is not None:
        registry.load(ckpt.slot_states)

    return ckpt.progress

def _save(path, net, config, optimizer, registry, progress):
    save_checkpoint(path, net, config, optimizer.state(), list(registry.states), progress)

def run_training(config: RunConfig, streams: List[StreamDataset], out_dir, resume=False,
                 stop_after: Optional[int] = None) -> dict:
    """train for config.train.epochs, writing checkpoints, the log and a summary

    With resume, continues from out_dir/checkpoint_latest.ckpt (config hash must match).
    stop_after ends the run after that many global steps, as an interruption would.
    """

    settings = config.train
    dtype = np.float32 if config.run.precision == 'f32' else np.float64
    os.makedirs(out_dir, exist_ok=True)

    net = PolicyNet.from_config(config, dtype)
    optimizer = Adam(net.parameters(), settings.beta1, settings.beta2, settings.adam_eps)
    registry = SlotStateRegistry(net, settings.slots, settings.mode)
    loader = SegmentLoader(streams, settings.slots, settings.segment_length, config.seeds.shuffle)

    epoch_batches = [loader.plan(e) for e in range(settings.epochs)]
    total_steps = sum(epoch_batches)

    progress = {'epoch': 0, 'batch': 0, 'global_step': 0}
    latest = os.path.join(out_dir, LATEST_CHECKPOINT)

    if resume:
        if not os.path.exists(latest):
            raise ConfigError(f"nothing to resume: {latest} does not exist")

        progress = _restore(latest, config, net, optimizer, registry)
        print(f"Resuming at epoch {progress['epoch']}, batch {progress['batch']}, step {progress['global_step']}")

    log = TrainLog(os.path.join(out_dir, LOG_NAME), config, progress['global_step'])
    global_step = progress['global_step']
    first_loss = None
    last_loss = None
    start = time.perf_counter()

    print(f"Training ({settings.mode}) {len(net)} parameters, {len(streams)} streams, {total_steps} steps, "
          f"B={settings.slots}, T={settings.segment_length}, config {config.hash()[:12]}")

    if settings.grad_clip > 0:
        print(f"Gradient clipping enabled at global norm {settings.grad_clip}")
    else:
        warn("gradient clipping disabled")

    Timers.tic('train')

    for epoch in range(progress['epoch'], settings.epochs):
        loader.start_epoch(epoch)
        skip = progress['batch'] if epoch == progress['epoch'] else 0

        if skip > 0:
            loader.skip(skip)
        else:
            registry.reset_all()
            print(f"Epoch {epoch}: memory states reset, every stream restarts")

        while True:
            batch = loader.next_batch()

            if batch is None:
                break

            lr = lr_at(global_step, total_steps, settings.lr)
            step_start = time.perf_counter()
            result = train_step(net, batch, registry, optimizer, settings, lr)
            log.append(global_step, epoch, batch.index, result, lr, time.perf_counter() - step_start)

            first_loss = result.loss if first_loss is None else first_loss
            last_loss = result.loss
            global_step += 1

            if global_step % settings.print_every == 0 or global_step == total_steps:
                elapsed = time.perf_counter() - start
                done = global_step - progress['global_step']
                eta = elapsed / max(done, 1) * (total_steps - global_step)
                print(f"step {global_step}/{total_steps} epoch {epoch} loss {result.loss:.4f} lr {lr:.3g} "
                      f"grad_norm {result.grad_norm:.3f} Elapsed: {to_time_str(elapsed)}, ETA: {to_time_str(eta)}")

            next_progress = {'epoch': epoch, 'batch': loader.batches_emitted, 'global_step': global_step}

            if stop_after is not None and global_step >= stop_after:
                _save(latest, net, config, optimizer, registry, next_progress)
                Timers.toc('train')
                print(f"Stopped after {global_step} steps; resume from {latest}")

                return {'stopped': True, 'global_step': global_step, 'param_hash': parameter_hash(net)}

            if settings.checkpoint_every > 0 and global_step % settings.checkpoint_every == 0:
                _save(latest, net, config, optimizer, registry, next_progress)

        epoch_progress = {'epoch': epoch + 1, 'batch': 0, 'global_step': global_step}
        _save(os.path.join(out_dir, f"checkpoint_epoch{epoch:03d}.ckpt"), net, config, optimizer, registry,
              epoch_progress)
        _save(latest, net, config, optimizer, registry, epoch_progress)

    Timers.toc('train')

    final = os.path.join(out_dir, FINAL_CHECKPOINT)
    save_checkpoint(final, net, config, progress={'epoch': settings.epochs, 'batch': 0, 'global_step': global_step})

    summary = {'config_hash': config.hash(), 'model_hash': config.model_hash(), 'mode': settings.mode,
               'param_hash': parameter_hash(net), 'steps': global_step, 'first_loss': first_loss,
               'final_loss': last_loss, 'checkpoint': FINAL_CHECKPOINT}

    with open(os.path.join(out_dir, SUMMARY_NAME), 'w', encoding='utf-8') as f:
        f.write(json.dumps(summary, indent=2, sort_keys=True))
        f.write("\n")

    print(f"Finished training in {to_time_str(time.perf_counter() - start)}, parameter hash "
          f"{summary['param_hash'][:12]}")
    Timers.print_stats('train')

    return summary
