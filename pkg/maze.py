"""
Procedural maze POMDP for continual object navigation

Cells are addressed (row, col) with row 0 at the north edge. Categories seen by
the agent are WALL, FREE and OBJECT_BASE + object id. The agent moves with
N, E, S, W; moving into a wall is a no-op. A task succeeds when the agent
stands on the goal object's cell.
"""

import struct
from typing import Dict, Optional, Tuple

import numpy as np
from numba import njit

from timerutil import timed
from util import ContractError, GenerationError, sha256_hex

WALL = 0
FREE = 1
OBJECT_BASE = 2

NORTH, EAST, SOUTH, WEST = 0, 1, 2, 3
ACTION_NAMES = ('N', 'E', 'S', 'W')

# row, col offsets in action order
DR = np.array([-1, 0, 1, 0], dtype=np.int64)
DC = np.array([0, 1, 0, -1], dtype=np.int64)

@njit(cache=True)
def bfs_distances(free, start_r, start_c):
    """4-neighbor BFS distances from (start_r, start_c) over free cells, -1 if unreachable"""

    h, w = free.shape
    dist = np.full((h, w), -1, dtype=np.int32)

    if not free[start_r, start_c]:
        return dist

    queue_r = np.empty(h * w, dtype=np.int64)
    queue_c = np.empty(h * w, dtype=np.int64)
    queue_r[0] = start_r
    queue_c[0] = start_c
    dist[start_r, start_c] = 0
    head = 0
    tail = 1

    while head < tail:
        r = queue_r[head]
        c = queue_c[head]
        head += 1

        for k in range(4):
            nr = r + DR[k]
            nc = c + DC[k]

            if 0 <= nr < h and 0 <= nc < w and free[nr, nc] and dist[nr, nc] < 0:
                dist[nr, nc] = dist[r, c] + 1
                queue_r[tail] = nr
                queue_c[tail] = nc
                tail += 1

    return dist

class Observation:
    """egocentric window of cell categories plus the goal and previous action"""

    def __init__(self, window: np.ndarray, goal_id: int, prev_action: int):
        self.window = window
        self.goal_id = goal_id
        self.prev_action = prev_action

    def __eq__(self, other):
        return isinstance(other, Observation) and self.goal_id == other.goal_id and \
            self.prev_action == other.prev_action and np.array_equal(self.window, other.window)

    def __repr__(self):
        return f"Observation(goal={self.goal_id}, prev_action={self.prev_action}, window=\n{self.window})"

class StepOutcome:
    'result of one env step'

    def __init__(self, observation: Observation, reached_goal: bool, step_index: int):
        self.observation = observation
        self.reached_goal = reached_goal
        self.step_index = step_index

class MazeEnv:
    """ground-truth state: grid, object placements and the agent's pose

    The grid and objects never change after generation. step() moves the agent;
    set_goal() changes only the goal.
    """

    def __init__(self, grid: np.ndarray, objects: np.ndarray, spawn: Tuple[int, int], seed=0, window_radius=2):
        assert grid.ndim == 2 and objects.ndim == 2 and objects.shape[1] == 2

        self.grid = grid.astype(np.uint8)
        self.height, self.width = grid.shape
        self.objects = objects.astype(np.int64)
        self.n_objects = objects.shape[0]
        self.spawn = (int(spawn[0]), int(spawn[1]))
        self.seed = int(seed)
        self.window_radius = window_radius

        self.categories = self.grid.copy()

        for i, (r, c) in enumerate(self.objects):
            self.categories[r, c] = OBJECT_BASE + i

        r = window_radius
        self.padded = np.pad(self.categories, r, mode='constant', constant_values=WALL)
        self.free = (self.grid == FREE).astype(np.uint8)
        self.distance_cache: Dict[Tuple[int, int], np.ndarray] = {}

        self.agent = self.spawn
        self.goal: Optional[int] = None
        self.prev_action = 4 # start token
        self.t = 0

    def copy(self) -> 'MazeEnv':
        'independent copy with the same pose, goal and step index'

        rv = MazeEnv(self.grid, self.objects, self.spawn, self.seed, self.window_radius)
        rv.agent = self.agent
        rv.goal = self.goal
        rv.prev_action = self.prev_action
        rv.t = self.t

        return rv

    def reset(self):
        'agent back to spawn, no goal, start token'

        self.agent = self.spawn
        self.goal = None
        self.prev_action = 4
        self.t = 0

    def is_free(self, cell):
        'inside the grid and not a wall'

        r, c = cell

        return 0 <= r < self.height and 0 <= c < self.width and self.grid[r, c] == FREE

    def object_cell(self, object_id) -> Tuple[int, int]:
        'cell of an object'

        if not 0 <= object_id < self.n_objects:
            raise ContractError(f"object id {object_id} outside [0, {self.n_objects})")

        r, c = self.objects[object_id]

        return int(r), int(c)

    def set_goal(self, goal_id):
        'issue a new goal; nothing else changes'

        self.object_cell(goal_id)
        self.goal = int(goal_id)

    def window(self, cell=None) -> np.ndarray:
        """(2r+1) x (2r+1) categories centered on cell (default: the agent), walls outside the grid"""

        r, c = self.agent if cell is None else cell
        w = 2 * self.window_radius + 1

        return self.padded[r:r + w, c:c + w].copy()

    def observe(self) -> Observation:
        'the agent-side observation at the current pose'

        goal = -1 if self.goal is None else self.goal

        return Observation(self.window(), goal, self.prev_action)

    def at_goal(self):
        'is the agent on the goal object'

        return self.goal is not None and self.agent == self.object_cell(self.goal)

    def distance_field(self, cell) -> np.ndarray:
        """BFS distances from every cell to cell (cached)"""

        cell = (int(cell[0]), int(cell[1]))
        rv = self.distance_cache.get(cell)

        if rv is None:
            rv = bfs_distances(self.free, cell[0], cell[1])
            self.distance_cache[cell] = rv

        return rv

    def serialize(self) -> bytes:
        """canonical little-endian bytes: size, cells, objects, spawn, seed"""

        parts = [struct.pack('<HH', self.width, self.height), self.grid.tobytes(order='C'),
                 struct.pack('<H', self.n_objects)]

        for r, c in self.objects:
            parts.append(struct.pack('<HH', r, c))

        parts.append(struct.pack('<HHQ', self.spawn[0], self.spawn[1], self.seed))

        return b''.join(parts)

    def hash(self) -> str:
        'sha256 of the canonical serialization'

        return sha256_hex(self.serialize())

    @staticmethod
    def deserialize(buf: bytes, window_radius=2) -> 'MazeEnv':
        'inverse of serialize'

        width, height = struct.unpack_from('<HH', buf, 0)
        pos = 4
        grid = np.frombuffer(buf, dtype=np.uint8, count=width * height, offset=pos).reshape(height, width)
        pos += width * height
        (n_objects,) = struct.unpack_from('<H', buf, pos)
        pos += 2
        objects = np.array(struct.unpack_from(f'<{2 * n_objects}H', buf, pos), dtype=np.int64).reshape(n_objects, 2)
        pos += 4 * n_objects
        spawn_r, spawn_c, seed = struct.unpack_from('<HHQ', buf, pos)

        return MazeEnv(grid.copy(), objects, (spawn_r, spawn_c), seed, window_radius)

@timed
def generate_maze(seed, width=15, height=15, n_objects=6, window_radius=2, loop_fraction=0.15) -> MazeEnv:
    """recursive-backtracker perfect maze on the odd lattice, then loop injection

    A fraction of the interior walls that separate two lattice cells is removed.
    Posts and the boundary are never candidates, so corridors stay one cell wide
    and the outer wall stays closed. Objects and the spawn go to distinct free cells drawn uniformly. Every draw
    comes from one generator seeded with seed.
    """

    if width % 2 == 0 or height % 2 == 0 or width < 7 or height < 7:
        raise GenerationError(f"maze width and height must be odd and >= 7, got {width}x{height}")

    if n_objects < 1:
        raise GenerationError(f"n_objects must be >= 1, got {n_objects}")

    rng = np.random.default_rng(seed)
    grid = np.full((height, width), WALL, dtype=np.uint8)

    rows = (height - 1) // 2
    cols = (width - 1) // 2
    visited = np.zeros((rows, cols), dtype=bool)

    start = (int(rng.integers(rows)), int(rng.integers(cols)))
    visited[start] = True
    grid[2 * start[0] + 1, 2 * start[1] + 1] = FREE
    stack = [start]

    while stack:
        lr, lc = stack[-1]
        options = []

        for k in range(4):
            nr, nc = lr + DR[k], lc + DC[k]

            if 0 <= nr < rows and 0 <= nc < cols and not visited[nr, nc]:
                options.append((int(nr), int(nc)))

        if not options:
            stack.pop()
            continue

        nr, nc = options[int(rng.integers(len(options)))]
        visited[nr, nc] = True
        grid[lr + nr + 1, lc + nc + 1] = FREE # wall between the two lattice cells
        grid[2 * nr + 1, 2 * nc + 1] = FREE
        stack.append((nr, nc))

    # loop injection over walls that separate two lattice cells
    candidates = [(r, c) for r, c in np.argwhere(grid == WALL)
                  if 0 < r < height - 1 and 0 < c < width - 1 and (r % 2 == 0) != (c % 2 == 0)]
    n_remove = int(round(loop_fraction * len(candidates)))

    if n_remove > 0:
        for i in rng.choice(len(candidates), size=n_remove, replace=False):
            grid[candidates[i]] = FREE

    free_cells = np.argwhere(grid == FREE)

    if n_objects > len(free_cells) - 1:
        raise GenerationError(f"{n_objects} objects plus a spawn cell do not fit in {len(free_cells)} free cells")

    picks = rng.choice(len(free_cells), size=n_objects + 1, replace=False)
    objects = free_cells[picks[:n_objects]]
    spawn = free_cells[picks[n_objects]]

    return MazeEnv(grid, objects, (spawn[0], spawn[1]), seed, window_radius)

def step(env: MazeEnv, action: int) -> StepOutcome:
    """move the agent one cell (walls block), returns the outcome"""

    if action not in (NORTH, EAST, SOUTH, WEST):
        raise ContractError(f"invalid action {action}")

    r, c = env.agent
    target = (r + int(DR[action]), c + int(DC[action]))

    if env.is_free(target):
        env.agent = target

    env.prev_action = int(action)
    env.t += 1

    return StepOutcome(env.observe(), env.at_goal(), env.t)

def next_goal(goal_rng: np.random.Generator, env: MazeEnv, previous_goal: Optional[int]) -> int:
    """uniform over object ids other than the goal just completed"""

    n = env.n_objects

    if n < 2:
        raise ContractError(f"next_goal needs at least 2 objects, env has {n}")

    if previous_goal is None:
        return int(goal_rng.integers(n))

    j = int(goal_rng.integers(n - 1))

    return j + 1 if j >= previous_goal else j

def expert_action(env: MazeEnv, goal: int) -> int:
    """first move of the BFS shortest path to the goal object, ties broken N, E, S, W"""

    goal_cell = env.object_cell(goal)

    if env.agent == goal_cell:
        raise ContractError(f"agent is already at goal {goal} {goal_cell}")

    dist = env.distance_field(goal_cell)
    r, c = env.agent
    d = dist[r, c]

    if d < 0:
        raise ContractError(f"goal {goal} at {goal_cell} unreachable from {env.agent}")

    for a in range(4):
        nr, nc = r + int(DR[a]), c + int(DC[a])

        if env.is_free((nr, nc)) and dist[nr, nc] == d - 1:
            return a

    raise AssertionError(f"no descending neighbor at {env.agent} with distance {d}")

def shortest_path_len(env: MazeEnv, from_cell, to_cell) -> int:
    'BFS distance between two free cells'

    for cell in (from_cell, to_cell):
        if not env.is_free(cell):
            raise ContractError(f"cell {tuple(cell)} is not free")

    d = int(env.distance_field(to_cell)[from_cell[0], from_cell[1]])

    if d < 0:
        raise ContractError(f"{tuple(to_cell)} unreachable from {tuple(from_cell)}")

    return d

def parse_ascii(text, seed=0, window_radius=2) -> MazeEnv:
    """build an env from text: '#' wall, '.' free, digits objects, 'A' spawn"""

    lines = [line.strip() for line in text.strip().splitlines() if line.strip()]
    height = len(lines)
    width = len(lines[0]) if lines else 0

    if height < 3 or any(len(line) != width for line in lines):
        raise GenerationError("ascii maze must be a rectangle of at least 3 rows")

    grid = np.full((height, width), WALL, dtype=np.uint8)
    objects = {}
    spawn = None

    for r, line in enumerate(lines):
        for c, ch in enumerate(line):
            if ch == '#':
                continue

            if ch not in '.A0123456789':
                raise GenerationError(f"unknown maze character '{ch}' at ({r}, {c})")

            grid[r, c] = FREE

            if ch == 'A':
                spawn = (r, c)
            elif ch.isdigit():
                objects[int(ch)] = (r, c)

    if spawn is None:
        raise GenerationError("ascii maze has no spawn cell 'A'")

    if sorted(objects) != list(range(len(objects))):
        raise GenerationError(f"object ids must be 0..n-1, got {sorted(objects)}")

    boundary = np.concatenate([grid[0], grid[-1], grid[:, 0], grid[:, -1]])

    if boundary.any():
        raise GenerationError("ascii maze boundary must be all walls")

    obj_arr = np.array([objects[i] for i in range(len(objects))], dtype=np.int64).reshape(len(objects), 2)

    return MazeEnv(grid, obj_arr, spawn, seed, window_radius)

def to_ascii(env: MazeEnv) -> str:
    """text rendering; the agent is drawn as 'A'"""

    rows = []

    for r in range(env.height):
        row = []

        for c in range(env.width):
            cat = env.categories[r, c]

            if (r, c) == env.agent:
                row.append('A')
            elif cat == WALL:
                row.append('#')
            elif cat == FREE:
                row.append('.')
            else:
                row.append(str(cat - OBJECT_BASE) if cat - OBJECT_BASE < 10 else '*')

        rows.append(''.join(row))

    return "\n".join(rows)
