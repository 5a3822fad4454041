"""Goal-Search: a partially observable maze with a colour indicator and two goals."""

from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .memory import HEADINGS, Pose, Velocity

FORWARD, TURN_LEFT, TURN_RIGHT = 0, 1, 2
ACTIONS = ("forward", "turn-left", "turn-right")
N_ACTIONS = 3

GREEN, BLUE = "green", "blue"
CH_WALL, CH_GREEN, CH_BLUE, CH_RED, CH_TEAL = range(5)
VIEW_DEPTH, VIEW_WIDTH = 15, 3
OBS_SHAPE = (5, VIEW_DEPTH, VIEW_WIDTH)

STEP_VECTORS = {"N": (0, -1), "E": (1, 0), "S": (0, 1), "W": (-1, 0)}
TRAIN_SIZES = (5, 7, 9, 11, 13, 15)
TEST_SIZES = (7, 9, 11, 13, 15)


class StateError(RuntimeError):
    pass


# ------------------------------------------------------------------ mazes

@dataclass(frozen=True, eq=False)
class MazeSpec:
    size: int
    grid: np.ndarray  # bool [size, size], True = wall, indexed [y, x]
    start: tuple
    indicator: tuple
    goal_red: tuple
    goal_teal: tuple
    id: str = field(default="")

    def __post_init__(self):
        if not self.id:
            object.__setattr__(self, "id", maze_hash(self))

    @property
    def width(self) -> int:
        return self.size

    @property
    def height(self) -> int:
        return self.size

    def is_wall(self, x: int, y: int) -> bool:
        if not (0 <= x < self.size and 0 <= y < self.size):
            return True
        return bool(self.grid[y, x])

    def rows(self) -> list[str]:
        return ["".join("#" if c else "." for c in row) for row in self.grid]

    def to_json(self) -> str:
        return json.dumps({
            "id": self.id, "size": self.size, "grid": self.rows(),
            "start": list(self.start), "indicator": list(self.indicator),
            "goal_red": list(self.goal_red), "goal_teal": list(self.goal_teal),
        })

    @classmethod
    def from_json(cls, line: str) -> "MazeSpec":
        d = json.loads(line)
        grid = np.array([[ch == "#" for ch in row] for row in d["grid"]], dtype=bool)
        maze = cls(int(d["size"]), grid, tuple(d["start"]), tuple(d["indicator"]),
                   tuple(d["goal_red"]), tuple(d["goal_teal"]))
        if d.get("id") and d["id"] != maze.id:
            raise ValueError(f"maze id {d['id']} does not match its content ({maze.id})")
        return maze


def maze_hash(m: MazeSpec) -> str:
    text = "|".join([str(m.size), "/".join(m.rows()), str(tuple(m.start)), str(tuple(m.indicator)),
                     str(tuple(m.goal_red)), str(tuple(m.goal_teal))])
    return hashlib.blake2b(text.encode(), digest_size=8).hexdigest()


def bfs_solvable(grid: np.ndarray, start, goal, blocked: Iterable = ()) -> tuple[bool, int]:
    """4-connected breadth-first search over open cells. Returns (reachable, path length)."""
    h, w = grid.shape
    for x, y in (start, goal):
        if not (0 <= x < w and 0 <= y < h):
            raise IndexError(f"cell {(x, y)} outside {w}x{h} grid")
    start, goal = tuple(start), tuple(goal)
    if start == goal:
        return True, 0
    blocked = {tuple(b) for b in blocked}
    dist = {start: 0}
    queue = deque([start])
    while queue:
        x, y = queue.popleft()
        for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nx, ny = x + dx, y + dy
            nxt = (nx, ny)
            if not (0 <= nx < w and 0 <= ny < h) or grid[ny, nx] or nxt in blocked or nxt in dist:
                continue
            dist[nxt] = dist[(x, y)] + 1
            if nxt == goal:
                return True, dist[nxt]
            queue.append(nxt)
    return False, -1


def _carve(size: int, rng: np.random.Generator, loop_fraction: float) -> np.ndarray:
    grid = np.ones((size, size), dtype=bool)
    cells = [(x, y) for y in range(1, size - 1, 2) for x in range(1, size - 1, 2)]
    first = cells[int(rng.integers(len(cells)))]
    grid[first[1], first[0]] = False
    stack = [first]
    while stack:
        x, y = stack[-1]
        options = [(x + dx, y + dy, dx, dy) for dx, dy in ((2, 0), (-2, 0), (0, 2), (0, -2))
                   if 0 < x + dx < size - 1 and 0 < y + dy < size - 1 and grid[y + dy, x + dx]]
        if not options:
            stack.pop()
            continue
        nx, ny, dx, dy = options[int(rng.integers(len(options)))]
        grid[y + dy // 2, x + dx // 2] = False
        grid[ny, nx] = False
        stack.append((nx, ny))
    if loop_fraction > 0:
        candidates = [(x, y) for y in range(1, size - 1) for x in range(1, size - 1)
                      if (x % 2) != (y % 2) and grid[y, x]]
        n_open = int(round(loop_fraction * len(candidates)))
        if n_open:
            for i in rng.choice(len(candidates), size=n_open, replace=False):
                x, y = candidates[int(i)]
                grid[y, x] = False
    return grid


def generate_maze(size: int, rng: np.random.Generator, loop_fraction: float = 0.1) -> MazeSpec:
    """Recursive-backtracker maze with a few extra openings, an indicator and two goals."""
    if not isinstance(size, (int, np.integer)) or size % 2 == 0 or not 5 <= size <= 15:
        raise ValueError(f"maze size must be an odd integer in [5, 15], got {size!r}")
    size = int(size)
    while True:
        grid = _carve(size, rng, loop_fraction)
        # start: topmost row, open below, nearest the horizontal centre
        row = [x for x in range(size) if not grid[1, x] and not grid[2, x]]
        if not row:
            continue
        sx = min(row, key=lambda x: (abs(x - size // 2), x))
        start, indicator = (sx, 1), (sx, 2)
        options = [(x, y) for y in range(size) for x in range(size)
                   if not grid[y, x] and (x, y) not in (start, indicator)
                   and abs(x - sx) + abs(y - 1) >= size // 2]
        if len(options) < 2:
            continue
        i, j = rng.choice(len(options), size=2, replace=False)
        red, teal = options[int(i)], options[int(j)]
        if not bfs_solvable(grid, start, red, blocked=[teal])[0]:
            continue
        if not bfs_solvable(grid, start, teal, blocked=[red])[0]:
            continue
        return MazeSpec(size, grid, start, indicator, red, teal)


def check_maze(m: MazeSpec) -> list[str]:
    """Return the list of violated maze invariants (empty when valid)."""
    problems = []
    g = m.grid
    if m.size % 2 == 0 or not 5 <= m.size <= 15 or g.shape != (m.size, m.size):
        problems.append("bad size")
        return problems
    if not (g[0].all() and g[-1].all() and g[:, 0].all() and g[:, -1].all()):
        problems.append("border not walled")
    special = [m.start, m.indicator, m.goal_red, m.goal_teal]
    if any(m.is_wall(*c) for c in special):
        problems.append("special cell on a wall")
    if len({tuple(c) for c in special}) != 4:
        problems.append("special cells overlap")
    if not bfs_solvable(g, m.start, m.goal_red, blocked=[m.goal_teal])[0]:
        problems.append("red goal unreachable")
    if not bfs_solvable(g, m.start, m.goal_teal, blocked=[m.goal_red])[0]:
        problems.append("teal goal unreachable")
    obs = render_observation(m, Pose(m.start[0], m.start[1], "S"), GREEN)
    if not obs[CH_GREEN].any():
        problems.append("indicator not visible from start")
    return problems


def sample_training_maze(rng: np.random.Generator, test_hashes=frozenset(),
                         sizes=TRAIN_SIZES, loop_fraction: float = 0.1) -> tuple[MazeSpec, int]:
    """Uniform size, then generate; resample on collision with the held-out set.

    Returns the maze and the number of rejected collisions.
    """
    rejected = 0
    while True:
        size = int(sizes[int(rng.integers(len(sizes)))])
        m = generate_maze(size, rng, loop_fraction)
        if m.id not in test_hashes:
            return m, rejected
        rejected += 1


def build_test_set(count: int, rng: np.random.Generator, sizes=TEST_SIZES,
                   loop_fraction: float = 0.1) -> list[MazeSpec]:
    mazes, seen, misses = [], set(), 0
    while len(mazes) < count:
        size = int(sizes[int(rng.integers(len(sizes)))])
        m = generate_maze(size, rng, loop_fraction)
        if m.id in seen:
            misses += 1
            if misses > 100 * count + 1000:
                raise RuntimeError(f"sizes {tuple(sizes)} cannot supply {count} distinct mazes")
            continue
        seen.add(m.id)
        mazes.append(m)
    return mazes


def size_buckets(mazes: Iterable[MazeSpec]) -> dict:
    sizes = [m.size for m in mazes]
    return {"small": sum(s <= 11 for s in sizes), "large": sum(s >= 13 for s in sizes), "total": len(sizes)}


def save_maze_set(path, mazes: Iterable[MazeSpec]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for m in mazes:
            f.write(m.to_json() + "\n")


def load_maze_set(path) -> list[MazeSpec]:
    with open(path, encoding="utf-8") as f:
        return [MazeSpec.from_json(line) for line in f if line.strip()]


# ------------------------------------------------------------- observation

def _left_of(heading: str) -> tuple[int, int]:
    dx, dy = STEP_VECTORS[heading]
    return dy, -dx


def _blocker_matrix() -> np.ndarray:
    """blockers[t, c] is True when window cell c lies on the sight line to window cell t.

    Sight lines run from the agent's centre to the midpoint of the target cell's
    near face, so they stay inside the centre column; only open cell interiors
    that the segment crosses count, endpoints excluded.
    """
    n = VIEW_DEPTH * VIEW_WIDTH
    b = np.zeros((n, n), dtype=bool)
    for f in range(VIEW_DEPTH):
        for col in range(VIEW_WIDTH):
            t = f * VIEW_WIDTH + col
            last = f - 1 if col == 1 else f
            for k in range(1, last + 1):
                b[t, k * VIEW_WIDTH + 1] = True
    return b


_BLOCKERS = _blocker_matrix().astype(np.int32)


def _window_offsets() -> dict:
    out = {}
    for h in HEADINGS:
        fx, fy = STEP_VECTORS[h]
        lx, ly = _left_of(h)
        offs = np.zeros((VIEW_DEPTH, VIEW_WIDTH, 2), dtype=np.int64)
        for f in range(VIEW_DEPTH):
            for col, side in enumerate((1, 0, -1)):  # left, centre, right
                offs[f, col] = (f * fx + side * lx, f * fy + side * ly)
        out[h] = offs
    return out


_OFFSETS = _window_offsets()


def render_observation(maze: MazeSpec, pose: Pose, indicator_color: str) -> np.ndarray:
    """Occluded 5 x 15 x 3 egocentric view (row 0 is the agent's own cell)."""
    offs = _OFFSETS[pose.heading]
    xs = pose.x + offs[..., 0]
    ys = pose.y + offs[..., 1]
    inside = (xs >= 0) & (xs < maze.size) & (ys >= 0) & (ys < maze.size)
    walls = np.ones(xs.shape, dtype=bool)
    walls[inside] = maze.grid[ys[inside], xs[inside]]
    visible = (_BLOCKERS @ walls.reshape(-1).astype(np.int32) == 0).reshape(xs.shape)
    obs = np.zeros(OBS_SHAPE, dtype=np.float32)
    obs[CH_WALL] = walls & visible
    marks = ((maze.indicator, CH_GREEN if indicator_color == GREEN else CH_BLUE),
             (maze.goal_red, CH_RED), (maze.goal_teal, CH_TEAL))
    for (cx, cy), ch in marks:
        obs[ch] = (xs == cx) & (ys == cy) & visible
    return obs


# ------------------------------------------------------------- environment

@dataclass(frozen=True)
class EnvState:
    maze: MazeSpec
    pose: Pose
    indicator_color: str
    step_count: int = 0
    done: bool = False
    last_velocity: Velocity = Velocity(0, 0)
    step_limit: int = 100
    step_penalty: float = 0.01


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    info: dict


def correct_goal(state: EnvState) -> tuple:
    return state.maze.goal_red if state.indicator_color == GREEN else state.maze.goal_teal


def reset(maze: MazeSpec, rng: np.random.Generator, step_limit: int = 100,
          step_penalty: float = 0.01) -> tuple[EnvState, np.ndarray]:
    color = GREEN if rng.random() < 0.5 else BLUE
    pose = Pose(maze.start[0], maze.start[1], "S")
    state = EnvState(maze, pose, color, step_limit=step_limit, step_penalty=step_penalty)
    return state, render_observation(maze, pose, color)


def step(state: EnvState, action: int) -> tuple[EnvState, StepResult]:
    if state.done:
        raise StateError("step called on a finished episode")
    pose = state.pose
    vel = Velocity(0, 0)
    if action == FORWARD:
        dx, dy = STEP_VECTORS[pose.heading]
        if not state.maze.is_wall(pose.x + dx, pose.y + dy):
            pose = Pose(pose.x + dx, pose.y + dy, pose.heading)
            vel = Velocity(dx, dy)
    elif action in (TURN_LEFT, TURN_RIGHT):
        i = HEADINGS.index(pose.heading)
        pose = Pose(pose.x, pose.y, HEADINGS[(i + (-1 if action == TURN_LEFT else 1)) % 4])
    else:
        raise ValueError(f"unknown action {action!r}")
    count = state.step_count + 1
    cell = (pose.x, pose.y)
    outcome, reward, done = "none", -state.step_penalty, False
    if cell in (state.maze.goal_red, state.maze.goal_teal):
        done = True
        if cell == correct_goal(state):
            outcome, reward = "correct-goal", 1.0
        else:
            outcome, reward = "wrong-goal", -1.0
    elif count >= state.step_limit:
        outcome, done = "timeout", True
    new = replace(state, pose=pose, step_count=count, done=done, last_velocity=vel)
    obs = render_observation(state.maze, pose, state.indicator_color)
    info = {"pose": pose, "velocity": vel, "outcome": outcome}
    return new, StepResult(obs, reward, done, info)


class GoalSearchEnv:
    """Stateful wrapper that samples a fresh training maze at each reset."""

    def __init__(self, rng: np.random.Generator, test_hashes=frozenset(), sizes=TRAIN_SIZES,
                 step_limit: int = 100, step_penalty: float = 0.01, loop_fraction: float = 0.1,
                 mazes: Optional[list] = None):
        self.rng = rng
        self.test_hashes = frozenset(test_hashes)
        self.sizes = tuple(sizes)
        self.step_limit = step_limit
        self.step_penalty = step_penalty
        self.loop_fraction = loop_fraction
        self.mazes = mazes
        self.rejections = 0
        self.leaked = 0
        self.state: Optional[EnvState] = None

    def reset(self, maze: Optional[MazeSpec] = None) -> np.ndarray:
        if maze is None:
            if self.mazes is not None:
                maze = self.mazes[int(self.rng.integers(len(self.mazes)))]
            else:
                maze, rejected = sample_training_maze(self.rng, self.test_hashes, self.sizes,
                                                      self.loop_fraction)
                self.rejections += rejected
                self.leaked += maze.id in self.test_hashes
        self.state, obs = reset(maze, self.rng, self.step_limit, self.step_penalty)
        return obs

    def step(self, action: int) -> StepResult:
        self.state, result = step(self.state, action)
        return result
