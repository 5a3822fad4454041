"""Context-attention export for one greedy episode, plus the landmark check used on it."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .agents import Agent
from .maze import CH_BLUE, CH_GREEN, CH_RED, CH_TEAL, GREEN, MazeSpec
from .trainer import run_episodes


class UnsupportedAgentError(TypeError):
    pass


@dataclass
class Episode:
    maze: MazeSpec
    color: str
    outcome: str
    poses: list          # (x, y, heading) per step
    actions: list
    attention: np.ndarray  # [T, H, W]
    seen: list           # per step: set of "red" / "teal" / "indicator" in view
    map_cells: np.ndarray  # [T, 2] map cell the agent wrote to at each step

    @property
    def correct(self) -> str:
        return "red" if self.color == GREEN else "teal"

    @property
    def wrong(self) -> str:
        return "teal" if self.color == GREEN else "red"

    def first_seen(self, what: str):
        for t, s in enumerate(self.seen):
            if what in s:
                return t
        return None

    def indicator_cell(self):
        """Map cell occupied when the indicator was first in view."""
        t = self.first_seen("indicator")
        return None if t is None else tuple(int(v) for v in self.map_cells[t])


def _seen(obs: np.ndarray) -> set:
    out = set()
    if obs[CH_RED].any():
        out.add("red")
    if obs[CH_TEAL].any():
        out.add("teal")
    if obs[CH_GREEN].any() or obs[CH_BLUE].any():
        out.add("indicator")
    return out


def record_episode(agent: Agent, maze: MazeSpec, rng: np.random.Generator, color=None,
                   cap: int = 500) -> Episode:
    if not getattr(agent, "uses_map", False):
        raise UnsupportedAgentError(f"heatmap export needs a neural-map agent, got {agent.kind!r}")
    if agent.map_config.addressing != "absolute":
        raise UnsupportedAgentError("heatmap export supports absolute addressing only")
    colors = None if color is None else [color]
    rec = run_episodes(agent, [maze], rng, cap=cap, greedy=True, record=True, colors=colors)[0]
    steps = rec["steps"]
    poses = [s["pose"] for s in steps]
    cells = agent.where_positions(np.array([p[:2] for p in poses], dtype=np.int64))
    return Episode(maze, rec["color"], rec["outcome"], poses, [s["action"] for s in steps],
                   np.stack([s["attention"] for s in steps]).astype(np.float64),
                   [_seen(s["obs"]) for s in steps], cells)


def landmark_check(ep: Episode) -> dict:
    """Attention at the indicator cell when the correct goal first shows, vs its episode mean.

    ``eligible`` is true when the wrong goal came into view strictly before the correct one.
    """
    cell = ep.indicator_cell()
    t_wrong, t_right = ep.first_seen(ep.wrong), ep.first_seen(ep.correct)
    eligible = (cell is not None and t_wrong is not None and t_right is not None and t_wrong < t_right)
    out = {"maze": ep.maze.id, "eligible": bool(eligible), "t_wrong": t_wrong, "t_correct": t_right,
           "cell": cell, "outcome": ep.outcome}
    if cell is not None and t_right is not None:
        series = ep.attention[:, cell[1], cell[0]]
        out["at_sight"] = float(series[t_right])
        out["episode_mean"] = float(series.mean())
        out["passed"] = out["at_sight"] > out["episode_mean"]
    return out


def write_heatmap(ep: Episode, path) -> None:
    """One line per step: step, pose x, pose y, then row-major attention (6 significant digits)."""
    with open(path, "w") as f:
        f.write("step,pose_x,pose_y\n")
        for t, (pose, a) in enumerate(zip(ep.poses, ep.attention)):
            vals = ",".join(f"{v:.6g}" for v in a.reshape(-1))
            f.write(f"{t},{pose[0]},{pose[1]},{vals}\n")


def read_heatmap(path) -> tuple[np.ndarray, np.ndarray]:
    """Returns (poses [T, 2], flat attention rows [T, H*W])."""
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return rows[:, 1:3].astype(int), rows[:, 3:]


def write_trajectory(ep: Episode, path) -> None:
    """Line-JSON: an episode header, then one record per step."""
    m = ep.maze
    head = {"maze": m.id, "size": m.size, "color": ep.color, "outcome": ep.outcome,
            "length": len(ep.poses), "start": list(m.start), "indicator": list(m.indicator),
            "goal_red": list(m.goal_red), "goal_teal": list(m.goal_teal),
            "indicator_map_cell": ep.indicator_cell(), "map_shape": list(ep.attention.shape[1:])}
    with open(path, "w") as f:
        f.write(json.dumps(head) + "\n")
        for t, (pose, act, seen, cell) in enumerate(zip(ep.poses, ep.actions, ep.seen, ep.map_cells)):
            f.write(json.dumps({"step": t, "x": pose[0], "y": pose[1], "heading": pose[2], "action": act,
                                "map_cell": [int(cell[0]), int(cell[1])], "seen": sorted(seen)}) + "\n")


def export(ep: Episode, out_dir, stem: str) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"heatmap": out / f"{stem}.csv", "trajectory": out / f"{stem}.jsonl"}
    write_heatmap(ep, paths["heatmap"])
    write_trajectory(ep, paths["trajectory"])
    return paths

