"""The Neural Map: a spatially addressed external memory with sparse local writes.

All functions accept a single map ``[C, H, W]`` or a batch ``[B, C, H, W]``.
Unbatched calls take ``(x, y)`` positions and velocities; batched calls take
``[B, 2]`` integer arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .autodiff import Value, ops
from .autodiff.core import default_dtype
from .autodiff.nn import Conv3x3, Linear, Module

HEADINGS = ("N", "E", "S", "W")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NeuralMapConfig:
    channels: int = 32
    height: int = 15
    width: int = 15
    context: str = "plain"        # plain | key-value
    write: str = "gru"            # hard | gru
    addressing: str = "absolute"  # absolute | egocentric
    read: str = "global"          # global | crop
    crop: int = 5
    hidden: int = 256
    conv_channels: int = 8

    def __post_init__(self):
        if self.context not in ("plain", "key-value"):
            raise ConfigError(f"unknown context variant {self.context!r}")
        if self.write not in ("hard", "gru"):
            raise ConfigError(f"unknown write variant {self.write!r}")
        if self.addressing not in ("absolute", "egocentric"):
            raise ConfigError(f"unknown addressing variant {self.addressing!r}")
        if self.read not in ("global", "crop"):
            raise ConfigError(f"unknown read variant {self.read!r}")
        if min(self.channels, self.height, self.width, self.hidden, self.conv_channels) < 1:
            raise ConfigError("extents must be positive")
        if self.context == "key-value" and self.channels % 2:
            raise ConfigError("key-value context needs an even channel count")
        if self.read == "crop" and (self.crop % 2 == 0 or self.crop > min(self.height, self.width)):
            raise ConfigError("crop window must be odd and fit inside the map")

    @property
    def center(self) -> tuple[int, int]:
        return self.width // 2, self.height // 2

    @property
    def context_dim(self) -> int:
        return self.channels // 2 if self.context == "key-value" else self.channels

    @property
    def output_dim(self) -> int:
        return 2 * self.channels + self.context_dim


@dataclass(frozen=True)
class Pose:
    x: int
    y: int
    heading: str = "S"

    def __post_init__(self):
        if self.heading not in HEADINGS:
            raise ValueError(f"heading must be one of {HEADINGS}")


@dataclass(frozen=True)
class Velocity:
    u: int
    v: int


@dataclass
class MapState:
    memory: Value

    @classmethod
    def zeros(cls, config: NeuralMapConfig, batch: Optional[int] = None) -> "MapState":
        shape = (config.channels, config.height, config.width)
        if batch is not None:
            shape = (batch,) + shape
        return cls(Value(np.zeros(shape, dtype=default_dtype())))

    @property
    def shape(self) -> tuple:
        return self.memory.shape


@dataclass
class MapStepOutput:
    r: Value
    c: Value
    w: Value
    o: Value
    attention: np.ndarray
    new_map: MapState


def normalize_coords(world_pos, world_extents, map_extents) -> tuple[int, int]:
    """Proportional floor mapping from world coordinates into map cells, clamped."""
    wx, wy = float(world_pos[0]), float(world_pos[1])
    ww, wh = float(world_extents[0]), float(world_extents[1])
    mw, mh = int(map_extents[0]), int(map_extents[1])
    if not all(math.isfinite(v) for v in (wx, wy, ww, wh)):
        raise ValueError("coordinates must be finite")
    if ww <= 0 or wh <= 0:
        raise ValueError("world extents must be positive")
    x = min(max(math.floor(wx * mw / ww), 0), mw - 1)
    y = min(max(math.floor(wy * mh / wh), 0), mh - 1)
    return x, y


def _xy(where):
    if isinstance(where, Pose):
        return (where.x, where.y)
    if isinstance(where, Velocity):
        return (where.u, where.v)
    return where


# ---------------------------------------------------------------- networks

class GlobalRead(Module):
    """Three 3x3 conv layers, then linear-hidden and linear-C."""

    def __init__(self, config: NeuralMapConfig, rng: np.random.Generator, prefix: str = "map.read"):
        k = config.conv_channels
        side_h, side_w = ((config.crop, config.crop) if config.read == "crop"
                          else (config.height, config.width))
        self.convs = [Conv3x3(f"{prefix}.conv{i}", config.channels if i == 0 else k, k, rng)
                      for i in range(3)]
        self.fc = Linear(f"{prefix}.fc", k * side_h * side_w, config.hidden, rng)
        self.out = Linear(f"{prefix}.out", config.hidden, config.channels, rng)


class ContextQuery(Module):
    def __init__(self, config: NeuralMapConfig, rng: np.random.Generator, prefix: str = "map.context"):
        self.query = Linear(f"{prefix}.q", 2 * config.channels, config.context_dim, rng, bias=False)


class HardWrite(Module):
    def __init__(self, config: NeuralMapConfig, rng: np.random.Generator, prefix: str = "map.write"):
        n_in = 3 * config.channels + config.context_dim
        self.fc = Linear(f"{prefix}.fc", n_in, config.hidden, rng)
        self.out = Linear(f"{prefix}.out", config.hidden, config.channels, rng)


class GRUWrite(Module):
    def __init__(self, config: NeuralMapConfig, rng: np.random.Generator, prefix: str = "map.gru"):
        c = config.channels
        n_src = 2 * c + config.context_dim
        self.reset = Linear(f"{prefix}.wr", n_src + c, c, rng)
        self.update = Linear(f"{prefix}.wz", n_src + c, c, rng, bias_init=-1.0)
        self.cand = Linear(f"{prefix}.wh", n_src, c, rng)
        self.cand_mem = Linear(f"{prefix}.uh", c, c, rng, bias=False, square_orthogonal=True)


# -------------------------------------------------------------- operations

def global_read(m: MapState, params: GlobalRead, center=None, crop: Optional[int] = None) -> Value:
    """Summarise the map (or a crop around ``center``) into a C-vector."""
    x = m.memory if crop is None else ops.crop(m.memory, center, crop)
    for conv in params.convs:
        x = ops.relu(conv(x))
    lead = x.shape[:-3]
    x = ops.reshape(x, lead + (-1,))
    return params.out(ops.relu(params.fc(x)))


def context_read(m: MapState, s: Value, r: Value, params: ContextQuery,
                 variant: str = "plain") -> tuple[Value, Value]:
    """Soft-attention lookup over every map position; returns ``(c, alpha)``."""
    mem = m.memory
    q = params.query(ops.concat([s, r], axis=-1))
    if variant == "key-value":
        c_total = mem.shape[-3]
        if c_total % 2:
            raise ConfigError("key-value context needs an even channel count")
        keys = ops.slice_axis(mem, -3, 0, c_total // 2)
        vals = ops.slice_axis(mem, -3, c_total // 2, c_total)
    elif variant == "plain":
        keys = vals = mem
    else:
        raise ConfigError(f"unknown context variant {variant!r}")
    alpha = ops.softmax_positions(ops.channel_dot(keys, q))
    return ops.weighted_sum(vals, alpha), alpha


def hard_write(s: Value, r: Value, c: Value, m_xy: Value, params: HardWrite) -> Value:
    x = ops.concat([s, r, c, m_xy], axis=-1)
    return params.out(ops.relu(params.fc(x)))


def gru_write(s: Value, r: Value, c: Value, m_xy: Value, params: GRUWrite,
              return_candidate: bool = False):
    """Gated blend of the stored column and a fresh candidate."""
    src = ops.concat([s, r, c], axis=-1)
    full = ops.concat([src, m_xy], axis=-1)
    reset = ops.sigmoid(params.reset(full))
    z = ops.sigmoid(params.update(full))
    cand = ops.tanh(ops.add(params.cand(src), params.cand_mem(ops.mul(reset, m_xy))))
    keep = ops.shift(ops.scale(z, -1.0), 1.0)
    w = ops.add(ops.mul(keep, m_xy), ops.mul(z, cand))
    return (w, cand) if return_candidate else w


def update(m: MapState, pos, w: Value) -> MapState:
    return MapState(ops.scatter_write(m.memory, _xy(pos), w))


def counter_transform(m: MapState, vel) -> MapState:
    """Shift the map opposite to the agent's motion; vacated cells become zero."""
    if isinstance(vel, Velocity) or m.memory.ndim == 3:
        u, v = _xy(vel)
        return MapState(ops.shift2d(m.memory, (-int(u), -int(v))))
    return MapState(ops.shift2d(m.memory, -np.asarray(vel, dtype=np.int64)))


def ego_update(m: MapState, w: Value, center) -> MapState:
    if m.memory.ndim == 4:
        center = np.tile(np.asarray(center, dtype=np.int64), (m.memory.shape[0], 1))
    return MapState(ops.scatter_write(m.memory, center, w))


class NeuralMap(Module):
    """Parameters for one Neural Map plus a convenience step method."""

    def __init__(self, config: NeuralMapConfig, rng: np.random.Generator, prefix: str = "map"):
        self.config = config
        self.read = GlobalRead(config, rng, f"{prefix}.read")
        self.context = ContextQuery(config, rng, f"{prefix}.context")
        if config.write == "gru":
            self.write = GRUWrite(config, rng, f"{prefix}.gru")
        else:
            self.write = HardWrite(config, rng, f"{prefix}.write")

    def initial_state(self, batch: Optional[int] = None) -> MapState:
        return MapState.zeros(self.config, batch)

    def step(self, m: MapState, s: Value, where) -> MapStepOutput:
        return map_step(m, s, where, self.config, self)


def map_step(m: MapState, s: Value, where: Union[Pose, Velocity, tuple, np.ndarray],
             config: NeuralMapConfig, params: NeuralMap) -> MapStepOutput:
    """One read / context / write / update cycle.

    ``where`` is the agent's map position in absolute mode and its map-space
    velocity in egocentric mode.
    """
    batched = m.memory.ndim == 4
    if config.addressing == "absolute":
        if isinstance(where, Velocity):
            raise ConfigError("absolute addressing needs a position, got a velocity")
        pos = _xy(where)
        src = m
    else:
        if isinstance(where, Pose):
            raise ConfigError("egocentric addressing needs a velocity, got a pose")
        src = counter_transform(m, where)
        pos = config.center
        if batched:
            pos = np.tile(np.asarray(pos, dtype=np.int64), (m.memory.shape[0], 1))
    crop = config.crop if config.read == "crop" else None
    r = global_read(src, params.read, center=pos, crop=crop)
    c, alpha = context_read(src, s, r, params.context, config.context)
    m_xy = ops.gather_column(src.memory, pos)
    if config.write == "gru":
        w = gru_write(s, r, c, m_xy, params.write)
    else:
        w = hard_write(s, r, c, m_xy, params.write)
    new_map = update(src, pos, w)
    o = ops.concat([r, c, w], axis=-1)
    return MapStepOutput(r=r, c=c, w=w, o=o, attention=alpha.data.copy(), new_map=new_map)
