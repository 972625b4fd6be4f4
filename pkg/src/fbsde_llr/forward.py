"""Forward particle simulation.

Euler-Maruyama paths X_{k+1}^j = X_k^j + mu(t_k, X_k^j) dt + sigma dW_k^j
with counter-based randomness: the Gaussian increment of particle ``j`` at
level ``k`` is a pure function of ``(seed, j, k)``, so any level can be
regenerated bitwise from the nearest stored checkpoint without replaying the
whole path ensemble. That is what makes the memory-bounded checkpointed
storage mode exact rather than approximate.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
from numpy.random import Generator, Philox

from .config import SolverConfig
from .errors import BlowupError, ConfigError, InvalidParameterError
from .model import Diffusion, ProblemSpec, apply_diffusion

LEVEL_DUMP_MAGIC = b"FBLL"
LEVEL_DUMP_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIQ")  # magic, version, k, M, d, pad, seed


@dataclass(frozen=True)
class RngStreamKey:
    """Identifies the Gaussian block of one particle at one level."""

    seed: int
    particle: int
    level: int


def gaussian_block(key: RngStreamKey, dim: int, dt: float) -> np.ndarray:
    """Draw the (dim,) increment dW ~ N(0, dt I) for this (seed, j, k).

    Implemented with the Philox counter-based generator: key = [seed, 0],
    counter = [0, 0, particle, level]. Each (particle, level) pair owns a
    disjoint 2^128-state counter block, so streams cannot overlap, and the
    draw depends on nothing but the key — calling twice gives bitwise
    identical output. Normals come from numpy's Generator (ziggurat method,
    which consumes a variable number of counter words per draw; purity per
    key is unaffected) and are scaled by sqrt(dt).
    """
    counter = np.array([0, 0, key.particle, key.level], dtype=np.uint64)
    bitgen = Philox(counter=counter,
                    key=np.array([key.seed, 0], dtype=np.uint64))
    return Generator(bitgen).standard_normal(dim) * math.sqrt(dt)


def _level_increments(seed: int, n_particles: int, dim: int, level: int,
                      dt: float) -> np.ndarray:
    """All M increments for one level, stacked (M, dim)."""
    out = np.empty((n_particles, dim))
    for j in range(n_particles):
        out[j] = gaussian_block(RngStreamKey(seed, j, level), dim, dt)
    return out


@dataclass
class LevelState:
    """Particle ensemble at one time level."""

    level: int
    time: float
    positions: np.ndarray  # (M, d)


def _step(state: LevelState, drift, diffusion: Diffusion, dt: float,
          seed: int) -> LevelState:
    x = state.positions
    dw = _level_increments(seed, x.shape[0], x.shape[1], state.level, dt)
    new = x + apply_diffusion(diffusion, dw)
    if drift is not None:
        new = new + dt * np.asarray(drift(state.time, x), dtype=float)
    if not np.all(np.isfinite(new)):
        bad = np.argwhere(~np.isfinite(new))
        j = int(bad[0, 0])
        raise BlowupError(
            f"non-finite state at particle {j}, level {state.level + 1} "
            f"(first bad coordinate {int(bad[0, 1])})",
            particle=j, level=state.level + 1)
    return LevelState(level=state.level + 1, time=state.time + dt,
                      positions=new)


def step_level(state: LevelState, problem: ProblemSpec, dt: float,
               seed: int) -> LevelState:
    """One Euler-Maruyama step of the whole ensemble.

    X_{k+1}^j = X_k^j + mu(t_k, X_k^j) dt + sigma dW_k^j with dW from
    gaussian_block(seed, j, k); the particle order does not matter (each j
    reads only its own row and RNG stream). Raises BlowupError naming the
    first offending (particle, level) if any coordinate becomes non-finite.
    """
    return _step(state, problem.drift, problem.diffusion, dt, seed)


# ---------------------------------------------------------------------------
# Path storage
# ---------------------------------------------------------------------------

def plan_storage(n_steps: int, n_particles: int, dim: int,
                 budget_mb: float) -> tuple[str, int]:
    """Decide between full and checkpointed storage.

    Full storage holds all (N + 1) levels: (N+1) * M * d * 8 bytes. If that
    exceeds the budget, keep checkpoints every ceil(sqrt(N)) levels plus one
    working segment, which bounds backward-pass recomputation to at most one
    extra forward sweep. A budget that cannot even hold two levels is
    rejected — the backward step always needs the current level plus the
    checkpoint it regenerates from.

    Returns ("full", 0) or ("checkpointed", stride).
    """
    budget_bytes = budget_mb * 2 ** 20
    level_bytes = n_particles * dim * 8
    if 2 * level_bytes > budget_bytes:
        raise ConfigError(
            f"memory budget {budget_mb} MB cannot hold two levels "
            f"({2 * level_bytes / 2 ** 20:.1f} MB needed for M={n_particles}, "
            f"d={dim})")
    if (n_steps + 1) * level_bytes <= budget_bytes:
        return "full", 0
    stride = max(2, math.isqrt(n_steps - 1) + 1)  # ceil(sqrt(N)) for N >= 2
    return "checkpointed", stride


@dataclass
class PathStore:
    """Simulated forward paths, either fully stored or checkpointed.

    ``levels`` maps level index -> (M, d) positions. In "full" mode every
    level 0..N is present; in "checkpointed" mode levels 0, stride, 2*stride,
    ..., and N are present and the rest are regenerated on demand.
    """

    mode: str
    stride: int
    n_steps: int
    dt: float
    seed: int
    problem: ProblemSpec
    levels: dict[int, np.ndarray]

    def stored_bytes(self) -> int:
        return sum(a.nbytes for a in self.levels.values())


def simulate_paths(problem: ProblemSpec, config: SolverConfig,
                   mode: str | None = None,
                   stride: int | None = None) -> PathStore:
    """Run the forward sweep and return the (possibly checkpointed) store.

    All particles start at the query point. The storage mode normally comes
    from the memory budget; ``mode``/``stride`` force it (used by equivalence
    tests that exercise specific strides).
    """
    config.validate(dim=problem.dim)
    n, m, d = config.n_steps, config.n_particles, problem.dim
    if m < 2:
        raise ConfigError(f"simulation needs M >= 2 particles, got {m}")
    dt = problem.horizon / n
    planned_mode, planned_stride = plan_storage(n, m, d,
                                                config.memory_budget_mb)
    if mode is None:
        mode, stride = planned_mode, planned_stride
    elif mode == "full":
        stride = 0
    elif mode == "checkpointed":
        stride = planned_stride if stride is None else int(stride)
        if stride < 2:
            raise ConfigError(f"checkpoint stride must be >= 2, got {stride}")
    else:
        raise ConfigError(f"unknown storage mode {mode!r}")

    x0 = np.asarray(problem.query_point, dtype=float)
    if x0.shape != (d,):
        raise InvalidParameterError(
            f"query point has shape {x0.shape}, expected ({d},)")
    state = LevelState(level=0, time=0.0,
                       positions=np.broadcast_to(x0, (m, d)).copy())

    levels = {0: state.positions.copy()}
    for k in range(n):
        state = step_level(state, problem, dt, config.seed)
        # time must be the product level*dt, never an accumulated sum:
        # checkpoint replay restarts mid-path and has to see bitwise the
        # same time values as the original sweep.
        state = LevelState(level=state.level, time=state.level * dt,
                           positions=state.positions)
        if mode == "full" or state.level % stride == 0 or state.level == n:
            levels[state.level] = state.positions.copy()

    return PathStore(mode=mode, stride=stride, n_steps=n, dt=dt,
                     seed=config.seed, problem=problem, levels=levels)


def _regenerate(store: PathStore, base: int, target: int) -> LevelState:
    state = LevelState(level=base, time=base * store.dt,
                       positions=store.levels[base].copy())
    for _ in range(target - base):
        state = step_level(state, store.problem, store.dt, store.seed)
        state = LevelState(level=state.level, time=state.level * store.dt,
                           positions=state.positions)
    return state


def restore_level(store: PathStore, level: int) -> LevelState:
    """Positions at ``level``, bitwise identical to full storage.

    In checkpointed mode this replays Euler-Maruyama from the nearest stored
    level below; the counter-based increments make the replay exact.
    """
    if not (0 <= level <= store.n_steps):
        raise InvalidParameterError(
            f"level {level} outside [0, {store.n_steps}]")
    if level in store.levels:
        return LevelState(level=level, time=level * store.dt,
                          positions=store.levels[level].copy())
    base = max(k for k in store.levels if k <= level)
    return _regenerate(store, base, level)


def iter_levels_backward(store: PathStore, start: int | None = None):
    """Yield LevelState for levels start, start-1, ..., 0.

    In checkpointed mode each segment [c, c + stride) is regenerated once and
    cached while the iteration passes through it, so the whole backward sweep
    costs at most one extra forward simulation.
    """
    start = store.n_steps if start is None else start
    if store.mode == "full":
        for k in range(start, -1, -1):
            yield restore_level(store, k)
        return

    segment: dict[int, LevelState] = {}
    for k in range(start, -1, -1):
        if k in store.levels:
            segment.pop(k, None)
            yield LevelState(level=k, time=k * store.dt,
                             positions=store.levels[k].copy())
            continue
        if k not in segment:
            base = max(c for c in store.levels if c <= k)
            state = LevelState(level=base, time=base * store.dt,
                               positions=store.levels[base].copy())
            segment = {}
            while state.level < k:
                state = step_level(state, store.problem, store.dt, store.seed)
                state = LevelState(level=state.level,
                                   time=state.level * store.dt,
                                   positions=state.positions)
                segment[state.level] = state
        yield segment.pop(k)


# ---------------------------------------------------------------------------
# Binary level dump
# ---------------------------------------------------------------------------

def dump_level(state: LevelState, seed: int, path) -> None:
    """Write one level to ``path`` in the fixed binary layout.

    32-byte header: magic "FBLL", u32 version, u32 level, u32 M, u32 d,
    u32 zero padding, u64 seed (all little-endian), followed by the (M, d)
    positions as little-endian float64 in row-major (particle-major) order.
    """
    m, d = state.positions.shape
    header = _HEADER.pack(LEVEL_DUMP_MAGIC, LEVEL_DUMP_VERSION, state.level,
                          m, d, 0, seed)
    body = np.ascontiguousarray(state.positions, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(body)


def read_level_dump(path) -> tuple[dict, np.ndarray]:
    """Read a level dump back; returns (header fields, positions)."""
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
        if len(raw) != _HEADER.size:
            raise InvalidParameterError(f"{path}: truncated header")
        magic, version, level, m, d, pad, seed = _HEADER.unpack(raw)
        if magic != LEVEL_DUMP_MAGIC:
            raise InvalidParameterError(
                f"{path}: bad magic {magic!r}, expected {LEVEL_DUMP_MAGIC!r}")
        if version != LEVEL_DUMP_VERSION:
            raise InvalidParameterError(
                f"{path}: unsupported version {version}")
        body = fh.read(m * d * 8)
        if len(body) != m * d * 8:
            raise InvalidParameterError(f"{path}: truncated body")
        positions = np.frombuffer(body, dtype="<f8").reshape(m, d).copy()
    return ({"version": version, "level": level, "n_particles": m, "dim": d,
             "seed": seed}, positions)
