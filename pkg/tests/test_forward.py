"""Forward simulation: RNG purity, step correctness, checkpoint equivalence,
and the binary level-dump format."""

import math

import numpy as np
import pytest

import fbsde_llr.forward as fwd
from fbsde_llr.config import SolverConfig
from fbsde_llr.errors import (BlowupError, ConfigError,
                              InvalidParameterError)
from fbsde_llr.forward import (LevelState, RngStreamKey, dump_level,
                               gaussian_block, iter_levels_backward,
                               plan_storage, read_level_dump, restore_level,
                               simulate_paths, step_level)
from fbsde_llr.model import Isotropic, ProblemSpec, builtin_problem


def make_problem(d=3, horizon=1.0, drift=None, sigma=1.0, x0=None):
    return ProblemSpec(
        name="synthetic", dim=d, horizon=horizon,
        query_point=np.zeros(d) if x0 is None else np.asarray(x0, float),
        diffusion=Isotropic(sigma),
        driver=lambda t, x, y, z: np.zeros(np.shape(y)),
        terminal=lambda x: np.zeros(np.shape(x)[:-1]),
        drift=drift)


# ---------------------------------------------------------------------------
# counter-based RNG
# ---------------------------------------------------------------------------

def test_gaussian_block_is_pure():
    key = RngStreamKey(seed=7, particle=3, level=11)
    a = gaussian_block(key, 5, 0.01)
    b = gaussian_block(key, 5, 0.01)
    np.testing.assert_array_equal(a, b)


def test_gaussian_block_streams_are_distinct():
    base = gaussian_block(RngStreamKey(1, 0, 0), 4, 1.0)
    for other in [RngStreamKey(1, 1, 0), RngStreamKey(1, 0, 1),
                  RngStreamKey(2, 0, 0)]:
        assert not np.array_equal(base, gaussian_block(other, 4, 1.0))


def test_gaussian_block_dt_is_pure_scaling():
    key = RngStreamKey(5, 2, 9)
    unit = gaussian_block(key, 6, 1.0)
    scaled = gaussian_block(key, 6, 0.25)
    np.testing.assert_array_equal(scaled, unit * math.sqrt(0.25))


def test_gaussian_block_marginals():
    # 4000 draws from disjoint streams: mean ~ N(0, 1/4000)
    draws = np.array([gaussian_block(RngStreamKey(0, j, k), 1, 1.0)[0]
                      for j in range(200) for k in range(20)])
    assert abs(draws.mean()) < 4.0 / math.sqrt(draws.size)
    assert abs(draws.std() - 1.0) < 0.05


# ---------------------------------------------------------------------------
# Euler-Maruyama step
# ---------------------------------------------------------------------------

def test_step_level_hand_oracle():
    d, m, dt, seed = 2, 3, 0.04, 13
    drift = lambda t, x: -2.0 * x + t
    problem = make_problem(d=d, drift=drift, sigma=1.5)
    pos = np.arange(m * d, dtype=float).reshape(m, d)
    state = LevelState(level=4, time=0.16, positions=pos.copy())
    new = step_level(state, problem, dt, seed)
    for j in range(m):
        dw = gaussian_block(RngStreamKey(seed, j, 4), d, dt)
        expect = pos[j] + 1.5 * dw + dt * (-2.0 * pos[j] + 0.16)
        np.testing.assert_array_equal(new.positions[j], expect)
    assert new.level == 5
    assert math.isclose(new.time, 0.20)


def test_constant_drift_integrates_exactly():
    # with additive noise and constant drift, Euler-Maruyama is exact:
    # X_N = x0 + a T + sigma sum_k dW_k, bitwise
    d, m, n, seed = 3, 4, 10, 21
    a = np.array([0.5, -1.0, 2.0])
    problem = make_problem(d=d, horizon=1.0,
                           drift=lambda t, x: np.broadcast_to(a, x.shape))
    config = SolverConfig(n_steps=n, n_particles=m, seed=seed)
    store = simulate_paths(problem, config)
    dt = 1.0 / n
    for j in range(m):
        x = np.zeros(d)
        for k in range(n):
            x = x + 1.0 * gaussian_block(RngStreamKey(seed, j, k), d, dt) \
                + dt * a
        np.testing.assert_array_equal(store.levels[n][j], x)


def test_drift_euler_error_halves_with_dt():
    # near-deterministic (tiny sigma) linear ODE: global Euler error ~ C dt
    d = 1
    problem = make_problem(d=d, horizon=1.0, drift=lambda t, x: -x,
                           sigma=1e-9, x0=np.ones(d))
    errs = []
    for n in [20, 40, 80]:
        config = SolverConfig(n_steps=n, n_particles=2, seed=0)
        store = simulate_paths(problem, config)
        errs.append(abs(store.levels[n][0, 0] - math.exp(-1.0)))
    for a, b in zip(errs, errs[1:]):
        assert 1.8 < a / b < 2.2


def test_blowup_error_names_particle_and_level():
    def drift(t, x):
        out = np.zeros_like(x)
        if t >= 0.3:  # blows up when stepping level 3 -> 4
            out[2, 0] = np.inf
        return out

    problem = make_problem(d=2, drift=drift)
    config = SolverConfig(n_steps=10, n_particles=5, seed=3)
    with pytest.raises(BlowupError, match=r"particle 2, level 4"):
        simulate_paths(problem, config)
    try:
        simulate_paths(problem, config)
    except BlowupError as exc:
        assert exc.particle == 2
        assert exc.level == 4


# ---------------------------------------------------------------------------
# storage planning and checkpoint equivalence
# ---------------------------------------------------------------------------

def test_plan_storage_full_when_it_fits():
    assert plan_storage(10, 100, 3, budget_mb=100.0) == ("full", 0)


def test_plan_storage_checkpoint_stride_is_sqrt():
    n = 100
    level_mb = 100 * 50 * 8 / 2 ** 20
    mode, stride = plan_storage(n, 100, 50, budget_mb=3 * level_mb)
    assert mode == "checkpointed"
    assert stride == math.isqrt(n - 1) + 1  # ceil(sqrt(100)) = 10


def test_plan_storage_rejects_impossible_budget():
    with pytest.raises(ConfigError, match="cannot hold two levels"):
        plan_storage(10, 1000, 1000, budget_mb=1.0)


def test_checkpointed_levels_match_full_bitwise():
    problem = builtin_problem("allen_cahn_dw", 4)
    config = SolverConfig(n_steps=13, n_particles=6, seed=11)
    full = simulate_paths(problem, config, mode="full")
    chk = simulate_paths(problem, config, mode="checkpointed", stride=4)
    assert set(chk.levels) == {0, 4, 8, 12, 13}
    for k in range(14):
        np.testing.assert_array_equal(restore_level(chk, k).positions,
                                      restore_level(full, k).positions)


def test_iter_levels_backward_order_and_values():
    problem = builtin_problem("linear_heat", 3)
    config = SolverConfig(n_steps=11, n_particles=4, seed=2)
    full = simulate_paths(problem, config, mode="full")
    chk = simulate_paths(problem, config, mode="checkpointed", stride=3)
    seen = []
    for state in iter_levels_backward(chk, start=10):
        seen.append(state.level)
        np.testing.assert_array_equal(
            state.positions, restore_level(full, state.level).positions)
        assert math.isclose(state.time, state.level * full.dt)
    assert seen == list(range(10, -1, -1))


def test_backward_iteration_recompute_bound(monkeypatch):
    """Checkpointed backward replay costs at most one extra forward sweep."""
    problem = builtin_problem("linear_heat", 2)
    config = SolverConfig(n_steps=25, n_particles=3, seed=5)
    store = simulate_paths(problem, config, mode="checkpointed", stride=5)
    calls = {"n": 0}
    original = fwd.step_level

    def counting(state, prob, dt, seed):
        calls["n"] += 1
        return original(state, prob, dt, seed)

    monkeypatch.setattr(fwd, "step_level", counting)
    for _ in iter_levels_backward(store):
        pass
    assert calls["n"] <= config.n_steps


def test_restore_level_bounds():
    problem = builtin_problem("linear_heat", 2)
    store = simulate_paths(problem, SolverConfig(n_steps=5, n_particles=3,
                                                 seed=0))
    with pytest.raises(InvalidParameterError):
        restore_level(store, 6)
    with pytest.raises(InvalidParameterError):
        restore_level(store, -1)


def test_simulate_paths_initial_level_is_query_point():
    problem = builtin_problem("hj_gradient_sink", 3)
    store = simulate_paths(problem, SolverConfig(n_steps=4, n_particles=5,
                                                 seed=9))
    np.testing.assert_array_equal(store.levels[0],
                                  np.zeros((5, 3)))
    assert store.mode == "full"
    assert len(store.levels) == 5


def test_simulate_paths_rejects_single_particle():
    problem = builtin_problem("linear_heat", 2)
    with pytest.raises(ConfigError, match="M >= 2"):
        simulate_paths(problem, SolverConfig(n_steps=4, n_particles=1,
                                             seed=0))


def test_simulate_paths_rejects_bad_mode():
    problem = builtin_problem("linear_heat", 2)
    config = SolverConfig(n_steps=4, n_particles=3, seed=0)
    with pytest.raises(ConfigError, match="unknown storage mode"):
        simulate_paths(problem, config, mode="sideways")
    with pytest.raises(ConfigError, match="stride"):
        simulate_paths(problem, config, mode="checkpointed", stride=1)


# ---------------------------------------------------------------------------
# binary level dumps
# ---------------------------------------------------------------------------

def test_level_dump_roundtrip(tmp_path):
    problem = builtin_problem("allen_cahn_dw", 3)
    config = SolverConfig(n_steps=6, n_particles=4, seed=17)
    store = simulate_paths(problem, config)
    state = restore_level(store, 4)
    path = tmp_path / "lvl.bin"
    dump_level(state, config.seed, path)
    header, positions = read_level_dump(path)
    assert header == {"version": 1, "level": 4, "n_particles": 4, "dim": 3,
                      "seed": 17}
    np.testing.assert_array_equal(positions, state.positions)
    # layout is fixed: 32-byte header then row-major little-endian f8
    raw = path.read_bytes()
    assert raw[:4] == b"FBLL"
    assert len(raw) == 32 + 4 * 3 * 8


def test_level_dump_rejects_corruption(tmp_path):
    state = LevelState(level=1, time=0.1, positions=np.ones((2, 2)))
    path = tmp_path / "lvl.bin"
    dump_level(state, 0, path)
    raw = path.read_bytes()

    bad_magic = tmp_path / "magic.bin"
    bad_magic.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(InvalidParameterError, match="bad magic"):
        read_level_dump(bad_magic)

    short_header = tmp_path / "short.bin"
    short_header.write_bytes(raw[:10])
    with pytest.raises(InvalidParameterError, match="truncated header"):
        read_level_dump(short_header)

    short_body = tmp_path / "body.bin"
    short_body.write_bytes(raw[:-8])
    with pytest.raises(InvalidParameterError, match="truncated body"):
        read_level_dump(short_body)

    bad_version = tmp_path / "ver.bin"
    bad_version.write_bytes(raw[:4] + (99).to_bytes(4, "little") + raw[8:])
    with pytest.raises(InvalidParameterError, match="version"):
        read_level_dump(bad_version)
