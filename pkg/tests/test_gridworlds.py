import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kindmarl.envcore import EpisodeDoneError
from kindmarl.gridworlds import (
    APPLE_REWARD,
    BEAM_COST,
    DOWN,
    HIT_PENALTY,
    LEFT,
    RIGHT,
    STAY,
    UP,
    Cleanup,
    CleanupConfig,
    Harvest,
    HarvestConfig,
    MatrixGame,
    MatrixGameSpec,
    cleanup_apple_spawn_prob,
    make_env,
    matrix_game_oracle_intentions,
    neighbor_counts,
)


def mini_cleanup(n_agents=2, horizon=100, **kw):
    return Cleanup(CleanupConfig(n_agents=n_agents, horizon=horizon, **kw))


def rollout(env, seed, actions):
    obs = env.reset(seed)
    out = [b"".join(o.grid.tobytes() for o in obs)]
    for joint in actions:
        tr = env.step(joint)
        out.append(b"".join(o.grid.tobytes() for o in tr.next_obs) + tr.extrinsic.tobytes())
    return out


def place(env, positions, facing=None):
    env.pos[:] = positions
    if facing is not None:
        env.facing[:] = facing


# -- envcore contract ------------------------------------------------------------

def test_reset_twice_is_byte_identical():
    env = mini_cleanup()
    feed = np.random.default_rng(0).integers(0, env.n_actions, size=(100, 2))
    assert rollout(env, 7, feed) == rollout(env, 7, feed)


def test_different_seeds_give_different_spawn_streams():
    env = mini_cleanup()
    stay = [(STAY, STAY)] * 100
    rollout(env, 7, stay)
    log7 = env.spawn_log
    rollout(env, 8, stay)
    assert env.spawn_log != log7


def test_step_after_done_raises():
    env = mini_cleanup(horizon=2)
    env.reset(0)
    env.step((STAY, STAY))
    assert env.step((STAY, STAY)).done
    with pytest.raises(EpisodeDoneError):
        env.step((STAY, STAY))


def test_step_before_reset_raises():
    with pytest.raises(EpisodeDoneError):
        mini_cleanup().step((STAY, STAY))


def test_invalid_joint_actions_rejected():
    env = mini_cleanup()
    env.reset(0)
    with pytest.raises(ValueError):
        env.step((STAY,))
    with pytest.raises(ValueError):
        env.step((STAY, 7))


def test_reset_observation_carries_noop_joint_action():
    obs = mini_cleanup().reset(3)
    assert all(o.prev_joint_action == (STAY, STAY) and o.step_index == 0 for o in obs)


@pytest.mark.parametrize("env", [mini_cleanup(), Harvest(HarvestConfig(n_agents=3))])
def test_observation_is_one_hot(env):
    obs = env.reset(1)
    for o in obs:
        assert o.grid.shape == env.obs_shape
        np.testing.assert_array_equal(o.grid.sum(axis=-1), 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["cleanup", "harvest"]))
def test_reward_accounting_matches_event_log(seed, name):
    env = make_env(name, 3, 60)
    env.reset(seed)
    rng = np.random.default_rng(seed)
    done = False
    while not done:
        tr = env.step(rng.integers(0, env.n_actions, size=3))
        ev = tr.events
        total = APPLE_REWARD * len(ev["apples"]) + BEAM_COST * len(ev["beams"]) + HIT_PENALTY * len(ev["hits"])
        assert tr.extrinsic.sum() == pytest.approx(total, abs=1e-12)
        for k in range(3):
            own = (
                APPLE_REWARD * ev["apples"].count(k)
                + BEAM_COST * ev["beams"].count(k)
                + HIT_PENALTY * sum(1 for _, j in ev["hits"] if j == k)
            )
            assert tr.extrinsic[k] == pytest.approx(own, abs=1e-12)
        done = tr.done


# -- cleanup ---------------------------------------------------------------------

def test_moving_onto_apple_pays_one():
    env = mini_cleanup()
    env.reset(0)
    place(env, [(7, 4), (3, 10)])
    env.cells[7, 5] = Cleanup.APPLE
    tr = env.step((RIGHT, STAY))
    assert tr.extrinsic.tolist() == [1.0, 0.0]
    assert env.cells[7, 5] == Cleanup.EMPTY


def test_punishment_beam_costs_shooter_and_hits_victim():
    env = mini_cleanup()
    env.reset(0)
    place(env, [(3, 4), (3, 6)], facing=[RIGHT, LEFT])
    tr = env.step((Cleanup.PUNISH, STAY))
    assert tr.extrinsic.tolist() == [-1.0, -50.0]
    assert tr.events["hits"] == [(0, 1)]


def test_beam_reaches_three_cells_only():
    env = mini_cleanup()
    env.reset(0)
    place(env, [(3, 4), (3, 8)], facing=[RIGHT, LEFT])
    tr = env.step((Cleanup.PUNISH, STAY))
    assert tr.extrinsic.tolist() == [-1.0, 0.0]


def test_facing_is_last_move_direction():
    env = mini_cleanup()
    env.reset(0)
    place(env, [(3, 4), (5, 4)], facing=[LEFT, LEFT])
    env.step((DOWN, STAY))  # moves to (4, 4) and now faces down
    tr = env.step((Cleanup.PUNISH, STAY))
    assert tr.events["hits"] == [(0, 1)]


def test_all_stay_gives_zero_rewards():
    env = mini_cleanup()
    env.reset(0)
    for _ in range(50):
        assert not env.step((STAY, STAY)).extrinsic.any()


def test_contested_apple_goes_to_lower_id():
    for first, second in [((7, 4), (7, 6)), ((7, 6), (7, 4))]:
        env = mini_cleanup()
        env.reset(0)
        place(env, [first, second])
        env.cells[7, 5] = Cleanup.APPLE
        toward = lambda p: RIGHT if p[1] < 5 else LEFT  # noqa: E731
        tr = env.step((toward(first), toward(second)))
        assert tr.extrinsic.tolist() == [1.0, 0.0]
        assert tr.events["apples"] == [0]


def test_clean_beam_removes_waste():
    env = mini_cleanup()
    env.reset(0)
    place(env, [(2, 4), (5, 10)], facing=[UP, UP])
    env.cells[0:2, 4] = Cleanup.WASTE
    tr = env.step((Cleanup.CLEAN, STAY))
    assert tr.events["cleaned"] == 2
    assert (env.cells[0:2, 4] == Cleanup.RIVER).all()


def test_waste_above_threshold_stops_apples():
    env = mini_cleanup()
    env.reset(0)
    env.cells[env.river] = Cleanup.WASTE
    assert env.apple_spawn_prob() == 0.0
    for _ in range(20):
        tr = env.step((STAY, STAY))
        assert tr.events["spawned"] == [] and tr.events["apple_spawn_prob"] == 0.0


def test_clean_river_spawns_at_max_probability():
    env = mini_cleanup()
    env.reset(0)
    env.cells[env.river] = Cleanup.RIVER
    assert env.apple_spawn_prob() == env.config.apple_spawn_prob_max


@given(
    st.floats(0, 1),
    st.floats(0, 1),
    st.floats(0, 1),
    st.floats(1e-3, 1),
)
def test_apple_spawn_probability_monotone(a, b, p_max, thr):
    lo, hi = sorted((a, b))
    p_lo, p_hi = cleanup_apple_spawn_prob(lo, p_max, thr), cleanup_apple_spawn_prob(hi, p_max, thr)
    assert p_hi <= p_lo
    assert 0.0 <= p_hi <= p_max
    if hi >= thr:
        assert p_hi == 0.0


def test_cleanup_config_validation():
    with pytest.raises(ValueError):
        Cleanup(CleanupConfig(waste_threshold=1.5))
    with pytest.raises(ValueError):
        Cleanup(CleanupConfig(window=4))


def test_observation_locality():
    env = mini_cleanup()
    env.reset(0)
    place(env, [(4, 2), (4, 15)])
    before = env._observe(0, (STAY, STAY)).grid.copy()
    env.cells[8, 17] = Cleanup.APPLE  # far outside agent 0's 7x7 window
    env.cells[0, 16] = Cleanup.WASTE
    after = env._observe(0, (STAY, STAY)).grid
    assert np.array_equal(before, after)
    env.cells[5, 3] = Cleanup.APPLE  # inside the window
    assert not np.array_equal(before, env._observe(0, (STAY, STAY)).grid)


# -- harvest ---------------------------------------------------------------------

ISOLATED_MAP = (
    "........",
    "..A.....",
    "........",
    ".....AA.",
    ".....AA.",
)


def test_isolated_tree_never_regrows():
    env = Harvest(HarvestConfig(n_agents=2, horizon=3000, map=ISOLATED_MAP))
    env.reset(0)
    place(env, [(1, 1), (0, 7)])
    assert env.step((RIGHT, STAY)).extrinsic[0] == 1.0
    env.step((LEFT, STAY))
    for _ in range(2000):
        env.step((STAY, STAY))
        assert env.cells[1, 2] == Harvest.EMPTY
    # the 2x2 patch, untouched, stays full
    assert (env.cells[3:5, 5:7] == Harvest.APPLE).all()


def test_untouched_orchard_never_shrinks():
    env = Harvest(HarvestConfig(n_agents=4))
    env.reset(5)
    env.cells[env.tree] = np.where(np.random.default_rng(0).random(env.tree.sum()) < 0.5, Harvest.APPLE, Harvest.EMPTY)
    count = env.apple_count()
    for _ in range(200):
        env.step((STAY,) * 4)
        assert env.apple_count() >= count
        count = env.apple_count()


def greedy_action(env, k):
    apples = np.argwhere(env.cells == Harvest.APPLE)
    if apples.size == 0:
        return STAY
    r, c = env.pos[k]
    tr, tc = apples[np.argmin(np.abs(apples - (r, c)).sum(axis=1))]
    occupied = {tuple(p) for p in env.pos}
    options = []
    if tr != r:
        options.append(DOWN if tr > r else UP)
    if tc != c:
        options.append(RIGHT if tc > c else LEFT)
    deltas = {UP: (-1, 0), DOWN: (1, 0), LEFT: (0, -1), RIGHT: (0, 1)}
    for a in options:
        if (r + deltas[a][0], c + deltas[a][1]) not in occupied:
            return a
    return options[0]


def test_greedy_sweep_kills_the_orchard():
    env = Harvest(HarvestConfig(n_agents=4, horizon=4000))
    env.reset(2)
    extinct_at = None
    for t in range(4000):
        tr = env.step([greedy_action(env, k) for k in range(4)])
        if extinct_at is None and env.apple_count() == 0:
            extinct_at = t
        elif extinct_at is not None:
            assert env.apple_count() == 0
            assert not tr.extrinsic.any()
    assert extinct_at is not None


def test_neighbor_counts():
    grid = np.zeros((3, 3), dtype=bool)
    grid[0, 0] = grid[1, 1] = True
    assert neighbor_counts(grid).tolist() == [[1, 2, 1], [2, 1, 1], [1, 1, 1]]
    assert neighbor_counts(np.ones((3, 3), dtype=bool))[1, 1] == 8


@given(st.lists(st.floats(0, 1), min_size=8, max_size=8))
def test_regrowth_validation_enforces_monotone_zero_start(tail):
    probs = [0.0, *sorted(tail)]
    HarvestConfig(regrowth_prob=probs).validate()
    with pytest.raises(ValueError):
        HarvestConfig(regrowth_prob=[0.01, *probs[1:]]).validate()


def test_default_regrowth_table():
    probs = HarvestConfig().regrowth_prob
    assert probs[:3] == [0.0, 0.005, 0.02] and all(p == 0.05 for p in probs[3:])


# -- matrix game -----------------------------------------------------------------

def test_matrix_reset_returns_start_features():
    spec = MatrixGameSpec.random(np.random.default_rng(0), 3)
    env = MatrixGame(spec)
    obs = env.reset(0)
    for o in obs:
        np.testing.assert_array_equal(o.flat(), spec.start)
    tr = env.step((1, 2))
    assert tr.done
    np.testing.assert_array_equal(tr.extrinsic, spec.payoffs[1, 2])
    np.testing.assert_array_equal(tr.next_obs[0].flat(), spec.successors[1, 2])


def test_constant_successors_give_unit_intentions():
    rng = np.random.default_rng(1)
    spec = MatrixGameSpec(rng.normal(size=(4, 4, 2)), np.tile(rng.normal(size=3), (4, 4, 1)), rng.normal(size=3))
    for joint in itertools.product(range(4), repeat=2):
        np.testing.assert_array_equal(matrix_game_oracle_intentions(spec, joint), np.ones((2, 2)))


def test_successors_driven_by_agent_zero_only():
    m = 3
    succ = np.zeros((m, m, 1))
    for a in range(m):
        succ[a, :, 0] = a + 1.0  # depends on agent 0 only
    spec = MatrixGameSpec(np.zeros((m, m, 2)), succ, np.zeros(1))
    for a0, a1 in itertools.product(range(m), repeat=2):
        d = matrix_game_oracle_intentions(spec, (a0, a1))
        assert d[0, 1] == 1.0  # agent 1's choice has no effect
        # losses 0.5 * (b + 1)^2 for b = 0..2, maximum 4.5
        assert d[1, 0] == pytest.approx(0.5 * (a0 + 1) ** 2 / 4.5, abs=1e-15)


def test_maximal_actual_loss_gives_one():
    succ = np.array([[[0.0], [1.0]], [[0.0], [3.0]]])
    spec = MatrixGameSpec(np.zeros((2, 2, 2)), succ, np.zeros(1))
    assert matrix_game_oracle_intentions(spec, (1, 1))[0, 1] == 1.0


def test_literal_denominator_can_exceed_one():
    succ = np.array([[[0.0], [1.0]], [[0.0], [3.0]]])
    spec = MatrixGameSpec(np.zeros((2, 2, 2)), succ, np.zeros(1))
    # fellow 1 at action 1: losses 4.5 (actual) vs 0 (alternative) -> literal denominator 0 -> 1
    assert matrix_game_oracle_intentions(spec, (1, 1), eq4_literal=True)[0, 1] == 1.0
    # fellow 0 at action 1 with agent 1 at action 1: losses 0.5 (b=0) vs 4.5 (b=1, actual)
    assert matrix_game_oracle_intentions(spec, (1, 1), eq4_literal=True)[1, 0] == pytest.approx(9.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**32 - 1), st.sampled_from(["previous", "current"]))
def test_oracle_permutation_covariance(m, seed, ref):
    rng = np.random.default_rng(seed)
    spec = MatrixGameSpec.random(rng, m, 3)
    sigma = rng.permutation(m)
    inv = np.argsort(sigma)
    relabeled = MatrixGameSpec(spec.payoffs[np.ix_(inv, inv)], spec.successors[np.ix_(inv, inv)], spec.start)
    values, relabeled_values = [], []
    for a0, a1 in itertools.product(range(m), repeat=2):
        d = matrix_game_oracle_intentions(spec, (a0, a1), ref)
        d2 = matrix_game_oracle_intentions(relabeled, (sigma[a0], sigma[a1]), ref)
        np.testing.assert_allclose(d, d2, rtol=0, atol=1e-15)
        values.extend(d.ravel())
        relabeled_values.extend(d2.ravel())
    np.testing.assert_allclose(sorted(values), sorted(relabeled_values), atol=1e-15)


def test_make_env_defaults():
    assert isinstance(make_env("cleanup", 5, 500), Cleanup)
    assert make_env("harvest", 4, 10).n_actions == 6
    assert make_env("matrix", 2, 1).n_actions == 2
    with pytest.raises(ValueError):
        make_env("traffic", 2, 1)
