import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from harqmdp.channel import ChannelModel
from harqmdp.dynamics import ami_update_sc, ami_update_ts, normalize, reward, transition_row
from harqmdp.errors import ContractViolation, DomainError
from harqmdp.lattice import ONE_P, ZERO_P, Action, Mode, ModeSet, State, allowed_actions, build_ami_grid, \
    build_p_grid, enumerate_states
from harqmdp.solver import evaluate_policy, law_structure


# ---------------------------------------------------------------------------
# normalize


def test_normalize_nack_first_round(space_k2):
    grid = space_k2.grid
    pend = normalize(space_k2, State(1, 0, 5, 0))
    assert (pend.hol_counter, pend.next_counter) == (1, 0)
    assert pend.hol_ami == pytest.approx(grid.representative(5))
    assert pend.next_ami == 0 and pend.dropped_packets == 0 and pend.delivered_packets == 0


def test_normalize_truncation_promotes_companion(space_k2):
    pend = normalize(space_k2, State(2, 1, 7, 3))
    assert pend.dropped_packets == 1 and pend.delivered_packets == 0
    assert (pend.hol_counter, pend.next_counter) == (1, 0)
    assert pend.hol_ami == pytest.approx(space_k2.grid.representative(3))


def test_normalize_both_acked(space_k2):
    s = space_k2.grid.success
    pend = normalize(space_k2, State(2, 1, s, s))
    assert pend.is_fresh and pend.delivered_packets == 2 and pend.dropped_packets == 0


# ---------------------------------------------------------------------------
# AMI update kernels


def test_ts_examples():
    assert ami_update_ts(1.0, 0.0, 0.5, 3.0) == pytest.approx((2.0, 1.0))
    assert ami_update_ts(1.3, 0.4, 0.2, 0.0) == (1.3, 0.4)


def test_sc_examples():
    h, n = ami_update_sc(3.5, 0.0, 0.5, 6.0, 4.0)
    assert h == pytest.approx(3.5 + math.log2(1.75)) and h == pytest.approx(4.307, abs=1e-3)
    assert n == pytest.approx(2.0)
    h, n = ami_update_sc(2.0, 0.0, 0.5, 6.0, 4.0)
    assert h == pytest.approx(2.807, abs=1e-3)
    assert n == pytest.approx(math.log2(1.75)) and n == pytest.approx(0.807, abs=1e-3)
    assert ami_update_sc(1.0, 2.0, 0.3, 0.0, 4.0) == (1.0, 2.0)


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5])
def test_update_domain(p):
    with pytest.raises(DomainError):
        ami_update_ts(0, 0, p, 1.0)
    with pytest.raises(DomainError):
        ami_update_sc(0, 0, p, 1.0, 4.0)


@given(st.floats(0.01, 0.99), st.floats(0, 1e4), st.floats(0, 5), st.floats(0, 5))
def test_ts_increments_sum_to_capacity(p, g, a, b):
    h, n = ami_update_ts(a, b, p, g)
    assert (h - a) + (n - b) == pytest.approx(math.log2(1 + g), rel=1e-12, abs=1e-12)


@given(st.floats(0.01, 0.99), st.floats(0, 1e3), st.floats(0, 1e3))
def test_updates_nondecreasing_in_snr(p, g1, g2):
    lo, hi = sorted((g1, g2))
    for f in (lambda g: ami_update_ts(0.5, 0.2, p, g), lambda g: ami_update_sc(0.5, 0.2, p, g, 100.0)):
        a, b = f(lo), f(hi)
        assert b[0] >= a[0] - 1e-12 and b[1] >= a[1] - 1e-12


# ---------------------------------------------------------------------------
# transition rows


def test_fresh_first_round_cell_probability():
    grid = build_ami_grid(4.0, 5)  # cells of width 1
    space = enumerate_states(2, grid)
    row = transition_row(space, State(1, 0, grid.success, 0), ONE_P, ChannelModel(10.0))
    probs = dict(row.entries)
    idx = space.index_of(State(1, 0, 1, 0))
    assert probs[idx] == pytest.approx(math.exp(-0.1) - math.exp(-0.3), abs=1e-12)
    assert probs[idx] == pytest.approx(0.1640, abs=1e-4)


def _all_pairs(space, mode_set, p_grid, stride):
    for i in range(0, len(space), stride):
        s = space.state_of(i)
        for a in allowed_actions(space, s, mode_set, p_grid):
            yield s, a


def test_rows_stochastic_and_consistent(space_k2):
    p_grid = build_p_grid(6)
    ch = ChannelModel(20.0)
    for s, a in _all_pairs(space_k2, ModeSet.ALL, p_grid, 37):
        row = transition_row(space_k2, s, a, ch)
        total = sum(pr for _, pr in row.entries)
        assert total == pytest.approx(1.0, abs=1e-9)
        assert row.expected_reward == pytest.approx(4.0 * row.deliver_count, abs=1e-12)
        for i, _ in row.entries:
            succ = space_k2.state_of(i)
            assert 0 <= succ.k_next < succ.k_hol <= 2


def test_law_matches_transition_row(space_k2):
    st_ = law_structure(4.0, 2, 32, 6, ModeSet.ALL)
    law = st_.at(ChannelModel(15.0))
    for i in (0, 3, 40, 500, 1000, 1060, len(space_k2) - 1):
        for a in law.allowed(i):
            row = transition_row(space_k2, space_k2.state_of(i), a, ChannelModel(15.0))
            dense = np.zeros(law.P.shape[1])
            for j, pr in row.entries:
                dense[j] = pr
            r = law.row_for(i, a)
            np.testing.assert_allclose(law.P[r].toarray().ravel(), dense, atol=1e-12)
            assert law.reward[r] == pytest.approx(row.expected_reward, abs=1e-12)
            assert law.drops[r] == pytest.approx(row.drop_count, abs=1e-12)


def _mc_row(space, state, action, ch, n, rng):
    grid = space.grid
    pend = normalize(space, state)
    g = ch.sample(rng, n)
    if action.mode == Mode.ONE_P:
        h, nx, k = pend.hol_ami + np.log2(1 + g), np.zeros(n), (pend.hol_counter + 1, 0)
    elif action.mode == Mode.ZERO_P:
        h, nx, k = pend.next_ami + np.log2(1 + g), np.zeros(n), (pend.next_counter + 1, 0)
    elif action.mode == Mode.TS:
        h, nx = ami_update_ts(pend.hol_ami, pend.next_ami, action.p, g)
        k = (pend.hol_counter + 1, pend.next_counter + 1)
    else:
        h, nx = ami_update_sc(pend.hol_ami, pend.next_ami, action.p, g, grid.rate)
        k = (pend.hol_counter + 1, pend.next_counter + 1)
    c1 = grid.quantize(h)
    c2 = grid.quantize(nx) if k[1] else np.zeros(n, dtype=np.int64)
    idx = np.array([space.index_of(State(k[0], k[1], int(a), int(b))) for a, b in zip(c1, c2)])
    return np.bincount(idx, minlength=len(space)) / n


@pytest.mark.parametrize("state,action", [
    (State(1, 0, 31, 0), ONE_P),
    (State(1, 0, 20, 0), ONE_P),
    (State(1, 0, 20, 0), Action(Mode.TS, 0, 0.4)),
    (State(1, 0, 25, 0), Action(Mode.SC, 0, 0.3)),
    (State(1, 0, 5, 0), Action(Mode.SC, 0, 0.8)),
    (State(2, 1, 31, 10), Action(Mode.SC, 0, 0.5)),
    (State(1, 0, 12, 0), ZERO_P),
])
def test_row_matches_monte_carlo(space_k2, state, action):
    ch = ChannelModel(10 ** 1.4)
    n = 10**6
    emp = _mc_row(space_k2, state, action, ch, n, np.random.default_rng(7))
    dense = np.zeros(len(space_k2))
    for j, pr in transition_row(space_k2, state, action, ch).entries:
        dense[j] = pr
    se = np.sqrt(np.maximum(dense * (1 - dense), 1.0 / n) / n)
    assert np.all(np.abs(emp - dense) <= 3 * se + 1e-12)


def test_ts_monotone_coupling(space_k2):
    ch = ChannelModel(10.0)
    state = State(1, 0, 18, 0)
    p_grid = build_p_grid(11)
    tail_hol, tail_next = [], []
    for j, p in enumerate(p_grid):
        row = transition_row(space_k2, state, Action(Mode.TS, j, p), ch)
        dense = np.zeros(len(space_k2))
        for i, pr in row.entries:
            dense[i] = pr
        arr = space_k2.arrays
        tail_hol.append([dense[arr["c_hol"] >= c].sum() for c in (20, 25, 31)])
        tail_next.append([dense[(arr["k_next"] > 0) & (arr["c_next"] >= c)].sum() for c in (5, 10, 31)])
    tail_hol, tail_next = np.array(tail_hol), np.array(tail_next)
    assert np.all(np.diff(tail_hol, axis=0) > 0)
    assert np.all(np.diff(tail_next, axis=0) <= 1e-12)


def test_disallowed_action_rejected(space_k2):
    s = space_k2.grid.success
    with pytest.raises(ContractViolation):
        transition_row(space_k2, State(1, 0, s, 0), Action(Mode.SC, 0, 0.5), ChannelModel(1.0))
    with pytest.raises(ContractViolation):
        transition_row(space_k2, State(1, 0, 3, 0), Action(Mode.SC, 0, None), ChannelModel(1.0))


def test_reward_values(space_k2):
    s = space_k2.grid.success
    assert reward(space_k2, None, None, State(2, 1, 3, 4)) == 0
    assert reward(space_k2, None, None, State(2, 1, s, s)) == 8.0
    assert reward(space_k2, None, None, State(1, 0, s, 0)) == 4.0
    assert reward(space_k2, None, None, State(2, 1, s, 2)) == 4.0


def test_k1_first_round_limit():
    ch = ChannelModel(3.0)
    for t_i in (16, 64, 256):
        law = law_structure(2.0, 1, t_i, 3, ModeSet.ONE_P).at(ch)
        eta, _ = evaluate_policy(law, law.first_rows())
        assert eta == pytest.approx(2.0 * ch.sf(3.0), abs=1e-9)
