"""ACK/NACK-only feedback: closed-form beliefs, the K=2 observable MDP and the unique-action search.

With one-bit feedback the transmitter sees counters, ACK bits and its own past
actions, but not the AMI. For K=2 only the AMI of the single pending packet is
unknown and its posterior has one of four closed forms, selected by the last
action and message. Each posterior is projected onto the AMI cells and the
observable MDP reuses the full-information rows as belief-weighted mixtures.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
from scipy import integrate, sparse

from .channel import ChannelModel
from .dynamics import LawStructure, TransitionLaw, build_law
from .errors import ConfigurationError, DomainError, UndefinedConditionalError
from .lattice import (
    ONE_P,
    Action,
    AmiGrid,
    Mode,
    ModeSet,
    State,
    action_list,
    build_p_grid,
    enumerate_states,
)
from .solver import TIE_TOL, evaluate_policy, law_structure, policy_iteration

LN2 = np.log(2.0)
QUAD_TOL = 1e-10


class BeliefCase(enum.Enum):
    TS_AFTER_JOINT = "TS_AFTER_JOINT"
    SC_NACK_NACK = "SC_NACK_NACK"
    SC_ACK_NACK = "SC_ACK_NACK"
    FIRST_NACK = "FIRST_NACK"


def prob_nack_sc(p: float, R: float, channel: ChannelModel) -> float:
    """Probability that the superposed HOL-next packet fails while the HOL also fails.

    Equals ``cdf((2^R - 1) / (1 - p 2^R))`` for ``p < 2^-R`` and 1 otherwise.
    """
    if not 0 < p < 1:
        raise DomainError(f"p must lie in (0, 1), got {p!r}")
    q = 2.0 ** R
    if p * q >= 1:
        return 1.0
    return float(channel.cdf((q - 1) / (1 - p * q)))


def _density_fn(case: BeliefCase, p: Optional[float], R: float, channel: ChannelModel):
    """Return (density, upper end of the support)."""
    pdf, cdf = channel.pdf, channel.cdf

    if case is BeliefCase.FIRST_NACK:
        norm = cdf(2.0 ** R - 1)

        def f(x):
            return LN2 * 2.0 ** x * pdf(2.0 ** x - 1)

        top = R
    elif case is BeliefCase.TS_AFTER_JOINT:
        norm = (1 - p) * cdf(2.0 ** (R / (1 - p)) - 1)

        def f(x):
            y = 2.0 ** (x / (1 - p))
            return LN2 * y * pdf(y - 1)

        top = R
    elif case is BeliefCase.SC_ACK_NACK:
        norm = (1 - p) * cdf((2.0 ** R - 1) / (1 - p))

        def f(x):
            return LN2 * 2.0 ** x * pdf((2.0 ** x - 1) / (1 - p))

        top = R
    elif case is BeliefCase.SC_NACK_NACK:
        norm = prob_nack_sc(p, R, channel)

        def f(x):
            d = 1 - p * 2.0 ** x
            if d <= 0:
                return 0.0
            return LN2 * (1 - p) * 2.0 ** x / d ** 2 * pdf((2.0 ** x - 1) / d)

        # the NACK event also bounds the AMI by R
        top = min(R, -np.log2(p))
    else:
        raise ConfigurationError(f"unknown belief case {case!r}")
    if not norm > 0:
        raise UndefinedConditionalError(f"belief {case.value} conditions on a zero-probability event")

    def density(x):
        x = float(x)
        if x < 0 or x > top:
            return 0.0
        return float(f(x)) / norm

    return density, top


@dataclass(frozen=True)
class Belief:
    """Posterior of the pending packet's AMI after a NACK.

    ``cell_masses`` covers the finite cells of ``grid`` (the success cell has
    no mass since the packet was not decoded).
    """

    case_id: BeliefCase
    p: Optional[float]
    density: Callable[[float], float] = field(repr=False)
    support: tuple
    cell_masses: np.ndarray = field(repr=False)

    def integral(self) -> float:
        lo, hi = self.support
        val, _ = integrate.quad(self.density, lo, hi, epsabs=QUAD_TOL, epsrel=QUAD_TOL, limit=200)
        return float(val)


def belief_density(case_id, p, R: float, channel: ChannelModel, grid: Optional[AmiGrid] = None) -> Belief:
    """Closed-form belief of ``case_id`` with per-cell masses by adaptive quadrature.

    Parameters
    ----------
    case_id : BeliefCase or str
    p : float or None
        Split of the joint round that produced the belief; ignored for FIRST_NACK.
    R : float
    channel : ChannelModel
    grid : AmiGrid, optional
        Cells to project on; defaults to 32 levels over ``[0, R]``.
    """
    case = BeliefCase(case_id) if not isinstance(case_id, BeliefCase) else case_id
    if case is BeliefCase.FIRST_NACK:
        p = None
    elif p is None or not 0 < p < 1:
        raise DomainError(f"p must lie in (0, 1) for {case.value}, got {p!r}")
    if grid is None:
        from .lattice import build_ami_grid

        grid = build_ami_grid(R, 32)
    elif abs(grid.rate - R) > 1e-12:
        raise ConfigurationError(f"grid rate {grid.rate} differs from R={R}")
    density, top = _density_fn(case, p, R, channel)
    masses = np.zeros(grid.n_finite)
    edges = grid.edges
    for j in range(grid.n_finite):
        a, b = edges[j], min(edges[j + 1], top)
        if b <= a:
            continue
        masses[j], _ = integrate.quad(density, a, b, epsabs=QUAD_TOL, epsrel=QUAD_TOL, limit=200)
    return Belief(case, p, density, (0.0, top), masses)


# ---------------------------------------------------------------------------
# observable MDP for K = 2


class ObsState(NamedTuple):
    """Observable state: belief case (None when nothing is pending) and p index of the last joint round."""

    case: Optional[BeliefCase]
    p_index: Optional[int] = None

    def __str__(self):
        if self.case is None:
            return "FRESH"
        if self.p_index is None:
            return self.case.value
        return f"{self.case.value}[{self.p_index}]"


OBS_FRESH = ObsState(None)
OBS_FIRST = ObsState(BeliefCase.FIRST_NACK)


def observable_states(mode_set: ModeSet, p_grid: Sequence[float]) -> tuple:
    out = [OBS_FRESH, OBS_FIRST]
    if Mode.TS in mode_set.modes:
        out.extend(ObsState(BeliefCase.TS_AFTER_JOINT, j) for j in range(len(p_grid)))
    if Mode.SC in mode_set.modes:
        for j in range(len(p_grid)):
            out.append(ObsState(BeliefCase.SC_NACK_NACK, j))
            out.append(ObsState(BeliefCase.SC_ACK_NACK, j))
    return tuple(out)


def _structure(grid: AmiGrid, K: int, p_grid: Sequence[float], mode_set: ModeSet) -> LawStructure:
    p_grid = tuple(float(p) for p in p_grid)
    if mode_set == ModeSet.ONE_P:
        return law_structure(grid.rate, K, grid.t_i, 3, mode_set)
    t_p = len(p_grid) + 2
    if t_p >= 3 and np.allclose(p_grid, build_p_grid(t_p), rtol=0, atol=1e-15):
        return law_structure(grid.rate, K, grid.t_i, t_p, mode_set)
    return build_law(enumerate_states(K, grid), p_grid, mode_set)


def _check_rate(R, grid):
    if abs(grid.rate - R) > 1e-12:
        raise ConfigurationError(f"grid rate {grid.rate} differs from R={R}")


def onebit_law(R: float, channel: ChannelModel, grid: AmiGrid, p_grid: Sequence[float], mode_set: ModeSet) -> TransitionLaw:
    """Observable-state MDP law for K=2 with one-bit feedback.

    The row of (observable state, action) is the mixture, weighted by the
    state's projected belief, of the full-information rows of the states
    (1, 0, c) whose pending packet sits in cell ``c``. Successors are then
    lumped by what the transmitter observes.
    """
    _check_rate(R, grid)
    if mode_set == ModeSet.ONE_P:
        p_grid = ()
    full = _structure(grid, 2, p_grid, mode_set).at(channel)
    space = full.meta["space"]
    arr = space.arrays
    p_grid = full.meta["structure"].p_grid
    obs = observable_states(mode_set, p_grid)
    obs_index = {o: i for i, o in enumerate(obs)}
    actions = action_list(mode_set, p_grid)

    # successor lumping, one map per action
    k2 = arr["k_next"]
    succ_map = {}
    for a in actions:
        m = np.zeros(len(space), dtype=np.int64)
        if a.mode.joint:
            pending = (k2 > 0) & ~arr["next_ack"]
            if a.mode == Mode.TS:
                m[pending] = obs_index[ObsState(BeliefCase.TS_AFTER_JOINT, a.p_index)]
            else:
                nn = obs_index[ObsState(BeliefCase.SC_NACK_NACK, a.p_index)]
                an = obs_index[ObsState(BeliefCase.SC_ACK_NACK, a.p_index)]
                m[pending] = np.where(arr["hol_ack"][pending], an, nn)
        else:
            m[(arr["k_hol"] == 1) & ~arr["hol_ack"]] = obs_index[OBS_FIRST]
        succ_map[a] = m

    n_obs = len(obs)
    rows, rew, drops, deliv, row_action, block_ptr = [], [], [], [], [], [0]
    base = np.array([space.index_of(State(1, 0, c, 0)) for c in range(grid.n_finite)])
    fresh_state = space.index_of(State(1, 0, grid.success, 0))

    def add(weights, states, a):
        r = np.array([full.row_for(s, a) for s in states])
        v = np.asarray(full.P[r].T @ weights).ravel()
        rows.append(np.bincount(succ_map[a], weights=v, minlength=n_obs))
        rew.append(weights @ full.reward[r])
        drops.append(weights @ full.drops[r])
        deliv.append(weights @ full.delivers[r])
        row_action.append(actions.index(a))

    for o in obs:
        if o.case is None:
            add(np.ones(1), [fresh_state], ONE_P)
        else:
            p = None if o.p_index is None else p_grid[o.p_index]
            b = belief_density(o.case, p, R, channel, grid)
            w = b.cell_masses / b.cell_masses.sum()
            for a in actions:
                add(w, base, a)
        block_ptr.append(len(rows))
    P = sparse.csr_matrix(np.vstack(rows))
    return TransitionLaw(
        P=P,
        reward=np.array(rew),
        drops=np.array(drops),
        delivers=np.array(deliv),
        block_ptr=np.array(block_ptr, dtype=np.int64),
        state_block=np.arange(n_obs, dtype=np.int64),
        row_action=np.array(row_action, dtype=np.int64),
        actions=actions,
        special_state=0,
        labels=obs,
        meta={"channel": channel, "full": full},
    )


def solve_onebit_k2(R: float, channel: ChannelModel, grid: AmiGrid, p_grid: Sequence[float], mode_set: ModeSet):
    """Optimal one-bit-feedback throughput for K=2.

    Returns
    -------
    eta_tilde : float
    policy : dict
        Action for every :class:`ObsState`.
    """
    law = onebit_law(R, channel, grid, p_grid, mode_set)
    out = policy_iteration(law)
    return out.eta, dict(zip(law.labels, out.actions))


def unique_action_search(R: float, K: int, channel: ChannelModel, grid: AmiGrid, p_grid: Sequence[float],
                         mode_set: ModeSet):
    """Best single action to repeat whenever a retransmission is pending.

    Every candidate policy plays (1P,-) when nothing is pending and the
    candidate otherwise; each is evaluated exactly on the full-information
    law. Ties go to the earliest candidate in action order.

    Returns
    -------
    eta_hat : float
    best_action : Action
    """
    _check_rate(R, grid)
    if mode_set == ModeSet.ONE_P:
        p_grid = ()
    law = _structure(grid, K, p_grid, mode_set).at(channel)
    best_eta, best_action = -np.inf, None
    for a in law.actions:
        eta, _ = evaluate_policy(law, law.action_offset_rows(a))
        if eta > best_eta + TIE_TOL:
            best_eta, best_action = eta, a
    return best_eta, best_action


def observable_case(last_action: Optional[Action], hol_ack: bool, pending: bool) -> ObsState:
    """Observable K=2 state from the last action and the ACK bit of the old HOL."""
    if not pending:
        return OBS_FRESH
    if last_action is None or not last_action.mode.joint:
        return OBS_FIRST
    if last_action.mode == Mode.TS:
        return ObsState(BeliefCase.TS_AFTER_JOINT, last_action.p_index)
    case = BeliefCase.SC_ACK_NACK if hol_ack else BeliefCase.SC_NACK_NACK
    return ObsState(case, last_action.p_index)
