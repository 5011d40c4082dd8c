"""Average-reward policy iteration and stationary analytics on a :class:`TransitionLaw`.

Policies are arrays holding one law row per state (see
:meth:`TransitionLaw.policy_rows` to convert from actions).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import spsolve

from .channel import ChannelModel
from .dynamics import LawStructure, TransitionLaw, build_law
from .errors import SolverError, UndefinedConditionalError
from .lattice import Mode, ModeSet, build_ami_grid, enumerate_states

EVAL_TOL = 1e-9
STATIONARY_TOL = 1e-10
TIE_TOL = 1e-9
MAX_ITERATIONS = 50


@dataclass
class SolveOutput:
    eta: float
    h: np.ndarray
    policy: np.ndarray
    mu: np.ndarray
    iterations: int
    law: TransitionLaw

    @property
    def actions(self) -> list:
        return self.law.policy_actions(self.policy)

    @property
    def improvements(self) -> int:
        """Improvement steps that changed the policy (``iterations`` minus the confirming round)."""
        return self.iterations - 1


def _induced(law: TransitionLaw, policy):
    policy = np.asarray(policy, dtype=np.int64)
    return law.P[policy], law.reward[policy]


def chain_classes(P_pi):
    """Closed communicating classes and transient states of a kernel.

    Returns
    -------
    closed : list of ndarray
        State indices of each closed class, ordered by smallest member.
    transient : ndarray
    """
    n_comp, comp = connected_components(P_pi, directed=True, connection="strong")
    if n_comp == 1:
        return [np.arange(P_pi.shape[0])], np.array([], dtype=np.int64)
    P = P_pi.tocoo()
    leaving = (comp[P.row] != comp[P.col]) & (P.data > 0)
    open_comp = np.zeros(n_comp, dtype=bool)
    open_comp[comp[P.row[leaving]]] = True
    closed = [np.flatnonzero(comp == c) for c in np.flatnonzero(~open_comp)]
    closed.sort(key=lambda idx: idx[0])
    transient = np.flatnonzero(open_comp[comp])
    return closed, transient


def _anchored_solve(P_pi, r_pi, sp):
    # eta + h = r + P h with the column of sp standing for eta
    n = P_pi.shape[0]
    A = (sparse.identity(n, format="csr") - P_pi).tocoo()
    keep = A.col != sp
    rows = np.concatenate([A.row[keep], np.arange(n)])
    cols = np.concatenate([A.col[keep], np.full(n, sp)])
    vals = np.concatenate([A.data[keep], np.ones(n)])
    M = sparse.csc_matrix((vals, (rows, cols)), shape=(n, n))
    x = np.atleast_1d(spsolve(M, r_pi))
    if not np.all(np.isfinite(x)):
        raise SolverError("policy evaluation produced non-finite values")
    eta = float(x[sp])
    x[sp] = 0.0
    return eta, x


def evaluate_gains(law: TransitionLaw, policy, special_state=None, tol=EVAL_TOL):
    """Gain vector and differential rewards, allowing several closed classes.

    With one closed class the gain is constant and ``h[special_state] = 0``
    (the anchor moves to a recurrent state if the special state is
    transient). Otherwise each closed class is solved on its own, anchored at
    its smallest state, and transient states follow from
    ``g = P g`` and ``g + h = r + P h``.

    Returns
    -------
    g : ndarray
    h : ndarray
    """
    sp = law.special_state if special_state is None else special_state
    P_pi, r_pi = _induced(law, policy)
    n = law.n_states
    closed, transient = chain_classes(P_pi)
    g = np.empty(n)
    h = np.zeros(n)
    for idx in closed:
        anchor = sp if sp in idx else int(idx[0])
        if len(idx) == n:
            eta, h = _anchored_solve(P_pi, r_pi, anchor)
        else:
            sub = P_pi[idx][:, idx]
            eta, h_sub = _anchored_solve(sub, r_pi[idx], int(np.searchsorted(idx, anchor)))
            h[idx] = h_sub
        g[idx] = eta
    if len(transient):
        rec = np.setdiff1d(np.arange(n), transient)
        P_tt = P_pi[transient][:, transient]
        P_tr = P_pi[transient][:, rec]
        M = (sparse.identity(len(transient), format="csc") - P_tt).tocsc()
        g[transient] = np.atleast_1d(spsolve(M, P_tr @ g[rec]))
        h[transient] = np.atleast_1d(spsolve(M, r_pi[transient] - g[transient] + P_tr @ h[rec]))
        if not np.all(np.isfinite(g)) or not np.all(np.isfinite(h)):
            raise SolverError("policy evaluation produced non-finite values")
    residual = float(np.max(np.abs(r_pi + P_pi @ h - g - h)))
    if residual > tol * max(1.0, np.max(np.abs(h))):
        raise SolverError("policy evaluation did not reach tolerance", residual)
    return g, h


def evaluate_policy(law: TransitionLaw, policy, special_state=None, tol=EVAL_TOL):
    """Gain and differential rewards of a stationary policy.

    Solves ``eta + h[s] = r(s) + sum_s' P[s, s'] h[s']`` for every state with
    ``h[special_state] = 0`` by a sparse direct solve, the unknown ``eta``
    taking the place of ``h[special_state]``. When the induced chain has
    several closed classes, ``eta`` is the gain seen from the special state.

    Returns
    -------
    eta : float
    h : ndarray
    """
    sp = law.special_state if special_state is None else special_state
    g, h = evaluate_gains(law, policy, sp, tol)
    return float(g[sp]), h


def q_values(law: TransitionLaw, h) -> np.ndarray:
    return law.reward + law.P @ h


def _block_best(law: TransitionLaw, q):
    starts = law.block_ptr[:-1]
    best = np.maximum.reduceat(q, starts)
    return best


def improve_policy(law: TransitionLaw, h, current=None, tol=TIE_TOL, gain=None) -> np.ndarray:
    """Greedy policy w.r.t. ``h``.

    Ties within ``tol`` go to the lowest row of the block (1P < 0P < TS < SC,
    then ascending p). When ``current`` is given, its action is kept whenever
    it is within ``tol`` of the best, which makes policy iteration terminate.
    A non-constant ``gain`` vector first restricts each block to the rows
    maximizing ``P @ gain`` (multichain improvement).
    """
    n_rows = law.n_rows
    block_of_row = np.repeat(np.arange(len(law.block_ptr) - 1), np.diff(law.block_ptr))
    eligible = np.ones(n_rows, dtype=bool)
    if gain is not None and np.ptp(gain) > tol:
        qg = law.P @ gain
        eligible = qg >= _block_best(law, qg)[block_of_row] - tol
    q = q_values(law, h)
    best = _block_best(law, np.where(eligible, q, -np.inf))
    near = eligible & (q >= best[block_of_row] - tol)
    cand = np.where(near, np.arange(n_rows), n_rows)
    first = np.minimum.reduceat(cand, law.block_ptr[:-1])
    policy = first[law.state_block]
    if current is not None:
        current = np.asarray(current, dtype=np.int64)
        keep = near[current]
        policy = np.where(keep, current, policy)
    return policy.astype(np.int64)


def bellman_residual(law: TransitionLaw, eta: float, h) -> float:
    q = q_values(law, h)
    best = _block_best(law, q)[law.state_block]
    return float(np.max(np.abs(best - eta - h)))


def _unichain_stationary(P_pi, sp):
    n = P_pi.shape[0]
    # (I - P)^T mu = 0 with the special-state equation replaced by sum(mu) = 1
    A = (sparse.identity(n, format="csr") - P_pi).T.tocoo()
    keep = A.row != sp
    rows = np.concatenate([A.row[keep], np.full(n, sp)])
    cols = np.concatenate([A.col[keep], np.arange(n)])
    vals = np.concatenate([A.data[keep], np.ones(n)])
    M = sparse.csc_matrix((vals, (rows, cols)), shape=(n, n))
    rhs = np.zeros(n)
    rhs[sp] = 1.0
    return np.atleast_1d(spsolve(M, rhs))


def stationary_distribution(law: TransitionLaw, policy, tol=STATIONARY_TOL) -> np.ndarray:
    """Left fixed point of the induced kernel, normalized to sum to one.

    With several closed classes this is the limiting distribution of the
    chain started in the special state.
    """
    P_pi, _ = _induced(law, policy)
    n = law.n_states
    sp = law.special_state
    closed, transient = chain_classes(P_pi)
    if len(closed) == 1:
        mu = _unichain_stationary(P_pi, sp)
    else:
        weights = np.zeros(len(closed))
        hit = [k for k, idx in enumerate(closed) if sp in idx]
        if hit:
            weights[hit[0]] = 1.0
        else:
            t = int(np.searchsorted(transient, sp))
            M = (sparse.identity(len(transient), format="csc") - P_pi[transient][:, transient]).tocsc()
            for k, idx in enumerate(closed):
                into = np.asarray(P_pi[transient][:, idx].sum(axis=1)).ravel()
                weights[k] = np.atleast_1d(spsolve(M, into))[t]
        mu = np.zeros(n)
        for k, idx in enumerate(closed):
            if weights[k] > 0:
                sub = P_pi[idx][:, idx]
                mu[idx] = weights[k] * _unichain_stationary(sub, 0)
    if not np.all(np.isfinite(mu)):
        raise SolverError("stationary solve produced non-finite values")
    mu = np.where(mu < 0, np.where(mu > -1e-12, 0.0, mu), mu)
    if np.any(mu < 0):
        raise SolverError("stationary solve produced negative mass", float(-mu.min()))
    mu = mu / mu.sum()
    residual = float(np.max(np.abs(P_pi.T @ mu - mu)))
    if residual > tol:
        raise SolverError("stationary distribution did not reach tolerance", residual)
    return mu


def policy_iteration(law: TransitionLaw, initial_policy=None, max_iterations=MAX_ITERATIONS) -> SolveOutput:
    """Alternate evaluation and greedy improvement until the policy is stable.

    The default starting policy plays the first action of every block, i.e.
    (1P,-) on HARQ laws. ``iterations`` counts evaluate/improve rounds,
    including the final round that confirms the policy. Non-constant gains
    (several closed classes, possible on observable-state laws) switch the
    improvement step to its multichain form.
    """
    policy = law.first_rows() if initial_policy is None else np.asarray(initial_policy, dtype=np.int64)
    for it in range(1, max_iterations + 1):
        g, h = evaluate_gains(law, policy)
        new = improve_policy(law, h, current=policy, gain=g)
        if np.array_equal(new, policy):
            mu = stationary_distribution(law, policy)
            return SolveOutput(float(g[law.special_state]), h, policy, mu, it, law)
        policy = new
    raise SolverError(f"policy iteration did not converge in {max_iterations} iterations")


# ---------------------------------------------------------------------------
# analytics


def action_statistics(law: TransitionLaw, mu, policy) -> dict:
    """Mode frequencies given that a retransmission decision is pending.

    The conditioning set is every state whose resolved configuration still
    holds a partially transmitted packet, so a real choice of mode exists.
    ``P_ACK1`` is the stationary mass of states where a packet decoded at its
    first round, i.e. counters (1, 0) with the HOL in the success cell.
    """
    space = law.meta["space"]
    arr = space.arrays
    choice = ~arr["fresh"]
    mass = float(mu[choice].sum())
    modes = np.array([law.actions[law.row_action[r]].mode for r in policy])
    stats = {}
    if mass <= 0:
        raise UndefinedConditionalError("no stationary mass on retransmission states")
    for key, mode in (("P_1P2", Mode.ONE_P), ("P_Drop", Mode.ZERO_P), ("P_TS", Mode.TS), ("P_SC", Mode.SC)):
        stats[key] = float(mu[choice & (modes == mode)].sum() / mass)
    stats["P_ACK1"] = float(mu[(arr["k_hol"] == 1) & arr["hol_ack"]].sum())
    stats["P_retx"] = mass
    return stats


def packet_flow(law: TransitionLaw, mu, policy) -> tuple:
    """Expected (drops, deliveries) per block under the stationary regime."""
    policy = np.asarray(policy, dtype=np.int64)
    return float(mu @ law.drops[policy]), float(mu @ law.delivers[policy])


def outage(law: TransitionLaw, mu, policy) -> float:
    """Long-run fraction of packets that leave without being decoded."""
    drops, delivers = packet_flow(law, mu, policy)
    if drops + delivers <= 0:
        raise UndefinedConditionalError("no packet leaves the system")
    return drops / (drops + delivers)


# ---------------------------------------------------------------------------
# convenience: cached structures and single-point solves


@lru_cache(maxsize=8)
def law_structure(rate: float, K: int, t_i: int, t_p: int, mode_set: ModeSet) -> LawStructure:
    from .lattice import build_p_grid

    grid = build_ami_grid(rate, t_i)
    p_grid = build_p_grid(t_p) if mode_set != ModeSet.ONE_P else ()
    return build_law(enumerate_states(K, grid), p_grid, mode_set)


def conventional_throughput(rate: float, K: int, channel: ChannelModel, t_i: int = 32) -> float:
    """Throughput of always playing (1P,-), from the discretized chain."""
    law = law_structure(rate, K, t_i, 3, ModeSet.ONE_P).at(channel)
    eta, _ = evaluate_policy(law, law.first_rows())
    return eta


def conventional_renewal(rate: float, K: int, channel: ChannelModel, n: int = 4000) -> float:
    """Renewal-reward throughput of conventional IR-HARQ with continuous AMI.

    ``eta = R * P(decoded within K) / E[rounds]``. The failure probabilities
    ``P(C_1 + ... + C_j <= R)`` come from trapezoidal convolution of the
    density of ``C(snr)`` on [0, R] (error O((R/n)^2)).
    """
    y = np.linspace(0.0, rate, n + 1)
    dx = y[1] - y[0]
    w = np.full(n + 1, dx)
    w[[0, -1]] *= 0.5
    f = np.log(2) * np.exp2(y) * channel.pdf(np.exp2(y) - 1)  # density of C(snr)
    F = channel.cdf(np.exp2(rate - y) - 1)  # P(C(snr) <= R - y)
    fail = [1.0, channel.cdf(2.0**rate - 1)]
    dens = f
    for _ in range(2, K + 1):
        fail.append(float(np.sum(w * dens * F)))
        # f_{S_j}(y_k) = int_0^{y_k} f_{S_{j-1}}(x) f(y_k - x) dx
        conv = np.convolve(dens, f)[: n + 1] * dx
        conv -= 0.5 * dx * (dens[0] * f + dens * f[0])
        dens = conv
    return rate * (1 - fail[K]) / sum(fail[:K])
