"""HARQ process law: feedback resolution, AMI update kernels and exact transition rows.

Every successor distribution is computed without numerical integration. Each
updated AMI is a monotone (for SC: piecewise monotone with one upward jump)
function of the block SNR, so the cell boundaries pull back to SNR thresholds.
Sorting the thresholds gives a partition of [0, inf) on which the successor
cell pair is constant, and each piece carries ``cdf(hi) - cdf(lo)``.

The thresholds do not depend on the mean SNR, so :class:`LawStructure` stores
them once per (K, grid, p-grid, mode set) and :meth:`LawStructure.at`
only evaluates exponentials.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import sparse

from .channel import LOG2E, ChannelModel
from .errors import ContractViolation, DomainError
from .lattice import (
    ONE_P,
    Action,
    AmiGrid,
    Mode,
    ModeSet,
    State,
    StateSpace,
    action_list,
    allowed_actions,
)

FRESH = -1  # cell marker for an empty slot (counter 0, AMI 0)
_FAR = 1e250


@dataclass(frozen=True)
class PendingConfig:
    """Packets awaiting the next block once feedback has been resolved."""

    hol_counter: int
    hol_ami: float
    next_counter: int
    next_ami: float
    dropped_packets: int = 0
    delivered_packets: int = 0
    hol_cell: int = FRESH
    next_cell: int = FRESH

    @property
    def is_fresh(self) -> bool:
        return self.hol_counter == 0

    @property
    def key(self) -> tuple:
        return (self.hol_counter, self.hol_cell, self.next_counter, self.next_cell)


def normalize(space: StateSpace, state: State) -> PendingConfig:
    """Resolve the feedback carried by ``state``.

    The HOL packet leaves when ACKed or when its counter reached K; an ACKed
    HOL-next leaves too. A surviving HOL-next is promoted with its counter and
    cell midpoint. Emptied slots become fresh.
    """
    grid = space.grid
    hol_ack = space.hol_ack(state)
    next_ack = space.next_ack(state)
    delivered = int(hol_ack) + int(next_ack)
    dropped = int(state.k_hol == space.K and not hol_ack)
    next_alive = state.k_next > 0 and not next_ack
    if space.hol_leaves(state):
        if next_alive:
            return PendingConfig(state.k_next, grid.representative(state.c_next), 0, 0.0,
                                 dropped, delivered, state.c_next, FRESH)
        return PendingConfig(0, 0.0, 0, 0.0, dropped, delivered)
    hol = (state.k_hol, grid.representative(state.c_hol))
    if next_alive:
        return PendingConfig(hol[0], hol[1], state.k_next, grid.representative(state.c_next),
                             dropped, delivered, state.c_hol, state.c_next)
    return PendingConfig(hol[0], hol[1], 0, 0.0, dropped, delivered, state.c_hol, FRESH)


def _check_p(p):
    p = np.asarray(p, dtype=float)
    if np.any(~((p > 0) & (p < 1))):
        raise DomainError(f"p must lie strictly inside (0, 1), got {p!r}")
    return p


def _check_snr(snr):
    snr = np.asarray(snr, dtype=float)
    if np.any(~(snr >= 0)):
        raise DomainError(f"snr must be nonnegative, got {snr!r}")
    return snr


def _cap(x):
    return np.log1p(x) * LOG2E


def _out(*arrays):
    return tuple(float(a) if np.ndim(a) == 0 else a for a in arrays)


def ami_update_ts(i_hol, i_next, p, snr):
    """Time sharing: fractions p and 1-p of the block's capacity go to HOL and HOL-next."""
    p = _check_p(p)
    c = _cap(_check_snr(snr))
    return _out(np.asarray(i_hol, dtype=float) + p * c, np.asarray(i_next, dtype=float) + (1 - p) * c)


def ami_update_sc(i_hol, i_next, p, snr, rate):
    """Superposition coding with single-packet decoding.

    The HOL layer sees the HOL-next layer as noise. The HOL-next layer is
    interference-free only if the HOL packet decodes in this block.
    """
    p = _check_p(p)
    g = _check_snr(snr)
    new_hol = np.asarray(i_hol, dtype=float) + _cap(p * g / (1 + (1 - p) * g))
    clean = _cap((1 - p) * g)
    masked = _cap((1 - p) * g / (1 + p * g))
    new_next = np.asarray(i_next, dtype=float) + np.where(new_hol > rate, clean, masked)
    return _out(new_hol, new_next)


def reward(space: StateSpace, prev_state: Optional[State], action: Optional[Action], next_state: State) -> float:
    """R for every packet decoded in ``next_state``."""
    return space.grid.rate * (int(space.hol_ack(next_state)) + int(space.next_ack(next_state)))


# ---------------------------------------------------------------------------
# SNR partition kernel


def _successor_intervals(mode: Mode, a1, a2, p, grid: AmiGrid):
    """SNR partition for a batch of (HOL AMI, HOL-next AMI, p) triples.

    Returns ``lo, hi, c1, c2`` of shape (n, m): on ``[lo, hi)`` the successor
    HOL cell is ``c1`` and the successor HOL-next cell ``c2`` (0 for 1P/0P).
    Pieces with ``lo >= hi`` are padding.
    """
    a1 = np.asarray(a1, dtype=float)[:, None]
    a2 = np.asarray(a2, dtype=float)[:, None]
    p = np.asarray(p, dtype=float)[:, None]
    bounds = grid.edges[1:][None, :]
    inf = np.inf
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        if mode == Mode.ONE_P:
            bp = np.exp2(bounds - a1) - 1
        elif mode == Mode.ZERO_P:
            bp = np.exp2(bounds - a2) - 1
        elif mode == Mode.TS:
            bp = np.concatenate([np.exp2((bounds - a1) / p) - 1,
                                 np.exp2((bounds - a2) / (1 - p)) - 1], axis=1)
        else:
            # HOL increment log2((1+g)/(1+(1-p)g)) saturates at -log2(1-p)
            t = np.exp2(bounds - a1) - 1
            den = p - t * (1 - p)
            hol = np.where(den > 0, t / den, inf)
            gstar = hol[:, -1:]
            # HOL-next below the cancellation threshold saturates at -log2(p)
            t2 = np.exp2(bounds - a2) - 1
            den2 = (1 - p) - t2 * p
            low = np.where(den2 > 0, t2 / den2, inf)
            low = np.where(low < gstar, low, gstar)
            high = t2 / (1 - p)
            high = np.where(high > gstar, high, gstar)
            bp = np.concatenate([hol, low, high], axis=1)
    bp = np.maximum(np.nan_to_num(bp, nan=inf), 0.0)
    bp.sort(axis=1)
    n = bp.shape[0]
    edges = np.concatenate([np.zeros((n, 1)), bp, np.full((n, 1), inf)], axis=1)
    lo, hi = edges[:, :-1], edges[:, 1:]
    # beyond _FAR the exponential tail is exactly zero in double precision
    valid = (hi > lo) & (lo < _FAR)
    with np.errstate(over="ignore", invalid="ignore"):
        mid = np.where(np.isfinite(hi), lo + 0.5 * (hi - lo), 2 * lo + 1)
    mid = np.where(valid, np.minimum(mid, _FAR), 0.0)
    shape = mid.shape
    a1b = np.broadcast_to(a1, shape)
    a2b = np.broadcast_to(a2, shape)
    pb = np.broadcast_to(p, shape)
    if mode == Mode.ONE_P:
        i1, i2 = a1b + _cap(mid), None
    elif mode == Mode.ZERO_P:
        i1, i2 = a2b + _cap(mid), None
    elif mode == Mode.TS:
        i1, i2 = ami_update_ts(a1b, a2b, pb, mid)
    else:
        i1, i2 = ami_update_sc(a1b, a2b, pb, mid, grid.rate)
    c1 = grid.quantize(i1)
    c2 = np.zeros_like(c1) if i2 is None else grid.quantize(i2)
    lo = np.where(valid, lo, 0.0)
    hi = np.where(valid, hi, 0.0)
    return lo, hi, c1, c2, valid


@dataclass
class _Kernel:
    """Flattened, merged SNR partitions for a list of kernel rows (CSR layout)."""

    ptr: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    c1: np.ndarray
    c2: np.ndarray


def _build_kernel(mode, a1, a2, p, grid, chunk=4096) -> _Kernel:
    T = grid.n_cells
    parts = []
    n = len(a1)
    for start in range(0, n, chunk):
        sl = slice(start, start + chunk)
        lo, hi, c1, c2, valid = _successor_intervals(mode, a1[sl], a2[sl], p[sl], grid)
        rows = np.broadcast_to(np.arange(start, start + lo.shape[0])[:, None], lo.shape)[valid]
        lo, hi, c1, c2 = lo[valid], hi[valid], c1[valid], c2[valid]
        key = c1 * T + c2
        # merge neighbouring pieces that land in the same successor
        new = np.ones(len(key), dtype=bool)
        new[1:] = (rows[1:] != rows[:-1]) | (key[1:] != key[:-1])
        starts = np.flatnonzero(new)
        ends = np.append(starts[1:], len(key)) - 1
        parts.append((rows[starts], lo[starts], hi[ends], c1[starts], c2[starts]))
    rows = np.concatenate([q[0] for q in parts])
    counts = np.bincount(rows, minlength=n)
    ptr = np.concatenate([[0], np.cumsum(counts)])
    return _Kernel(ptr, *(np.concatenate([q[i] for q in parts]) for i in range(1, 5)))


# ---------------------------------------------------------------------------
# Transition law containers


@dataclass
class TransitionLaw:
    """Sparse MDP law at one mean SNR.

    Rows of ``P`` are (decision block, action) pairs. States point to a block via
    ``state_block``; several states can share a block when they resolve to the
    same pending configuration. Within a block rows follow tie-breaking order.
    """

    P: sparse.csr_matrix
    reward: np.ndarray
    drops: np.ndarray
    delivers: np.ndarray
    block_ptr: np.ndarray
    state_block: np.ndarray
    row_action: np.ndarray
    actions: tuple
    special_state: int
    labels: Sequence = ()
    meta: dict = field(default_factory=dict)

    @property
    def n_states(self) -> int:
        return len(self.state_block)

    @property
    def n_rows(self) -> int:
        return self.P.shape[0]

    def rows_of(self, s: int) -> range:
        b = self.state_block[s]
        return range(self.block_ptr[b], self.block_ptr[b + 1])

    def allowed(self, s: int) -> tuple:
        return tuple(self.actions[self.row_action[r]] for r in self.rows_of(s))

    def row_for(self, s: int, action: Action) -> int:
        for r in self.rows_of(s):
            if self.actions[self.row_action[r]] == action:
                return r
        raise ContractViolation(f"action {action} is not allowed in state {self.label(s)}")

    def label(self, s: int):
        return self.labels[s] if len(self.labels) else s

    def policy_rows(self, policy: Sequence[Action]) -> np.ndarray:
        """Convert one action per state into row indices."""
        return np.array([self.row_for(s, a) for s, a in enumerate(policy)], dtype=np.int64)

    def policy_actions(self, rows) -> list:
        return [self.actions[self.row_action[r]] for r in rows]

    def first_rows(self) -> np.ndarray:
        """Policy picking the first (lowest-order) action everywhere; (1P,-) on HARQ laws."""
        return self.block_ptr[self.state_block].astype(np.int64)

    def action_offset_rows(self, action: Action, default: Action = ONE_P) -> np.ndarray:
        """Rows playing ``action`` wherever allowed and ``default`` elsewhere."""
        a_id = self.actions.index(action)
        d_id = self.actions.index(default)
        n_rows = self.n_rows
        idx = np.arange(n_rows)
        starts = self.block_ptr[:-1]
        hit = np.minimum.reduceat(np.where(self.row_action == a_id, idx, n_rows), starts)
        dflt = np.minimum.reduceat(np.where(self.row_action == d_id, idx, n_rows), starts)
        rows = np.where(hit < n_rows, hit, dflt)
        if np.any(rows >= n_rows):
            raise ContractViolation(f"neither {action} nor {default} is allowed in some state")
        return rows[self.state_block].astype(np.int64)


@dataclass
class TransitionRow:
    entries: list
    expected_reward: float
    drop_count: float
    deliver_count: float


class LawStructure:
    """Mean-SNR-independent description of the full-information HARQ law.

    Parameters
    ----------
    space : StateSpace
    p_grid : sequence of float
        Interior power/time split values.
    mode_set : ModeSet
    """

    def __init__(self, space: StateSpace, p_grid: Sequence[float], mode_set: ModeSet):
        self.space = space
        self.grid = space.grid
        self.p_grid = tuple(float(p) for p in p_grid)
        self.mode_set = mode_set
        self.actions = action_list(mode_set, self.p_grid)
        self._enumerate_pending()
        self._build()

    # pending configurations -------------------------------------------------
    def _enumerate_pending(self):
        K, Tf = self.space.K, self.grid.n_finite
        keys = [(0, FRESH, 0, FRESH)]
        for k1 in range(1, K):
            keys.extend((k1, c, 0, FRESH) for c in range(Tf))
            for k2 in range(k1 - 1, 0, -1):
                keys.extend((k1, c1, k2, c2) for c1 in range(Tf) for c2 in range(Tf))
        self.pending_keys = keys
        self.pending_index = {k: i for i, k in enumerate(keys)}
        arr = self.space.arrays
        k1, k2, c1, c2 = arr["k_hol"], arr["k_next"], arr["c_hol"], arr["c_next"]
        next_alive = (k2 > 0) & ~arr["next_ack"]
        leaves = arr["hol_ack"] | (k1 == K)
        state_block = np.empty(len(self.space), dtype=np.int64)
        for s in range(len(self.space)):
            if leaves[s]:
                key = (int(k2[s]), int(c2[s]), 0, FRESH) if next_alive[s] else keys[0]
            elif next_alive[s]:
                key = (int(k1[s]), int(c1[s]), int(k2[s]), int(c2[s]))
            else:
                key = (int(k1[s]), int(c1[s]), 0, FRESH)
            state_block[s] = self.pending_index[key]
        self.state_block = state_block

    # kernels ----------------------------------------------------------------
    def _build(self):
        grid, space = self.grid, self.space
        T, Tf = grid.n_cells, grid.n_finite
        reps = grid.representatives[:Tf]
        ami_values = np.concatenate([[0.0], reps])  # index 0 = fresh, c + 1 = cell c
        n_p = len(self.p_grid)
        pg = np.array(self.p_grid)
        need_partial_next = space.K >= 3
        a2_idx = np.arange(Tf + 1) if need_partial_next else np.array([0])

        modes = set(self.mode_set.modes)
        kernels = {Mode.ONE_P: _build_kernel(Mode.ONE_P, ami_values, ami_values, np.full(Tf + 1, 0.5), grid)}
        if Mode.ZERO_P in modes:
            kernels[Mode.ZERO_P] = _build_kernel(Mode.ZERO_P, ami_values, ami_values,
                                                 np.full(Tf + 1, 0.5), grid)
        joint_a1 = np.repeat(reps, len(a2_idx) * n_p)
        joint_a2 = np.tile(np.repeat(ami_values[a2_idx], n_p), Tf)
        joint_p = np.tile(pg, Tf * len(a2_idx))
        a2_pos = np.full(Tf + 1, -1)
        a2_pos[a2_idx] = np.arange(len(a2_idx))
        for mode in (Mode.TS, Mode.SC):
            if mode in modes:
                kernels[mode] = _build_kernel(mode, joint_a1, joint_a2, joint_p, grid)

        # law rows: one block per pending configuration
        law_rows, krows, bases, joint_flags, kmodes, adrops, blk_sizes = [], [], [], [], [], [], []
        n_rows = 0
        row_action = []
        action_id = {a: i for i, a in enumerate(self.actions)}
        for b, (k1, c1, k2, c2) in enumerate(self.pending_keys):
            acts = (ONE_P,) if k1 == 0 else self.actions
            blk_sizes.append(len(acts))
            for a in acts:
                row_action.append(action_id[a])
                if a.mode == Mode.ONE_P:
                    kr, base, joint = (0 if k1 == 0 else c1 + 1), space.pair_offset(k1 + 1, 0), False
                    drop = int(k2 > 0)
                elif a.mode == Mode.ZERO_P:
                    kr, base, joint = (0 if k2 == 0 else c2 + 1), space.pair_offset(k2 + 1, 0), False
                    drop = 1
                else:
                    a2i = a2_pos[0 if k2 == 0 else c2 + 1]
                    kr = (c1 * len(a2_idx) + a2i) * n_p + a.p_index
                    base, joint, drop = space.pair_offset(k1 + 1, k2 + 1), True, 0
                law_rows.append(n_rows)
                krows.append(kr)
                bases.append(base)
                joint_flags.append(joint)
                kmodes.append(int(a.mode))
                adrops.append(drop)
                n_rows += 1
        self.block_ptr = np.concatenate([[0], np.cumsum(blk_sizes)]).astype(np.int64)
        self.row_action = np.array(row_action, dtype=np.int64)
        self.action_drops = np.array(adrops, dtype=float)
        law_rows = np.array(law_rows)
        krows = np.array(krows)
        bases = np.array(bases)
        joint_flags = np.array(joint_flags)
        kmodes = np.array(kmodes)

        ent_row, ent_col, ent_lo, ent_hi = [], [], [], []
        for mode, ker in kernels.items():
            sel = kmodes == int(mode)
            if not sel.any():
                continue
            kr = krows[sel]
            lens = ker.ptr[kr + 1] - ker.ptr[kr]
            total = int(lens.sum())
            first = np.repeat(ker.ptr[kr], lens)
            within = np.arange(total) - np.repeat(np.cumsum(lens) - lens, lens)
            idx = first + within
            joint = np.repeat(joint_flags[sel], lens)
            col = np.repeat(bases[sel], lens) + np.where(joint, ker.c1[idx] * T + ker.c2[idx], ker.c1[idx])
            ent_row.append(np.repeat(law_rows[sel], lens))
            ent_col.append(col)
            ent_lo.append(ker.lo[idx])
            ent_hi.append(ker.hi[idx])
        ent_row = np.concatenate(ent_row)
        order = np.argsort(ent_row, kind="stable")
        self.entry_row = ent_row[order]
        self.entry_col = np.concatenate(ent_col)[order]
        self.entry_lo = np.concatenate(ent_lo)[order]
        self.entry_hi = np.concatenate(ent_hi)[order]
        self.indptr = np.concatenate([[0], np.cumsum(np.bincount(self.entry_row, minlength=n_rows))])
        arr = space.arrays
        self.entry_ack = arr["n_ack"][self.entry_col].astype(float)
        self.entry_trunc = arr["n_trunc"][self.entry_col].astype(float)

    @property
    def n_rows(self) -> int:
        return len(self.row_action)

    @property
    def nnz(self) -> int:
        return len(self.entry_col)

    def probabilities(self, channel: ChannelModel) -> np.ndarray:
        g = channel.mean_snr
        with np.errstate(invalid="ignore"):
            width = self.entry_hi - self.entry_lo
            return np.exp(-self.entry_lo / g) * -np.expm1(-width / g)

    def at(self, channel: ChannelModel) -> TransitionLaw:
        """Evaluate the law at the channel's mean SNR."""
        prob = self.probabilities(channel)
        n = self.n_rows
        P = sparse.csr_matrix((prob, self.entry_col, self.indptr), shape=(n, len(self.space)))
        delivers = np.bincount(self.entry_row, weights=prob * self.entry_ack, minlength=n)
        trunc = np.bincount(self.entry_row, weights=prob * self.entry_trunc, minlength=n)
        return TransitionLaw(
            P=P,
            reward=self.grid.rate * delivers,
            drops=trunc + self.action_drops,
            delivers=delivers,
            block_ptr=self.block_ptr,
            state_block=self.state_block,
            row_action=self.row_action,
            actions=self.actions,
            special_state=self.space.special_index,
            labels=self.space.states,
            meta={"space": self.space, "structure": self, "channel": channel},
        )


def build_law(space: StateSpace, p_grid: Sequence[float], mode_set: ModeSet) -> LawStructure:
    return LawStructure(space, p_grid, mode_set)


def transition_row(space: StateSpace, state: State, action: Action, channel: ChannelModel) -> TransitionRow:
    """Exact successor distribution of one (state, action) pair.

    Counts follow the same accounting as :class:`LawStructure`: deliveries and
    truncations are booked on arrival in the successor, action-time drops
    (0P, or a companion abandoned by 1P) on the current transition.
    """
    grid = space.grid
    pend = normalize(space, state)
    if pend.is_fresh and action != ONE_P:
        raise ContractViolation(f"action {action} is not allowed in state {tuple(state)}: nothing to retransmit")
    if action.mode.joint:
        if action.p is None or not 0 < action.p < 1:
            raise ContractViolation(f"joint action {action} needs p in (0, 1)")
    elif action.p is not None:
        raise ContractViolation(f"action {action} takes no parameter")
    a1 = np.array([pend.hol_ami])
    a2 = np.array([pend.next_ami])
    p = np.array([action.p if action.mode.joint else 0.5])
    lo, hi, c1, c2, valid = _successor_intervals(action.mode, a1, a2, p, grid)
    lo, hi, c1, c2 = lo[valid], hi[valid], c1[valid], c2[valid]
    g = channel.mean_snr
    prob = np.exp(-lo / g) * -np.expm1(-(hi - lo) / g)
    if action.mode == Mode.ONE_P:
        pair, action_drop = (pend.hol_counter + 1, 0), int(pend.next_counter > 0)
    elif action.mode == Mode.ZERO_P:
        pair, action_drop = (pend.next_counter + 1, 0), 1
    else:
        pair, action_drop = (pend.hol_counter + 1, pend.next_counter + 1), 0
    acc = {}
    for pr, x1, x2 in zip(prob, c1, c2):
        succ = State(pair[0], pair[1], int(x1), int(x2) if pair[1] else 0)
        idx = space.index_of(succ)
        acc[idx] = acc.get(idx, 0.0) + float(pr)
    entries = sorted(acc.items())
    deliver = sum(pr * (space.hol_ack(space.state_of(i)) + space.next_ack(space.state_of(i))) for i, pr in entries)
    trunc = sum(pr * (space.state_of(i).k_hol == space.K and not space.hol_ack(space.state_of(i)))
                for i, pr in entries)
    return TransitionRow(entries, grid.rate * deliver, trunc + action_drop, deliver)


def check_allowed(space: StateSpace, state: State, action: Action, mode_set: ModeSet, p_grid) -> None:
    if action not in allowed_actions(space, state, mode_set, p_grid):
        raise ContractViolation(f"action {action} is not allowed in state {tuple(state)}")
