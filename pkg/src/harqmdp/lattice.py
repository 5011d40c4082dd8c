"""Discretized AMI axis, encoding-parameter grid, and the state/action spaces."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property
from typing import Iterator, NamedTuple, Optional, Sequence

import numpy as np

from .errors import ConfigurationError


class Mode(enum.IntEnum):
    """Encoding mode; the integer value fixes the tie-breaking order."""

    ONE_P = 0
    ZERO_P = 1
    TS = 2
    SC = 3

    @property
    def label(self) -> str:
        return _MODE_LABELS[self]

    @classmethod
    def from_label(cls, label: str) -> "Mode":
        for mode, text in _MODE_LABELS.items():
            if text == label.upper():
                return mode
        raise ConfigurationError(f"unknown mode {label!r}")

    @property
    def joint(self) -> bool:
        return self in (Mode.TS, Mode.SC)


_MODE_LABELS = {Mode.ONE_P: "1P", Mode.ZERO_P: "0P", Mode.TS: "TS", Mode.SC: "SC"}


class ModeSet(enum.Enum):
    ONE_P = (Mode.ONE_P,)
    TS_SET = (Mode.ONE_P, Mode.ZERO_P, Mode.TS)
    SC_SET = (Mode.ONE_P, Mode.ZERO_P, Mode.SC)
    ALL = (Mode.ONE_P, Mode.ZERO_P, Mode.TS, Mode.SC)

    @property
    def modes(self) -> tuple:
        return self.value

    @classmethod
    def parse(cls, text: str) -> "ModeSet":
        key = text.strip().upper()
        table = {"1P": cls.ONE_P, "ONE_P": cls.ONE_P, "TS": cls.TS_SET, "TS_SET": cls.TS_SET,
                 "SC": cls.SC_SET, "SC_SET": cls.SC_SET, "ALL": cls.ALL}
        if key not in table:
            raise ConfigurationError(f"unknown mode set {text!r}; expected one of 1P, TS, SC, ALL")
        return table[key]


class Action(NamedTuple):
    mode: Mode
    p_index: Optional[int] = None
    p: Optional[float] = None

    def __str__(self):
        if self.p is None:
            return f"({self.mode.label},-)"
        return f"({self.mode.label},{self.p:.4g})"


ONE_P = Action(Mode.ONE_P)
ZERO_P = Action(Mode.ZERO_P)


@dataclass(frozen=True)
class AmiGrid:
    """Uniform quantization of [0, R] into ``t_i - 1`` cells plus the success cell (R, inf).

    The last finite cell is closed at R, since AMI equal to R is still a decoding
    failure; all other finite cells are half-open ``[j w, (j+1) w)``.
    """

    rate: float
    t_i: int

    def __post_init__(self):
        if not self.rate > 0:
            raise ConfigurationError(f"rate must be positive, got {self.rate!r}")
        if int(self.t_i) != self.t_i or self.t_i < 2:
            raise ConfigurationError(f"t_i must be an integer >= 2, got {self.t_i!r}")

    @property
    def n_finite(self) -> int:
        return self.t_i - 1

    @property
    def n_cells(self) -> int:
        return self.t_i

    @property
    def success(self) -> int:
        """Index of the success cell."""
        return self.t_i - 1

    @property
    def width(self) -> float:
        return self.rate / self.n_finite

    @cached_property
    def edges(self) -> np.ndarray:
        """Boundaries 0, w, ..., R of the finite cells (length ``t_i``)."""
        e = np.arange(self.t_i, dtype=float) * self.width
        e[-1] = self.rate
        return e

    @cached_property
    def representatives(self) -> np.ndarray:
        """Midpoints of the finite cells; the success cell has none (NaN)."""
        e = self.edges
        return np.append(0.5 * (e[:-1] + e[1:]), np.nan)

    def cell_bounds(self, c: int) -> tuple:
        if c == self.success:
            return (self.rate, np.inf)
        return (float(self.edges[c]), float(self.edges[c + 1]))

    def representative(self, c: int) -> float:
        if not 0 <= c < self.success:
            raise ConfigurationError(f"cell {c} has no representative")
        return float(self.representatives[c])

    def quantize(self, x):
        """Map AMI values in [0, inf) to cell indices."""
        x = np.asarray(x, dtype=float)
        c = np.minimum(np.floor(x / self.width), self.n_finite - 1).astype(np.int64)
        c = np.where(x > self.rate, self.success, np.maximum(c, 0))
        return int(c) if c.ndim == 0 else c


def build_ami_grid(rate: float, t_i: int) -> AmiGrid:
    return AmiGrid(float(rate), int(t_i) if int(t_i) == t_i else t_i)


def build_p_grid(t_p: int) -> tuple:
    """Interior points j/(t_p - 1), j = 1..t_p-2, of the unit interval."""
    if int(t_p) != t_p or t_p < 3:
        raise ConfigurationError(f"t_p must be an integer >= 3, got {t_p!r}")
    t_p = int(t_p)
    return tuple(j / (t_p - 1) for j in range(1, t_p - 1))


class State(NamedTuple):
    """Post-feedback HARQ state: counters and AMI cells of the HOL and HOL-next packets."""

    k_hol: int
    k_next: int
    c_hol: int
    c_next: int


class StateSpace:
    """All states for truncation ``K`` over a given AMI grid, with a stable index.

    Counter pairs are ordered (1,0), (2,1), (2,0), (3,2), (3,1), (3,0), ...
    States with ``k_next == 0`` carry only the HOL cell (``c_next`` is 0).
    """

    def __init__(self, K: int, grid: AmiGrid):
        if int(K) != K or K < 1:
            raise ConfigurationError(f"K must be a positive integer, got {K!r}")
        self.K = int(K)
        self.grid = grid
        self.pairs = tuple((k1, k2) for k1 in range(1, self.K + 1) for k2 in range(k1 - 1, -1, -1))
        T = grid.n_cells
        offsets = {}
        states = []
        for k1, k2 in self.pairs:
            offsets[(k1, k2)] = len(states)
            if k2 == 0:
                states.extend(State(k1, 0, c, 0) for c in range(T))
            else:
                states.extend(State(k1, k2, c1, c2) for c1 in range(T) for c2 in range(T))
        self._offsets = offsets
        self.states = tuple(states)

    def __len__(self):
        return len(self.states)

    def __iter__(self) -> Iterator[State]:
        return iter(self.states)

    def __repr__(self):
        return f"StateSpace(K={self.K}, t_i={self.grid.t_i}, n={len(self)})"

    def pair_offset(self, k_hol: int, k_next: int) -> int:
        return self._offsets[(k_hol, k_next)]

    def index_of(self, state: State) -> int:
        k1, k2, c1, c2 = state
        T = self.grid.n_cells
        if (k1, k2) not in self._offsets or not 0 <= c1 < T or not 0 <= c2 < T or (k2 == 0 and c2 != 0):
            raise KeyError(state)
        if k2 == 0:
            return self._offsets[(k1, 0)] + c1
        return self._offsets[(k1, k2)] + c1 * T + c2

    def state_of(self, i: int) -> State:
        return self.states[i]

    @property
    def special_state(self) -> State:
        """Reference state (1, 0, lowest cell, -) reached under every policy."""
        return State(1, 0, 0, 0)

    @property
    def special_index(self) -> int:
        return self.index_of(self.special_state)

    # decoding status ------------------------------------------------------
    def hol_ack(self, s: State) -> bool:
        return s.c_hol == self.grid.success

    def next_ack(self, s: State) -> bool:
        return s.k_next > 0 and s.c_next == self.grid.success

    def hol_leaves(self, s: State) -> bool:
        return self.hol_ack(s) or s.k_hol == self.K

    def pending_is_fresh(self, s: State) -> bool:
        """True when, after resolving feedback, no partially sent packet remains."""
        if not self.hol_leaves(s):
            return False
        return s.k_next == 0 or self.next_ack(s)

    # subsets of the state space ------------------------------------------
    def in_ack_ack(self, s: State) -> bool:
        return s.k_next > 0 and self.hol_ack(s) and self.next_ack(s)

    def in_nack_nack(self, s: State) -> bool:
        return s.k_next > 0 and not self.hol_ack(s) and not self.next_ack(s)

    def in_ack_nack(self, s: State) -> bool:
        """Exactly one of two jointly sent packets decoded (either order)."""
        return s.k_next > 0 and self.hol_ack(s) != self.next_ack(s)

    def in_1p_ack(self, s: State) -> bool:
        return s.k_next == 0 and self.hol_ack(s)

    def in_1p_nack(self, s: State) -> bool:
        return s.k_next == 0 and not self.hol_ack(s)

    @cached_property
    def arrays(self) -> dict:
        """Vectorized per-state attributes used by the law builder and analytics."""
        st = np.array(self.states, dtype=np.int64).reshape(-1, 4)
        k1, k2, c1, c2 = st.T
        hol_ack = c1 == self.grid.success
        next_ack = (k2 > 0) & (c2 == self.grid.success)
        hol_leaves = hol_ack | (k1 == self.K)
        return {
            "k_hol": k1, "k_next": k2, "c_hol": c1, "c_next": c2,
            "hol_ack": hol_ack, "next_ack": next_ack,
            "n_ack": hol_ack.astype(np.int64) + next_ack.astype(np.int64),
            "n_trunc": ((k1 == self.K) & ~hol_ack).astype(np.int64),
            "fresh": hol_leaves & ((k2 == 0) | next_ack),
        }


def enumerate_states(K: int, grid: AmiGrid) -> StateSpace:
    return StateSpace(K, grid)


def action_list(mode_set: ModeSet, p_grid: Sequence[float]) -> tuple:
    """Every action of ``mode_set`` in tie-breaking order (mode, then ascending p)."""
    out = []
    for mode in sorted(mode_set.modes):
        if mode.joint:
            out.extend(Action(mode, j, float(p)) for j, p in enumerate(p_grid))
        else:
            out.append(Action(mode))
    return tuple(out)


def allowed_actions(space: StateSpace, state: State, mode_set: ModeSet, p_grid: Sequence[float]) -> tuple:
    """Actions available after ``state``; only (1P,-) when nothing is left to retransmit."""
    if space.pending_is_fresh(state):
        return (ONE_P,)
    return action_list(mode_set, p_grid)
