"""Block-by-block simulation of the HARQ process with continuous AMI.

The simulator never uses the discretized law: AMI values accumulate exactly
and are quantized only to query a multi-bit policy, so the gap to the
analytic throughput measures the discretization bias.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, Mapping, NamedTuple, Optional, Sequence

import numpy as np

from .channel import ChannelModel
from .errors import ConfigurationError, ContractViolation
from .lattice import ONE_P, Action, AmiGrid, Mode, ModeSet, State, StateSpace
from .onebit import observable_case

SEGMENT = 1000
N_BOOTSTRAP = 200
_CHUNK = 1 << 18


class InfoModel(enum.Enum):
    MULTI_BIT = "multi_bit"
    ONE_BIT = "one_bit"


class Observation(NamedTuple):
    """What a one-bit transmitter knows before choosing an action.

    Counters describe the packets still pending after the last feedback;
    ``hol_ack``/``next_ack`` are the bits of that feedback for the packets
    sent in the last block.
    """

    k_hol: int
    k_next: int
    hol_ack: bool
    next_ack: bool
    last_action: Optional[Action]


@dataclass(frozen=True)
class SimReport:
    blocks: int
    delivered_bits: float
    dropped_packets: int
    delivered_packets: int
    eta_emp: float
    p_out_emp: float
    eta_stderr: float
    seed: int


def tabular_policy(space: StateSpace, actions: Sequence[Action]) -> Callable[[State], Action]:
    """Multi-bit policy source from one action per state of ``space``."""
    if len(actions) != len(space):
        raise ConfigurationError(f"policy has {len(actions)} entries for {len(space)} states")
    table = dict(zip(space.states, actions))
    return table.__getitem__


def unique_action_source(action: Action) -> Callable[[Observation], Action]:
    """One-bit policy playing ``action`` whenever a packet is pending."""

    def source(obs: Observation) -> Action:
        return action if obs.k_hol > 0 else ONE_P

    return source


def observable_policy_source(policy: Mapping) -> Callable[[Observation], Action]:
    """One-bit K=2 policy source from a map of observable states to actions."""

    def source(obs: Observation) -> Action:
        return policy[observable_case(obs.last_action, obs.hol_ack, obs.k_hol > 0)]

    return source


def _check_action(a, pending_fresh, mode_set, where):
    if not isinstance(a, Action):
        raise ContractViolation(f"policy returned {a!r} in state {where}, not an Action")
    if pending_fresh and a != ONE_P:
        raise ContractViolation(f"action {a} is not allowed in state {where}: nothing to retransmit")
    if mode_set is not None and a.mode not in mode_set.modes:
        raise ContractViolation(f"action {a} is outside {mode_set.name} in state {where}")
    if a.mode.joint:
        if a.p is None or not 0 < a.p < 1:
            raise ContractViolation(f"joint action {a} needs p in (0, 1) in state {where}")


def _bootstrap_stderr(per_block: np.ndarray, seed: int) -> float:
    n = len(per_block)
    seg = min(SEGMENT, max(1, n // 2))
    n_seg = n // seg
    if n_seg < 2:
        return float("nan")
    means = per_block[: n_seg * seg].reshape(n_seg, seg).mean(axis=1)
    rng = np.random.default_rng([seed, 1])
    boot = means[rng.integers(0, n_seg, size=(N_BOOTSTRAP, n_seg))].mean(axis=1)
    return float(boot.std(ddof=1))


def simulate(policy_source: Callable, info_model, R: float, K: int, channel: ChannelModel, grid: AmiGrid,
             blocks: int, seed: int, mode_set: Optional[ModeSet] = None) -> SimReport:
    """Run the HARQ process for ``blocks`` channel blocks.

    Parameters
    ----------
    policy_source : callable
        ``State -> Action`` for MULTI_BIT (quantized post-feedback state),
        ``Observation -> Action`` for ONE_BIT.
    info_model : InfoModel or str
    R, K : rate and truncation
    channel : ChannelModel
    grid : AmiGrid
        Quantizer for multi-bit lookups.
    blocks : int
    seed : int
    mode_set : ModeSet, optional
        When given, actions outside it are rejected.

    Notes
    -----
    The first block always sends a fresh packet with (1P,-). Deliveries and
    truncations are counted in the block whose feedback reveals them; a HOL
    dropped by 0P or a companion abandoned by 1P counts as a drop in the block
    where the action is taken.
    """
    info = InfoModel(info_model)
    if int(blocks) != blocks or blocks < 1:
        raise ConfigurationError(f"blocks must be a positive integer, got {blocks!r}")
    if int(K) != K or K < 1:
        raise ConfigurationError(f"K must be a positive integer, got {K!r}")
    if abs(grid.rate - R) > 1e-12:
        raise ConfigurationError(f"grid rate {grid.rate} differs from R={R}")
    blocks, K = int(blocks), int(K)
    rng = np.random.default_rng(seed)
    log2 = math.log2
    width, n_fin, success = grid.width, grid.n_finite, grid.success
    multi = info is InfoModel.MULTI_BIT
    cache = {}

    def cell(x):
        return success if x > R else min(int(x / width), n_fin - 1)

    # pending configuration after the last feedback
    kh, ih, kn, inn = 0, 0.0, 0, 0.0
    state = None
    obs = None
    per_block = np.zeros(blocks, dtype=np.int8)
    dropped = 0
    for start in range(0, blocks, _CHUNK):
        snr = channel.sample(rng, min(_CHUNK, blocks - start)).tolist()
        for j, g in enumerate(snr):
            n = start + j
            fresh = kh == 0
            if n == 0:
                a = ONE_P
            elif multi:
                a = cache.get(state)
                if a is None:
                    a = policy_source(state)
                    _check_action(a, fresh, mode_set, tuple(state))
                    cache[state] = a
            else:
                a = policy_source(obs)
                _check_action(a, fresh, mode_set, tuple(obs[:4]))
            mode = a.mode
            if mode == Mode.ONE_P:
                if kn > 0:
                    dropped += 1
                k1, i1, k2, i2 = kh + 1, ih + log2(1 + g), 0, 0.0
            elif mode == Mode.ZERO_P:
                dropped += 1
                k1, i1, k2, i2 = kn + 1, inn + log2(1 + g), 0, 0.0
            elif mode == Mode.TS:
                c = log2(1 + g)
                k1, i1, k2, i2 = kh + 1, ih + a.p * c, kn + 1, inn + (1 - a.p) * c
            else:
                p = a.p
                i1 = ih + log2(1 + p * g / (1 + (1 - p) * g))
                if i1 > R:
                    i2 = inn + log2(1 + (1 - p) * g)
                else:
                    i2 = inn + log2(1 + (1 - p) * g / (1 + p * g))
                k1, k2 = kh + 1, kn + 1
            if not 0 <= k2 < k1 <= K:
                raise ContractViolation(f"counters ({k1}, {k2}) violate 0 <= k_next < k_hol <= {K}")
            hol_ack = i1 > R
            next_ack = k2 > 0 and i2 > R
            per_block[n] = hol_ack + next_ack
            if multi:
                state = State(k1, k2, cell(i1), cell(i2) if k2 else 0)
            # resolve feedback
            next_pending = k2 > 0 and not next_ack
            if hol_ack or k1 == K:
                if not hol_ack:
                    dropped += 1
                if next_pending:
                    kh, ih, kn, inn = k2, i2, 0, 0.0
                else:
                    kh, ih, kn, inn = 0, 0.0, 0, 0.0
            else:
                kh, ih = k1, i1
                kn, inn = (k2, i2) if next_pending else (0, 0.0)
            if not multi:
                obs = Observation(kh, kn, hol_ack, next_ack, a)
    delivered = int(per_block.sum(dtype=np.int64))
    bits = R * delivered
    flow = dropped + delivered
    return SimReport(
        blocks=blocks,
        delivered_bits=bits,
        dropped_packets=dropped,
        delivered_packets=delivered,
        eta_emp=bits / blocks,
        p_out_emp=dropped / flow if flow else float("nan"),
        eta_stderr=R * _bootstrap_stderr(per_block.astype(float), seed),
        seed=seed,
    )
