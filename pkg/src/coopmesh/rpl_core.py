"""RPL control plane: DAG construction and maintenance.

Nodes learn parents from DIO advertisements, keep an additive ETX-based rank
(gateway = 0), pick the default parent minimizing parent_rank + link_etx, and
pace their own DIOs with a trickle timer. DAO processing records reverse
routes only; downward traffic is out of scope.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

ETX_MAX_DEFAULT = 16.0
HYSTERESIS_DEFAULT = 0.5
EWMA_ALPHA = 0.3

TRICKLE_IMIN_MS = 100.0
TRICKLE_DOUBLINGS = 8
TRICKLE_REDUNDANCY_K = 10


class Decision(Enum):
    JOIN = "join"
    UPDATE = "update"
    IGNORE = "ignore"


@dataclass(frozen=True)
class DioMessage:
    sender: int
    rank: float
    dodag_id: int = 1
    relay_suboption: int | None = None


@dataclass(frozen=True)
class DisMessage:
    sender: int


@dataclass(frozen=True)
class DaoMessage:
    sender: int
    target: int
    via_parent: int


def trace_record(msg, slot: int) -> dict:
    """Control message as a JSON-lines trace object."""
    if isinstance(msg, DioMessage):
        return {
            "slot": slot,
            "type": "DIO",
            "sender": msg.sender,
            "rank": msg.rank,
            "relay_suboption": msg.relay_suboption,
        }
    if isinstance(msg, DisMessage):
        return {"slot": slot, "type": "DIS", "sender": msg.sender}
    if isinstance(msg, DaoMessage):
        return {
            "slot": slot,
            "type": "DAO",
            "sender": msg.sender,
            "target": msg.target,
            "via_parent": msg.via_parent,
        }
    raise TypeError(f"not a control message: {msg!r}")


@dataclass
class TrickleState:
    interval_min_ms: float = TRICKLE_IMIN_MS
    max_doublings: int = TRICKLE_DOUBLINGS
    redundancy_k: int = TRICKLE_REDUNDANCY_K
    current_interval_ms: float = TRICKLE_IMIN_MS
    counter: int = 0

    @property
    def interval_max_ms(self) -> float:
        return self.interval_min_ms * 2**self.max_doublings


DEAD_LINK_WINDOW = 8  # consecutive failed attempts before sampling etx_max


@dataclass
class EtxEstimate:
    """Per-link ETX: seeded from the channel, updated by an EWMA once data
    flows.

    Attempts accumulate until a success closes a sample (attempts per
    delivery); a run of DEAD_LINK_WINDOW failures without any success closes
    one at etx_max instead, so a single missed burst cannot crater a link
    whose broadcast was in fact overheard elsewhere.
    """

    src: int
    dst: int
    etx: float
    attempts: int = 0
    successes: int = 0
    pending_attempts: int = 0

    def observe(self, attempts: int, successes: int, etx_max: float = ETX_MAX_DEFAULT):
        if attempts < successes or successes < 0:
            raise ValueError("malformed-stats")
        self.attempts += attempts
        self.successes += successes
        self.pending_attempts += attempts
        if successes > 0:
            sample = compute_etx(self.pending_attempts, successes, etx_max)
        elif self.pending_attempts >= DEAD_LINK_WINDOW:
            sample = etx_max
        else:
            return
        self.pending_attempts = 0
        self.etx = min(etx_max, (1.0 - EWMA_ALPHA) * self.etx + EWMA_ALPHA * sample)


@dataclass(frozen=True)
class ParentEntry:
    rank: float  # parent's advertised rank
    etx: float  # our link to it

    @property
    def cost(self) -> float:
        return self.rank + self.etx


@dataclass
class NodeState:
    node_id: int
    rank: float | None = None  # None until joined; gateway starts at 0
    parent_set: dict[int, ParentEntry] = field(default_factory=dict)
    default_parent: int | None = None
    children: set[int] = field(default_factory=set)
    active_connections: int = 0
    selected_relay: int | None = None
    trickle: TrickleState = field(default_factory=TrickleState)
    route_table: dict[int, int] = field(default_factory=dict)
    last_dio_slot: int | None = None

    @property
    def joined(self) -> bool:
        return self.rank is not None


def compute_etx(attempts: int, successes: int, etx_max: float = ETX_MAX_DEFAULT) -> float:
    """ETX = attempts / successes; links with no successes get etx_max."""
    if attempts < successes or successes < 0:
        raise ValueError("malformed-stats")
    if successes == 0:
        return etx_max
    return attempts / successes


def compute_rank(parent_rank: float, link_etx: float) -> float:
    if link_etx < 1.0:
        raise ValueError("link_etx must be >= 1")
    return parent_rank + link_etx


def select_default_parent(parent_set: dict[int, ParentEntry]) -> int:
    """Parent minimizing advertised rank + link ETX; ties to the lowest id."""
    if not parent_set:
        raise ValueError("no-parent")
    return min(parent_set, key=lambda n: (parent_set[n].cost, n))


def _adopt_best_parent(state: NodeState) -> None:
    best = select_default_parent(state.parent_set)
    state.default_parent = best
    state.rank = state.parent_set[best].cost
    # drop entries that would sit at or above our own position
    stale = [n for n, e in state.parent_set.items() if e.rank >= state.rank and n != best]
    for n in stale:
        del state.parent_set[n]


def process_dio(
    state: NodeState,
    dio: DioMessage,
    link_etx: float,
    hysteresis: float = HYSTERESIS_DEFAULT,
) -> Decision:
    """Absorb a neighbor's DIO.

    Unjoined nodes join through the sender. Joined nodes switch position only
    when the candidate rank beats the current one by more than the hysteresis
    margin; otherwise the DIO is ignored, though the sender is still recorded
    (or refreshed) in the parent set whenever its rank is below ours. A
    refresh that touches the current default parent re-derives our own rank,
    so cost increases still propagate.
    """
    if not state.joined:
        state.parent_set[dio.sender] = ParentEntry(dio.rank, link_etx)
        _adopt_best_parent(state)
        return Decision.JOIN

    candidate = compute_rank(dio.rank, link_etx)
    is_parent = dio.sender == state.default_parent

    if dio.rank < state.rank:
        state.parent_set[dio.sender] = ParentEntry(dio.rank, link_etx)
    elif is_parent:
        # our default parent climbed to or above our own position: unusable
        state.parent_set.pop(dio.sender, None)
        state.default_parent = None
        state.parent_set = {
            n: e for n, e in state.parent_set.items() if e.rank < state.rank
        }
        if state.parent_set:
            _adopt_best_parent(state)
        else:
            state.rank = None
        return Decision.UPDATE

    if candidate < state.rank - hysteresis:
        _adopt_best_parent(state)
        return Decision.UPDATE

    if is_parent:
        # same position, refreshed cost: rank increases must still propagate
        state.rank = state.parent_set[dio.sender].cost
        keep = state.default_parent
        state.parent_set = {
            n: e
            for n, e in state.parent_set.items()
            if e.rank < state.rank or n == keep
        }
    return Decision.IGNORE


def trickle_fire(trickle: TrickleState, consistent: bool) -> tuple[bool, float]:
    """Advance the trickle timer at interval expiry.

    Consistent intervals double (capped) and emit only while fewer than
    redundancy_k consistent messages were heard; an inconsistency snaps the
    interval back to the minimum and forces an emission.
    """
    if consistent:
        emit = trickle.counter < trickle.redundancy_k
        trickle.current_interval_ms = min(
            trickle.current_interval_ms * 2.0, trickle.interval_max_ms
        )
    else:
        emit = True
        trickle.current_interval_ms = trickle.interval_min_ms
    trickle.counter = 0
    return emit, trickle.current_interval_ms


def trickle_hear_consistent(trickle: TrickleState) -> None:
    trickle.counter += 1


def emit_dis(state: NodeState) -> DisMessage:
    return DisMessage(sender=state.node_id)


def process_dis(state: NodeState) -> None:
    """A solicitation resets the receiver's trickle so a DIO follows promptly."""
    state.trickle.current_interval_ms = state.trickle.interval_min_ms
    state.trickle.counter = 0


def process_dao(routes: dict[int, int], dao: DaoMessage) -> dict[int, int]:
    """Record target -> next-hop from a DAO; freshest advertisement wins."""
    routes[dao.target] = dao.sender
    return routes


def update_children_and_connections(states: dict[int, NodeState]) -> None:
    """Recompute children sets and active-connection counts from parents.

    children(n) = nodes whose default parent is n; active_connections(n) =
    number of installed source-to-gateway default paths where n appears as an
    intermediate hop.
    """
    for st in states.values():
        st.children = set()
        st.active_connections = 0
    for st in states.values():
        if st.default_parent is not None:
            states[st.default_parent].children.add(st.node_id)
    gateway = min(states)
    for st in states.values():
        if st.node_id == gateway or not st.joined:
            continue
        hop = st.default_parent
        seen = {st.node_id}
        while hop is not None and hop != gateway and hop not in seen:
            seen.add(hop)
            states[hop].active_connections += 1
            hop = states[hop].default_parent
