"""Data-plane hop engines.

Three per-hop disciplines over the same slotted link abstraction: plain
retransmission to the default parent, cooperative overhear-and-relay where a
selected lower-rank neighbor forwards copies the parent missed, and anycast
over a priority-ordered forwarding set. Every transmission is one slot and
one deterministic Bernoulli draw keyed by (packet, link, attempt, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .coop_relay import decide_use_relay
from .rng import KeyedStream, uniform
from .topology import Channel, ChannelParams, LinkModel, link_success_probability

DOMAIN_TRANSMIT = 0x7B
DOMAIN_COOP_DECISION = 0xC0


class Protocol(Enum):
    RPL = "rpl"
    COOP_RPL = "coop_rpl"
    OPP_RPL = "opp_rpl"


class PacketStatus(Enum):
    IN_FLIGHT = "in_flight"
    DELIVERED = "delivered"
    DROPPED = "dropped"


@dataclass
class Packet:
    packet_id: int
    source: int
    created_slot: int
    current_holder: int
    hop_count: int = 0
    total_transmissions: int = 0
    retransmissions: int = 0
    status: PacketStatus = PacketStatus.IN_FLIGHT
    delivered_slot: int | None = None
    drop_reason: str | None = None
    visited: set[int] = field(default_factory=set)

    def __post_init__(self):
        self.visited.add(self.current_holder)

    @property
    def delay_slots(self) -> int | None:
        if self.delivered_slot is None:
            return None
        return self.delivered_slot - self.created_slot


@dataclass(frozen=True)
class HopOutcome:
    attempts: int
    relay_used: bool
    relay_attempts: int
    delivered: bool
    slots_consumed: int
    receiver: int | None = None
    delivered_by_relay: bool = False

    @property
    def retransmissions(self) -> int:
        return (self.attempts - 1) + self.relay_attempts


@dataclass(frozen=True)
class ForwardingSet:
    owner: int
    members: tuple[int, ...]  # priority order, best next hop first


def transmit(link: LinkModel, params: ChannelParams, slot: int, rng) -> bool:
    """One Bernoulli trial against the link's success probability."""
    return rng.random() < link_success_probability(link, params, slot)


class LinkLayer:
    """Per-packet deterministic link draws.

    Each directed link keeps an attempt counter so the n-th use of a link by
    a packet always sees the same draw, independent of slots or call order
    elsewhere. Transmissions are optionally registered per slot for
    interference bookkeeping.
    """

    def __init__(
        self,
        channel: Channel,
        seed: int,
        packet_id: int,
        registry: dict[int, set[int]] | None = None,
    ):
        self.channel = channel
        self.seed = seed
        self.packet_id = packet_id
        self.registry = registry
        self._counters: dict[tuple[int, int], int] = {}

    def transmit(self, src: int, dst: int, slot: int) -> bool:
        key = (src, dst)
        idx = self._counters.get(key, 0)
        self._counters[key] = idx + 1
        if self.registry is not None:
            self.registry.setdefault(slot, set()).add(src)
        p = self.channel.success_probability(src, dst)
        return uniform(self.seed, DOMAIN_TRANSMIT, self.packet_id, src, dst, idx) < p


def forward_hop_rpl(
    link_layer, holder: int, parent: int, slot: int, max_retx: int,
    retx_wait: int = 1,
) -> HopOutcome:
    """Unicast to the default parent with up to max_retx retries.

    Each retry follows an ACK-timeout gap of retx_wait slots; the gap only
    shows up in slots_consumed, never in the attempt count.
    """
    attempts = 0
    cursor = 0
    for _ in range(1 + max_retx):
        attempts += 1
        ok = link_layer.transmit(holder, parent, slot + cursor)
        cursor += 1
        if ok:
            return HopOutcome(attempts, False, 0, True, cursor, parent)
        if attempts <= max_retx:
            cursor += retx_wait
    return HopOutcome(attempts, False, 0, False, cursor, None)


def forward_hop_coop(
    link_layer,
    holder: int,
    parent: int,
    relay: int | None,
    slot: int,
    max_retx: int,
    relay_retx: int,
    cooperate: bool = True,
    retx_wait: int = 1,
) -> HopOutcome:
    """Broadcast toward the parent with the relay listening in.

    Each sender broadcast is judged against the parent link and, when it
    misses, against the sender-relay link; an overheard copy gets forwarded
    by the relay (its own slot and retransmission count) before the sender
    resumes retrying. The relay transmits inside the sender's ACK-timeout
    gap, so its forwards displace wait slots rather than adding to them. The
    hop fails only once sender and relay budgets are both spent.
    """
    use_relay = cooperate and relay is not None
    attempts = 0
    relay_attempts = 0
    relay_used = False
    cursor = 0
    for _ in range(1 + max_retx):
        attempts += 1
        parent_got = link_layer.transmit(holder, parent, slot + cursor)
        relay_got = False
        if not parent_got and use_relay:
            relay_got = link_layer.transmit(holder, relay, slot + cursor)
        cursor += 1
        if parent_got:
            return HopOutcome(attempts, relay_used, relay_attempts, True, cursor, parent)
        relay_slots = 0
        if relay_got:
            relay_used = True
            for _ in range(relay_retx):
                relay_attempts += 1
                relay_slots += 1
                forwarded = link_layer.transmit(relay, parent, slot + cursor)
                cursor += 1
                if forwarded:
                    return HopOutcome(
                        attempts, True, relay_attempts, True, cursor, parent,
                        delivered_by_relay=True,
                    )
        if attempts <= max_retx:
            cursor += max(0, retx_wait - relay_slots)
    return HopOutcome(attempts, relay_used, relay_attempts, False, cursor, None)


def forward_hop_opportunistic(
    link_layer, holder: int, fset: ForwardingSet, slot: int, max_retx: int,
    retx_wait: int = 1,
) -> HopOutcome:
    """Anycast to the forwarding set; the best receiving member takes over.

    Every member's link is evaluated independently per attempt and the
    highest-priority receiver becomes the next holder, so simultaneous
    receptions never duplicate the packet.
    """
    if not fset.members:
        raise ValueError("empty forwarding set")
    attempts = 0
    cursor = 0
    for _ in range(1 + max_retx):
        attempts += 1
        receiver = None
        for member in fset.members:
            got = link_layer.transmit(holder, member, slot + cursor)
            if got and receiver is None:
                receiver = member
        cursor += 1
        if receiver is not None:
            return HopOutcome(attempts, False, 0, True, cursor, receiver)
        if attempts <= max_retx:
            cursor += retx_wait
    return HopOutcome(attempts, False, 0, False, cursor, None)


def build_forwarding_set(
    owner_state, states: dict, channel: Channel, etx_of, size: int
) -> ForwardingSet:
    """Priority-ordered anycast set: lower-rank neighbors, deepest progress
    toward the root first, path cost breaking ties. Shrinks when fewer
    qualify (a lone default parent degenerates to plain unicast)."""
    owner = owner_state.node_id
    if owner_state.rank is None:
        return ForwardingSet(owner, ())
    ranked = []
    for n in channel.neighbors(owner):
        st = states.get(n)
        if st is None or not st.joined or st.rank >= owner_state.rank:
            continue
        ranked.append((st.rank, st.rank + etx_of(owner, n), n))
    ranked.sort()
    members = [n for _, _, n in ranked[:size]]
    if not members and owner_state.default_parent is not None:
        members = [owner_state.default_parent]
    return ForwardingSet(owner, tuple(members))


@dataclass
class NetworkView:
    """Everything the data plane needs from a formed scenario."""

    channel: Channel
    states: dict
    etx_of: object  # callable (src, dst) -> float
    gateway: int
    max_retx: int = 3
    relay_retx: int = 1
    retx_wait: int = 1
    p_coop: float = 1.0
    relay_for: dict[int, int | None] = field(default_factory=dict)
    fsets: dict[int, ForwardingSet] = field(default_factory=dict)
    seed: int = 0
    registry: dict[int, set[int]] | None = None


def advance_one_hop(
    packet: Packet,
    protocol: Protocol,
    net: NetworkView,
    link_layer: LinkLayer,
    slot: int,
) -> HopOutcome | None:
    """Run one hop of the packet's journey at the given slot.

    Mutates the packet (status, holder, tallies, delivery slot). Returns the
    hop outcome, or None when the holder has no route.
    """
    holder = packet.current_holder
    state = net.states[holder]
    parent = state.default_parent
    if parent is None:
        packet.status = PacketStatus.DROPPED
        packet.drop_reason = "no-route"
        return None
    if protocol is Protocol.RPL:
        outcome = forward_hop_rpl(
            link_layer, holder, parent, slot, net.max_retx, net.retx_wait
        )
    elif protocol is Protocol.COOP_RPL:
        relay = net.relay_for.get(holder)
        cooperate = decide_use_relay(
            relay,
            net.p_coop,
            KeyedStream(net.seed, DOMAIN_COOP_DECISION, packet.packet_id, holder),
        )
        outcome = forward_hop_coop(
            link_layer, holder, parent, relay, slot,
            net.max_retx, net.relay_retx, cooperate, net.retx_wait,
        )
    else:
        fset = net.fsets.get(holder) or ForwardingSet(holder, (parent,))
        outcome = forward_hop_opportunistic(
            link_layer, holder, fset, slot, net.max_retx, net.retx_wait
        )
    packet.total_transmissions += outcome.attempts + outcome.relay_attempts
    packet.retransmissions += outcome.retransmissions
    if not outcome.delivered:
        packet.status = PacketStatus.DROPPED
        packet.drop_reason = "link-failure"
        return outcome
    packet.hop_count += 1
    packet.current_holder = outcome.receiver
    if outcome.receiver == net.gateway:
        packet.status = PacketStatus.DELIVERED
        packet.delivered_slot = slot + outcome.slots_consumed
    elif outcome.receiver in packet.visited:
        packet.status = PacketStatus.DROPPED
        packet.drop_reason = "loop"
    else:
        packet.visited.add(outcome.receiver)
    return outcome


def route_to_gateway(
    packet: Packet, protocol: Protocol, net: NetworkView
) -> list[HopOutcome]:
    """Drive a packet hop by hop until the gateway or a drop.

    Synchronous driver over advance_one_hop on a static network snapshot;
    the event loop interleaves the same hops with control traffic instead.
    """
    outcomes: list[HopOutcome] = []
    cursor = packet.created_slot
    link_layer = LinkLayer(net.channel, net.seed, packet.packet_id, net.registry)
    while packet.status is PacketStatus.IN_FLIGHT:
        outcome = advance_one_hop(packet, protocol, net, link_layer, cursor)
        if outcome is None:
            break
        outcomes.append(outcome)
        cursor += outcome.slots_consumed
    return outcomes


def packet_trace(packet: Packet, relay_hops: int) -> dict:
    return {
        "packet_id": packet.packet_id,
        "source": packet.source,
        "status": packet.status.value,
        "hops": packet.hop_count,
        "transmissions": packet.total_transmissions,
        "relay_hops": relay_hops,
        "delay_slots": packet.delay_slots,
    }
