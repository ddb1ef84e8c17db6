"""Discrete-event scheduler tying the pieces together.

One run has two phases on one event queue: DAG formation (trickle-paced DIOs
plus DIS solicitation and DAO route recording) until ranks are quiet, then
traffic (uniform random sources and slots) with the control plane still
live. Events are processed in (slot, kind priority, issue id) order, so a
replay with the same config and seed is bit-identical.
"""

from __future__ import annotations

import copy
import heapq
import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .coop_relay import RateWeights, RoutingClass, WEIGHT_PRESETS, run_selection
from .forwarding import (
    ForwardingSet,
    LinkLayer,
    NetworkView,
    Packet,
    PacketStatus,
    Protocol,
    advance_one_hop,
    build_forwarding_set,
    packet_trace,
)
from .rng import derive_seed
from .rpl_core import (
    DaoMessage,
    Decision,
    DioMessage,
    EtxEstimate,
    NodeState,
    TrickleState,
    emit_dis,
    process_dao,
    process_dio,
    process_dis,
    trace_record,
    trickle_fire,
    trickle_hear_consistent,
    update_children_and_connections,
)
from .topology import (
    ChannelMode,
    ChannelParams,
    Channel,
    GATEWAY_ID,
    Region,
    calibrate_params_for_lsr,
    place_nodes,
)

DOMAIN_TRAFFIC = 0x2A

DEFAULT_REGION_SIDE = 300.0
DEFAULT_NODE_COUNT = 80.0
DEFAULT_INTENSITY = DEFAULT_NODE_COUNT / (DEFAULT_REGION_SIDE * DEFAULT_REGION_SIDE)


class EventKind(Enum):
    # enum values double as same-slot processing priority
    TRICKLE_FIRE = 0
    DIO_TX = 1
    DIS_TX = 2
    DAO_TX = 3
    PACKET_GEN = 4
    HOP_ATTEMPT = 5
    METRICS_SNAPSHOT = 6


@dataclass(order=True)
class Event:
    slot: int
    priority: int
    event_id: int
    kind: EventKind = field(compare=False)
    payload: object = field(compare=False, default=None)


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything one run (or one sweep of runs) needs."""

    region_side: float = DEFAULT_REGION_SIDE
    intensity: float = DEFAULT_INTENSITY
    density_ratio: float = 1.0
    # channel
    tx_power_w: float = 2.0
    path_loss_exponent: float = 3.0
    reference_loss_db: float = 40.0
    noise_floor_w: float = 1e-13
    tx_range_m: float = 70.0
    sinr_threshold_db: float = 40.0
    lsr_value: float | None = None
    lsr_mapping: str = "reference"  # "reference" (calibrated) or "uniform"
    reference_distance: float | None = 41.5  # desk-scale calibration anchor
    # protocol
    protocol: Protocol = Protocol.RPL
    routing_class: RoutingClass = RoutingClass.BEST_EFFORT
    weights: RateWeights | None = None
    p_coop: float = 1.0
    max_retx: int = 3
    relay_retx: int = 1
    retx_wait_slots: int = 1
    fset_size: int = 3
    # run shape
    n_packets: int = 1000
    warmup_slots: int = 3000
    traffic_window_slots: int | None = None
    quiescence_slots: int = 20
    slot_ms: float = 10.0
    seed: int = 1
    # control plane
    etx_max: float = 16.0
    hysteresis: float = 0.5
    trickle_imin_ms: float = 100.0
    trickle_doublings: int = 8
    trickle_redundancy_k: int = 10
    dis_timeout_ms: float = 500.0
    sinr_per_slot: bool = False
    # sweep description (consumed by the CLI)
    sweep_axis: str | None = None
    sweep_values: tuple[float, ...] = ()

    def __post_init__(self):
        if self.n_packets <= 0:
            raise ValueError("n_packets must be positive")
        if self.warmup_slots < 0:
            raise ValueError("warmup_slots must be >= 0")
        if not 0.0 <= self.p_coop <= 1.0:
            raise ValueError("p_coop must be in [0, 1]")
        if self.intensity <= 0 or self.density_ratio <= 0:
            raise ValueError("intensity and density_ratio must be positive")
        if self.lsr_value is not None and not 0.0 < self.lsr_value <= 1.0:
            raise ValueError("lsr_value must be in (0, 1]")
        if self.lsr_mapping not in ("reference", "uniform"):
            raise ValueError("lsr_mapping must be 'reference' or 'uniform'")
        if self.sweep_axis is not None and not self.sweep_values:
            raise ValueError("sweep values must be nonempty")

    @property
    def effective_intensity(self) -> float:
        return self.intensity * self.density_ratio

    @property
    def window_slots(self) -> int:
        if self.traffic_window_slots is not None:
            return self.traffic_window_slots
        return 2 * self.n_packets

    def channel_params(self) -> ChannelParams:
        base = ChannelParams(
            tx_power_w=self.tx_power_w,
            path_loss_exponent=self.path_loss_exponent,
            reference_loss_db=self.reference_loss_db,
            noise_floor_w=self.noise_floor_w,
            tx_range_m=self.tx_range_m,
            sinr_threshold_db=self.sinr_threshold_db,
        )
        if self.lsr_value is None:
            return base
        if self.lsr_mapping == "uniform":
            return replace(
                base, mode=ChannelMode.SWEPT_LSR, lsr_value=self.lsr_value
            )
        return calibrate_params_for_lsr(base, self.lsr_value, self.reference_distance)

    def active_weights(self) -> RateWeights:
        if self.weights is not None:
            return self.weights
        return WEIGHT_PRESETS[self.routing_class]


@dataclass(frozen=True)
class MetricsReport:
    packets_sent: int
    delivered: int
    dropped: int
    pdr: float
    mean_retransmissions: float
    mean_delay_slots: float | None
    mean_delay_ms: float | None
    disconnected: bool
    joined_nodes: int
    total_nodes: int
    formation_slots: int

    def __post_init__(self):
        if self.delivered + self.dropped != self.packets_sent:
            raise ValueError("packet conservation violated")
        if self.packets_sent > 0:
            if not math.isclose(self.pdr, self.delivered / self.packets_sent):
                raise ValueError("pdr must equal delivered/sent")


def collect_metrics(
    packets: list[Packet],
    slot_ms: float,
    disconnected: bool = False,
    joined_nodes: int = 0,
    total_nodes: int = 0,
    formation_slots: int = 0,
) -> MetricsReport:
    """Fold resolved packets into a report row.

    Retransmissions average over every packet, delivered or not; delay
    averages over delivered packets only and is absent when none made it.
    """
    sent = len(packets)
    delivered = [p for p in packets if p.status is PacketStatus.DELIVERED]
    dropped = [p for p in packets if p.status is PacketStatus.DROPPED]
    if len(delivered) + len(dropped) != sent:
        raise ValueError("unresolved packets in metrics collection")
    pdr = len(delivered) / sent if sent else 0.0
    mean_retx = sum(p.retransmissions for p in packets) / sent if sent else 0.0
    if delivered:
        mean_delay = sum(p.delay_slots for p in delivered) / len(delivered)
        mean_delay_ms = mean_delay * slot_ms
    else:
        mean_delay = None
        mean_delay_ms = None
    return MetricsReport(
        packets_sent=sent,
        delivered=len(delivered),
        dropped=len(dropped),
        pdr=pdr,
        mean_retransmissions=mean_retx,
        mean_delay_slots=mean_delay,
        mean_delay_ms=mean_delay_ms,
        disconnected=disconnected,
        joined_nodes=joined_nodes,
        total_nodes=total_nodes,
        formation_slots=formation_slots,
    )


def generate_traffic(
    config: ScenarioConfig, sources: list[int], start_slot: int
) -> list[tuple[int, int]]:
    """(slot, source) pairs: n_packets uniform over sources and the window."""
    if not sources:
        raise ValueError("no joined sources to generate traffic from")
    rng = np.random.default_rng(derive_seed(config.seed, DOMAIN_TRAFFIC))
    picks = rng.integers(0, len(sources), size=config.n_packets)
    offsets = rng.integers(0, config.window_slots, size=config.n_packets)
    ordered = sorted(sources)
    return [
        (start_slot + int(offsets[i]), ordered[int(picks[i])])
        for i in range(config.n_packets)
    ]


class Simulation:
    """Mutable state of one scenario run.

    form_network() builds one of these through the formation phase; the
    traffic phase is protocol-specific, so sweeps deep-copy a formed network
    per protocol variant instead of re-forming it.
    """

    def __init__(self, config: ScenarioConfig):
        self.config = config
        params = config.channel_params()
        region = Region(config.region_side)
        self.placements = place_nodes(
            region, config.effective_intensity, config.seed, params
        )
        self.channel = Channel(self.placements, params, config.seed)
        self.states: dict[int, NodeState] = {
            p.node_id: NodeState(
                p.node_id,
                trickle=TrickleState(
                    interval_min_ms=config.trickle_imin_ms,
                    max_doublings=config.trickle_doublings,
                    redundancy_k=config.trickle_redundancy_k,
                    current_interval_ms=config.trickle_imin_ms,
                ),
            )
            for p in self.placements
        }
        self.states[GATEWAY_ID].rank = 0.0
        self.etx_table: dict[tuple[int, int], EtxEstimate] = {}
        self.queue: list[Event] = []
        self.event_id = 0
        self.trickle_seq: dict[int, int] = {n: 0 for n in self.states}
        self.last_change_slot = 0
        self.now = 0
        self.formation_slots = 0
        self.registry: dict[int, set[int]] = {}
        self.event_log: list[tuple] = []
        self.trace_sink: list[dict] | None = None
        self.relay_for: dict[int, int | None] = {}
        self.relay_rates: dict[int, dict[int, float]] = {}
        self.fsets: dict[int, ForwardingSet] = {}
        self._counts_fresh = False

    # --- plumbing ---

    def ms_to_slots(self, ms: float) -> int:
        return max(1, round(ms / self.config.slot_ms))

    def push(self, slot: int, kind: EventKind, payload=None) -> None:
        self.event_id += 1
        heapq.heappush(
            self.queue, Event(slot, kind.value, self.event_id, kind, payload)
        )

    def etx_of(self, src: int, dst: int) -> float:
        est = self.etx_table.get((src, dst))
        if est is None:
            p = self.channel.success_probability(src, dst)
            seedv = self.config.etx_max if p <= 0 else min(self.config.etx_max, 1.0 / p)
            est = EtxEstimate(src, dst, etx=seedv)
            self.etx_table[(src, dst)] = est
        return est.etx

    def observe_link(self, src: int, dst: int, attempts: int, successes: int) -> None:
        self.etx_of(src, dst)  # ensure seeded
        self.etx_table[(src, dst)].observe(attempts, successes, self.config.etx_max)

    def _ensure_counts(self) -> None:
        if not self._counts_fresh:
            update_children_and_connections(self.states)
            self._counts_fresh = True

    def _mark_change(self, slot: int) -> None:
        self.last_change_slot = slot
        self._counts_fresh = False

    # --- control plane handlers ---

    def _trickle_restart(self, node: int, slot: int) -> None:
        process_dis(self.states[node])  # interval back to minimum
        self.trickle_seq[node] += 1
        fire_at = slot + self.ms_to_slots(self.states[node].trickle.interval_min_ms)
        self.push(fire_at, EventKind.TRICKLE_FIRE, (node, self.trickle_seq[node]))

    def _handle_trickle_fire(self, slot: int, payload) -> None:
        node, seq = payload
        if seq != self.trickle_seq[node]:
            return  # superseded by a reset
        state = self.states[node]
        emit, next_ms = trickle_fire(state.trickle, consistent=True)
        self.trickle_seq[node] += 1
        self.push(
            slot + self.ms_to_slots(next_ms),
            EventKind.TRICKLE_FIRE,
            (node, self.trickle_seq[node]),
        )
        if emit and state.joined:
            self.push(slot, EventKind.DIO_TX, node)

    def _refresh_relay(self, node: int, slot: int) -> None:
        state = self.states[node]
        if not state.joined or state.default_parent is None:
            self.relay_for[node] = None
            self.relay_rates[node] = {}
            state.selected_relay = None
            return
        self._ensure_counts()
        interferers = frozenset(self.registry.get(slot, ()))
        selected, rates = run_selection(
            state,
            self.states,
            self.channel,
            self.etx_of,
            self.config.routing_class,
            self.config.active_weights(),
            interferers=interferers,
            slot=slot,
            with_fading=self.config.sinr_per_slot,
        )
        self.relay_for[node] = selected
        self.relay_rates[node] = rates
        state.selected_relay = selected

    def _refresh_fset(self, node: int) -> None:
        self.fsets[node] = build_forwarding_set(
            self.states[node], self.states, self.channel, self.etx_of,
            self.config.fset_size,
        )

    def _handle_dio_tx(self, slot: int, payload, data_phase: bool) -> None:
        node = payload
        state = self.states[node]
        if not state.joined:
            return
        if data_phase and self.config.protocol is Protocol.COOP_RPL:
            self._refresh_relay(node, slot)
        dio = DioMessage(node, state.rank, relay_suboption=self.relay_for.get(node))
        if self.trace_sink is not None:
            self.trace_sink.append(trace_record(dio, slot))
        changed: list[int] = []
        for neighbor in self.channel.neighbors(node):
            other = self.states[neighbor]
            if neighbor == GATEWAY_ID:
                continue
            was_parent = other.default_parent
            decision = process_dio(
                other, dio, self.etx_of(neighbor, node), self.config.hysteresis
            )
            other.last_dio_slot = slot
            if decision is Decision.IGNORE:
                trickle_hear_consistent(other.trickle)
            else:
                changed.append(neighbor)
                self._mark_change(slot)
                self._trickle_restart(neighbor, slot)
                if other.default_parent != was_parent:
                    self.push(slot, EventKind.DAO_TX, neighbor)
        if changed and data_phase:
            for neighbor in changed:
                if self.config.protocol is Protocol.COOP_RPL:
                    self._refresh_relay(neighbor, slot)
                elif self.config.protocol is Protocol.OPP_RPL:
                    self._refresh_fset(neighbor)

    def _handle_dis_tx(self, slot: int, payload) -> None:
        node = payload
        state = self.states[node]
        timeout = self.ms_to_slots(self.config.dis_timeout_ms)
        if state.joined:
            return
        heard_recently = (
            state.last_dio_slot is not None and slot - state.last_dio_slot < timeout
        )
        if not heard_recently:
            msg = emit_dis(state)
            if self.trace_sink is not None:
                self.trace_sink.append(trace_record(msg, slot))
            for neighbor in self.channel.neighbors(node):
                self._trickle_restart(neighbor, slot)
        self.push(slot + timeout, EventKind.DIS_TX, node)

    def _handle_dao_tx(self, slot: int, payload) -> None:
        node = payload
        state = self.states[node]
        if state.default_parent is None:
            return
        dao = DaoMessage(sender=node, target=node, via_parent=state.default_parent)
        if self.trace_sink is not None:
            self.trace_sink.append(trace_record(dao, slot))
        # walk the advertisement up the default path, recording at each hop
        sender, hop = node, state.default_parent
        seen = {node}
        while hop is not None and hop not in seen:
            process_dao(
                self.states[hop].route_table,
                DaoMessage(sender=sender, target=node, via_parent=hop),
            )
            seen.add(hop)
            sender, hop = hop, self.states[hop].default_parent

    # --- phases ---

    def run_formation(self) -> None:
        """Process control events until ranks hold still for the
        quiescence window (or the warmup budget runs out)."""
        cfg = self.config
        self.push(
            self.ms_to_slots(cfg.trickle_imin_ms),
            EventKind.TRICKLE_FIRE,
            (GATEWAY_ID, self.trickle_seq[GATEWAY_ID]),
        )
        dis_at = self.ms_to_slots(cfg.dis_timeout_ms)
        for node in sorted(self.states):
            if node != GATEWAY_ID:
                self.push(dis_at, EventKind.DIS_TX, node)
        while self.queue:
            head = self.queue[0]
            if head.slot >= self.last_change_slot + cfg.quiescence_slots:
                self.formation_slots = self.last_change_slot + cfg.quiescence_slots
                break
            if head.slot > cfg.warmup_slots:
                self.formation_slots = cfg.warmup_slots
                break
            event = heapq.heappop(self.queue)
            self.now = event.slot
            self.event_log.append((event.slot, event.kind.name, event.payload))
            if event.kind is EventKind.TRICKLE_FIRE:
                self._handle_trickle_fire(event.slot, event.payload)
            elif event.kind is EventKind.DIO_TX:
                self._handle_dio_tx(event.slot, event.payload, data_phase=False)
            elif event.kind is EventKind.DIS_TX:
                self._handle_dis_tx(event.slot, event.payload)
            elif event.kind is EventKind.DAO_TX:
                self._handle_dao_tx(event.slot, event.payload)
        else:
            self.formation_slots = min(
                cfg.warmup_slots, self.last_change_slot + cfg.quiescence_slots
            )
        self._ensure_counts()

    def joined_meters(self) -> list[int]:
        return [
            n for n, st in self.states.items() if n != GATEWAY_ID and st.joined
        ]

    def network_view(self) -> NetworkView:
        cfg = self.config
        return NetworkView(
            channel=self.channel,
            states=self.states,
            etx_of=self.etx_of,
            gateway=GATEWAY_ID,
            max_retx=cfg.max_retx,
            relay_retx=cfg.relay_retx,
            retx_wait=cfg.retx_wait_slots,
            p_coop=cfg.p_coop,
            relay_for=self.relay_for,
            fsets=self.fsets,
            seed=cfg.seed,
            registry=self.registry,
        )

    def _record_hop_observations(self, outcome, holder, parent, relay) -> None:
        if outcome is None:
            return
        if self.config.protocol is Protocol.OPP_RPL:
            if outcome.delivered:
                self.observe_link(holder, outcome.receiver, outcome.attempts, 1)
            else:
                members = self.fsets.get(holder)
                for m in members.members if members else ():
                    self.observe_link(holder, m, outcome.attempts, 0)
            return
        direct = 1 if outcome.delivered and not outcome.delivered_by_relay else 0
        self.observe_link(holder, parent, outcome.attempts, direct)
        if outcome.relay_attempts and relay is not None:
            self.observe_link(
                relay, parent, outcome.relay_attempts,
                1 if outcome.delivered_by_relay else 0,
            )

    def run_traffic(self) -> MetricsReport:
        """Generate the packet load and drive every packet to resolution."""
        cfg = self.config
        sources = self.joined_meters()
        disconnected = len(sources) < max(0, len(self.states) - 1)
        if cfg.protocol is Protocol.COOP_RPL:
            for node in sorted(sources):
                self._refresh_relay(node, self.now)
        elif cfg.protocol is Protocol.OPP_RPL:
            for node in sorted(sources):
                self._refresh_fset(node)
        if not sources:
            return collect_metrics(
                [], cfg.slot_ms, disconnected=True,
                joined_nodes=0, total_nodes=len(self.states) - 1,
                formation_slots=self.formation_slots,
            )
        start = self.formation_slots
        packets: dict[int, Packet] = {}
        layers: dict[int, LinkLayer] = {}
        relay_hops: dict[int, int] = {}
        for packet_id, (slot, source) in enumerate(generate_traffic(cfg, sources, start)):
            self.push(slot, EventKind.PACKET_GEN, (packet_id, source))
        net = self.network_view()
        unresolved = cfg.n_packets
        while self.queue and unresolved > 0:
            event = heapq.heappop(self.queue)
            self.now = event.slot
            self.event_log.append((event.slot, event.kind.name, event.payload))
            if event.kind is EventKind.TRICKLE_FIRE:
                self._handle_trickle_fire(event.slot, event.payload)
            elif event.kind is EventKind.DIO_TX:
                self._handle_dio_tx(event.slot, event.payload, data_phase=True)
            elif event.kind is EventKind.DIS_TX:
                self._handle_dis_tx(event.slot, event.payload)
            elif event.kind is EventKind.DAO_TX:
                self._handle_dao_tx(event.slot, event.payload)
            elif event.kind is EventKind.PACKET_GEN:
                packet_id, source = event.payload
                packet = Packet(packet_id, source, event.slot, source)
                packets[packet_id] = packet
                layers[packet_id] = LinkLayer(
                    self.channel, cfg.seed, packet_id, self.registry
                )
                relay_hops[packet_id] = 0
                self.push(event.slot, EventKind.HOP_ATTEMPT, packet_id)
            elif event.kind is EventKind.HOP_ATTEMPT:
                packet = packets[event.payload]
                holder = packet.current_holder
                parent = self.states[holder].default_parent
                relay = self.relay_for.get(holder)
                outcome = advance_one_hop(
                    packet, cfg.protocol, net, layers[event.payload], event.slot
                )
                self._record_hop_observations(outcome, holder, parent, relay)
                if outcome is not None and outcome.relay_used:
                    relay_hops[event.payload] += 1
                if self.trace_sink is not None and outcome is not None and (
                    cfg.protocol is Protocol.COOP_RPL
                ):
                    self.trace_sink.append({
                        "type": "relay",
                        "slot": event.slot,
                        "sender": holder,
                        "class": cfg.routing_class.value,
                        "candidates": [
                            {"id": r, "rate": rate}
                            for r, rate in sorted(self.relay_rates.get(holder, {}).items())
                        ],
                        "selected": relay,
                        "used": outcome.relay_used,
                    })
                if packet.status is PacketStatus.IN_FLIGHT:
                    self.push(
                        event.slot + outcome.slots_consumed,
                        EventKind.HOP_ATTEMPT,
                        event.payload,
                    )
                else:
                    unresolved -= 1
                    if self.trace_sink is not None:
                        self.trace_sink.append(
                            packet_trace(packet, relay_hops[event.payload])
                        )
        self.event_log.append((self.now, EventKind.METRICS_SNAPSHOT.name, None))
        return collect_metrics(
            list(packets.values()),
            cfg.slot_ms,
            disconnected=disconnected,
            joined_nodes=len(sources),
            total_nodes=len(self.states) - 1,
            formation_slots=self.formation_slots,
        )


def form_network(
    config: ScenarioConfig, trace_sink: list[dict] | None = None
) -> Simulation:
    sim = Simulation(config)
    sim.trace_sink = trace_sink
    sim.run_formation()
    return sim


def with_protocol(
    sim: Simulation, config: ScenarioConfig
) -> Simulation:
    """Clone a formed network for a protocol variant of the same scenario."""
    clone = copy.deepcopy(sim)
    clone.config = config
    return clone


def run_scenario(
    config: ScenarioConfig, trace_sink: list[dict] | None = None
) -> MetricsReport:
    return form_network(config, trace_sink).run_traffic()
