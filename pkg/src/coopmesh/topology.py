"""Node placement and physical-layer channel model.

Meters are scattered by a Poisson point process in a square region with the
gateway at the center. Links follow log-distance path loss with Rayleigh
fading; per-link success probability comes either from the fading outage
form (physical mode) or from a single swept value (swept-LSR mode).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .rng import derive_seed, uniform

# key-domain tags so draws for different purposes never collide
DOMAIN_FADING = 0xFA
DOMAIN_PLACEMENT = 0x97


class DisconnectedRootError(RuntimeError):
    """Raised when no placement attempt gives the gateway a neighbor."""


class ChannelMode(Enum):
    PHYSICAL = "physical"
    SWEPT_LSR = "swept_lsr"


@dataclass(frozen=True)
class Region:
    side_length: float

    def __post_init__(self):
        if self.side_length <= 0:
            raise ValueError("side_length must be positive")

    @property
    def area(self) -> float:
        return self.side_length * self.side_length


@dataclass(frozen=True)
class NodePlacement:
    node_id: int
    x: float
    y: float


GATEWAY_ID = 0


@dataclass(frozen=True)
class ChannelParams:
    """Physical-layer constants.

    sinr_threshold_db is the detection threshold of the Rayleigh outage
    form; the default puts mid-range links (~0.7x tx_range) around 0.93
    success for the default power budget.
    """

    tx_power_w: float = 2.0
    path_loss_exponent: float = 3.0
    reference_loss_db: float = 40.0
    noise_floor_w: float = 1e-13  # -100 dBm
    tx_range_m: float = 50.0
    mode: ChannelMode = ChannelMode.PHYSICAL
    lsr_value: float | None = None
    sinr_threshold_db: float = 35.0

    def __post_init__(self):
        if self.tx_power_w <= 0:
            raise ValueError("tx_power_w must be positive")
        if self.path_loss_exponent < 2:
            raise ValueError("path_loss_exponent must be >= 2")
        if self.noise_floor_w <= 0:
            raise ValueError("noise_floor_w must be positive")
        if self.tx_range_m <= 0:
            raise ValueError("tx_range_m must be positive")
        if self.mode is ChannelMode.SWEPT_LSR:
            if self.lsr_value is None or not 0.0 <= self.lsr_value <= 1.0:
                raise ValueError("swept-LSR mode needs lsr_value in [0, 1]")


@dataclass(frozen=True)
class LinkModel:
    src: int
    dst: int
    distance: float
    mean_rx_power_w: float
    exists: bool  # within tx_range


def place_nodes(
    region: Region,
    intensity: float,
    seed: int,
    params: ChannelParams,
    max_retries: int = 20,
) -> list[NodePlacement]:
    """Scatter meters by a Poisson point process; gateway at region center.

    Retries with an incremented sub-seed while the gateway would be isolated
    (no meter within tx_range) and raises DisconnectedRootError when the
    retry budget runs out. Same (region, intensity, seed) gives bit-identical
    placements.
    """
    if intensity <= 0:
        raise ValueError("intensity must be positive")
    center = region.side_length / 2.0
    for attempt in range(max_retries):
        rng = np.random.default_rng(derive_seed(seed, DOMAIN_PLACEMENT, attempt))
        count = int(rng.poisson(intensity * region.area))
        xs = rng.uniform(0.0, region.side_length, size=count)
        ys = rng.uniform(0.0, region.side_length, size=count)
        placements = [NodePlacement(GATEWAY_ID, center, center)]
        placements += [
            NodePlacement(i + 1, float(xs[i]), float(ys[i])) for i in range(count)
        ]
        root_ok = any(
            math.hypot(p.x - center, p.y - center) <= params.tx_range_m
            for p in placements[1:]
        )
        if root_ok:
            return placements
    raise DisconnectedRootError("disconnected-root")


def path_loss_linear(distance: float, params: ChannelParams) -> float:
    """Log-distance attenuation as a linear power factor."""
    if distance <= 0:
        raise ValueError("degenerate-link")
    loss_db = params.reference_loss_db + 10.0 * params.path_loss_exponent * math.log10(
        distance
    )
    return 10.0 ** (-loss_db / 10.0)


def fading_gain(src: int, dst: int, slot: int, seed: int) -> float:
    """Rayleigh power gain: exponential(mean 1), keyed by (link, slot, seed)."""
    u = uniform(seed, DOMAIN_FADING, src, dst, slot)
    return -math.log(1.0 - u)


def link_success_probability(
    link: LinkModel, params: ChannelParams, slot: int = 0
) -> float:
    """Per-transmission delivery probability for a link.

    Swept-LSR mode returns the swept value identically for every link.
    Physical mode uses the Rayleigh outage form
    P_success = exp(-threshold_linear / mean_snr_linear).
    """
    if not link.exists:
        return 0.0
    if params.mode is ChannelMode.SWEPT_LSR:
        return float(params.lsr_value)
    mean_snr = link.mean_rx_power_w / params.noise_floor_w
    threshold = 10.0 ** (params.sinr_threshold_db / 10.0)
    return math.exp(-threshold / mean_snr)


REFERENCE_DISTANCE_FACTOR = 0.6  # of tx_range; a typical default-parent hop


def calibrate_params_for_lsr(
    params: ChannelParams, lsr: float, reference_distance: float | None = None
) -> ChannelParams:
    """Physical-mode params whose reference link has success probability lsr.

    Sets the detection threshold so a link at reference_distance (default
    0.6x tx_range) succeeds with probability lsr; closer links do better,
    longer ones worse, per the outage form. This keeps the swept quality
    axis while preserving per-link heterogeneity.
    """
    if not 0.0 < lsr <= 1.0:
        raise ValueError("lsr must be in (0, 1]")
    d_ref = (
        reference_distance
        if reference_distance is not None
        else REFERENCE_DISTANCE_FACTOR * params.tx_range_m
    )
    snr_ref = params.tx_power_w * path_loss_linear(d_ref, params) / params.noise_floor_w
    gamma_lin = -math.log(lsr) * snr_ref
    threshold_db = -300.0 if gamma_lin <= 0 else 10.0 * math.log10(gamma_lin)
    return replace(
        params, mode=ChannelMode.PHYSICAL, lsr_value=None, sinr_threshold_db=threshold_db
    )


@dataclass
class Channel:
    """Pairwise channel view over a fixed placement; all methods pure."""

    placements: list[NodePlacement]
    params: ChannelParams
    seed: int
    _pos: dict[int, tuple[float, float]] = field(init=False, repr=False)
    _links: dict[tuple[int, int], LinkModel] = field(init=False, repr=False)
    _neighbors: dict[int, list[int]] = field(init=False, repr=False)
    _success: dict[tuple[int, int], float] = field(init=False, repr=False)

    def __post_init__(self):
        self._pos = {p.node_id: (p.x, p.y) for p in self.placements}
        if len(self._pos) != len(self.placements):
            raise ValueError("node ids must be unique")
        self._links = {}
        self._neighbors = {}
        self._success = {}

    @property
    def node_ids(self) -> list[int]:
        return sorted(self._pos)

    def distance(self, a: int, b: int) -> float:
        xa, ya = self._pos[a]
        xb, yb = self._pos[b]
        return math.hypot(xa - xb, ya - yb)

    def link(self, src: int, dst: int) -> LinkModel:
        key = (src, dst)
        cached = self._links.get(key)
        if cached is not None:
            return cached
        d = self.distance(src, dst)
        if d <= 0:
            raise ValueError("degenerate-link")
        mean_rx = self.params.tx_power_w * path_loss_linear(d, self.params)
        link = LinkModel(src, dst, d, mean_rx, d <= self.params.tx_range_m)
        self._links[key] = link
        return link

    def neighbors(self, node: int) -> list[int]:
        """Nodes within tx_range (closed ball), excluding the node itself."""
        cached = self._neighbors.get(node)
        if cached is not None:
            return cached
        out = [
            other
            for other in self.node_ids
            if other != node and self.distance(node, other) <= self.params.tx_range_m
        ]
        self._neighbors[node] = out
        return out

    def fading_gain(self, src: int, dst: int, slot: int) -> float:
        return fading_gain(src, dst, slot, self.seed)

    def mean_snr_linear(self, src: int, dst: int) -> float:
        return self.link(src, dst).mean_rx_power_w / self.params.noise_floor_w

    def compute_sinr(
        self,
        rx: int,
        tx: int,
        concurrent_transmitters: set[int] | frozenset[int] = frozenset(),
        slot: int = 0,
        with_fading: bool = False,
    ) -> float:
        """SINR in dB at rx for a transmission from tx.

        with_fading=False evaluates the fading-mean channel (gain 1), the
        form used for relay eligibility; with_fading=True draws the keyed
        per-slot gains for every involved link.
        """
        if tx in concurrent_transmitters:
            raise ValueError("transmitter cannot interfere with itself")
        gain = self.fading_gain(tx, rx, slot) if with_fading else 1.0
        signal = self.link(tx, rx).mean_rx_power_w * gain
        interference = 0.0
        for other in concurrent_transmitters:
            if other == rx:
                continue
            g = self.fading_gain(other, rx, slot) if with_fading else 1.0
            interference += self.link(other, rx).mean_rx_power_w * g
        return 10.0 * math.log10(signal / (self.params.noise_floor_w + interference))

    def link_success_probability(self, link: LinkModel, slot: int = 0) -> float:
        return link_success_probability(link, self.params, slot)

    def success_probability(self, src: int, dst: int) -> float:
        """Cached per-pair success probability (slot-invariant in both modes)."""
        key = (src, dst)
        cached = self._success.get(key)
        if cached is None:
            cached = link_success_probability(self.link(src, dst), self.params)
            self._success[key] = cached
        return cached


def placements_to_csv(placements: list[NodePlacement]) -> str:
    lines = ["node_id,x,y"]
    lines += [f"{p.node_id},{p.x:.6f},{p.y:.6f}" for p in placements]
    return "\n".join(lines) + "\n"
