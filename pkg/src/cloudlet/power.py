"""Battery bank, charging rules, PoE port control and load shedding.

Linear battery model on purpose: capacity and percentage arithmetic only,
no Peukert effect or voltage sag, so every figure in a run report can be
checked by hand. Chemistry only changes the below-freezing charge rule.

All operations are pure: they take values and return new values, and the
arithmetic never coerces types, so exact inputs (ints, Fractions) stay
exact all the way through.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .errors import NonPositiveInput, NonPositiveLoad
from .topology import CONTROLLER, ClusterTopology

LITHIUM = "lithium"
LEAD_ACID = "lead_acid"
CHEMISTRIES = (LITHIUM, LEAD_ACID)

CRITICAL = "critical"
HIGH = "high"
LOW = "low"
# Shedding works through this ladder from the bottom up.
PRIORITY_ORDER = {LOW: 0, HIGH: 1, CRITICAL: 2}

IDLE = "idle"
STRESS = "stress"


@dataclass(frozen=True)
class BatteryBank:
    """Series-wired battery bank; soc is the remaining fraction of capacity.

    cost_usd is documentation only: chemistry drives price in practice but
    nothing in the model reads it.
    """

    cell_count: int = 4
    cell_voltage_v: float = 12.0
    capacity_ah: float = 200.0
    chemistry: str = LITHIUM
    soc: float = 1.0
    max_dod: float = 0.5
    cost_usd: float | None = None

    def __post_init__(self):
        if self.chemistry not in CHEMISTRIES:
            raise ValueError(f"unknown chemistry {self.chemistry!r}")
        if not 0 <= self.soc <= 1:
            raise ValueError("soc must stay within [0, 1]")
        if not 0 < self.max_dod <= 1:
            raise ValueError("max_dod must be in (0, 1]")

    @property
    def voltage_v(self) -> float:
        return self.cell_count * self.cell_voltage_v

    @property
    def energy_wh(self) -> float:
        return self.capacity_ah * self.voltage_v


@dataclass(frozen=True)
class PoePortState:
    port_id: str
    attached_node: str | None
    priority: str  # CRITICAL | HIGH | LOW
    enabled: bool
    draw_w: float  # rated draw while enabled

    def __post_init__(self):
        if self.priority not in PRIORITY_ORDER:
            raise ValueError(f"unknown priority {self.priority!r}")

    @property
    def effective_draw_w(self) -> float:
        return self.draw_w if self.enabled else 0.0


@dataclass(frozen=True)
class SheddingPolicy:
    """Ordered soc thresholds; crossing below a floor sheds those priorities."""

    thresholds: tuple[tuple[float, frozenset[str]], ...]

    def __post_init__(self):
        floors = [f for f, _ in self.thresholds]
        if any(a <= b for a, b in zip(floors, floors[1:])):
            raise ValueError("soc floors must be strictly decreasing")
        for _, prios in self.thresholds:
            if CRITICAL in prios:
                raise ValueError("critical ports can never be shed")


DEFAULT_POLICY = SheddingPolicy((
    (0.4, frozenset({LOW})),
    (0.25, frozenset({LOW, HIGH})),
))


@dataclass(frozen=True)
class DischargeResult:
    bank: BatteryBank
    empty: bool  # soc reached 0 while load was applied


@dataclass(frozen=True)
class ChargeResult:
    bank: BatteryBank
    inhibited: bool  # lithium below freezing: no charge accepted


def required_capacity_ah(load_w, hours, bank_voltage_v, dod):
    """Battery capacity needed to carry `load_w` for `hours` without
    discharging past the given depth of discharge."""
    for name, v in (("load_w", load_w), ("hours", hours),
                    ("bank_voltage_v", bank_voltage_v), ("dod", dod)):
        if v <= 0:
            raise NonPositiveInput(f"{name} must be > 0")
    if dod > 1:
        raise NonPositiveInput("dod cannot exceed 1")
    return load_w * hours / (bank_voltage_v * dod)


def step_discharge(bank: BatteryBank, load_w, dt, loss_factor=1.0) -> DischargeResult:
    """Drain the bank by load_w over dt hours; soc clamps at 0.

    loss_factor scales the load for inverter/charger losses (1.0 = lossless).
    """
    if load_w < 0 or dt < 0:
        raise NonPositiveInput("load_w and dt must be >= 0")
    if loss_factor < 1:
        raise NonPositiveInput("loss_factor must be >= 1")
    soc = bank.soc - load_w * loss_factor * dt / bank.energy_wh
    if soc <= 0:
        return DischargeResult(replace(bank, soc=0.0), empty=load_w > 0)
    return DischargeResult(replace(bank, soc=soc), empty=False)


def step_charge(bank: BatteryBank, input_w, dt, ambient_c) -> ChargeResult:
    """Charge the bank by input_w over dt hours; soc clamps at 1.

    Lithium chemistry refuses charge below freezing.
    """
    if input_w < 0 or dt < 0:
        raise NonPositiveInput("input_w and dt must be >= 0")
    if bank.chemistry == LITHIUM and ambient_c < 0:
        return ChargeResult(bank, inhibited=input_w > 0)
    soc = bank.soc + input_w * dt / bank.energy_wh
    if soc > 1:
        soc = 1.0
    return ChargeResult(replace(bank, soc=soc), inhibited=False)


def runtime_to_dod(bank: BatteryBank, load_w):
    """Hours until soc reaches the max-depth-of-discharge floor at a
    constant load; 0 when the bank is already at or below the floor."""
    if load_w <= 0:
        raise NonPositiveLoad("load_w must be > 0")
    floor = 1 - bank.max_dod
    if bank.soc <= floor:
        return 0
    return bank.energy_wh * (bank.soc - floor) / load_w


def active_shed_priorities(policy: SheddingPolicy, soc) -> frozenset[str]:
    """Priorities being shed at this state of charge: the priority set of
    the deepest threshold whose floor is at or above soc, empty above the
    first threshold."""
    shed_prios: frozenset[str] = frozenset()
    for floor, prios in policy.thresholds:
        if floor >= soc:
            shed_prios = prios
    return shed_prios


def shed(policy: SheddingPolicy, ports: list[PoePortState], soc) -> list[str]:
    """Port ids to disable at this state of charge.

    Applies the deepest threshold whose floor is at or above soc. Returns
    enabled, non-critical ports of the shed priorities, lowest priority
    first, then ascending port id. Idempotent: already-disabled ports are
    never returned.
    """
    shed_prios = active_shed_priorities(policy, soc)
    victims = [p for p in ports
               if p.enabled and p.priority != CRITICAL and p.priority in shed_prios]
    victims.sort(key=lambda p: (PRIORITY_ORDER[p.priority], p.port_id))
    return [p.port_id for p in victims]


def default_port_states(t: ClusterTopology,
                        priorities: dict[str, str] | None = None,
                        workload_level: str = STRESS) -> list[PoePortState]:
    """One PoE port per node: controllers critical, storage low unless
    overridden, drawing per the node's hardware profile."""
    priorities = priorities or {}
    ports = []
    for n in t.nodes():
        prio = CRITICAL if n.role == CONTROLLER else priorities.get(n.port_id, LOW)
        if n.role == CONTROLLER and priorities.get(n.port_id) not in (None, CRITICAL):
            raise ValueError(f"controller port {n.port_id} must stay critical")
        draw = (n.hw_profile.load_draw_w if workload_level == STRESS
                else n.hw_profile.idle_draw_w)
        ports.append(PoePortState(n.port_id, n.node_id, prio, True, draw))
    ports.sort(key=lambda p: p.port_id)
    return ports


def cluster_draw_w(t: ClusterTopology, port_states: list[PoePortState],
                   workload_level: str = STRESS) -> float:
    """Total draw of the enabled ports at the given workload level."""
    profile = {n.port_id: n.hw_profile for n in t.nodes()}
    draws = []
    for p in port_states:
        if not p.enabled or p.attached_node is None:
            continue
        hw = profile.get(p.port_id)
        if hw is None:
            continue
        draws.append(hw.load_draw_w if workload_level == STRESS else hw.idle_draw_w)
    return math.fsum(draws)
