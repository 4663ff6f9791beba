"""Battery model, shedding, and draw accounting tests.

Derived figures are cross-checked against exact Fraction arithmetic and a
brute-force policy-table oracle rather than against the implementation.
"""

from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cloudlet.errors import NonPositiveInput, NonPositiveLoad
from cloudlet.power import (
    CRITICAL,
    HIGH,
    LEAD_ACID,
    LOW,
    PRIORITY_ORDER,
    BatteryBank,
    PoePortState,
    SheddingPolicy,
    cluster_draw_w,
    default_port_states,
    required_capacity_ah,
    runtime_to_dod,
    shed,
    step_charge,
    step_discharge,
)
from cloudlet.topology import build_default_topology


def shed_oracle(policy, ports, soc):
    """Brute force over the policy table: pick the smallest floor still at
    or above soc, then filter ports directly."""
    applicable = [t for t in policy.thresholds if t[0] >= soc]
    if not applicable:
        return []
    _, prios = min(applicable, key=lambda t: t[0])
    victims = [p for p in ports
               if p.enabled and p.priority != CRITICAL and p.priority in prios]
    victims.sort(key=lambda p: (PRIORITY_ORDER[p.priority], p.port_id))
    return [p.port_id for p in victims]


# --- required_capacity_ah ---

def test_required_capacity_overnight_figure():
    # Fraction oracle: W*h / (V*DoD)
    assert Fraction(96) * 12 / (Fraction(48) * Fraction(1, 2)) == 48
    assert required_capacity_ah(96, 12, 48, 0.5) == 48.0


def test_required_capacity_linear_in_load():
    assert required_capacity_ah(48, 12, 48, 0.5) == required_capacity_ah(96, 12, 48, 0.5) / 2
    assert required_capacity_ah(48, 12, 48, 0.5) == 24.0


def test_required_capacity_full_dod_halves():
    assert required_capacity_ah(96, 12, 48, 1.0) == 24.0


@pytest.mark.parametrize("args", [
    (0, 12, 48, 0.5), (96, 0, 48, 0.5), (96, 12, 0, 0.5),
    (96, 12, 48, 0), (-1, 12, 48, 0.5), (96, 12, 48, 1.5),
])
def test_required_capacity_rejects_bad_input(args):
    with pytest.raises(NonPositiveInput):
        required_capacity_ah(*args)


# --- step_discharge / step_charge ---

def test_discharge_fifty_hours_to_half():
    # Fraction oracle: 96 W x 50 h over 200 Ah x 48 V
    assert 1 - Fraction(96 * 50, 200 * 48) == Fraction(1, 2)
    bank = BatteryBank()
    out = step_discharge(bank, 96, 50)
    assert out.bank.soc == 0.5
    assert not out.empty


def test_discharge_zero_load_noop():
    bank = BatteryBank(soc=0.7)
    assert step_discharge(bank, 0, 100).bank.soc == 0.7


def test_discharge_clamps_and_flags_empty():
    out = step_discharge(BatteryBank(soc=0.01), 96, 10)
    assert out.bank.soc == 0.0
    assert out.empty


def test_discharge_loss_factor_scales_load():
    lossless = step_discharge(BatteryBank(), 96, 10).bank.soc
    lossy = step_discharge(BatteryBank(), 96, 10, loss_factor=1.25).bank.soc
    assert lossy == pytest.approx(1 - (1 - lossless) * 1.25)
    with pytest.raises(NonPositiveInput):
        step_discharge(BatteryBank(), 96, 10, loss_factor=0.5)


def test_charge_inhibited_for_lithium_below_freezing():
    bank = BatteryBank(soc=0.5)
    out = step_charge(bank, 96, 1, ambient_c=-5)
    assert out.bank.soc == 0.5
    assert out.inhibited


def test_charge_lead_acid_below_freezing():
    bank = BatteryBank(soc=0.5, chemistry=LEAD_ACID)
    out = step_charge(bank, 96, 1, ambient_c=-5)
    assert out.bank.soc == 0.5 + 96 / 9600
    assert not out.inhibited


def test_charge_zero_input_noop():
    out = step_charge(BatteryBank(soc=0.5), 0, 5, ambient_c=-5)
    assert out.bank.soc == 0.5
    assert not out.inhibited


def test_charge_clamps_at_full():
    out = step_charge(BatteryBank(soc=0.99), 9600, 1, ambient_c=20)
    assert out.bank.soc == 1.0


def test_bank_validation():
    with pytest.raises(ValueError):
        BatteryBank(chemistry="plutonium")
    with pytest.raises(ValueError):
        BatteryBank(soc=1.5)
    with pytest.raises(ValueError):
        BatteryBank(max_dod=0)


# --- runtime_to_dod ---

def test_runtime_paper_bank_fifty_hours():
    assert Fraction(200 * 48) * Fraction(1, 2) / 96 == 50
    assert runtime_to_dod(BatteryBank(), 96) == 50.0


def test_runtime_sized_bank_twelve_hours():
    bank = BatteryBank(capacity_ah=48.0)
    assert runtime_to_dod(bank, 96) == 12.0


def test_runtime_zero_at_floor():
    assert runtime_to_dod(BatteryBank(soc=0.5), 96) == 0
    assert runtime_to_dod(BatteryBank(soc=0.3), 96) == 0


def test_runtime_rejects_non_positive_load():
    with pytest.raises(NonPositiveLoad):
        runtime_to_dod(BatteryBank(), 0)


def test_runtime_times_load_identity_exact():
    bank = BatteryBank(cell_voltage_v=Fraction(12), capacity_ah=Fraction(200),
                       soc=Fraction(3, 4), max_dod=Fraction(1, 2))
    load = Fraction(96)
    assert runtime_to_dod(bank, load) * load == bank.energy_wh * (bank.soc - Fraction(1, 2))


# --- shed ---

def _ports(*specs):
    return [PoePortState(pid, f"n_{pid}", prio, enabled, 6.0)
            for pid, prio, enabled in specs]


def test_shed_above_all_thresholds_empty():
    policy = SheddingPolicy(((0.4, frozenset({LOW})),))
    ports = _ports(("p1", LOW, True), ("p2", HIGH, True))
    assert shed(policy, ports, 0.9) == []


def test_shed_single_threshold_all_low():
    policy = SheddingPolicy(((0.6, frozenset({LOW})),))
    ports = _ports(("p3", LOW, True), ("p1", LOW, True), ("p5", LOW, True),
                   ("p2", LOW, True), ("p4", LOW, True))
    got = shed(policy, ports, 0.55)
    assert got == shed_oracle(policy, ports, 0.55)
    assert got == ["p1", "p2", "p3", "p4", "p5"]


def test_shed_deep_threshold_spares_critical():
    policy = SheddingPolicy(((0.4, frozenset({LOW})),
                             (0.25, frozenset({LOW, HIGH}))))
    ports = _ports(("p1", CRITICAL, True), ("p2", HIGH, True),
                   ("p3", LOW, True), ("p4", LOW, False))
    got = shed(policy, ports, 0.1)
    assert got == shed_oracle(policy, ports, 0.1)
    assert got == ["p3", "p2"]  # low sheds before high, critical untouched


def test_shed_uses_deepest_applicable_threshold_only():
    policy = SheddingPolicy(((0.4, frozenset({LOW})),
                             (0.25, frozenset({HIGH}))))
    ports = _ports(("p1", LOW, True), ("p2", HIGH, True))
    # Between floors: only the shallow threshold applies.
    assert shed(policy, ports, 0.3) == ["p1"]
    # Below both: the deepest table row wins outright.
    assert shed(policy, ports, 0.2) == ["p2"]


def test_policy_validation():
    with pytest.raises(ValueError):
        SheddingPolicy(((0.25, frozenset({LOW})), (0.4, frozenset({LOW}))))
    with pytest.raises(ValueError):
        SheddingPolicy(((0.4, frozenset({CRITICAL})),))


policies = st.builds(
    lambda floors, sets: SheddingPolicy(
        tuple((f, frozenset(s)) for f, s in zip(sorted(floors, reverse=True), sets))),
    st.lists(st.floats(0.01, 0.99, allow_nan=False), min_size=1, max_size=4,
             unique=True),
    st.lists(st.sets(st.sampled_from([LOW, HIGH]), min_size=1, max_size=2),
             min_size=4, max_size=4),
)

port_lists = st.lists(
    st.builds(PoePortState,
              port_id=st.text("abcdefgh", min_size=1, max_size=4),
              attached_node=st.just("n"),
              priority=st.sampled_from([LOW, HIGH, CRITICAL]),
              enabled=st.booleans(),
              draw_w=st.just(6.0)),
    max_size=12, unique_by=lambda p: p.port_id)


@settings(max_examples=200, deadline=None)
@given(policies, port_lists, st.floats(0, 1, allow_nan=False))
def test_shed_matches_oracle_never_critical(policy, ports, soc):
    got = shed(policy, ports, soc)
    assert got == shed_oracle(policy, ports, soc)
    by_id = {p.port_id: p for p in ports}
    assert all(by_id[pid].priority != CRITICAL for pid in got)
    assert all(by_id[pid].enabled for pid in got)


@settings(max_examples=200, deadline=None)
@given(policies, port_lists, st.floats(0, 1, allow_nan=False))
def test_shed_idempotent(policy, ports, soc):
    to_disable = set(shed(policy, ports, soc))
    after = [PoePortState(p.port_id, p.attached_node, p.priority,
                          p.enabled and p.port_id not in to_disable, p.draw_w)
             for p in ports]
    assert shed(policy, after, soc) == []


# --- energy conservation ---

steps = st.lists(
    st.tuples(st.sampled_from(["charge", "discharge"]),
              st.floats(0, 50, allow_nan=False),
              st.floats(0, 1, allow_nan=False),
              st.floats(-10, 30, allow_nan=False)),
    max_size=30)


@settings(max_examples=150, deadline=None)
@given(steps)
def test_energy_conservation_non_saturating(seq):
    bank = BatteryBank(soc=0.5)
    ledger = Fraction(1, 2)
    energy = Fraction(200 * 48)
    for kind, watts, dt, ambient in seq:
        w, t = Fraction(watts), Fraction(dt)
        if kind == "discharge":
            bank = step_discharge(bank, watts, dt).bank
            ledger -= w * t / energy
        else:
            bank = step_charge(bank, watts, dt, ambient).bank
            if not (bank.chemistry == "lithium" and ambient < 0):
                ledger += w * t / energy
    # 30 steps x 50 W x 1 h over 9600 Wh moves soc by at most 0.15625,
    # so neither clamp can engage from a 0.5 start.
    assert 0 < ledger < 1
    assert bank.soc == pytest.approx(float(ledger), rel=1e-9)


# --- cluster_draw_w ---

def test_cluster_draw_stress_full():
    t = build_default_topology()
    ports = default_port_states(t)
    assert cluster_draw_w(t, ports, "stress") == 96.0


def test_cluster_draw_one_subcluster_disabled():
    t = build_default_topology()
    sub1_ports = {n.port_id for n in t.nodes() if n.subcluster_id == "sub_1"}
    ports = [PoePortState(p.port_id, p.attached_node, p.priority,
                          p.port_id not in sub1_ports, p.draw_w)
             for p in default_port_states(t)]
    assert cluster_draw_w(t, ports, "stress") == 48.0


def test_cluster_draw_all_disabled():
    t = build_default_topology()
    ports = [PoePortState(p.port_id, p.attached_node, p.priority, False, p.draw_w)
             for p in default_port_states(t)]
    assert cluster_draw_w(t, ports, "stress") == 0.0


def test_cluster_draw_idle_below_stress():
    t = build_default_topology()
    ports = default_port_states(t, workload_level="idle")
    assert 0 < cluster_draw_w(t, ports, "idle") < cluster_draw_w(t, ports, "stress")


def test_default_ports_controllers_critical():
    t = build_default_topology()
    ports = default_port_states(t)
    ctl_ports = {n.port_id for n in t.controller_nodes()}
    for p in ports:
        if p.port_id in ctl_ports:
            assert p.priority == CRITICAL
        else:
            assert p.priority == LOW
    assert not ports[0].enabled or ports[0].effective_draw_w == ports[0].draw_w
    disabled = PoePortState("px", "n", LOW, False, 6.0)
    assert disabled.effective_draw_w == 0.0


def test_default_ports_reject_demoted_controller():
    t = build_default_topology()
    ctl_port = next(n.port_id for n in t.controller_nodes())
    with pytest.raises(ValueError):
        default_port_states(t, priorities={ctl_port: LOW})
