import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from opsearch.energy import (
    EnergyReport,
    EnergyTable,
    Mode,
    OperatorChoice,
    assignment_cim_usage,
    assignment_energy,
    baseline_energy,
    expected_cim_usage,
    expected_energy,
    lagrangian_penalty,
    parse_budget,
    parse_choice_label,
    total_loss,
    total_weight_bits,
)
from opsearch.network import mini_cnn, mini_squeeze, saturated_alpha
from opsearch.operators import OperatorKind
from opsearch.tensor import Tensor

from conftest import gradcheck

TABLE = EnergyTable.default()
DIGITAL = TABLE.choice_set("digital")
HYBRID = TABLE.choice_set("hybrid")


def choices(*labels):
    return [TABLE.resolve(t) for t in labels]


# -- table -------------------------------------------------------------------------


def test_default_table_constants():
    want = {
        ("Typical", "Digital8"): (295.7, 0),
        ("MF", "Digital8"): (64.0, 0),
        ("Binary", "Digital8"): (32.0, 0),
        ("Typical", "CiM4"): (51.78, 4),
        ("MF", "CiM4"): (12.95, 4),
        ("Binary", "CiM4"): (6.47, 1),
    }
    got = {(c.operator.long_name, c.mode.value): (c.energy_fj, c.area_bits) for c in TABLE.entries}
    assert got == want


def test_choice_sets():
    assert [c.label for c in DIGITAL] == ["T", "MF", "B"]
    assert [c.label for c in HYBRID] == ["T", "MF", "B", "T-CiM", "MF-CiM", "B-CiM"]
    with pytest.raises(ValueError):
        TABLE.choice_set("analog")


def test_choice_validation():
    with pytest.raises(ValueError):
        OperatorChoice(OperatorKind.TYPICAL, Mode.DIGITAL8, 0.0, 0)
    with pytest.raises(ValueError):
        OperatorChoice(OperatorKind.TYPICAL, Mode.DIGITAL8, 1.0, 4)
    with pytest.raises(ValueError):
        OperatorChoice(OperatorKind.TYPICAL, Mode.CIM4, 1.0, 0)


def test_label_parsing():
    assert parse_choice_label("T") == (OperatorKind.TYPICAL, Mode.DIGITAL8)
    assert parse_choice_label("mf-cim") == (OperatorKind.MULFREE, Mode.CIM4)
    assert parse_choice_label("B-CiM4") == (OperatorKind.BINARY, Mode.CIM4)
    with pytest.raises(ValueError, match="'Q'"):
        parse_choice_label("Q")
    with pytest.raises(ValueError):
        parse_choice_label(" ")


def test_csv_round_trip_and_override():
    text = TABLE.to_csv()
    assert "Typical,Digital8,295.7,0" in text
    assert "Binary,CiM4,6.47,1" in text
    assert "MF,CiM4,12.95,4" in text
    assert EnergyTable.from_csv(text) == TABLE
    custom = EnergyTable.from_csv("operator,mode,energy_fj,area_bits\nBinary,Digital8,16,0\n")
    assert custom.lookup(OperatorKind.BINARY, Mode.DIGITAL8).energy_fj == 16.0
    assert custom.lookup(OperatorKind.TYPICAL, Mode.DIGITAL8).energy_fj == 295.7


def test_csv_errors_name_lines():
    with pytest.raises(ValueError, match="header"):
        EnergyTable.from_csv("op,mode\n")
    with pytest.raises(ValueError, match="line 3"):
        EnergyTable.from_csv("operator,mode,energy_fj,area_bits\nBinary,Digital8,16,0\nBinary,CiM4,abc,1\n")


def test_missing_choice_rejected():
    partial = EnergyTable(tuple(c for c in TABLE.entries if c.mode is Mode.DIGITAL8))
    partial.choice_set("digital")
    with pytest.raises(KeyError):
        partial.choice_set("hybrid")


# -- expected energy ------------------------------------------------------------


def test_expected_energy_examples():
    uniform = expected_energy([Tensor(np.zeros(3))], [1000], DIGITAL).item()
    assert abs(uniform - 1000 * (295.7 + 64 + 32) / 3) < 1e-6
    assert abs(uniform - 130566.67) < 0.01
    typ = expected_energy([Tensor(saturated_alpha(3, 0))], [1000], DIGITAL).item()
    assert abs(typ - 295700) < 1e-6
    two = expected_energy([Tensor(saturated_alpha(3, 2))] * 2, [1000, 2000], DIGITAL).item()
    assert abs(two - 96000) < 1e-6


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=6, max_size=6), st.integers(1, 10_000))
def test_expected_energy_bounded(alpha, n):
    e = expected_energy([Tensor(np.array(alpha))], [n], HYBRID).item() / n
    costs = [c.energy_fj for c in HYBRID]
    assert min(costs) - 1e-9 <= e <= max(costs) + 1e-9


@pytest.mark.parametrize("labels", [("T", "B"), ("MF", "MF"), ("B-CiM", "T"), ("MF-CiM", "T-CiM")])
def test_assignment_matches_saturated_expectation(labels):
    cs = choices(*labels)
    idx = [HYBRID.index(c) for c in cs]
    alphas = [Tensor(saturated_alpha(6, j)) for j in idx]
    rep = assignment_energy(cs, [1000, 2000], TABLE, [36, 72])
    assert abs(rep.total_fj - expected_energy(alphas, [1000, 2000], HYBRID).item()) < 1e-9
    assert abs(rep.cim_bits - expected_cim_usage(alphas, [36, 72], HYBRID).item()) < 1e-9


def test_assignment_energy_example():
    rep = assignment_energy(choices("T", "B"), [1000, 2000], TABLE)
    assert rep.total_fj == 359700.0
    assert abs(rep.normalized - 359700 / (3000 * 295.7)) < 1e-12
    assert abs(rep.normalized - 0.40548) < 1e-5
    assert rep.total_fj == sum(rep.per_layer_fj)


@pytest.mark.parametrize("spec", [mini_cnn(), mini_squeeze()])
def test_energy_ratios(spec):
    n = spec.mac_counts()
    L = len(n)
    all_t = assignment_energy(choices(*["T"] * L), n, TABLE)
    all_b = assignment_energy(choices(*["B"] * L), n, TABLE)
    all_tc = assignment_energy(choices(*["T-CiM"] * L), n, TABLE)
    assert all_t.normalized == 1.0
    assert abs(all_t.total_fj / all_b.total_fj - 9.2406) < 1e-4
    assert abs(all_t.total_fj / all_tc.total_fj - 5.711) < 1e-3


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=3, max_size=3))
def test_normalized_in_unit_interval(idx):
    rep = assignment_energy([HYBRID[j] for j in idx], mini_cnn().mac_counts(), TABLE)
    assert 0 < rep.normalized <= 1.0


def test_empty_assignment():
    rep = assignment_energy([], [], TABLE, [])
    assert rep.total_fj == 0.0 and rep.cim_bits == 0 and rep.feasible


def test_assignment_length_checked():
    with pytest.raises(ValueError):
        assignment_energy(choices("T"), [1, 2], TABLE)


# -- CiM usage and penalty ----------------------------------------------------------


def test_cim_usage_examples():
    assert assignment_cim_usage(choices("B-CiM"), [36]) == 36
    assert assignment_cim_usage(choices("MF-CiM"), [36]) == 144
    assert assignment_cim_usage(choices("T", "MF", "B"), [36, 10, 5]) == 0


def test_lagrangian_examples():
    assert lagrangian_penalty(1.0, 100, Tensor(60.0)).item() == 1600.0
    assert lagrangian_penalty(1.0, 100, Tensor(100.0)).item() == 0.0
    assert lagrangian_penalty(0.0, 100, Tensor(3.0)).item() == 0.0
    with pytest.raises(ValueError):
        lagrangian_penalty(-1.0, 100, Tensor(3.0))


def test_budget_parsing():
    n_ws = mini_squeeze().weight_counts()
    total = total_weight_bits(n_ws, TABLE)
    assert total == 4 * sum(n_ws)
    assert parse_budget("25%", n_ws, TABLE) == int(np.floor(0.25 * total))
    assert parse_budget("100%", n_ws, TABLE) == total
    assert parse_budget(300, n_ws, TABLE) == 300
    assert parse_budget("0", n_ws, TABLE) == 0
    for bad in ("-5", "1.5", "-10%", "lots"):
        with pytest.raises(ValueError):
            parse_budget(bad, n_ws, TABLE)


def test_feasibility_is_inequality():
    rep = assignment_energy(choices("B-CiM", "T"), [10, 10], TABLE, [36, 36], budget_bits=36)
    assert rep.cim_bits == 36 and rep.feasible
    rep = assignment_energy(choices("MF-CiM", "T"), [10, 10], TABLE, [36, 36], budget_bits=36)
    assert not rep.feasible


def test_report_round_trip_and_format():
    rep = assignment_energy(choices("T", "B-CiM"), [10, 20], TABLE, [3, 4], 5, ["a", "b"])
    assert EnergyReport.from_dict(rep.to_dict()) == rep
    text = rep.format()
    assert "energy_norm" in text and "feasible: true" in text


# -- total loss ---------------------------------------------------------------------


def test_total_loss_disabled_is_identity():
    acc = Tensor(1.2345)
    out = total_loss(acc, [Tensor(np.zeros(3))], [100], 0.0, DIGITAL, TABLE)
    assert out is acc


def test_uniform_costs_more_than_binary():
    acc = Tensor(0.0)
    u = total_loss(acc, [Tensor(np.zeros(3))], [100], 0.5, DIGITAL, TABLE).item()
    b = total_loss(acc, [Tensor(saturated_alpha(3, 2))], [100], 0.5, DIGITAL, TABLE).item()
    assert u > b


def test_energy_gradient_pushes_to_cheaper_operator():
    a = Tensor(np.zeros(3), requires_grad=True)
    total_loss(Tensor(0.0), [a], [100], 1.0, DIGITAL, TABLE).backward()
    # descent direction -grad raises the cheapest logit and lowers the most expensive
    assert a.grad[0] > a.grad[1] > a.grad[2]
    assert a.grad[2] < 0 < a.grad[0]


@pytest.mark.parametrize("seed", range(20))
def test_total_loss_alpha_gradcheck(seed):
    rng = np.random.default_rng(seed)
    n_ops, n_ws = [4608, 2048, 320], [36, 64, 160]
    budget = 0.25 * total_weight_bits(n_ws, TABLE)

    def f(a0, a1, a2, logit):
        from opsearch.tensor import cross_entropy

        return total_loss(cross_entropy(logit, [1, 0]), [a0, a1, a2], n_ops, 0.7, HYBRID, TABLE,
                          n_ws=n_ws, gamma=3.0, budget_bits=budget)

    arrays = [rng.normal(size=6) for _ in range(3)] + [rng.normal(size=(2, 3))]
    assert gradcheck(f, arrays) < 1e-4


def test_total_loss_penalty_uses_normalized_usage():
    n_ws = [100]
    a = Tensor(saturated_alpha(6, 5))  # B-CiM: 100 bits used
    scale = total_weight_bits(n_ws, TABLE)
    out = total_loss(Tensor(0.0), [a], [1], 0.0, HYBRID, TABLE, n_ws=n_ws, gamma=2.0, budget_bits=300).item()
    assert abs(out - 2.0 * ((300 - 100) / scale) ** 2) < 1e-12
    assert baseline_energy([1], TABLE) == 295.7
