"""Accelerator cost model: per-op energies, CiM weight footprint, and the
energy / budget terms added to the training loss."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .operators import OperatorKind
from .tensor import Tensor, add, mul, softmax, sub, tsum


class Mode(str, Enum):
    DIGITAL8 = "Digital8"
    CIM4 = "CiM4"

    @property
    def bits(self) -> int:
        return 8 if self is Mode.DIGITAL8 else 4

    @classmethod
    def parse(cls, token: str) -> "Mode":
        key = token.strip().lower()
        for mode in cls:
            if key == mode.value.lower():
                return mode
        if key in ("digital", "d", "digital-8"):
            return cls.DIGITAL8
        if key in ("cim", "c", "cim-4"):
            return cls.CIM4
        raise ValueError(f"unknown compute mode {token!r}")


@dataclass(frozen=True)
class OperatorChoice:
    operator: OperatorKind
    mode: Mode
    energy_fj: float
    area_bits: int

    def __post_init__(self):
        if not self.energy_fj > 0:
            raise ValueError(f"{self.label}: energy per op must be positive, got {self.energy_fj}")
        if self.area_bits < 0:
            raise ValueError(f"{self.label}: area per weight must be non-negative")
        if (self.area_bits == 0) != (self.mode is Mode.DIGITAL8):
            raise ValueError(f"{self.label}: area must be zero exactly for digital choices")

    @property
    def key(self) -> tuple[OperatorKind, Mode]:
        return (self.operator, self.mode)

    @property
    def bits(self) -> int:
        return self.mode.bits

    @property
    def label(self) -> str:
        """Short token used in assignment strings: ``T``, ``MF``, ``B`` or ``T-CiM`` etc."""
        if self.mode is Mode.DIGITAL8:
            return self.operator.value
        return f"{self.operator.value}-CiM"


def parse_choice_label(token: str) -> tuple[OperatorKind, Mode]:
    tok = token.strip()
    if not tok:
        raise ValueError("empty assignment token")
    head, sep, tail = tok.partition("-")
    try:
        op = OperatorKind.parse(head)
        mode = Mode.parse(tail) if sep else Mode.DIGITAL8
    except ValueError:
        raise ValueError(f"malformed assignment token {token!r}") from None
    return op, mode


DEFAULT_ENTRIES = (
    (OperatorKind.TYPICAL, Mode.DIGITAL8, 295.7, 0),
    (OperatorKind.MULFREE, Mode.DIGITAL8, 64.0, 0),
    (OperatorKind.BINARY, Mode.DIGITAL8, 32.0, 0),
    (OperatorKind.TYPICAL, Mode.CIM4, 51.78, 4),
    (OperatorKind.MULFREE, Mode.CIM4, 12.95, 4),
    (OperatorKind.BINARY, Mode.CIM4, 6.47, 1),
)

TABLE_HEADER = ("operator", "mode", "energy_fj", "area_bits")


@dataclass(frozen=True)
class EnergyTable:
    entries: tuple[OperatorChoice, ...]

    def __post_init__(self):
        keys = [c.key for c in self.entries]
        if len(set(keys)) != len(keys):
            raise ValueError("energy table has duplicate (operator, mode) entries")

    @classmethod
    def default(cls) -> "EnergyTable":
        return cls(tuple(OperatorChoice(op, mode, e, a) for op, mode, e, a in DEFAULT_ENTRIES))

    def lookup(self, operator: OperatorKind, mode: Mode) -> OperatorChoice:
        for c in self.entries:
            if c.operator is operator and c.mode is mode:
                return c
        raise KeyError(f"energy table has no entry for {operator.long_name}/{mode.value}")

    def choice_set(self, mode: str) -> list[OperatorChoice]:
        """Digital: the three operators at 8 bits. Hybrid: each operator in both modes."""
        ops = list(OperatorKind)
        if mode == "digital":
            keys = [(op, Mode.DIGITAL8) for op in ops]
        elif mode == "hybrid":
            keys = [(op, m) for m in (Mode.DIGITAL8, Mode.CIM4) for op in ops]
        else:
            raise ValueError(f"unknown search mode {mode!r} (expected 'digital' or 'hybrid')")
        return [self.lookup(op, m) for op, m in keys]

    def resolve(self, token: str) -> OperatorChoice:
        return self.lookup(*parse_choice_label(token))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TABLE_HEADER)
        for c in self.entries:
            writer.writerow([c.operator.long_name, c.mode.value, repr(float(c.energy_fj)), c.area_bits])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, base: "EnergyTable | None" = None) -> "EnergyTable":
        """Parse a table; rows override the matching entries of ``base`` (defaults)."""
        base = base or cls.default()
        merged = {c.key: c for c in base.entries}
        reader = csv.DictReader(io.StringIO(text))
        if reader.fieldnames is None or set(reader.fieldnames) != set(TABLE_HEADER):
            raise ValueError(f"energy table header must be {','.join(TABLE_HEADER)}, got {reader.fieldnames}")
        for lineno, row in enumerate(reader, start=2):
            try:
                choice = OperatorChoice(
                    OperatorKind.parse(row["operator"]),
                    Mode.parse(row["mode"]),
                    float(row["energy_fj"]),
                    int(row["area_bits"]),
                )
            except (ValueError, TypeError) as exc:
                raise ValueError(f"energy table line {lineno}: {exc}") from None
            merged[choice.key] = choice
        order = [c.key for c in base.entries] + [k for k in merged if k not in {c.key for c in base.entries}]
        return cls(tuple(merged[k] for k in order))

    @classmethod
    def load(cls, path: str | Path) -> "EnergyTable":
        return cls.from_csv(Path(path).read_text())


# ---------------------------------------------------------------- reports


@dataclass
class EnergyReport:
    layer_names: list[str]
    labels: list[str]
    per_layer_fj: list[float]
    total_fj: float
    baseline_fj: float
    normalized: float
    cim_bits: int
    budget_bits: int | None = None
    feasible: bool = True
    per_layer_cim_bits: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EnergyReport":
        return cls(**d)

    def format(self) -> str:
        lines = [f"{'layer':<16}{'choice':<8}{'energy_fj':>16}{'cim_bits':>10}"]
        cim = self.per_layer_cim_bits or [0] * len(self.labels)
        for name, label, e, b in zip(self.layer_names, self.labels, self.per_layer_fj, cim):
            lines.append(f"{name:<16}{label:<8}{e:>16.2f}{b:>10d}")
        lines.append(f"total_fj: {self.total_fj!r}")
        lines.append(f"baseline_fj: {self.baseline_fj!r}")
        lines.append(f"energy_norm: {self.normalized!r}")
        lines.append(f"cim_bits: {self.cim_bits}")
        if self.budget_bits is not None:
            lines.append(f"budget_bits: {self.budget_bits}")
        lines.append(f"feasible: {str(self.feasible).lower()}")
        return "\n".join(lines)


def baseline_energy(n_ops: Sequence[int], table: EnergyTable) -> float:
    """Energy with every searchable layer on the typical operator in 8-bit digital."""
    e = table.lookup(OperatorKind.TYPICAL, Mode.DIGITAL8).energy_fj
    return float(sum(n * e for n in n_ops))


def total_weight_bits(n_ws: Sequence[int], table: EnergyTable) -> int:
    """CiM footprint if every weight were mapped at the widest CiM area."""
    widest = max(c.area_bits for c in table.entries)
    return int(sum(n_ws) * widest)


def parse_budget(value, n_ws: Sequence[int], table: EnergyTable) -> int:
    """``"25%"`` -> floor(0.25 * total weight-bits); plain numbers are bits."""
    text = str(value).strip()
    if text.endswith("%"):
        frac = float(text[:-1]) / 100.0
        if frac < 0:
            raise ValueError(f"negative CiM budget {value!r}")
        return int(math.floor(frac * total_weight_bits(n_ws, table) + 1e-9))
    bits = float(text)
    if bits < 0 or bits != int(bits):
        raise ValueError(f"CiM budget must be a non-negative integer number of bits, got {value!r}")
    return int(bits)


def assignment_energy(
    assignment: Sequence[OperatorChoice],
    n_ops: Sequence[int],
    table: EnergyTable,
    n_ws: Sequence[int] | None = None,
    budget_bits: int | None = None,
    layer_names: Sequence[str] | None = None,
) -> EnergyReport:
    if len(assignment) != len(n_ops):
        raise ValueError(f"assignment has {len(assignment)} entries for {len(n_ops)} searchable layers")
    per_layer = [float(n * c.energy_fj) for c, n in zip(assignment, n_ops)]
    total = float(sum(per_layer))
    base = baseline_energy(n_ops, table)
    per_cim = [int(c.area_bits * w) for c, w in zip(assignment, n_ws)] if n_ws is not None else []
    cim = int(sum(per_cim))
    return EnergyReport(
        layer_names=list(layer_names) if layer_names is not None else [f"layer{i}" for i in range(len(n_ops))],
        labels=[c.label for c in assignment],
        per_layer_fj=per_layer,
        total_fj=total,
        baseline_fj=base,
        normalized=total / base if base > 0 else 0.0,
        cim_bits=cim,
        budget_bits=budget_bits,
        feasible=budget_bits is None or cim <= budget_bits,
        per_layer_cim_bits=per_cim,
    )


def assignment_cim_usage(assignment: Sequence[OperatorChoice], n_ws: Sequence[int]) -> int:
    return int(sum(c.area_bits * w for c, w in zip(assignment, n_ws)))


# ---------------------------------------------------------------- differentiable terms


def _weighted_sum(alphas: Sequence[Tensor], counts: Sequence[float], costs: np.ndarray) -> Tensor:
    if len(alphas) != len(counts):
        raise ValueError(f"{len(alphas)} alpha vectors for {len(counts)} layer counts")
    total = Tensor(0.0)
    for alpha, n in zip(alphas, counts):
        if alpha.shape != costs.shape:
            raise ValueError(f"alpha has {alpha.shape[0]} entries but the choice set has {costs.shape[0]}")
        total = add(total, mul(tsum(mul(softmax(alpha), costs)), float(n)))
    return total


def expected_energy(alphas: Sequence[Tensor], n_ops: Sequence[int], choices: Sequence[OperatorChoice]) -> Tensor:
    """sum_i N_OP,i * sum_j softmax(alpha_i)_j * E_j, in femtojoules."""
    return _weighted_sum(alphas, n_ops, np.array([c.energy_fj for c in choices]))


def expected_cim_usage(alphas: Sequence[Tensor], n_ws: Sequence[int], choices: Sequence[OperatorChoice]) -> Tensor:
    """sum_i N_W,i * sum_j softmax(alpha_i)_j * A_j, in bits."""
    return _weighted_sum(alphas, n_ws, np.array([float(c.area_bits) for c in choices]))


def lagrangian_penalty(gamma: float, budget: float, usage) -> Tensor:
    """gamma * (budget - usage)^2."""
    if gamma < 0 or budget < 0:
        raise ValueError("gamma and budget must be non-negative")
    diff = sub(Tensor(float(budget)), usage)
    return mul(mul(diff, diff), float(gamma))


def total_loss(
    acc_loss: Tensor,
    alphas: Sequence[Tensor],
    n_ops: Sequence[int],
    lam: float,
    choices: Sequence[OperatorChoice],
    table: EnergyTable,
    n_ws: Sequence[int] | None = None,
    gamma: float = 0.0,
    budget_bits: float | None = None,
) -> Tensor:
    """Accuracy loss plus the normalized energy term and, if a budget is given,
    the CiM penalty.

    The energy term is divided by the all-typical digital baseline and the CiM
    usage / budget by the total weight-bits, so ``lam`` and ``gamma`` are
    dimensionless.
    """
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    loss = acc_loss
    if lam > 0:
        base = baseline_energy(n_ops, table)
        loss = add(loss, mul(expected_energy(alphas, n_ops, choices), lam / base))
    if gamma > 0 and budget_bits is not None:
        if n_ws is None:
            raise ValueError("CiM penalty needs per-layer weight counts")
        scale = float(total_weight_bits(n_ws, table)) or 1.0
        usage = mul(expected_cim_usage(alphas, n_ws, choices), 1.0 / scale)
        loss = add(loss, lagrangian_penalty(gamma, budget_bits / scale, usage))
    return loss
