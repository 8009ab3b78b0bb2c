"""Energy-aware operator search strategies and the finalize/relearn step.

All strategies share one loop: minibatch Adam over the network weights and
(optionally) the operator logits, minimizing cross-entropy plus the
normalized energy term and, in hybrid mode, the CiM budget penalty.

* single      joint descent on the training split, then argmax per layer
* bilevel     alternate an alpha step on a validation batch and a weight step
              on a training batch (first order)
* sequential  one round per open layer; after each round freeze the
              (layer, choice) with the globally largest softmax probability
* variational train once, sample a population of assignments from
              softmax(alpha), relearn each and keep the best on validation
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Callable

import numpy as np

from .data import Dataset
from .energy import (
    EnergyReport,
    EnergyTable,
    assignment_cim_usage,
    assignment_energy,
    baseline_energy,
    expected_cim_usage,
    expected_energy,
    parse_budget,
    total_loss,
    total_weight_bits,
)
from .network import Network, NetworkSpec, build_network
from .tensor import Tensor, cross_entropy, no_grad, softmax
from .train import Adam, EarlyStopping, NonFiniteError, ParamGroup, batches, evaluate

log = logging.getLogger(__name__)

STRATEGIES = ("single", "bilevel", "sequential", "variational")
MODES = ("digital", "hybrid")


@dataclass
class SearchConfig:
    strategy: str = "single"
    mode: str = "digital"
    lam: float = 0.1
    gamma: float = 0.0
    cim_budget: str | int | None = None
    epochs: int = 20
    relearn_epochs: int = 10
    samples: int = 16
    lr_theta: float = 1e-3
    lr_alpha: float = 3e-3
    steepness: float = 10.0
    batch_size: int = 32
    patience: int = 5
    min_delta: float = 1e-4
    reinit: bool = False
    seed: int = 0
    eval_batch: int = 256

    def validate(self) -> "SearchConfig":
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {', '.join(STRATEGIES)}, got {self.strategy!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {', '.join(MODES)}, got {self.mode!r}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.samples < 1:
            raise ValueError(f"samples must be >= 1, got {self.samples}")
        for name in ("epochs", "relearn_epochs", "batch_size", "eval_batch"):
            if getattr(self, name) < (1 if name in ("batch_size", "eval_batch") else 0):
                raise ValueError(f"{name} out of range: {getattr(self, name)}")
        for name in ("lr_theta", "lr_alpha", "steepness"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        return self

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def keys(cls) -> set[str]:
        return {("lambda" if f.name == "lam" else f.name) for f in fields(cls)}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SearchConfig":
        unknown = set(d) - cls.keys()
        if unknown:
            raise KeyError(sorted(unknown)[0])
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d).validate()


@dataclass
class SearchOutcome:
    strategy: str
    mode: str
    layer_names: list[str]
    assignment: list[int]
    labels: list[str]
    energy: EnergyReport
    metrics: dict[str, float]
    state: dict[str, np.ndarray] = field(repr=False, default_factory=dict)
    history: list[dict] = field(repr=False, default_factory=list)
    alpha_probs: list[list[float]] = field(default_factory=list)
    rounds: list[dict] = field(default_factory=list)
    population: list[dict] = field(default_factory=list)
    feasible: bool = True
    budget_bits: int | None = None

    @property
    def accuracy(self) -> float:
        """Test accuracy of the deployed (quantized) network."""
        return self.metrics["test_acc_quant"]

    def summary(self) -> dict[str, Any]:
        return {
            "strategy": self.strategy,
            "mode": self.mode,
            "assignment": dict(zip(self.layer_names, self.labels)),
            "metrics": self.metrics,
            "energy": self.energy.to_dict(),
            "feasible": self.feasible,
            "budget_bits": self.budget_bits,
            "alpha_probs": self.alpha_probs,
            "rounds": self.rounds,
        }


def derive_seed(*parts: int | str) -> int:
    """Deterministic child seed from a base seed and labels."""
    ints = [p if isinstance(p, int) else zlib.crc32(str(p).encode()) for p in parts]
    return int(np.random.SeedSequence(ints).generate_state(1)[0])


class SearchRun:
    """Holds the network, data and cost bookkeeping for one search."""

    def __init__(
        self,
        spec: NetworkSpec,
        data: Dataset,
        cfg: SearchConfig,
        table: EnergyTable | None = None,
        on_epoch: Callable[[dict], None] | None = None,
    ):
        cfg.validate()
        if data.sample_shape != spec.input_shape:
            raise ValueError(f"dataset samples {data.sample_shape} do not match network input {spec.input_shape}")
        self.spec = spec
        self.data = data
        self.cfg = cfg
        self.table = table or EnergyTable.default()
        self.net: Network = build_network(spec, cfg.mode, self.table, seed=derive_seed(cfg.seed, "init"), steepness=cfg.steepness)
        self.choices = self.net.choices
        self.n_ops = spec.mac_counts()
        self.n_ws = spec.weight_counts()
        self.baseline = baseline_energy(self.n_ops, self.table)
        if cfg.cim_budget is not None:
            self.budget_bits: int | None = parse_budget(cfg.cim_budget, self.n_ws, self.table)
        elif cfg.mode == "hybrid":
            self.budget_bits = total_weight_bits(self.n_ws, self.table)
        else:
            self.budget_bits = None
        self.history: list[dict] = []
        self.on_epoch = on_epoch

    # -- losses -------------------------------------------------------------

    def _penalized(self) -> bool:
        return self.cfg.mode == "hybrid" and self.cfg.gamma > 0 and self.budget_bits is not None

    def loss(self, xb: np.ndarray, yb: np.ndarray) -> Tensor:
        acc = cross_entropy(self.net.forward(xb), yb)
        return total_loss(
            acc,
            self.net.alphas,
            self.n_ops,
            self.cfg.lam,
            self.choices,
            self.table,
            n_ws=self.n_ws,
            gamma=self.cfg.gamma if self._penalized() else 0.0,
            budget_bits=self.budget_bits if self._penalized() else None,
        )

    def cost_terms(self) -> dict[str, Any]:
        with no_grad():
            e = expected_energy(self.net.alphas, self.n_ops, self.choices).item()
            usage = expected_cim_usage(self.net.alphas, self.n_ws, self.choices).item()
        out = {"expected_energy": e, "expected_energy_norm": e / self.baseline, "expected_cim_bits": usage}
        if self.budget_bits is not None:
            out["cim_residual"] = (self.budget_bits - usage) ** 2
        return out

    def val_metrics(self) -> tuple[float, float]:
        x, y = self.data.x_val, self.data.y_val
        with no_grad():
            res = evaluate(self.net, x, y, batch_size=self.cfg.eval_batch)
            reg = total_loss(Tensor(0.0), self.net.alphas, self.n_ops, self.cfg.lam, self.choices, self.table,
                             n_ws=self.n_ws, gamma=self.cfg.gamma if self._penalized() else 0.0,
                             budget_bits=self.budget_bits if self._penalized() else None).item()
        return res.loss + reg, res.accuracy

    # -- training -----------------------------------------------------------

    def train(self, phase: str, epochs: int, *, alpha: bool = True, bilevel: bool = False, seed: int | None = None) -> list[dict]:
        """Minibatch Adam for up to ``epochs`` epochs with early stopping on validation loss."""
        cfg = self.cfg
        groups = [ParamGroup(self.net.weights, cfg.lr_theta, "theta")]
        free = self.net.free_alphas() if alpha else []
        if free:
            groups.append(ParamGroup(free, cfg.lr_alpha, "alpha"))
        opt = Adam(groups)
        base = derive_seed(cfg.seed if seed is None else seed, phase)
        order_rng = np.random.default_rng(base)
        val_rng = np.random.default_rng(derive_seed(base, "val"))
        stopper = EarlyStopping(cfg.patience, cfg.min_delta)
        x, y = self.data.x_train, self.data.y_train
        xv, yv = self.data.x_val, self.data.y_val
        val_iter = None
        records = []
        for epoch in range(1, epochs + 1):
            total, count = 0.0, 0
            for b, idx in enumerate(batches(len(y), cfg.batch_size, order_rng)):
                if bilevel and free:
                    if val_iter is None:
                        val_iter = _cycle(len(yv), cfg.batch_size, val_rng)
                    vidx = next(val_iter)
                    opt.zero_grad()
                    vloss = self.loss(xv[vidx], yv[vidx])
                    self._check(vloss, phase, epoch, b)
                    vloss.backward()
                    opt.step("alpha")
                    opt.zero_grad()
                    loss = self.loss(x[idx], y[idx])
                    self._check(loss, phase, epoch, b)
                    loss.backward()
                    opt.step("theta")
                else:
                    opt.zero_grad()
                    loss = self.loss(x[idx], y[idx])
                    self._check(loss, phase, epoch, b)
                    loss.backward()
                    opt.step()
                total += loss.item() * len(idx)
                count += len(idx)
            val_loss, val_acc = self.val_metrics()
            rec = {"phase": phase, "epoch": epoch, "train_loss": total / count, "val_loss": val_loss, "val_acc": val_acc}
            rec.update(self.cost_terms())
            rec["alpha_softmax"] = [softmax(a.detach()).data.tolist() for a in self.net.alphas]
            records.append(rec)
            self.history.append(rec)
            if self.on_epoch is not None:
                self.on_epoch(rec)
            log.debug("%s epoch %d: train %.4f val %.4f acc %.3f", phase, epoch, rec["train_loss"], val_loss, val_acc)
            if stopper.update(val_loss):
                break
        return records

    @staticmethod
    def _check(loss: Tensor, phase: str, epoch: int, batch: int) -> None:
        if not np.isfinite(loss.item()):
            raise NonFiniteError(f"non-finite loss {loss.item()} in phase {phase!r}, epoch {epoch}, batch {batch}")

    def alpha_probs(self) -> list[list[float]]:
        return [softmax(a.detach()).data.tolist() for a in self.net.alphas]

    # -- finalize -----------------------------------------------------------

    def finalize(self, assignment, phase: str = "relearn", seed: int | None = None) -> SearchOutcome:
        """Fix ``assignment``, relearn the weights and evaluate float and quantized accuracy."""
        cfg = self.cfg
        assignment = [int(j) for j in assignment]
        probs = self.alpha_probs()
        self.net.set_assignment(assignment)
        if cfg.reinit:
            self.net.reinitialize_weights(derive_seed(cfg.seed if seed is None else seed, phase, "reinit"))
        self.train(phase, cfg.relearn_epochs, alpha=False, seed=seed)
        metrics = self.evaluate_all()
        choices = self.net.assignment_choices(assignment)
        report = assignment_energy(choices, self.n_ops, self.table, self.n_ws, self.budget_bits, self.spec.searchable_names)
        return SearchOutcome(
            strategy=cfg.strategy,
            mode=cfg.mode,
            layer_names=self.spec.searchable_names,
            assignment=assignment,
            labels=[c.label for c in choices],
            energy=report,
            metrics=metrics,
            state=self.net.state(),
            history=list(self.history),
            alpha_probs=probs,
            feasible=report.feasible,
            budget_bits=self.budget_bits,
        )

    def evaluate_all(self) -> dict[str, float]:
        out = {}
        with no_grad():
            for split in ("train", "val", "test"):
                x, y = self.data.split(split)
                if len(y) == 0:
                    continue
                f = evaluate(self.net, x, y, batch_size=self.cfg.eval_batch)
                q = evaluate(self.net, x, y, quantized=True, batch_size=self.cfg.eval_batch)
                out[f"{split}_acc"] = f.accuracy
                out[f"{split}_loss"] = f.loss
                out[f"{split}_acc_quant"] = q.accuracy
                out[f"{split}_loss_quant"] = q.loss
        return out


def _cycle(n: int, batch_size: int, rng: np.random.Generator):
    while True:
        yield from batches(n, batch_size, rng)


# ---------------------------------------------------------------- strategies


def search_single(spec: NetworkSpec, data: Dataset, cfg: SearchConfig, table: EnergyTable | None = None, **kw) -> SearchOutcome:
    run = SearchRun(spec, data, cfg, table, **kw)
    run.train("search", cfg.epochs)
    return run.finalize(run.net.assignment())


def search_bilevel(spec: NetworkSpec, data: Dataset, cfg: SearchConfig, table: EnergyTable | None = None, **kw) -> SearchOutcome:
    if len(data.y_val) == 0:
        raise ValueError("bi-level search needs a non-empty validation split")
    run = SearchRun(spec, data, cfg, table, **kw)
    run.train("search", cfg.epochs, bilevel=True)
    return run.finalize(run.net.assignment())


def pick_global_max(probs: list[np.ndarray], open_layers: list[int]) -> tuple[int, int]:
    """(layer, choice) with the largest probability; ties go to the lowest layer, then choice."""
    best, best_p = None, -np.inf
    for i in open_layers:
        j = int(np.argmax(probs[i]))
        if probs[i][j] > best_p:
            best, best_p = (i, j), probs[i][j]
    return best


def search_sequential(spec: NetworkSpec, data: Dataset, cfg: SearchConfig, table: EnergyTable | None = None, **kw) -> SearchOutcome:
    run = SearchRun(spec, data, cfg, table, **kw)
    layers = run.net.layers
    open_layers = [i for i, m in enumerate(layers) if m.fixed is None]
    rounds = []
    for r in range(1, len(open_layers) + 1):
        run.train(f"round{r}", cfg.epochs)
        probs = [softmax(m.alpha.detach()).data for m in layers]
        i, j = pick_global_max(probs, open_layers)
        layers[i].fix(j)
        open_layers.remove(i)
        rounds.append({
            "round": r,
            "layer": layers[i].name,
            "choice": layers[i].choices[j].label,
            "probability": float(probs[i][j]),
            "fixed": {m.name: m.choices[m.fixed].label for m in layers if m.fixed is not None},
        })
    outcome = run.finalize(run.net.assignment())
    outcome.rounds = rounds
    return outcome


def _rank_key(c: dict) -> tuple:
    return (-c["val_acc_quant"], c["energy_fj"], c["index"])


def search_variational(spec: NetworkSpec, data: Dataset, cfg: SearchConfig, table: EnergyTable | None = None, **kw) -> SearchOutcome:
    """Train once, sample ``cfg.samples`` assignments, relearn each and keep
    the most accurate on validation (quantized) among budget-feasible ones."""
    run = SearchRun(spec, data, cfg, table, **kw)
    run.train("search", cfg.epochs)
    step1 = run.net.state()
    step1_history = list(run.history)
    sampler = np.random.default_rng(derive_seed(cfg.seed, "sample"))
    from .network import sample_assignments

    draws = sample_assignments([a.data for a in run.net.alphas], sampler, cfg.samples)
    population = []
    best: SearchOutcome | None = None
    best_entry = None
    for n, draw in enumerate(draws):
        run.net.load_state(step1)
        run.history = list(step1_history)
        outcome = run.finalize(draw, phase=f"candidate{n}", seed=derive_seed(cfg.seed, n))
        entry = {
            "index": n,
            "assignment": ",".join(outcome.labels),
            "energy_fj": outcome.energy.total_fj,
            "energy_norm": outcome.energy.normalized,
            "cim_bits": outcome.energy.cim_bits,
            "feasible": outcome.feasible,
            **{k: outcome.metrics[k] for k in ("val_acc", "val_acc_quant", "test_acc", "test_acc_quant")},
        }
        population.append(entry)
        if best_entry is None or _better(entry, best_entry):
            best, best_entry = outcome, entry
    assert best is not None
    for entry in population:
        entry["winner"] = entry["index"] == best_entry["index"]
    run.net.load_state(best.state)
    best.population = population
    best.history = run.history
    return best


def _better(a: dict, b: dict) -> bool:
    if a["feasible"] != b["feasible"]:
        return a["feasible"]
    return _rank_key(a) < _rank_key(b)


def search_hybrid_variational(spec: NetworkSpec, data: Dataset, cfg: SearchConfig, table: EnergyTable | None = None, **kw) -> SearchOutcome:
    if cfg.mode != "hybrid":
        raise ValueError("hybrid variational search needs mode='hybrid'")
    return search_variational(spec, data, cfg, table, **kw)


_DISPATCH = {
    "single": search_single,
    "bilevel": search_bilevel,
    "sequential": search_sequential,
    "variational": search_variational,
}


def search(spec: NetworkSpec, data: Dataset, cfg: SearchConfig, table: EnergyTable | None = None, **kw) -> SearchOutcome:
    cfg.validate()
    return _DISPATCH[cfg.strategy](spec, data, cfg, table, **kw)


def train_fixed(spec: NetworkSpec, data: Dataset, cfg: SearchConfig, labels: list[str], epochs: int, table: EnergyTable | None = None) -> SearchOutcome:
    """Plain training of a fixed (uni- or mixed-operator) assignment from scratch."""
    run = SearchRun(spec, data, cfg, table)
    assignment = [m.choice_index(label) for m, label in zip(run.net.layers, labels)]
    run.net.set_assignment(assignment)
    run.train("fixed", epochs, alpha=False)
    metrics = run.evaluate_all()
    choices = run.net.assignment_choices(assignment)
    report = assignment_energy(choices, run.n_ops, run.table, run.n_ws, run.budget_bits, spec.searchable_names)
    return SearchOutcome(cfg.strategy, cfg.mode, spec.searchable_names, assignment, [c.label for c in choices],
                         report, metrics, run.net.state(), list(run.history), feasible=report.feasible,
                         budget_bits=run.budget_bits)
