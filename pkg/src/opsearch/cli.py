"""Command-line entry point: ``opsearch {search,pareto,energy,eval,dump-defaults}``.

Exit codes: 0 success, 1 configuration error, 2 run failure, 3 the winning
assignment violates the CiM budget (every candidate was infeasible).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .data import DatasetError, load_dataset
from .energy import EnergyReport, EnergyTable, assignment_energy, parse_budget
from .network import PRESETS, NetworkSpec, build_network, resolve_network
from .plot import scatter_svg
from .search import SearchConfig, SearchOutcome, search
from .train import evaluate

log = logging.getLogger("opsearch")

EXIT_OK, EXIT_CONFIG, EXIT_RUN, EXIT_INFEASIBLE = 0, 1, 2, 3

PARETO_HEADER = ["lambda", "strategy", "accuracy", "energy_fj", "energy_norm", "cim_bits", "assignment"]

RUN_KEYS = {"dataset": "synthetic:blobs", "net": "mini-cnn", "energy_table": None, "out": "runs/latest"}

# input shape and class count used by `energy` when a preset is named without a dataset
PRESET_SHAPES = {"mini-cnn": ((1, 8, 8), 3), "mini-squeeze": ((1, 8, 8), 10), "mini-mlp": ((2,), 2)}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    search: SearchConfig
    dataset: str
    net: str
    energy_table: str | None
    out: str

    def to_dict(self) -> dict[str, Any]:
        d = self.search.to_dict()
        d.update(dataset=self.dataset, net=self.net, energy_table=self.energy_table, out=self.out)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        allowed = SearchConfig.keys() | set(RUN_KEYS)
        for key in d:
            if key not in allowed:
                raise ConfigError(f"unknown config key {key!r}")
        merged = {**RUN_KEYS, **SearchConfig().to_dict(), **d}
        run = {k: merged.pop(k) for k in RUN_KEYS}
        try:
            cfg = SearchConfig.from_dict(merged)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return cls(cfg, **run)


# ---------------------------------------------------------------- arguments

# flag -> config key; argparse defaults are None so unset flags never override the file
_FLAG_KEYS = {
    "strategy": "strategy",
    "mode": "mode",
    "lam": "lambda",
    "gamma": "gamma",
    "cim_budget": "cim_budget",
    "samples": "samples",
    "epochs": "epochs",
    "relearn_epochs": "relearn_epochs",
    "seed": "seed",
    "lr_theta": "lr_theta",
    "lr_alpha": "lr_alpha",
    "batch_size": "batch_size",
    "reinit": "reinit",
    "dataset": "dataset",
    "net": "net",
    "energy_table": "energy_table",
    "out": "out",
}


def _run_flags(p: argparse.ArgumentParser, with_lambda: bool = True) -> None:
    p.add_argument("--config", help="JSON file with flat config keys (flags override it)")
    p.add_argument("--strategy", choices=["single", "bilevel", "sequential", "variational"])
    p.add_argument("--mode", choices=["digital", "hybrid"])
    if with_lambda:
        p.add_argument("--lambda", dest="lam", type=float, help="energy regularization weight")
    p.add_argument("--gamma", type=float, help="CiM budget penalty weight (hybrid)")
    p.add_argument("--cim-budget", help="CiM budget in weight-bits, or a percentage like 25%%")
    p.add_argument("--samples", type=int, help="variational population size")
    p.add_argument("--epochs", type=int)
    p.add_argument("--relearn-epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr-theta", type=float)
    p.add_argument("--lr-alpha", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--reinit", action="store_const", const=True, help="re-initialize weights before relearning")
    p.add_argument("--dataset", help="synthetic:blobs, synthetic:rings, builtin:digits, idx:<path>, csv:<path>")
    p.add_argument("--net", help=f"preset ({', '.join(PRESETS)}) or a network JSON file")
    p.add_argument("--energy-table", help="CSV overriding the default energy table")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="opsearch", description="Energy-aware per-layer operator search.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="run one search and write a run directory")
    _run_flags(p)

    p = sub.add_parser("pareto", help="sweep lambda and write pareto.csv and pareto.svg")
    _run_flags(p, with_lambda=False)
    p.add_argument("--lambdas", required=True, help="comma-separated lambda values, at least two")

    p = sub.add_parser("energy", help="energy report for an assignment")
    p.add_argument("--net", default="mini-cnn", help="preset or network JSON file")
    p.add_argument("--input-shape", help="comma-separated sample shape for presets (e.g. 1,8,8)")
    p.add_argument("--classes", type=int)
    p.add_argument("--assignment", required=True, help="comma-joined tokens (T,MF,B,T-CiM,...) or an assignment file")
    p.add_argument("--versus", help="second assignment; prints energy(assignment)/energy(versus)")
    p.add_argument("--cim-budget", help="budget in bits or percent for the feasibility line")
    p.add_argument("--energy-table")
    p.add_argument("--json", action="store_true", help="print the report as JSON")

    p = sub.add_parser("eval", help="re-evaluate a run directory")
    p.add_argument("run", help="run directory written by `search`")
    p.add_argument("--split", choices=["train", "val", "test"], default="test")

    sub.add_parser("dump-defaults", help="print the default energy table and config")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values: dict[str, Any] = {}
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {args.config} must hold a JSON object")
        values.update(loaded)
    for attr, key in _FLAG_KEYS.items():
        v = getattr(args, attr, None)
        if v is not None:
            values[key] = v
    return RunConfig.from_dict(values)


# ---------------------------------------------------------------- helpers


def _load_table(path: str | None) -> EnergyTable:
    return EnergyTable.load(path) if path else EnergyTable.default()


def parse_assignment(text: str) -> list[str]:
    """Tokens from ``T,MF,B`` or from an assignment file (``layer,choice`` rows)."""
    path = Path(text)
    if text and path.is_file():
        rows = list(csv.reader(io.StringIO(path.read_text())))
        if rows and rows[0] == ["layer", "choice"]:
            return [r[1] for r in rows[1:] if r]
        return [t for r in rows for t in r if t.strip()]
    return [t.strip() for t in text.split(",")] if text.strip() else []


def _dump(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_run_dir(out: Path, rc: RunConfig, spec: NetworkSpec, outcome: SearchOutcome) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(_dump(rc.to_dict()))
    (out / "netspec.json").write_text(spec.to_json())
    with open(out / "metrics.jsonl", "w") as fh:
        for rec in outcome.history:
            fh.write(json.dumps(_jsonable(rec), sort_keys=True) + "\n")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "choice"])
    w.writerows(zip(outcome.layer_names, outcome.labels))
    (out / "assignment.csv").write_text(buf.getvalue())
    (out / "energy_report.json").write_text(_dump(outcome.energy.to_dict()))
    (out / "outcome.json").write_text(_dump(_jsonable(outcome.summary())))
    np.savez(out / "weights.npz", **outcome.state)
    if outcome.population:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(outcome.population[0]), lineterminator="\n")
        w.writeheader()
        for row in outcome.population:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        (out / "population.csv").write_text(buf.getvalue())


def _prepare(rc: RunConfig):
    try:
        table = _load_table(rc.energy_table)
        data = load_dataset(rc.dataset, seed=rc.search.seed)
        spec = resolve_network(rc.net, data.sample_shape, data.classes)
        if rc.search.cim_budget is not None:
            parse_budget(rc.search.cim_budget, spec.weight_counts(), table)
    except (OSError, ValueError, KeyError, DatasetError) as exc:
        raise ConfigError(str(exc)) from None
    return table, data, spec


# ---------------------------------------------------------------- commands


def cmd_search(args: argparse.Namespace) -> int:
    rc = resolve_config(args)
    table, data, spec = _prepare(rc)
    out = Path(rc.out)
    outcome = search(spec, data, rc.search, table)
    write_run_dir(out, rc, spec, outcome)
    print(outcome.energy.format())
    print(f"test_acc: {outcome.metrics['test_acc']!r}")
    print(f"test_acc_quant: {outcome.metrics['test_acc_quant']!r}")
    print(f"run directory: {out}")
    if not outcome.feasible:
        print("no candidate satisfies the CiM budget; reporting the best infeasible one", file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


def _fmt(v: float) -> str:
    return repr(float(v))


def cmd_pareto(args: argparse.Namespace) -> int:
    try:
        lambdas = sorted(float(t) for t in args.lambdas.split(","))
    except ValueError:
        raise ConfigError(f"--lambdas must be comma-separated numbers, got {args.lambdas!r}") from None
    if len(lambdas) < 2:
        raise ConfigError("--lambdas needs at least two values")
    rc = resolve_config(args)
    table, data, spec = _prepare(rc)
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, failed = [], False
    for lam in lambdas:
        cfg = SearchConfig.from_dict({**rc.search.to_dict(), "lambda": lam})
        sub = RunConfig(cfg, rc.dataset, rc.net, rc.energy_table, str(out / f"lambda_{lam!r}"))
        try:
            outcome = search(spec, data, cfg, table)
        except Exception as exc:  # one failed point must not lose the others
            log.error("lambda=%r failed: %s", lam, exc)
            rows.append([_fmt(lam), cfg.strategy, "", "", "", "", "", f"error: {exc}"])
            failed = True
            continue
        write_run_dir(Path(sub.out), sub, spec, outcome)
        e = outcome.energy
        status = "ok" if outcome.feasible else "infeasible"
        rows.append([_fmt(lam), cfg.strategy, _fmt(outcome.accuracy), _fmt(e.total_fj), _fmt(e.normalized),
                     str(e.cim_bits), ",".join(outcome.labels), status])
        print(f"lambda={lam!r} accuracy={outcome.accuracy:.4f} energy_norm={e.normalized:.4f}")
    header = PARETO_HEADER + (["status"] if failed else [])
    with open(out / "pareto.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(r if failed else r[:-1])
    ok = [r for r in rows if r[2]]
    (out / "pareto.svg").write_text(
        scatter_svg([float(r[4]) for r in ok], [float(r[2]) for r in ok],
                    labels=[f"λ={float(r[0]):g}" for r in ok], title=f"{rc.search.strategy} search on {rc.dataset}")
    )
    print(f"wrote {out / 'pareto.csv'} and {out / 'pareto.svg'}")
    return EXIT_RUN if failed else EXIT_OK


def _energy_spec(args: argparse.Namespace) -> NetworkSpec:
    if args.net in PRESETS:
        shape, classes = PRESET_SHAPES[args.net]
        if args.input_shape:
            shape = tuple(int(t) for t in args.input_shape.split(","))
        return PRESETS[args.net](shape, args.classes or classes)
    return NetworkSpec.load(args.net)


def energy_report(spec: NetworkSpec, tokens: Sequence[str], table: EnergyTable, budget=None) -> EnergyReport:
    choices = [table.resolve(t) for t in tokens]
    n_ws = spec.weight_counts()
    bits = parse_budget(budget, n_ws, table) if budget is not None else None
    return assignment_energy(choices, spec.mac_counts(), table, n_ws, bits, spec.searchable_names)


def cmd_energy(args: argparse.Namespace) -> int:
    try:
        table = _load_table(args.energy_table)
        spec = _energy_spec(args)
        report = energy_report(spec, parse_assignment(args.assignment), table, args.cim_budget)
        other = energy_report(spec, parse_assignment(args.versus), table) if args.versus else None
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from None
    if args.json:
        print(_dump(report.to_dict()), end="")
    else:
        print(report.format())
    if other is not None:
        ratio = report.total_fj / other.total_fj if other.total_fj > 0 else float("inf")
        print(f"ratio: {ratio!r}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    run = Path(args.run)
    try:
        rc = RunConfig.from_dict(json.loads((run / "config.json").read_text()))
        table = _load_table(rc.energy_table)
        spec = NetworkSpec.load(run / "netspec.json")
        data = load_dataset(rc.dataset, seed=rc.search.seed)
        tokens = parse_assignment(str(run / "assignment.csv"))
        with np.load(run / "weights.npz") as z:
            state = {k: z[k] for k in z.files}
    except (OSError, ValueError, KeyError, DatasetError) as exc:
        raise ConfigError(str(exc)) from None
    net = build_network(spec, rc.search.mode, table, seed=0, steepness=rc.search.steepness)
    net.load_state(state)
    assignment = [m.choice_index(t) for m, t in zip(net.layers, tokens)]
    x, y = data.split(args.split)
    f = evaluate(net, x, y, assignment=assignment, batch_size=rc.search.eval_batch)
    q = evaluate(net, x, y, assignment=assignment, quantized=True, batch_size=rc.search.eval_batch)
    print(f"{args.split}_acc: {f.accuracy!r}")
    print(f"{args.split}_loss: {f.loss!r}")
    print(f"{args.split}_acc_quant: {q.accuracy!r}")
    print(f"{args.split}_loss_quant: {q.loss!r}")
    return EXIT_OK


def cmd_dump_defaults(args: argparse.Namespace) -> int:
    print(EnergyTable.default().to_csv(), end="")
    print()
    d = {**SearchConfig().to_dict(), **RUN_KEYS}
    print(_dump(d), end="")
    return EXIT_OK


COMMANDS = {
    "search": cmd_search,
    "pareto": cmd_pareto,
    "energy": cmd_energy,
    "eval": cmd_eval,
    "dump-defaults": cmd_dump_defaults,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; usage errors are config errors here
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        return EXIT_RUN
    except Exception as exc:
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
