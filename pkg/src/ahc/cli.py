"""Command-line front end.

    ahc run       --config exp.yaml [--out DIR] [--seed N] [--force]
    ahc sweep     --config exp.yaml [--axis NAME] [--values a,b,c] [--out DIR] [--force]
    ahc gradcheck
    ahc memcheck  [BANK_FILE] [--config exp.yaml]
    ahc dump      BANK_FILE

Exit codes: 0 success, 1 runtime or check failure, 2 usage or config error.

Config files are YAML with three optional top-level sections::

    experiment:          # any ExperimentConfig field; maml/weights nest
      num_tasks: 5
      budget_bytes: 102400
      maml: {inner_steps: 5}
    output:
      dir: runs/default
      format: text       # text | json | all
    sweep:
      axis: budget_bytes
      values: [10240, 51200, 102400]
      seeds: [0, 1, 2, 3, 4]
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import yaml

from . import compressor as cmp
from .compressor import MamlConfig
from .continual import losses
from .continual.training import ExperimentConfig, Report, run_experiment
from .memory import (METADATA_BYTES, BankFormatError, FeatureRecord, ImportanceWeights,
                     MemoryBank, deserialize, record_nbytes, serialize)
from .ndcore import finite_diff_grad, flatten, max_relative_error, unflatten

log = logging.getLogger("ahc")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
FORMATS = ("text", "json", "all")


class ConfigError(Exception):
    """Malformed or inconsistent configuration (exit code 2)."""


class UsageError(Exception):
    """Bad invocation, such as refusing to overwrite reports (exit code 2)."""


# -- configuration --------------------------------------------------------------

@dataclass
class SweepSpec:
    axis: str | None = None
    values: list[Any] = field(default_factory=list)
    seeds: list[int] | None = None


@dataclass
class CliConfig:
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    out_dir: Path = Path("runs/default")
    report_format: str = "text"
    sweep: SweepSpec = field(default_factory=SweepSpec)


_NESTED = {"maml": MamlConfig, "weights": ImportanceWeights}


def _key_lines(text: str) -> dict[tuple[str, ...], int]:
    """1-based line of every mapping key, addressed by its path."""
    lines: dict[tuple[str, ...], int] = {}

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                p = path + (str(k.value),)
                lines[p] = k.start_mark.line + 1
                walk(v, p)

    try:
        walk(yaml.compose(text), ())
    except yaml.YAMLError:
        pass
    return lines


def _coerce(value: Any, default: Any, where: str) -> Any:
    """Check ``value`` against the type of the field's default."""
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {value!r}")
    return value


def experiment_fields() -> dict[str, Any]:
    """Every settable experiment key (dotted for nested ones) with its default."""
    base = ExperimentConfig()
    out = {}
    for f in dataclasses.fields(ExperimentConfig):
        if f.name in _NESTED:
            for g in dataclasses.fields(_NESTED[f.name]):
                out[f"{f.name}.{g.name}"] = getattr(getattr(base, f.name), g.name)
        else:
            out[f.name] = getattr(base, f.name)
    return out


def _flatten_section(section: dict, lines, prefix=("experiment",)) -> dict[str, Any]:
    known = experiment_fields()
    flat = {}
    for k, v in section.items():
        name = str(k)
        path = prefix + (name,)
        if name in _NESTED:
            if not isinstance(v, dict):
                raise ConfigError(f"line {lines.get(path, '?')}: "
                                  f"'{'.'.join(path)}' must be a mapping")
            for sk, sv in v.items():
                dotted = f"{name}.{sk}"
                where = f"line {lines.get(path + (str(sk),), '?')}: '{'.'.join(path)}.{sk}'"
                if dotted not in known:
                    raise ConfigError(f"{where}: unknown key '{sk}'")
                flat[dotted] = _coerce(sv, known[dotted], where)
        else:
            where = f"line {lines.get(path, '?')}: '{'.'.join(path)}'"
            if name not in known:
                raise ConfigError(f"{where}: unknown key '{name}'")
            flat[name] = _coerce(v, known[name], where)
    return flat


def build_experiment(changes: dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig().replace(**changes)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def parse_config(text: str) -> CliConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}: " if mark is not None else ""
        raise ConfigError(f"{where}invalid YAML ({getattr(exc, 'problem', exc)})") from None
    data = {} if data is None else data
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping")
    lines = _key_lines(text)
    cfg = CliConfig()
    for k in data:
        if k not in ("experiment", "output", "sweep"):
            raise ConfigError(f"line {lines.get((str(k),), '?')}: unknown key '{k}'")

    exp = data.get("experiment") or {}
    if not isinstance(exp, dict):
        raise ConfigError("'experiment' must be a mapping")
    cfg.experiment = build_experiment(_flatten_section(exp, lines))

    out = data.get("output") or {}
    if not isinstance(out, dict):
        raise ConfigError("'output' must be a mapping")
    for k, v in out.items():
        where = f"line {lines.get(('output', str(k)), '?')}: 'output.{k}'"
        if k == "dir":
            cfg.out_dir = Path(_coerce(v, "", where))
        elif k == "format":
            if v not in FORMATS:
                raise ConfigError(f"{where}: format must be one of {', '.join(FORMATS)}")
            cfg.report_format = v
        else:
            raise ConfigError(f"{where}: unknown key '{k}'")

    sw = data.get("sweep") or {}
    if not isinstance(sw, dict):
        raise ConfigError("'sweep' must be a mapping")
    for k, v in sw.items():
        where = f"line {lines.get(('sweep', str(k)), '?')}: 'sweep.{k}'"
        if k == "axis":
            cfg.sweep.axis = _coerce(v, "", where)
        elif k == "values":
            if not isinstance(v, list):
                raise ConfigError(f"{where}: expected a list")
            cfg.sweep.values = v
        elif k == "seeds":
            if not isinstance(v, list) or not all(
                    isinstance(s, int) and not isinstance(s, bool) for s in v):
                raise ConfigError(f"{where}: expected a list of integers")
            cfg.sweep.seeds = v
        else:
            raise ConfigError(f"{where}: unknown key '{k}'")
    return cfg


def load_config(path: str | None) -> CliConfig:
    if path is None:
        return CliConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        return parse_config(text)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


# -- report output --------------------------------------------------------------

def report_files(fmt: str) -> list[str]:
    names = ["metrics.csv", "memory.csv", "bank.ahcm"]
    if fmt in ("text", "all"):
        names.append("report.txt")
    if fmt in ("json", "all"):
        names.append("report.json")
    return names


def _guard(paths: list[Path], force: bool) -> None:
    existing = [p for p in paths if p.exists()]
    if existing and not force:
        raise UsageError(f"refusing to overwrite {existing[0]} (pass --force)")


def write_report(report: Report, out: Path, fmt: str) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    written = []
    contents: dict[str, str | bytes] = {
        "metrics.csv": report.metrics_csv(),
        "memory.csv": report.memory_csv(),
        "bank.ahcm": serialize(report.final_bank) if report.final_bank else b"",
        "report.txt": report.to_text(),
        "report.json": report.to_json(),
    }
    for name in report_files(fmt):
        p = out / name
        data = contents[name]
        if isinstance(data, bytes):
            p.write_bytes(data)
        else:
            p.write_text(data)
        written.append(p)
    return written


# -- commands -------------------------------------------------------------------

def cmd_run(args) -> int:
    cfg = load_config(args.config)
    exp = cfg.experiment
    if args.seed is not None:
        exp = exp.replace(seed=args.seed)
    out = Path(args.out) if args.out else cfg.out_dir
    _guard([out / n for n in report_files(cfg.report_format)], args.force)
    report = run_experiment(exp)
    write_report(report, out, cfg.report_format)
    print(f"forgetting={report.forgetting:.6f} final_accuracy={report.final_accuracy:.6f} "
          f"max_memory_bytes={report.max_memory_bytes}")
    print(f"reports written to {out}")
    return EXIT_OK


def _value_tag(v: Any) -> str:
    return str(v).replace("/", "_").replace(" ", "")


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    axis = args.axis or cfg.sweep.axis
    if not axis:
        raise ConfigError("no sweep axis: set sweep.axis or pass --axis")
    known = experiment_fields()
    if axis not in known:
        raise ConfigError(f"unknown sweep axis '{axis}'")
    if args.values is not None:
        raw = [v for v in args.values.split(",") if v.strip()]
        values = [yaml.safe_load(v) for v in raw]
    else:
        values = list(cfg.sweep.values)
    if not values:
        raise ConfigError(f"sweep axis '{axis}' has no values")
    values = [_coerce(v, known[axis], f"sweep value for '{axis}'") for v in values]
    if args.seed is not None:
        seeds = [args.seed]
    else:
        seeds = cfg.sweep.seeds or [cfg.experiment.seed]
    runs = [(v, s, build_experiment({**_changes_of(cfg.experiment), axis: v, "seed": s}))
            for v in values for s in seeds]

    out = Path(args.out) if args.out else cfg.out_dir
    targets = [out / "sweep.csv"]
    for v, s, _ in runs:
        run_dir = out / f"{axis}={_value_tag(v)}" / f"seed{s}"
        targets += [run_dir / n for n in report_files(cfg.report_format)]
    _guard(targets, args.force)

    rows = []
    for v, s, exp in runs:
        report = run_experiment(exp)
        write_report(report, out / f"{axis}={_value_tag(v)}" / f"seed{s}", cfg.report_format)
        rows.append((v, s, report.forgetting, report.final_accuracy, report.max_memory_bytes))
        log.info("%s=%s seed=%d forgetting=%.4f", axis, v, s, report.forgetting)

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["axis", "value", "seed", "forgetting", "final_accuracy", "max_memory_bytes"])
    for v, s, f, a, m in rows:
        w.writerow([axis, v, s, repr(f), repr(a), m])
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(buf.getvalue())

    print(f"{axis:>20s} {'forgetting':>12s} {'final_acc':>10s}  (mean over {len(seeds)} seeds)")
    for v in values:
        sel = [r for r in rows if r[0] == v]
        print(f"{str(v):>20s} {np.mean([r[2] for r in sel]):12.6f} "
              f"{np.mean([r[3] for r in sel]):10.6f}")
    print(f"combined results in {out / 'sweep.csv'}")
    return EXIT_OK


def _changes_of(exp: ExperimentConfig) -> dict[str, Any]:
    """``exp`` expressed as dotted changes relative to the defaults."""
    out = {}
    for name in experiment_fields():
        head, _, tail = name.partition(".")
        out[name] = getattr(getattr(exp, head), tail) if tail else getattr(exp, name)
    return out


# -- gradcheck ------------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    error: float
    tol: float
    n_params: int

    @property
    def ok(self) -> bool:
        return bool(self.error <= self.tol)


def _fd_check(name, f, grad, params, tol, h=1e-5) -> CheckResult:
    fd = finite_diff_grad(lambda v: f(unflatten(v, params)), flatten(params), h=h)
    err = max_relative_error(flatten(grad), fd, floor=1e-7)
    return CheckResult(name, err, tol, fd.size)


def gradient_checks() -> list[CheckResult]:
    """Every analytic derivative in the package against finite differences."""
    rng = np.random.default_rng(0)
    results = []
    F = rng.normal(size=(12, 8))

    def instance(depth, seed):
        # nonzero biases keep every ReLU off its kink, where differences are meaningless
        p = cmp.init_params(8, 4, depth, hidden=6, seed=seed)
        return {k: v + 0.1 * rng.normal(size=v.shape) if k.endswith("bias") else v
                for k, v in p.items()}

    for depth in (1, 2):
        phi = instance(depth, 1)
        results.append(_fd_check(f"recon_grad[depth={depth}]",
                                 lambda p: cmp.recon_loss(p, F), cmp.recon_grad(phi, F),
                                 phi, 1e-4))

    phi = instance(1, 2)
    v = {k: rng.normal(size=a.shape) for k, a in phi.items()}
    hv = cmp.recon_hvp(phi, F, v)
    fd = finite_diff_grad(lambda t: float(flatten(cmp.recon_grad(unflatten(t, phi), F))
                                          @ flatten(v)), flatten(phi), h=1e-5)
    results.append(CheckResult("recon_hvp", max_relative_error(flatten(hv), fd, 1e-7),
                               1e-4, fd.size))

    split = cmp.split_support_query(rng.normal(size=(16, 8)), rho=0.3,
                                    rng=np.random.default_rng(3))
    mcfg = MamlConfig(inner_steps=3, inner_lr=0.05, second_order=True)
    results.append(_fd_check(
        "meta_gradient[second-order]",
        lambda p: cmp.recon_loss(cmp.maml_adapt(p, split.support, mcfg), split.query),
        cmp.meta_gradient(phi, split, mcfg), phi, 1e-3))

    clf = losses.ReplayClassifier(rng.normal(size=(3, 4)), rng.normal(size=3), [0, 1, 2])
    X, y = rng.normal(size=(10, 8)), rng.integers(0, 3, 10)
    fs = losses.estimate_fisher(phi, clf, X, y)
    theta = {k: a + 0.1 * rng.normal(size=a.shape) for k, a in fs.theta_star.items()}
    results.append(_fd_check("ewc_penalty", lambda p: losses.ewc_penalty(p, fs, 5000.0),
                             losses.ewc_penalty_and_grad(theta, fs, 5000.0)[1], theta, 1e-4))

    old = {k: a + 0.05 * rng.normal(size=a.shape) for k, a in phi.items()}
    results.append(_fd_check(
        "distill_loss", lambda p: losses.distill_loss_and_grad(p, old, X, 2.0)[0],
        losses.distill_loss_and_grad(phi, old, X, 2.0)[1], phi, 1e-4))

    return results


def cmd_gradcheck(args) -> int:
    results = gradient_checks()
    print(f"{'check':28s} {'params':>6s} {'max rel err':>12s} {'tol':>8s}")
    for r in results:
        print(f"{r.name:28s} {r.n_params:6d} {r.error:12.3e} {r.tol:8.0e}  "
              f"{'PASS' if r.ok else 'FAIL'}")
    failed = [r.name for r in results if not r.ok]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_FAIL
    print("all gradient checks passed")
    return EXIT_OK


# -- memory bank commands -------------------------------------------------------

def _bank_kwargs(exp: ExperimentConfig) -> dict[str, Any]:
    return dict(stm_capacity=exp.stm_capacity, ltm_capacity=exp.ltm_capacity,
                budget_bytes=exp.budget_bytes, weights=exp.weights)


def synthetic_bank(exp: ExperimentConfig, n_inserts: int | None = None,
                   seed: int = 0) -> MemoryBank:
    """Saturate a bank with random records through both stores."""
    bank = MemoryBank(code_dim=exp.code_dim, **_bank_kwargs(exp))
    rng = np.random.default_rng(seed)
    if n_inserts is None:
        n_inserts = exp.budget_bytes // record_nbytes(exp.code_dim) + 100
    for i in range(n_inserts):
        r = FeatureRecord(code=rng.normal(size=exp.code_dim), class_id=i % 50,
                          task_id=i % 5, uncertainty=rng.uniform(), difficulty=rng.uniform())
        if i % 3:
            bank.stm_insert(r)
        else:
            bank.ltm_insert(r)
        if i % 97 == 0:
            bank.consolidate()
    return bank


def _record_problems(records: list[FeatureRecord]) -> list[str]:
    out = []
    for i, r in enumerate(records):
        if not np.all(np.isfinite(r.code)):
            out.append(f"record {i}: non-finite code")
        if not 0.0 <= r.importance <= 1.0:
            out.append(f"record {i}: importance {r.importance} outside [0, 1]")
    return out


def memcheck(bank: MemoryBank, blob: bytes | None = None) -> tuple[list[str], list[str]]:
    """Return (report lines, failures) for a bank."""
    d = bank.code_dim
    size = record_nbytes(d)
    stm, ltm = bank.stm_records(), bank.ltm_records()
    lines = [
        f"record layout (d={d})",
        f"  code         {4 * d:6d} bytes",
        f"  metadata     {METADATA_BYTES:6d} bytes",
        f"  per record   {size:6d} bytes",
        "",
        f"{'store':8s} {'records':>8s} {'capacity':>9s} {'bytes':>10s}",
        f"{'stm':8s} {len(stm):8d} {bank.stm_capacity:9d} {len(stm) * size:10,d}",
        f"{'ltm':8s} {len(ltm):8d} {bank.ltm_capacity:9d} {len(ltm) * size:10,d}",
        f"{'total':8s} {len(bank):8d} {'':9s} {bank.memory_bytes():10,d}"
        f" / {bank.budget_bytes:,d} budget",
    ]
    failures = []
    if len(stm) > bank.stm_capacity:
        failures.append(f"record {bank.stm_capacity}: STM holds {len(stm)} records, "
                        f"capacity {bank.stm_capacity}")
    if len(ltm) > bank.ltm_capacity:
        failures.append(f"record {len(stm) + bank.ltm_capacity}: LTM holds {len(ltm)} "
                        f"records, capacity {bank.ltm_capacity}")
    if bank.memory_bytes() > bank.budget_bytes:
        first = bank.budget_bytes // size
        failures.append(f"record {first}: {bank.memory_bytes()} bytes exceed the budget "
                        f"of {bank.budget_bytes}")
    failures += _record_problems(stm + ltm)
    encoded = serialize(bank)
    if len(encoded) - 20 != len(bank) * size:
        failures.append("serialized size does not match per-record accounting")
    if blob is not None and encoded != blob:
        failures.append("re-serialization differs from the file")
    try:
        if deserialize(encoded, **_bank_kwargs_of(bank)) != bank:
            failures.append("serialization round-trip changed the bank")
    except BankFormatError as exc:
        failures.append(f"round-trip failed: {exc}")
    return lines, failures


def _bank_kwargs_of(bank: MemoryBank) -> dict[str, Any]:
    return dict(stm_capacity=bank.stm_capacity, ltm_capacity=bank.ltm_capacity,
                budget_bytes=bank.budget_bytes, weights=bank.weights)


def _read_bank(path: str, exp: ExperimentConfig) -> tuple[MemoryBank, bytes]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None
    return deserialize(blob, **_bank_kwargs(exp)), blob


def cmd_memcheck(args) -> int:
    exp = load_config(args.config).experiment
    if args.bank:
        try:
            bank, blob = _read_bank(args.bank, exp)
        except BankFormatError as exc:
            print(f"FAIL {args.bank}: {exc}")
            return EXIT_FAIL
        print(f"bank file {args.bank} ({len(blob)} bytes)")
    else:
        bank, blob = synthetic_bank(exp), None
        print("synthetic bank saturated with random inserts")
    lines, failures = memcheck(bank, blob)
    print("\n".join(lines))
    for f in failures:
        print(f"FAIL {f}")
    print("PASS" if not failures else f"{len(failures)} check(s) failed")
    return EXIT_FAIL if failures else EXIT_OK


def cmd_dump(args) -> int:
    exp = load_config(args.config).experiment
    try:
        bank, blob = _read_bank(args.bank, exp)
    except BankFormatError as exc:
        print(f"cannot read {args.bank}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(f"# {args.bank}: d={bank.code_dim} stm={len(bank.stm)} "
          f"ltm={len(bank.ltm_records())} bytes={bank.memory_bytes()}")
    print("store,index,class_id,task_id,importance,uncertainty,difficulty,age,bbox,code")
    for store, recs in (("stm", bank.stm_records()), ("ltm", bank.ltm_records())):
        for i, r in enumerate(recs):
            bbox = " ".join(f"{v:.6g}" for v in r.bbox)
            code = " ".join(f"{v:.6g}" for v in r.code)
            print(f"{store},{i},{r.class_id},{r.task_id},{r.importance:.6g},"
                  f"{r.uncertainty:.6g},{r.difficulty:.6g},{r.age},{bbox},{code}")
    return EXIT_OK


# -- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML experiment config")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    outputs = argparse.ArgumentParser(add_help=False)
    outputs.add_argument("--out", metavar="DIR", help="report directory (overrides config)")
    outputs.add_argument("--seed", type=int, help="override the experiment seed")
    outputs.add_argument("--force", action="store_true", help="overwrite existing reports")

    parser = argparse.ArgumentParser(prog="ahc", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common, outputs], help="train on a task stream"
                   ).set_defaults(func=cmd_run)
    sw = sub.add_parser("sweep", parents=[common, outputs], help="run one config per axis value")
    sw.add_argument("--axis", help="experiment key to vary (e.g. budget_bytes, maml.inner_steps)")
    sw.add_argument("--values", help="comma-separated axis values (overrides config)")
    sw.set_defaults(func=cmd_sweep)
    sub.add_parser("gradcheck", parents=[common], help="finite-difference oracle suite"
                   ).set_defaults(func=cmd_gradcheck)
    mc = sub.add_parser("memcheck", parents=[common], help="verify bank accounting")
    mc.add_argument("bank", nargs="?", help="bank file (default: a synthetic saturated bank)")
    mc.set_defaults(func=cmd_memcheck)
    dp = sub.add_parser("dump", parents=[common], help="print a bank file as text")
    dp.add_argument("bank")
    dp.set_defaults(func=cmd_dump)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler: Callable[[Any], int] = args.func
    try:
        return handler(args)
    except BrokenPipeError:
        # output piped into a pager or head that closed early
        sys.stdout = open(os.devnull, "w")
        return EXIT_OK
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failures map to exit 1
        log.debug("command failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    raise SystemExit(main())
