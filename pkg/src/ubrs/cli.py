"""Command-line entry point: ``ubrs <command> ...``.

Each command writes its data files plus a ``manifest.json`` describing how they
were produced.  Data files carry no timestamps, so rerunning a manifest must
reproduce them byte for byte.  Failures print one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Sequence

from . import __version__
from .model import ModelError, dump_model, load_model
from .poly import PolynomialSyntaxError
from .relax import Certificate, RelaxError, RelaxOptions, Variant, build, sample_levelset, solve_relaxation
from .sdp import SolverOptions, export_sdpa, to_standard_form
from .sim import Direction, SimOptions, SimulationError, check_containment, execute, monte_carlo
from .sos import SosError, check_certificate

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MODEL = 3
EXIT_SOLVER = 4
EXIT_VALIDATION = 5

MANIFEST = "manifest.json"


class CliFailure(Exception):
    def __init__(self, code: int, kind: str, message: str, **extra):
        super().__init__(message)
        self.code = code
        self.kind = kind
        self.extra = extra


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliFailure(EXIT_USAGE, "usage", message)


@dataclass
class _Outcome:
    summary: dict[str, Any]
    outputs: dict[str, Path]  # label -> written file
    code: int = EXIT_OK


# -- helpers -----------------------------------------------------------------

def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="\n")
    return path


def _load_model(path: str):
    try:
        model = load_model(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliFailure(EXIT_USAGE, "io", f"cannot read model {path}: {exc.strerror}") from None
    except (ModelError, PolynomialSyntaxError) as exc:
        raise CliFailure(EXIT_MODEL, "model", str(exc)) from None
    return model


def _model_hash(model) -> str:
    return _sha256(dump_model(model).encode())


def _load_certificate(path: str) -> Certificate:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliFailure(EXIT_USAGE, "io", f"cannot read certificate {path}: {exc.strerror}") from None
    try:
        return Certificate.loads(text)
    except (RelaxError, PolynomialSyntaxError) as exc:
        raise CliFailure(EXIT_MODEL, "certificate", str(exc)) from None


def _relax_options(args) -> RelaxOptions:
    try:
        return RelaxOptions(args.degree, args.variant, args.alpha)
    except (RelaxError, ValueError) as exc:
        raise CliFailure(EXIT_USAGE, "usage", str(exc)) from None


def _solver_options(args) -> SolverOptions:
    return SolverOptions(tolerance=args.tolerance, max_iters=args.max_iters)


def _build(model, opts: RelaxOptions):
    try:
        return build(model, opts)
    except RelaxError as exc:
        raise CliFailure(EXIT_USAGE, "usage", str(exc)) from None
    except SosError as exc:
        raise CliFailure(EXIT_MODEL, "model", str(exc)) from None


def _grid(text: str) -> int | list[int]:
    parts = [int(p) for p in str(text).split(",") if p.strip()]
    if not parts or min(parts) < 1:
        raise CliFailure(EXIT_USAGE, "usage", f"bad grid size {text!r}")
    return parts[0] if len(parts) == 1 else parts


def _floats(text: str, what: str) -> list[float]:
    try:
        return [float(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise CliFailure(EXIT_USAGE, "usage", f"bad {what} {text!r}") from None


# -- commands ----------------------------------------------------------------

def cmd_solve(args) -> _Outcome:
    model = _load_model(args.model)
    opts = _relax_options(args)
    try:
        res = solve_relaxation(model, opts, _solver_options(args))
    except RelaxError as exc:
        raise CliFailure(EXIT_USAGE, "usage", str(exc)) from None
    except SosError as exc:
        raise CliFailure(EXIT_MODEL, "model", str(exc)) from None
    cert = res.certificate
    summary: dict[str, Any] = {"status": cert.status, "objective": cert.objective, "q": cert.q}
    if cert.variant == Variant.ALPHA and cert.modes:
        summary.update(tau1=cert.tau1, tau2=cert.tau2)
    if not cert.modes:
        raise CliFailure(EXIT_SOLVER, "solver", f"solver finished with status {cert.status}", status=cert.status)
    checks = check_certificate(res.relaxation.problem, res.solution, seed=args.seed)
    bad = [c.name for c in checks if not c.ok()]
    summary["certificate_check"] = "passed" if not bad else "failed"
    out = Path(args.out)
    written = {"certificate": _write(out / "certificate.json", cert.dumps())}
    # a SlowProgress solve is accepted when every block verifies
    if bad:
        summary["failed_blocks"] = bad
        return _Outcome(summary, written, EXIT_SOLVER)
    return _Outcome(summary, written)


def cmd_export_sdpa(args) -> _Outcome:
    model = _load_model(args.model)
    relax = _build(model, _relax_options(args))
    sf = to_standard_form(relax.problem)
    path = _write(Path(args.out), export_sdpa(sf))
    return _Outcome({"m": sf.m, "blocks": list(sf.block_sizes)}, {"sdpa": path})


def cmd_levelset(args) -> _Outcome:
    cert = _load_certificate(args.certificate)
    model = _load_model(args.model) if args.model else None
    try:
        grid = sample_levelset(cert, model, args.mode, _grid(args.grid))
    except (RelaxError, ModelError, KeyError) as exc:
        raise CliFailure(EXIT_USAGE, "usage", str(exc).strip("'\"")) from None
    path = _write(Path(args.out), grid.to_csv())
    counts = {lab: int(grid.column(lab).sum()) for lab in grid.labels}
    return _Outcome({"mode": args.mode, "points": len(grid.points), "counts": counts}, {"levelset": path})


def cmd_validate(args) -> _Outcome:
    model = _load_model(args.model)
    cert = _load_certificate(args.certificate)
    if cert.variant == Variant.ALPHA:
        raise CliFailure(EXIT_USAGE, "usage", "validation supports outer, free-time and inner certificates")
    direction = (Direction.INNER_MUST_BE_CONTAINED if cert.variant == Variant.INNER
                 else Direction.OUTER_MUST_CONTAIN)
    if sorted(cert.modes) != sorted(m.id for m in model.modes):
        raise CliFailure(EXIT_MODEL, "certificate", "certificate modes do not match the model")
    n = _grid(args.grid)
    out = Path(args.out)
    written: dict[str, Path] = {}
    verdicts = {}
    passed = True
    for m in model.modes:
        try:
            grid = sample_levelset(cert, model, m.id, n)
            rep = monte_carlo(model, m.id, n, args.trials, eps=args.eps, seed=args.seed,
                              any_time=cert.variant == Variant.FREE_TIME)
            verdict = check_containment(rep, grid, direction)
        except (RelaxError, SimulationError) as exc:
            raise CliFailure(EXIT_USAGE, "usage", str(exc)) from None
        written[f"mc_mode{m.id}"] = _write(out / f"mc_mode{m.id}.csv", rep.to_csv())
        written[f"levelset_mode{m.id}"] = _write(out / f"levelset_mode{m.id}.csv", grid.to_csv())
        verdicts[str(m.id)] = verdict.to_dict()
        passed &= verdict.passed
    doc = {"direction": direction.value, "passed": passed, "modes": verdicts}
    written["verdict"] = _write(out / "verdict.json", json.dumps(doc, indent=2) + "\n")
    summary = {"direction": direction.value, "passed": passed,
               "violations": sum(len(v["violations"]) for v in verdicts.values())}
    return _Outcome(summary, written, EXIT_OK if passed else EXIT_VALIDATION)


def cmd_simulate(args) -> _Outcome:
    model = _load_model(args.model)
    x0 = _floats(args.x0, "initial state")
    theta = tuple(_floats(args.theta, "parameter")) if args.theta else None
    try:
        opts = SimOptions(step=args.step, seed=args.seed, fixed_theta=theta)
        traj = execute(model, args.mode, x0, options=opts)
    except (SimulationError, KeyError, ModelError) as exc:
        raise CliFailure(EXIT_USAGE, "usage", str(exc).strip("'\"")) from None
    path = _write(Path(args.out), traj.to_csv())
    summary = {"terminal_time": traj.terminal_time, "terminal_mode": traj.terminal_mode,
               "terminal_state": [float(v) for v in traj.terminal_state], "reason": traj.reason.value,
               "events": len(traj.events)}
    return _Outcome(summary, {"trajectory": path})


def cmd_rerun(args) -> _Outcome:
    try:
        man = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
        command, recorded = man["command"], dict(man["args"])
    except OSError as exc:
        raise CliFailure(EXIT_USAGE, "io", f"cannot read manifest {args.manifest}: {exc.strerror}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise CliFailure(EXIT_USAGE, "usage", f"malformed manifest: {exc}") from None
    if command == "rerun" or command not in _COMMANDS:
        raise CliFailure(EXIT_USAGE, "usage", f"manifest records unknown command {command!r}")
    if "model" in recorded and man.get("model_sha256"):
        if _model_hash(_load_model(recorded["model"])) != man["model_sha256"]:
            raise CliFailure(EXIT_MODEL, "model", "model file changed since the manifest was written")
    recorded["out"] = _retarget(command, recorded["out"], args.out)
    replay = argparse.Namespace(**recorded)
    outcome = _COMMANDS[command][0](replay)
    _write_manifest(command, replay, outcome, time.perf_counter())
    expected = man.get("outputs", {})
    mismatched = sorted(k for k, p in outcome.outputs.items()
                        if expected.get(k) != _sha256(p.read_bytes()))
    outcome.summary = {"reproduced": not mismatched, "mismatched": mismatched, "replayed": outcome.summary}
    if mismatched:
        outcome.code = EXIT_VALIDATION
    return outcome


def _retarget(command: str, old_out: str, new_out: str) -> str:
    if _COMMANDS[command][1]:
        return new_out
    # file-valued outputs keep their file name inside the new directory
    return str(Path(new_out) / Path(old_out).name)


# -- manifests ---------------------------------------------------------------

def _manifest_path(command: str, out: str) -> Path:
    return Path(out) / MANIFEST if _COMMANDS[command][1] else Path(str(out) + "." + MANIFEST)


def _write_manifest(command: str, args, outcome: _Outcome, started: float) -> Path:
    recorded = {k: v for k, v in vars(args).items() if k not in ("func", "command", "verbose")}
    for key in ("model", "certificate"):
        if recorded.get(key):
            recorded[key] = str(Path(recorded[key]).resolve())
    man: dict[str, Any] = {"tool": "ubrs", "version": __version__, "command": command, "args": recorded}
    if recorded.get("model"):
        man["model_sha256"] = _model_hash(_load_model(recorded["model"]))
    for key in ("variant", "degree", "alpha", "seed"):
        if key in recorded:
            man[key] = recorded[key]
    if "tolerance" in recorded:
        man["solver_options"] = _solver_options(args).to_dict()
    for key in ("status", "objective"):
        if key in outcome.summary:
            man[key] = outcome.summary[key]
    man["outputs"] = {k: _sha256(p.read_bytes()) for k, p in sorted(outcome.outputs.items())}
    man["wall_time_s"] = round(time.perf_counter() - started, 3)
    man["created"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    return _write(_manifest_path(command, recorded["out"]), json.dumps(man, indent=2) + "\n")


# -- parser ------------------------------------------------------------------

# name -> (handler, output is a directory)
_COMMANDS: dict[str, tuple[Callable[[Any], _Outcome], bool]] = {
    "solve": (cmd_solve, True),
    "export-sdpa": (cmd_export_sdpa, False),
    "levelset": (cmd_levelset, False),
    "validate": (cmd_validate, True),
    "simulate": (cmd_simulate, False),
    "rerun": (cmd_rerun, True),
}


def _relax_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("model", help="hybrid model JSON")
    p.add_argument("--variant", default="outer", choices=[v.value for v in Variant])
    p.add_argument("--degree", type=int, default=8, help="relaxation degree (even)")
    p.add_argument("--alpha", type=float, default=None, help="confidence level for --variant alpha")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ubrs", description="Certified reachable-set estimates for uncertain hybrid systems.")
    parser.add_argument("--version", action="version", version=f"ubrs {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("solve", help="solve a relaxation and write a certificate")
    _relax_args(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--tolerance", type=float, default=SolverOptions.tolerance)
    p.add_argument("--max-iters", type=int, default=SolverOptions.max_iters)
    p.add_argument("--seed", type=int, default=0, help="seed for the certificate spot checks")

    p = sub.add_parser("export-sdpa", help="write the relaxation as an SDPA sparse file")
    _relax_args(p)
    p.add_argument("--out", required=True, help="output .dat-s file")

    p = sub.add_parser("levelset", help="sample a certificate's level sets on a grid")
    p.add_argument("certificate")
    p.add_argument("--model", default=None, help="model JSON (boxes are read from the certificate otherwise)")
    p.add_argument("--mode", type=int, default=1)
    p.add_argument("--grid", default="51", help="points per axis, e.g. 201 or 21,21")
    p.add_argument("--out", required=True, help="output CSV")

    p = sub.add_parser("validate", help="check a certificate against Monte Carlo simulation")
    p.add_argument("model")
    p.add_argument("certificate")
    p.add_argument("--grid", default="51")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("simulate", help="simulate one execution")
    p.add_argument("model")
    p.add_argument("--x0", required=True, help="comma-separated initial state")
    p.add_argument("--mode", type=int, default=1)
    p.add_argument("--theta", default=None, help="fix the parameter instead of sampling it")
    p.add_argument("--step", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output CSV")

    p = sub.add_parser("rerun", help="replay a manifest and compare outputs")
    p.add_argument("manifest")
    p.add_argument("--out", required=True, help="output directory for the replay")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except CliFailure as exc:
        return _fail(exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    started = time.perf_counter()
    handler, _ = _COMMANDS[args.command]
    try:
        outcome = handler(args)
        if args.command != "rerun":
            _write_manifest(args.command, args, outcome, started)
    except CliFailure as exc:
        return _fail(exc)
    except OSError as exc:
        return _fail(CliFailure(EXIT_USAGE, "io", f"{exc.strerror}: {exc.filename}"))
    json.dump({"command": args.command, **outcome.summary,
               "outputs": {k: str(p) for k, p in sorted(outcome.outputs.items())}}, sys.stdout)
    sys.stdout.write("\n")
    return outcome.code


def _fail(exc: CliFailure) -> int:
    json.dump({"error": exc.kind, "message": str(exc), "exit_code": exc.code, **exc.extra}, sys.stderr)
    sys.stderr.write("\n")
    return exc.code


if __name__ == "__main__":
    sys.exit(main())
