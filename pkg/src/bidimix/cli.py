"""Command-line front end.

Subcommands write their artifacts plus a ``manifest.json`` into ``--out``:

    bidimix ingest    --data D --schema S --out DIR
    bidimix fit       --data D --schema S --k1 2 --k2 2 --mode mnar --out DIR
    bidimix select    --data D --schema S --k1 1..3 --k2 1..2 --out DIR
    bidimix isni      --fit FITDIR --data D --schema S --out DIR
    bidimix scenario  --isni ISNIDIR --scenario 1 --B 1000 --range -3 3 --out DIR
    bidimix simulate  --spec SPEC.json --out DIR

Exit codes: 0 success, 2 usage, 3 data or pipeline error, 4 convergence
failure.  Errors are printed to stderr as JSON and saved as ``error.json``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd

from .data import DataError, Schema, ingest_summary, load_csv
from .em import DegenerateThetaError, FitConfig, FitResult, RankDeficientError, fit
from .inference import CovarianceEstimate, mass_table, sandwich_covariance, se_table
from .selection import grid_search
from .sensitivity import (IsniResult, SingularHessianError, isni_matrix, isni_summaries,
                          lambda_from_fit, scenario1, scenario2)
from .simulate import SimSpec, write_simulation

__all__ = ["main", "build_parser"]

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CONVERGENCE = 0, 2, 3, 4
FLOAT_FMT = "%.17g"
ISNI_COLUMNS = ["variable", "se", "isni_norm", "norm_over_se", "isni_min", "min_over_se",
                "isni_max", "max_over_se"]

logger = logging.getLogger("bidimix")


class PipelineError(Exception):
    """Missing, stale or mismatched upstream artifacts."""


class ConvergenceFailure(Exception):
    """The fit finished without meeting the convergence criterion."""


def _version() -> str:
    try:
        from importlib.metadata import version
        return version("artifact")
    except Exception:
        return "0+unknown"


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


def _write_csv(df: pd.DataFrame, path: Path) -> None:
    df.to_csv(path, index=False, float_format=FLOAT_FMT, na_rep="", lineterminator="\n")


def _k_range(text: str) -> list[int]:
    """Parse ``"3"``, ``"1..3"`` or ``"1,2,5"``."""
    try:
        if ".." in text:
            a, b = text.split("..")
            out = list(range(int(a), int(b) + 1))
        else:
            out = [int(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid component range {text!r}")
    if not out or min(out) < 1:
        raise argparse.ArgumentTypeError(f"invalid component range {text!r}")
    return out


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


class Run:
    """Collects inputs/outputs of one command and writes the manifest."""

    def __init__(self, command: str, out: Path, config: dict, seed=None):
        self.command, self.out, self.config, self.seed = command, out, config, seed
        self.inputs: dict = {}
        self.outputs: list[str] = []
        self.t0 = time.perf_counter()
        out.mkdir(parents=True, exist_ok=True)
        stale = out / "error.json"
        if stale.exists():
            stale.unlink()

    def add_input(self, name: str, path) -> str:
        digest = sha256(path)
        self.inputs[name] = {"path": str(path), "sha256": digest}
        return digest

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out / name

    def finish(self) -> dict:
        man = {
            "command": self.command,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": {n: sha256(self.out / n) for n in self.outputs},
            "seed": self.seed,
            "version": _version(),
            "wall_time_s": round(time.perf_counter() - self.t0, 3),
        }
        _dump_json(man, self.out / "manifest.json")
        return man


def load_manifest(directory, expected_command: str) -> dict:
    """Read an upstream manifest and verify its outputs are unchanged."""
    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise PipelineError(f"no manifest.json in {d}")
    man = json.loads(mpath.read_text())
    if man.get("command") != expected_command:
        raise PipelineError(f"{d} holds '{man.get('command')}' output, expected '{expected_command}'")
    for name, digest in man.get("outputs", {}).items():
        f = d / name
        if not f.exists():
            raise PipelineError(f"upstream artifact {f} is missing")
        if sha256(f) != digest:
            raise PipelineError(f"upstream artifact {f} does not match its manifest")
    return man


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _load(args, run: Run):
    schema = Schema.from_json(args.schema) if args.schema else Schema()
    run.add_input("data", args.data)
    if args.schema:
        run.add_input("schema", args.schema)
    return load_csv(args.data, schema)


def _config(args, mode=None, K1=1, K2=1) -> FitConfig:
    return FitConfig(K1=K1, K2=K2, mode=(mode or args.mode).upper(), n_starts=args.starts,
                     max_iter=args.max_iter, rel_tol=args.rel_tol, seed=args.seed,
                     include_mar_start=not args.no_mar_start, polish=not args.no_polish,
                     threads=args.threads)


def cmd_ingest(args) -> int:
    run = Run("ingest", Path(args.out), {"data": args.data, "schema": args.schema})
    ds = _load(args, run)
    summary = ingest_summary(ds)
    _dump_json(summary, run.path("summary.json"))
    run.finish()
    return EXIT_OK


def write_fit(run: Run, ds, res: FitResult, cov: CovarianceEstimate | None, config: FitConfig) -> None:
    d = res.to_dict()
    d["config"] = config.to_dict()
    d["x_names"], d["v_names"] = list(ds.x_names), list(ds.v_names)
    _dump_json(d, run.path("fit.json"))
    if cov is not None:
        _write_csv(se_table(ds, res, cov), run.path("se.csv"))
        _dump_json(cov.to_dict(), run.path("covariance.json"))
    _write_csv(mass_table(res.theta), run.path("masses.csv"))
    W = res.weights.W.reshape(ds.n, -1)
    cols = [f"w_{g + 1}_{l + 1}" for g in range(res.K1) for l in range(res.K2)]
    wdf = pd.DataFrame(W, columns=cols)
    wdf.insert(0, "id", [s.id for s in ds.subjects])
    _write_csv(wdf, run.path("weights.csv"))
    _write_csv(pd.DataFrame({"iteration": np.arange(len(res.loglik_trace)),
                             "loglik": res.loglik_trace}), run.path("trace.csv"))


def cmd_fit(args) -> int:
    cfg = _config(args, K1=args.k1, K2=args.k2)
    run = Run("fit", Path(args.out), {**cfg.to_dict(), "data": args.data, "schema": args.schema},
              seed=args.seed)
    ds = _load(args, run)
    res = fit(ds, cfg)
    cov = sandwich_covariance(ds, res)
    write_fit(run, ds, res, cov, cfg)
    run.finish()
    if not res.converged:
        raise ConvergenceFailure(f"EM did not converge within {cfg.max_iter} iterations "
                                 f"(outputs written to {args.out})")
    return EXIT_OK


def cmd_select(args) -> int:
    cfg = _config(args)
    run = Run("select", Path(args.out), {**cfg.to_dict(), "k1": args.k1, "k2": args.k2,
                                         "data": args.data, "schema": args.schema,
                                         "warm_start": args.warm_start}, seed=args.seed)
    ds = _load(args, run)
    tab = grid_search(ds, args.k1, args.k2, cfg, warm_start=args.warm_start)
    tab.to_csv(run.path("selection.csv"))
    _dump_json(tab.to_dict(), run.path("selection.json"))
    run.finish()
    if tab.best_by_bic is None:
        raise ConvergenceFailure("no grid cell converged")
    return EXIT_OK


def _fit_from_dir(d: Path) -> FitResult:
    return FitResult.from_dict(json.loads((d / "fit.json").read_text()))


def _check_same_data(man: dict, data_hash: str, what: str) -> None:
    up = man.get("inputs", {}).get("data", {}).get("sha256")
    if up != data_hash:
        raise PipelineError(f"{what} was produced from different data")


def cmd_isni(args) -> int:
    fdir = Path(args.fit)
    fman = load_manifest(fdir, "fit")
    run = Run("isni", Path(args.out), {"fit": args.fit, "data": args.data, "schema": args.schema,
                                       "profile": args.profile})
    ds = _load(args, run)
    _check_same_data(fman, run.inputs["data"]["sha256"], f"fit in {fdir}")
    run.add_input("fit", fdir / "fit.json")
    res = _fit_from_dir(fdir)
    if res.basis != "mar":
        raise PipelineError("ISNI requires a MAR fit (fit --mode mar)")
    cov = None
    if (fdir / "covariance.json").exists():
        cov = CovarianceEstimate.from_dict(json.loads((fdir / "covariance.json").read_text()))
    ir = isni_matrix(ds, res, cov=cov, profile=args.profile)
    _write_csv(isni_summaries(ir)[ISNI_COLUMNS], run.path("isni.csv"))
    mat = pd.DataFrame(ir.isni, columns=[f"lambda[{g + 1},{l + 1}]" for g, l in ir.lambda_cells])
    mat.insert(0, "variable", ir.names)
    _write_csv(mat, run.path("isni_matrix.csv"))
    d = ir.to_dict()
    d["data_sha256"] = run.inputs["data"]["sha256"]
    d["se_type"] = "sandwich"
    _dump_json(d, run.path("isni.json"))
    run.finish()
    return EXIT_OK


def cmd_scenario(args) -> int:
    idir = Path(args.isni)
    iman = load_manifest(idir, "isni")
    lo, hi = args.range
    run = Run("scenario", Path(args.out), {"isni": args.isni, "scenario": args.scenario,
                                           "B": args.B, "range": [lo, hi],
                                           "mnar_fit": args.mnar_fit}, seed=args.seed)
    run.add_input("isni", idir / "isni.json")
    ir = IsniResult.from_dict(json.loads((idir / "isni.json").read_text()))
    if args.scenario == 1:
        sr = scenario1(ir, args.B, lo, hi, args.seed)
    else:
        if not args.mnar_fit:
            raise PipelineError("scenario 2 requires --mnar-fit")
        mdir = Path(args.mnar_fit)
        mman = load_manifest(mdir, "fit")
        _check_same_data(mman, iman["inputs"]["data"]["sha256"], f"MNAR fit in {mdir}")
        run.add_input("mnar_fit", mdir / "fit.json")
        mfit = _fit_from_dir(mdir)
        if mfit.basis != "mnar":
            raise PipelineError("scenario 2 requires an MNAR fit (fit --mode mnar)")
        if (mfit.K1, mfit.K2) != (ir.theta.K1, ir.theta.K2):
            raise PipelineError("MNAR fit and ISNI refer to different (K1, K2)")
        sr = scenario2(ir, lambda_from_fit(mfit), args.B, lo, hi, args.seed)
    _write_csv(sr.draws_frame(), run.path("scenario.csv"))
    _dump_json(sr.coverage_dict(), run.path("coverage.json"))
    run.finish()
    return EXIT_OK


def cmd_simulate(args) -> int:
    spec = SimSpec.from_json(args.spec)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    if args.n is not None:
        spec = replace(spec, n=args.n)
    run = Run("simulate", Path(args.out), {"spec": args.spec, "n": spec.n, "T": spec.T},
              seed=spec.seed)
    run.add_input("spec", args.spec)
    write_simulation(spec, run.out)
    for name in ("data.csv", "schema.json", "truth.json"):
        run.path(name)
    run.finish()
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _fit_options(p: argparse.ArgumentParser, k_type) -> None:
    p.add_argument("--data", required=True, help="long-format CSV")
    p.add_argument("--schema", help="JSON column mapping")
    p.add_argument("--k1", type=k_type, default=k_type("1"))
    p.add_argument("--k2", type=k_type, default=k_type("1"))
    p.add_argument("--mode", choices=["mar", "mnar", "MAR", "MNAR"], default="mnar")
    p.add_argument("--starts", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iter", type=int, default=2000)
    p.add_argument("--rel-tol", type=float, default=1e-8)
    p.add_argument("--no-mar-start", action="store_true",
                   help="do not add the MAR solution as an MNAR start")
    p.add_argument("--no-polish", action="store_true", help="skip the final Newton steps")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bidimix", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a panel CSV and summarise attrition")
    p.add_argument("--data", required=True)
    p.add_argument("--schema")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("fit", help="fit one (K1, K2) model")
    _fit_options(p, int)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select", help="grid search over (K1, K2)")
    _fit_options(p, _k_range)
    p.add_argument("--warm-start", action="store_true")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("isni", help="sensitivity index at a stored MAR fit")
    p.add_argument("--fit", required=True, help="output directory of a MAR fit")
    p.add_argument("--data", required=True)
    p.add_argument("--schema")
    p.add_argument("--profile", action="store_true",
                   help="let dropout parameters and marginal masses respond as well")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_isni)

    p = sub.add_parser("scenario", help="perturbation scenarios from stored ISNI output")
    p.add_argument("--isni", required=True, help="output directory of the isni command")
    p.add_argument("--scenario", type=int, choices=[1, 2], required=True)
    p.add_argument("--B", type=int, default=1000)
    p.add_argument("--range", type=float, nargs=2, default=[-3.0, 3.0], metavar=("LO", "HI"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mnar-fit", help="output directory of an MNAR fit (scenario 2)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_scenario)

    p = sub.add_parser("simulate", help="generate a synthetic panel")
    p.add_argument("--spec", required=True, help="SimSpec JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)
    return ap


def _fail(out, code: int, exc: Exception) -> int:
    err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(err), file=sys.stderr)
    if out:
        try:
            d = Path(out)
            d.mkdir(parents=True, exist_ok=True)
            _dump_json(err, d / "error.json")
        except OSError:
            pass
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = getattr(args, "out", None)
    try:
        if args.command == "scenario" and not args.range[0] < args.range[1]:
            raise argparse.ArgumentTypeError("--range requires LO < HI")
        if getattr(args, "B", 1) < 1 or getattr(args, "starts", 1) < 1:
            raise argparse.ArgumentTypeError("counts must be positive")
        return args.func(args)
    except argparse.ArgumentTypeError as exc:
        return _fail(out, EXIT_USAGE, exc)
    except ConvergenceFailure as exc:
        return _fail(out, EXIT_CONVERGENCE, exc)
    except (DegenerateThetaError, SingularHessianError, FloatingPointError) as exc:
        return _fail(out, EXIT_CONVERGENCE, exc)
    except (DataError, RankDeficientError, PipelineError, FileNotFoundError,
            json.JSONDecodeError, KeyError, ValueError) as exc:
        return _fail(out, EXIT_DATA, exc)


if __name__ == "__main__":
    sys.exit(main())
