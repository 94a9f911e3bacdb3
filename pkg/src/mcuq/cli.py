"""Command-line entry point ``mcuq``.

Exit codes: 0 success, 2 numerical failure, 64 usage or input error.
Every command writes a JSON manifest next to its outputs; ``mcuq replay``
re-executes a manifest and checks the outputs are byte-identical.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, plotting
from .covmax import AllocationProblem, allocate, realized_coverage
from .csvio import CsvFormatError, read_table, sha256_file, write_table
from .estimator import DivergenceError, FitConfig, MaskedObservations, SingularGramError, fit
from .synthgen import HIST_EDGES, SimConfig, rng_stream, run_coverage_experiment, run_distribution_check
from .uq import (
    empirical_plugin_variance,
    fallback_halfwidth,
    intervals,
    normal_quantile,
    residual_variance_field,
)

log = logging.getLogger("mcuq")

EXIT_OK = 0
EXIT_NUMERIC = 2
EXIT_USAGE = 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _dump_json(path, obj) -> None:
    Path(path).write_bytes((json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n").encode("utf-8"))


def _finite_or_none(x):
    return float(x) if np.isfinite(x) else None


class _Run:
    """Collects inputs, outputs and timings for the manifest."""

    def __init__(self, command: str, argv: list[str]):
        self.command = command
        self.argv = list(argv)
        self.inputs: dict[str, str] = {}
        self.outputs: list[Path] = []
        self.timings: dict[str, float] = {}
        self.config: dict = {}
        self._t0 = time.perf_counter()

    def input(self, path):
        self.inputs[str(path)] = sha256_file(path)

    def output(self, path):
        self.outputs.append(Path(path))

    def tick(self, label):
        now = time.perf_counter()
        self.timings[label] = round(now - self._t0, 6)

    def write_manifest(self, path):
        self.tick("total")
        _dump_json(path, {
            "command": self.command,
            "argv": self.argv,
            "cwd": os.getcwd(),
            "config": self.config,
            "seed": self.config.get("seed"),
            "version": __version__,
            "inputs": self.inputs,
            "outputs": {str(p): sha256_file(p) for p in self.outputs},
            "timings": self.timings,
        })


# ---------------------------------------------------------------- helpers


def _load_obs(path, rows=None, cols=None, p=None) -> MaskedObservations:
    t = read_table(path, ("i", "j", "value"))
    if t["i"].size == 0:
        raise UsageError(f"{path}: no observations")
    m = int(t["i"].max()) + 1 if rows is None else rows
    n = int(t["j"].max()) + 1 if cols is None else cols
    try:
        return MaskedObservations.from_entries(m, n, t["i"], t["j"], t["value"], p)
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None


def _fit_config(a) -> FitConfig:
    eta = "auto" if a.eta in (None, "auto") else float(a.eta)
    try:
        return FitConfig(r=a.rank, lam=a.lam, eta=eta, max_iters=a.max_iters, grad_tol=a.grad_tol, seed=a.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _fit(obs, cfg):
    if not 1 <= cfg.r <= min(obs.m, obs.n):
        raise UsageError(f"rank {cfg.r} infeasible for a {obs.m}x{obs.n} matrix")
    return fit(obs, cfg)


def _grid_columns(shape):
    m, n = shape
    return np.repeat(np.arange(m), n), np.tile(np.arange(n), m)


def _load_sim_config(path) -> SimConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"{path}: {exc}") from None
    if not isinstance(raw, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    try:
        return SimConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{path}: {exc}") from None


def _manifest_path(out: Path) -> Path:
    return out.with_name(out.stem + ".manifest.json")


# ---------------------------------------------------------------- commands


def cmd_complete(a, run: _Run) -> int:
    cfg = _fit_config(a)
    obs = _load_obs(a.input, a.rows, a.cols, a.p)
    run.input(a.input)
    run.config = {**cfg.__dict__, "p": obs.p, "p_estimated": obs.p_estimated, "shape": [obs.m, obs.n]}
    est = _fit(obs, cfg)
    run.tick("fit")
    out = Path(a.output)
    i, j = _grid_columns(est.Md.shape)
    write_table(out, ("i", "j", "value"), (i, j, est.Md.ravel()))
    run.output(out)
    run.config.update(lam_used=est.lam_used, iters_used=est.iters_used)
    run.write_manifest(_manifest_path(out))
    print(f"wrote {out} ({est.Md.shape[0]}x{est.Md.shape[1]}, {est.iters_used} iterations)")
    return EXIT_OK


def cmd_intervals(a, run: _Run) -> int:
    cfg = _fit_config(a)
    obs = _load_obs(a.input, a.rows, a.cols, a.p)
    run.input(a.input)
    run.config = {**cfg.__dict__, "p": obs.p, "model": a.model, "level": a.level}
    if not 0.0 < a.level < 1.0:
        raise UsageError("--level must lie in (0, 1)")
    est = _fit(obs, cfg)
    run.tick("fit")
    if a.model == "residual":
        var = residual_variance_field(obs, est)
    else:
        var = empirical_plugin_variance(est, a.model, obs.p, obs)
    if a.model == "binary" and var.n_clamped > 0.1 * est.Md.size:
        print(f"warning: {var.n_clamped} of {est.Md.size} entries of M^d were clamped into [0, 1]",
              file=sys.stderr)
    iv = intervals(est.Md, var, a.level, fallback=fallback_halfwidth(obs, est))
    if a.entries:
        t = read_table(a.entries, ("i", "j"))
        run.input(a.entries)
        i, j = t["i"], t["j"]
        if i.size and (i.max() >= obs.m or j.max() >= obs.n):
            raise UsageError(f"{a.entries}: entry outside the {obs.m}x{obs.n} grid")
    else:
        i, j = _grid_columns(est.Md.shape)
    out = Path(a.output)
    write_table(out, ("i", "j", "md", "s", "lo", "hi"),
                (i, j, est.Md[i, j], var.s[i, j], iv.lo[i, j], iv.hi[i, j]))
    run.output(out)
    run.config.update(lam_used=est.lam_used, n_clamped=var.n_clamped, n_fallback=iv.n_fallback)
    run.write_manifest(_manifest_path(out))
    print(f"wrote {out} ({i.size} intervals, model={a.model}, level={a.level:g})")
    return EXIT_OK


def cmd_simulate(a, run: _Run) -> int:
    cfg = _load_sim_config(a.config)
    run.input(a.config)
    run.config = cfg.to_dict()
    outdir = Path(a.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rep = run_coverage_experiment(cfg, entry=tuple(a.entry), threads=a.threads)
    run.tick("trials")
    report = outdir / "report.json"
    _dump_json(report, rep.to_dict())
    zfile = outdir / "z.csv"
    write_table(zfile, ("trial", "i", "j", "z"),
                (rep.trials_run[: len(rep.z)], [a.entry[0]] * len(rep.z), [a.entry[1]] * len(rep.z), rep.z))
    for p in (report, zfile):
        run.output(p)
    if not a.no_plot:
        fig = outdir / "coverage.png"
        plotting.coverage_by_trial(rep.coverage, fig, cfg.level,
                                   title=f"r={cfg.r}, p={cfg.p:g}, mean={cfg.mean_target}")
        run.output(fig)
    run.write_manifest(outdir / "simulate.manifest.json")
    flag = "" if rep.std_defined else " (std undefined: single trial)"
    print(f"mean coverage {rep.mean:.4f} +/- {rep.std:.4f} over {len(rep.coverage)} trials"
          f" ({len(rep.skipped)} skipped){flag}")
    return EXIT_OK if rep.coverage else EXIT_NUMERIC


def cmd_distcheck(a, run: _Run) -> int:
    cfg = _load_sim_config(a.config)
    run.input(a.config)
    run.config = cfg.to_dict()
    outdir = Path(a.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rep = run_distribution_check(cfg, entry=tuple(a.entry), threads=a.threads)
    run.tick("trials")
    counts = rep.histogram()
    hist = outdir / "hist.csv"
    write_table(hist, ("bin_left", "bin_right", "count"), (HIST_EDGES[:-1], HIST_EDGES[1:], counts))
    summary = outdir / "distcheck.json"
    _dump_json(summary, {
        "entry": list(rep.entry),
        "samples": len(rep.z),
        "ks": _finite_or_none(rep.ks),
        "excluded": rep.excluded,
        "trials_skipped": len(rep.skipped),
        "config": cfg.to_dict(),
    })
    run.output(hist)
    run.output(summary)
    if not a.no_plot:
        fig = outdir / "hist.png"
        plotting.zscore_histogram(HIST_EDGES, counts, fig, title=f"entry {tuple(rep.entry)}, {len(rep.z)} trials")
        run.output(fig)
    run.write_manifest(outdir / "distcheck.manifest.json")
    print(f"KS statistic {rep.ks:.4f} over {len(rep.z)} samples ({rep.excluded} excluded with degenerate s)")
    return EXIT_OK


def cmd_covmax(a, run: _Run) -> int:
    if a.budget < 0:
        raise UsageError("--budget must be nonnegative")
    t = read_table(a.input, ("i", "j", "md", "s"))
    run.input(a.input)
    run.config = {"budget": a.budget}
    try:
        prob = AllocationProblem(t["i"], t["j"], t["md"], t["s"], a.budget)
    except ValueError as exc:
        raise UsageError(f"{a.input}: {exc}") from None
    alloc = allocate(prob)
    out = Path(a.output)
    write_table(out, ("i", "j", "a", "b"), (alloc.rows, alloc.cols, alloc.a, alloc.b))
    result = {
        "expected_coverage": alloc.expected_coverage,
        "multiplier": _finite_or_none(alloc.multiplier),
        "total_length": alloc.total_length,
        "budget": a.budget,
        "degenerate_entries": alloc.n_degenerate,
    }
    if a.truth:
        tt = read_table(a.truth, ("i", "j", "value"))
        run.input(a.truth)
        lookup = dict(zip(zip(tt["i"].tolist(), tt["j"].tolist()), tt["value"].tolist()))
        missing = [(i, j) for i, j in zip(alloc.rows.tolist(), alloc.cols.tolist()) if (i, j) not in lookup]
        if missing:
            raise UsageError(f"{a.truth}: missing truth for {len(missing)} entries, first {missing[0]}")
        vals = np.array([lookup[(i, j)] for i, j in zip(alloc.rows.tolist(), alloc.cols.tolist())])
        result["realized_coverage"] = realized_coverage(alloc, vals)
    js = out.with_suffix(".json")
    _dump_json(js, result)
    run.output(out)
    run.output(js)
    run.write_manifest(_manifest_path(out))
    line = f"expected coverage {alloc.expected_coverage:.4f}"
    if "realized_coverage" in result:
        line += f", realized {result['realized_coverage']:.4f}"
    print(line)
    return EXIT_OK


def cmd_compare(a, run: _Run) -> int:
    """Hold-out comparison of Gaussian and Poisson plug-in intervals across budgets."""
    full = _load_obs(a.input, a.rows, a.cols, 1.0)
    run.input(a.input)
    if not 0.0 < a.train_frac < 1.0:
        raise UsageError("--train-frac must lie in (0, 1)")
    cfg = _fit_config(a)
    run.config = {**cfg.__dict__, "train_frac": a.train_frac}
    rng = rng_stream(a.seed, 0)
    train = rng.random(full.size) < a.train_frac
    if not train.any() or train.all():
        raise UsageError("train/test split is empty; adjust --train-frac")
    obs = MaskedObservations.from_entries(full.m, full.n, full.rows[train], full.cols[train],
                                          full.values[train], a.train_frac)
    test_i, test_j = full.rows[~train], full.cols[~train]
    truth = full.values[~train]
    if a.truth:
        tt = read_table(a.truth, ("i", "j", "value"))
        run.input(a.truth)
        dense = np.full((full.m, full.n), np.nan)
        dense[tt["i"], tt["j"]] = tt["value"]
        truth = dense[test_i, test_j]
        if np.any(np.isnan(truth)):
            raise UsageError(f"{a.truth}: missing truth for held-out entries")
    est = _fit(obs, cfg)
    run.tick("fit")
    fields = {m: empirical_plugin_variance(est, m, obs.p, obs) for m in ("gaussian", "poisson")}
    centers = est.Md[test_i, test_j]
    if a.budgets:
        budgets = [float(b) for b in a.budgets.split(",")]
    else:
        scale = 2.0 * float(normal_quantile(0.975)) * float(np.mean(fields["gaussian"].s[test_i, test_j]))
        budgets = [scale * test_i.size * f for f in np.linspace(0.1, 1.5, 15)]
    rows, curves = [], {m: [] for m in fields}
    for b in budgets:
        for m, var in fields.items():
            alloc = allocate(AllocationProblem(test_i, test_j, centers, var.s[test_i, test_j], b))
            rc = realized_coverage(alloc, truth)
            rows.append((b, m, alloc.expected_coverage, rc))
            curves[m].append(rc)
    outdir = Path(a.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    csvp = outdir / "coverage_vs_budget.csv"
    write_table(csvp, ("budget", "model", "expected_coverage", "realized_coverage"), list(zip(*rows)))
    run.output(csvp)
    if not a.no_plot:
        fig = outdir / "coverage_vs_budget.png"
        plotting.coverage_vs_budget(budgets, curves, fig)
        run.output(fig)
    run.write_manifest(outdir / "compare.manifest.json")
    wins = sum(p >= g for p, g in zip(curves["poisson"], curves["gaussian"]))
    print(f"poisson >= gaussian realized coverage at {wins} of {len(budgets)} budgets")
    return EXIT_OK


def cmd_replay(a, run: _Run) -> int:
    try:
        manifest = json.loads(Path(a.manifest).read_text(encoding="utf-8"))
        argv = list(manifest["argv"])
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise UsageError(f"{a.manifest}: {exc}") from None
    if a.threads is not None and manifest["command"] in ("simulate", "distcheck"):
        argv = [x for k, x in enumerate(argv) if x != "--threads" and (k == 0 or argv[k - 1] != "--threads")]
        argv += ["--threads", str(a.threads)]
    cwd = os.getcwd()
    os.chdir(manifest.get("cwd", cwd))
    try:
        code = main(argv)
        if code != EXIT_OK:
            return code
        bad = [p for p, digest in manifest["outputs"].items() if sha256_file(p) != digest]
    finally:
        os.chdir(cwd)
    if bad:
        print(f"replay mismatch in {len(bad)} outputs: {', '.join(bad)}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"replay reproduced {len(manifest['outputs'])} outputs byte-for-byte")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _entry(text: str):
    try:
        i, j = (int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("entry must look like i,j") from None
    return (i, j)


def _add_fit_args(p):
    p.add_argument("input", help="CSV with header i,j,value (0-based indices)")
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--p", type=float, default=None, help="sampling rate (default: |entries|/(rows*cols))")
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--eta", default="auto")
    p.add_argument("--max-iters", type=int, default=2000)
    p.add_argument("--grad-tol", type=float, default=1e-7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rows", type=int, default=None)
    p.add_argument("--cols", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mcuq", description="De-biased matrix completion with entrywise confidence intervals.")
    parser.add_argument("--version", action="version", version=f"mcuq {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("complete", help="fit and write the completed matrix")
    _add_fit_args(p)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_complete)

    p = sub.add_parser("intervals", help="entrywise confidence intervals")
    _add_fit_args(p)
    p.add_argument("--model", choices=("gaussian", "poisson", "binary", "residual"), default="poisson")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--entries", default=None, help="CSV with header i,j (default: every entry)")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_intervals)

    for name, func, hlp in (("simulate", cmd_simulate, "Monte-Carlo coverage experiment"),
                            ("distcheck", cmd_distcheck, "z-score distribution of one entry")):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("--config", required=True, help="JSON object with SimConfig fields")
        p.add_argument("--entry", type=_entry, default=(0, 0), help="tracked entry i,j (0-based)")
        p.add_argument("--threads", type=int, default=None, help="worker threads (env MCUQ_THREADS overrides)")
        p.add_argument("-o", "--outdir", default=".")
        p.add_argument("--no-plot", action="store_true")
        p.set_defaults(func=func)

    p = sub.add_parser("covmax", help="budget-constrained interval allocation")
    p.add_argument("input", help="CSV with header i,j,md,s")
    p.add_argument("--budget", type=float, required=True)
    p.add_argument("--truth", default=None, help="CSV with header i,j,value")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_covmax)

    p = sub.add_parser("compare", help="hold-out Gaussian vs Poisson coverage across budgets")
    _add_fit_args(p)
    p.add_argument("--train-frac", type=float, default=0.6)
    p.add_argument("--budgets", default=None, help="comma-separated total budgets")
    p.add_argument("--truth", default=None, help="CSV with header i,j,value (default: held-out observations)")
    p.add_argument("-o", "--outdir", default=".")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("replay", help="re-run a manifest and verify identical outputs")
    p.add_argument("manifest")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    run = _Run(a.command, argv)
    try:
        return a.func(a, run)
    except (UsageError, CsvFormatError, FileNotFoundError) as exc:
        print(f"mcuq {a.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"mcuq {a.command}: numerical failure: {exc} (iteration {exc.iteration})", file=sys.stderr)
        return EXIT_NUMERIC
    except (SingularGramError, np.linalg.LinAlgError) as exc:
        print(f"mcuq {a.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
