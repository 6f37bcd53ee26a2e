"""Command-line pipeline: weights, tune, estimate, simulate, timing, diagnose.

Configuration comes from flags and/or a TOML file (flags win).  All
randomness flows from the single --seed; identical config plus seed produces
byte-identical artifacts (JSON keys sorted, no timestamps).  Every run writes
a manifest.json embedding the fully resolved configuration and the library
version.

Exit codes: 1 configuration error, 2 data validation error, 3 numerical
failure (stage-labeled).
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import click
import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import __version__
from .balance import assemble_problem, build_indicators, imbalance_report
from .kernels import GramValidationError, KernelSpec, gram
from .msm import EstimateConfig, StageError, estimate_effect
from .panel import LongitudinalPanel, PanelValidationError, load_panel, standardize
from .qp import QpInfeasibleError
from .simulate import ReplicationStudy, methods_for, replicate, timing_study
from .tuner import TuningError, tune

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class CliError(click.ClickException):
    def __init__(self, message, code):
        super().__init__(message)
        self.exit_code = code


def _fail(code, message):
    raise CliError(message, code)


def _guard(fn, *args, **kwargs):
    """Run a pipeline step, mapping exceptions onto the exit-code contract."""
    try:
        return fn(*args, **kwargs)
    except PanelValidationError as err:
        _fail(EXIT_DATA, f"data validation: {err}")
    except StageError as err:
        _fail(EXIT_NUMERIC, str(err))
    except (GramValidationError, TuningError, QpInfeasibleError, np.linalg.LinAlgError) as err:
        _fail(EXIT_NUMERIC, f"numerical failure: {err}")
    except (ValueError, TypeError) as err:
        _fail(EXIT_CONFIG, f"configuration: {err}")
    except OSError as err:
        _fail(EXIT_CONFIG, f"i/o: {err}")


def _parse_schema(text):
    if not text:
        return None
    schema = {}
    for item in text.split(","):
        if "=" not in item:
            _fail(EXIT_CONFIG, f"bad --schema entry: {item!r} (expected key=value)")
        key, value = item.split("=", 1)
        key = key.strip()
        if key == "x":
            schema["confounders"] = value.split("+")
        elif key in ("unit", "time", "treat", "treatment", "censor", "outcome"):
            schema["treatment" if key == "treat" else key] = value
        else:
            _fail(EXIT_CONFIG, f"unknown schema key: {key!r}")
    return schema


def _load_config_file(path):
    if path is None:
        return {}
    try:
        with open(path, "rb") as handle:
            return tomllib.load(handle)
    except (OSError, tomllib.TOMLDecodeError) as err:
        _fail(EXIT_CONFIG, f"config file: {err}")


def _resolve(flags: dict, file_config: dict) -> dict:
    """Merge the config file and CLI flags; explicit flags win."""
    merged = dict(file_config.get("run", {}))
    merged.update({k: v for k, v in flags.items() if v is not None})
    kernel = dict(file_config.get("kernel", {}))
    if flags.get("kernel") is not None:
        text = flags["kernel"]
        if ":" in text:
            family, param = text.split(":", 1)
            kernel["confounder"] = family
            if family == "poly":
                kernel["degree"] = int(param)
            elif family == "gaussian":
                kernel["gamma"] = float(param)
            else:
                _fail(EXIT_CONFIG, f"kernel {family!r} takes no parameter")
        else:
            kernel["confounder"] = text
    for key in ("theta", "degree", "gamma", "lags"):
        if flags.get(key) is not None:
            kernel[key] = flags[key]
    merged["kernel"] = kernel
    if "schema" in file_config and "schema" not in merged:
        merged["schema"] = file_config["schema"]
    return merged


def _kernel_spec(config) -> KernelSpec:
    kernel = config.get("kernel", {})
    return KernelSpec(
        confounder=kernel.get("confounder", "poly"),
        degree=int(kernel.get("degree", 2)),
        theta=float(kernel.get("theta", 1.0)),
        gamma=float(kernel.get("gamma", 1.0)),
        lags=kernel.get("lags"),
    )


def _lam_value(config):
    lam = config.get("lam", "auto")
    if config.get("lambda_override") is not None:
        lam = config["lambda_override"]
    if isinstance(lam, str) and lam != "auto":
        try:
            lam = float(lam)
        except ValueError:
            _fail(EXIT_CONFIG, f"lambda must be a number or 'auto', got {lam!r}")
    return lam


def _read_panel(config) -> LongitudinalPanel:
    path = config.get("input")
    if not path:
        _fail(EXIT_CONFIG, "an input CSV is required (--input or config file)")
    schema = config.get("schema")
    if isinstance(schema, str):
        schema = _parse_schema(schema)
    return _guard(
        load_panel, path, schema=schema,
        repeated_outcomes=bool(config.get("repeated_outcomes", False)),
    )


def _out_dir(config) -> Path:
    out = Path(config.get("out", "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _json_default(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"not serializable: {type(value)}")


def _write_json(path: Path, payload: dict):
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, sort_keys=True, indent=2, default=_json_default)
        handle.write("\n")


def _manifest(out: Path, command: str, config: dict):
    clean = {k: v for k, v in config.items() if v is not None}
    _write_json(out / "manifest.json", {"command": command, "config": clean, "version": __version__})


def _write_weights_csv(path: Path, panel, weight_set):
    mask = weight_set.defined_mask()
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        if weight_set.per_period:
            writer.writerow(["unit", "time", "weight"])
            for i, unit in enumerate(panel.unit_ids):
                for t in range(panel.n_periods):
                    if mask[i, t]:
                        writer.writerow([unit, t + 1, repr(float(weight_set.values[i, t]))])
        else:
            writer.writerow(["unit", "weight"])
            for i, unit in enumerate(panel.unit_ids):
                if mask[i]:
                    writer.writerow([unit, repr(float(weight_set.values[i]))])


def _estimate_config(config) -> EstimateConfig:
    return _guard(
        EstimateConfig,
        method=config.get("method", "kow"),
        kernel=_kernel_spec(config),
        lam=_lam_value(config),
        feature_map=config.get("feature_map", "linear"),
        design=config.get("design", "cumulative"),
        censoring=config.get("censoring"),
        mean_one=bool(config.get("mean_one", False)),
        qp_tol=float(config.get("qp_tol", 1e-8)),
        qp_max_iter=config.get("qp_max_iter"),
    )


def common_options(fn):
    for option in reversed([
        click.option("--config", "config_path", type=click.Path(), default=None, help="TOML config file (flags win)."),
        click.option("--input", "input", type=click.Path(), default=None, help="Panel CSV."),
        click.option("--schema", default=None, help="Column remap, e.g. unit=id,treat=a,x=cd4+wbc."),
        click.option("--out", default=None, help="Output directory."),
        click.option("--kernel", default=None, help="Confounder kernel: linear, poly:D, gaussian:G."),
        click.option("--theta", type=float, default=None),
        click.option("--degree", type=int, default=None),
        click.option("--gamma", type=float, default=None),
        click.option("--lags", type=int, default=None),
        click.option("--lambda", "lam", default=None, help="Penalty value or 'auto'."),
        click.option("--lambda-override", "lambda_override", type=float, default=None,
                     help="Bypass tuning with a fixed penalty."),
        click.option("--censoring/--no-censoring", "censoring", default=None),
        click.option("--repeated-outcomes", "repeated_outcomes", is_flag=True, default=None),
        click.option("--mean-one", "mean_one", is_flag=True, default=None,
                     help="Constrain per-period weight means to one."),
        click.option("--qp-tol", type=float, default=None),
        click.option("--qp-max-iter", type=int, default=None),
        click.option("--seed", type=int, default=None),
        click.option("--dry-run", is_flag=True, default=False, help="Validate configuration only."),
    ]):
        fn = option(fn)
    return fn


@click.group()
@click.version_option(version=__version__, prog_name="kow")
def main():
    """Balancing weights and marginal structural models for longitudinal data."""


def _prepare(kwargs, command):
    dry_run = kwargs.pop("dry_run", False)
    config = _resolve(kwargs, _load_config_file(kwargs.pop("config_path", None)))
    config["command"] = command
    return config, dry_run


@main.command()
@common_options
@click.option("--method", type=click.Choice(["kow", "iptw", "siptw", "ols"]), default=None)
@click.option("--feature-map", "feature_map", type=click.Choice(["linear", "quadratic"]), default=None)
def weights(**kwargs):
    """Compute weights and write them as CSV."""
    config, dry_run = _prepare(kwargs, "weights")
    estimate_config = _estimate_config(config)
    if dry_run:
        click.echo("configuration ok")
        return
    panel = _read_panel(config)
    result = _guard(estimate_effect, panel, estimate_config)
    out = _out_dir(config)
    _write_weights_csv(out / "weights.csv", panel, result.weights)
    _manifest(out, "weights", config)
    click.echo(f"wrote {out / 'weights.csv'} ({result.weights.method})")


@main.command()
@common_options
def tune_cmd(**kwargs):
    """Tune kernel hyperparameters and the penalty by marginal likelihood."""
    config, dry_run = _prepare(kwargs, "tune")
    spec = _guard(_kernel_spec, config)
    if dry_run:
        click.echo("configuration ok")
        return
    panel = _read_panel(config)
    spanel, _ = _guard(standardize, panel)
    result = _guard(tune, spanel, spec)
    out = _out_dir(config)
    _write_json(out / "tune.json", result.to_dict())
    _manifest(out, "tune", config)
    click.echo(f"lambda = {result.lam:.6g}")


tune_cmd.name = "tune"
main.add_command(tune_cmd, name="tune")


@main.command()
@common_options
@click.option("--method", type=click.Choice(["kow", "iptw", "siptw", "ols"]), default=None)
@click.option("--feature-map", "feature_map", type=click.Choice(["linear", "quadratic"]), default=None)
@click.option("--design", type=click.Choice(["cumulative", "per-period"]), default=None)
def estimate(**kwargs):
    """Full pipeline: weights, MSM fit, balance diagnostics."""
    config, dry_run = _prepare(kwargs, "estimate")
    estimate_config = _estimate_config(config)
    if dry_run:
        click.echo("configuration ok")
        return
    panel = _read_panel(config)
    result = _guard(estimate_effect, panel, estimate_config)
    out = _out_dir(config)
    payload = result.fit.to_dict()
    payload["method"] = result.weights.method
    payload["lambda"] = result.lam
    payload["version"] = __version__
    _write_json(out / "fit.json", payload)
    _write_weights_csv(out / "weights.csv", panel, result.weights)
    _write_json(out / "balance.json", {
        "before": result.balance_before.to_dict(),
        "after": result.balance_after.to_dict(),
    })
    _manifest(out, "estimate", config)
    click.echo(result.fit.table())


@main.command()
@common_options
@click.option("--scenario", type=click.Choice(["linear", "nonlinear", "linear-censoring"]), default=None)
@click.option("--spec", "specification", type=click.Choice(["correct", "overspecified", "misspecified"]), default=None)
@click.option("--methods", default=None, help="Comma-separated method tags (overrides --spec).")
@click.option("--n", type=int, default=None)
@click.option("--n-grid", default=None, help="Comma-separated sample sizes.")
@click.option("--lambda-grid", "lambda_grid", default=None, help="Comma-separated penalties.")
@click.option("--reps", type=int, default=None)
@click.option("--jobs", type=int, default=None)
@click.option("--dump-reps", is_flag=True, default=False, help="Also write per-replication estimates.")
def simulate(dump_reps, **kwargs):
    """Replication study; writes summary.csv."""
    config, dry_run = _prepare(kwargs, "simulate")
    scenario = config.get("scenario", "linear")
    if config.get("methods"):
        methods = tuple(m.strip() for m in str(config["methods"]).split(","))
    else:
        methods = methods_for(scenario, config.get("specification", "correct"))
    n_grid = config.get("n_grid")
    lambda_grid = config.get("lambda_grid")
    if isinstance(n_grid, str):
        n_grid = tuple(int(v) for v in n_grid.split(","))
    if isinstance(lambda_grid, str):
        lambda_grid = tuple(float(v) for v in lambda_grid.split(","))
    if n_grid is None and lambda_grid is None:
        n_grid = (int(config.get("n", 500)),)
    study = _guard(
        ReplicationStudy,
        scenario=scenario,
        methods=methods,
        reps=int(config.get("reps", 200)),
        seed=int(config.get("seed", 0)),
        n_grid=tuple(n_grid) if n_grid is not None else None,
        lambda_grid=tuple(lambda_grid) if lambda_grid is not None else None,
        n=int(config.get("n", 500)),
        jobs=int(config.get("jobs", 1)),
    )
    if dry_run:
        click.echo("configuration ok")
        return
    result = _guard(replicate, study)
    out = _out_dir(config)
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["method", "grid_kind", "grid", "bias", "mse", "var",
                         "mc_se_bias", "mc_se_mse", "reps", "failures"])
        for s in result.summaries:
            writer.writerow([s.method, s.grid_kind, repr(s.grid), repr(s.bias), repr(s.mse),
                             repr(s.variance), repr(s.mc_se_bias), repr(s.mc_se_mse),
                             s.reps, s.failures])
    if dump_reps:
        with open(out / "estimates.csv", "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["method", "grid", "rep", "estimate"])
            for (method, grid), values in sorted(result.estimates.items()):
                for rep, value in enumerate(values):
                    writer.writerow([method, repr(grid), rep, repr(float(value))])
    _manifest(out, "simulate", config)
    click.echo(f"wrote {out / 'summary.csv'} ({len(result.summaries)} rows)")


@main.command()
@common_options
@click.option("--t-grid", default=None, help="Comma-separated period counts (default 3..10).")
@click.option("--p-grid", default=None, help="Comma-separated confounder counts (default 3..8).")
@click.option("--n", type=int, default=None)
@click.option("--repetitions", type=int, default=None)
def timing(**kwargs):
    """Per-stage runtime medians over T and p grids; writes timing.csv."""
    config, dry_run = _prepare(kwargs, "timing")
    t_grid = config.get("t_grid")
    p_grid = config.get("p_grid")
    t_grid = tuple(int(v) for v in t_grid.split(",")) if isinstance(t_grid, str) else tuple(range(3, 11))
    p_grid = tuple(int(v) for v in p_grid.split(",")) if isinstance(p_grid, str) else tuple(range(3, 9))
    if dry_run:
        click.echo("configuration ok")
        return
    rows = _guard(
        timing_study,
        seed=int(config.get("seed", 0)),
        t_grid=t_grid,
        p_grid=p_grid,
        n=int(config.get("n", 100)),
        repetitions=int(config.get("repetitions", 10)),
    )
    out = _out_dir(config)
    with open(out / "timing.csv", "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["axis", "value", "stage", "median_seconds", "repetitions"])
        for row in rows:
            writer.writerow([row.axis, row.value, row.stage, repr(row.median_seconds), row.repetitions])
    _manifest(out, "timing", config)
    click.echo(f"wrote {out / 'timing.csv'}")


@main.command()
@common_options
@click.option("--weights-csv", "weights_csv", type=click.Path(), default=None,
              help="Weights to diagnose (default: uniform).")
@click.option("--dump-problem", is_flag=True, default=False,
              help="Also dump the assembled QP (matrices only for n <= 200).")
def diagnose(weights_csv, dump_problem, **kwargs):
    """Imbalance report for a panel under given (or uniform) weights."""
    config, dry_run = _prepare(kwargs, "diagnose")
    spec = _guard(_kernel_spec, config)
    if dry_run:
        click.echo("configuration ok")
        return
    panel = _read_panel(config)
    censored = config.get("censoring")
    censored = panel.has_censoring if censored is None else censored
    spanel, _ = _guard(standardize, panel)
    grams = _guard(lambda: [gram(spanel, spec, t) for t in range(1, panel.n_periods + 1)])
    indicators = build_indicators(panel, censored=censored)
    w = np.ones(panel.n)
    if weights_csv:
        by_unit = {}
        with open(weights_csv, newline="", encoding="utf-8") as handle:
            for row in csv.DictReader(handle):
                by_unit[row["unit"]] = float(row["weight"])
        w = np.array([by_unit.get(str(u), 0.0) for u in panel.unit_ids])
    report = _guard(imbalance_report, w, grams, indicators)
    out = _out_dir(config)
    _write_json(out / "balance.json", report.to_dict())
    if dump_problem:
        lam = _lam_value(config)
        lam = 0.0 if lam == "auto" else float(lam)
        problem = _guard(assemble_problem, grams, indicators, lam,
                         mode="censored" if censored else "uncensored")
        with open(out / "problem.json", "w", encoding="utf-8") as handle:
            handle.write(problem.to_json(include_matrices=panel.n <= 200))
            handle.write("\n")
    _manifest(out, "diagnose", config)
    click.echo(f"B^2 = {report.total:.6g}")


if __name__ == "__main__":
    main()
