"""
Command-line entry point

    continual-merge gen     write a task suite
    continual-merge run     merge, adapt and evaluate over task orders
    continual-merge ablate  ablation grid (and optionally the γ study)
    continual-merge theory  routing-risk verdict for a risk spec file
    continual-merge report  tables and a markdown summary of stored reports
"""

import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import click
import pandas as pd
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from . import __version__
from .artifacts import read_json, write_json_atomic, write_text_atomic
from .bench import (
    RunReport,
    aggregate,
    aggregate_csv,
    gamma_study,
    load_suite,
    run_ablation,
    save_suite,
    suite_from_config,
    sweep,
)
from .config import METHODS, ConfigLoader, RunConfig
from .errors import EXIT_OK, EXIT_VALIDATION, ArtifactError, MergeError, create_error_handler
from .templates import SummaryTemplate
from .theory import (
    RiskSpec,
    ideal_risk,
    moe_risk_closed_form,
    moe_risk_monte_carlo,
    routing_penalty,
    static_risk_from_spec,
    superiority_condition,
)

logger = logging.getLogger(__name__)
console = Console()
err_console = Console(stderr=True)


def setup_logging(level: str) -> None:
    root = logging.getLogger()
    for handler in list(root.handlers):
        if isinstance(handler, RichHandler):
            root.removeHandler(handler)
    root.addHandler(RichHandler(console=err_console, show_path=False, rich_tracebacks=False))
    root.setLevel(level.upper())


def build_config(ctx: click.Context, overrides: Dict[str, Any]) -> RunConfig:
    """Defaults < config file < CMERGE_* environment < command-line flags"""
    loader = ConfigLoader().load_env()
    config_file = ctx.obj.get("config_file")
    if config_file:
        loader.load_file(config_file)
    level_override = ctx.obj.get("log_level")
    if level_override:
        overrides = {**overrides, "log_level": level_override}
    config = loader.build(overrides)
    setup_logging(config.log_level)
    return config


def _resolve_suite_path(config: RunConfig, suite: Optional[str]) -> Path:
    path = suite or config.suite_path or str(Path(config.output_dir) / "suite.json")
    return Path(path)


def _metrics_table(title: str, frame: pd.DataFrame, key: str) -> Table:
    table = Table(title=title)
    for column in (key, "T", "ACC mean", "ACC std", "BWT mean", "BWT std"):
        table.add_column(column, justify="left" if column == key else "right")
    for row in frame.to_dict("records"):
        table.add_row(
            str(row[key]), str(row["T"]),
            f"{100 * row['ACC_mean']:.2f}", f"{100 * row['ACC_std']:.2f}",
            f"{100 * row['BWT_mean']:.2f}", f"{100 * row['BWT_std']:.2f}",
        )
    return table


@click.group()
@click.version_option(__version__, prog_name="continual-merge")
@click.option("--config", "config_file", type=click.Path(dir_okay=False), default=None,
              help="JSON or YAML config file.")
@click.option("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR.")
@click.pass_context
def cli(ctx: click.Context, config_file: Optional[str], log_level: Optional[str]) -> None:
    """Continual model merging with gated low-rank experts."""
    ctx.ensure_object(dict)
    ctx.obj["config_file"] = config_file
    ctx.obj["log_level"] = log_level


@cli.command("gen")
@click.option("--tasks", "num_tasks", type=int, default=None)
@click.option("--classes-per-task", type=int, default=None)
@click.option("--dim", "input_dim", type=int, default=None)
@click.option("--train-per-class", type=int, default=None)
@click.option("--test-per-class", type=int, default=None)
@click.option("--margin", type=float, default=None)
@click.option("--task-spread", type=float, default=None)
@click.option("--intrinsic-dim", type=int, default=None)
@click.option("--seed", "suite_seed", type=int, default=None)
@click.option("--output-dir", default=None)
@click.option("--out", "out_path", default=None, help="Suite file; defaults to <output-dir>/suite.json.")
@click.pass_context
def cmd_gen(ctx: click.Context, out_path: Optional[str], **overrides: Any) -> None:
    """Generate a synthetic task suite."""
    config = build_config(ctx, overrides)
    suite = suite_from_config(config)
    path = Path(out_path) if out_path else Path(config.output_dir) / "suite.json"
    save_suite(path, suite)
    logger.info("wrote %d-task suite to %s", suite.num_tasks, path)
    console.print(f"suite [bold]{suite.checksum()[:16]}[/bold] → {path}")


def _run_options(func: Any) -> Any:
    options = [
        click.option("--suite", "suite_file", default=None, help="Suite file written by 'gen'."),
        click.option("--method", "methods", multiple=True, type=click.Choice(METHODS)),
        click.option("--orders", type=int, default=None),
        click.option("--base-seed", type=int, default=None),
        click.option("--jobs", type=int, default=None),
        click.option("--rank", type=int, default=None),
        click.option("--k", "subspace_k", type=int, default=None),
        click.option("--gamma", type=float, default=None),
        click.option("--beta", type=float, default=None),
        click.option("--steps", "tta_steps", type=int, default=None),
        click.option("--lr", "tta_lr", type=float, default=None),
        click.option("--batch-size", type=int, default=None),
        click.option("--seeds-per-class", type=int, default=None),
        click.option("--projection", type=click.Choice(["none", "hard", "relaxed"]), default=None),
        click.option("--gated-layers", default=None, help="Comma-separated layer indices."),
        click.option("--ta-scale", type=float, default=None),
        click.option("--trim-fraction", type=float, default=None),
        click.option("--lambda-rule", type=click.Choice(["sqrt", "linear", "constant"]), default=None),
        click.option("--finetune-steps", type=int, default=None),
        click.option("--finetune-mode", type=click.Choice(["independent", "sequential"]), default=None),
        click.option("--noise-sigma", "noise_sigmas", multiple=True, type=float),
        click.option("--output-dir", default=None),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _clean_overrides(overrides: Dict[str, Any]) -> Dict[str, Any]:
    cleaned = dict(overrides)
    for key in ("methods", "noise_sigmas"):
        cleaned[key] = list(cleaned[key]) if cleaned.get(key) else None
    if cleaned.get("gated_layers"):
        try:
            cleaned["gated_layers"] = [int(part) for part in str(cleaned["gated_layers"]).split(",")]
        except ValueError as e:
            raise click.BadParameter("expected comma-separated integers", param_hint="--gated-layers") from e
    return cleaned


@cli.command("run")
@_run_options
@click.option("--trace/--no-trace", default=None, help="Write null-space diagnostics CSVs.")
@click.pass_context
def cmd_run(ctx: click.Context, suite_file: Optional[str], **overrides: Any) -> None:
    """Merge every task order with each method and write reports."""
    config = build_config(ctx, _clean_overrides(overrides))
    suite_path = _resolve_suite_path(config, suite_file)
    suite = load_suite(suite_path)
    out = Path(config.output_dir)

    result = sweep(suite, config)
    for report in result.reports:
        write_json_atomic(out / "reports" / f"{report.method}_seed{report.seed}.json", report.to_dict())
        logger.info("%s seed %d: ACC %.4f BWT %.4f (%.1fs)",
                    report.method, report.seed, report.acc, report.bwt, report.wall_time)
    table = result.aggregate()
    write_text_atomic(out / "aggregate.csv", aggregate_csv(table))

    if result.noisy:
        for report in result.noisy:
            name = f"{report.method}_seed{report.seed}_sigma{report.noise_sigma:g}.json"
            write_json_atomic(out / "robustness" / name, report.to_dict())
        write_text_atomic(out / "robustness.csv", aggregate_csv(aggregate(result.noisy, by="noise_sigma")))

    if config.trace:
        for (method, seed), rows in result.traces.items():
            if rows:
                frame = pd.DataFrame(rows, columns=["task", "step", "layer", "mean_ratio", "mean_score", "mean_lambda"])
                write_text_atomic(out / "trace" / f"{method}_seed{seed}.csv",
                                  frame.to_csv(index=False, lineterminator="\n"))

    console.print(_metrics_table(f"{len(result.reports)} runs, T={suite.num_tasks}", table, "method"))


@cli.command("ablate")
@_run_options
@click.option("--gamma-study/--no-gamma-study", "with_gamma", default=False,
              help="Also sweep γ over 4, 1 and 0.25.")
@click.pass_context
def cmd_ablate(ctx: click.Context, suite_file: Optional[str], with_gamma: bool, **overrides: Any) -> None:
    """Run the ablation grid of gate training and null-space variants."""
    config = build_config(ctx, _clean_overrides(overrides))
    suite = load_suite(_resolve_suite_path(config, suite_file))
    out = Path(config.output_dir)

    table = run_ablation(suite, config)
    write_text_atomic(out / "ablation.csv", aggregate_csv(table))
    console.print(_metrics_table("ablation", table, "row"))

    if with_gamma:
        study = gamma_study(suite, config)
        write_text_atomic(out / "gamma_study.csv", aggregate_csv(study))
        grid = Table(title="prior-task gate activation")
        grid.add_column("gamma", justify="right")
        grid.add_column("mean |g|", justify="right")
        for row in study.to_dict("records"):
            grid.add_row(f"{row['gamma']:g}", f"{row['activation']:.4g}")
        console.print(grid)


@cli.command("theory")
@click.argument("spec_file", type=click.Path(dir_okay=False))
@click.option("--draws", type=int, default=1_000_000, show_default=True)
@click.option("--seed", type=int, default=42, show_default=True)
@click.option("--jobs", type=int, default=1, show_default=True)
@click.option("--out", "out_path", default=None, help="Also write the verdict as JSON.")
@click.pass_context
def cmd_theory(ctx: click.Context, spec_file: str, draws: int, seed: int, jobs: int,
               out_path: Optional[str]) -> None:
    """Closed-form and simulated routed risk against the best static mixture."""
    setup_logging(ctx.obj.get("log_level") or "INFO")
    payload = read_json(spec_file)
    if not isinstance(payload, dict):
        raise ArtifactError(f"{spec_file} must hold a JSON object", path=spec_file)
    static_opt = payload.pop("static_opt", None)
    try:
        spec = RiskSpec.model_validate(payload)
    except ValueError as e:
        raise click.BadParameter(str(e), param_hint="SPEC_FILE") from e

    if static_opt is None:
        static_opt, weights = static_risk_from_spec(spec)
        weights_text = ", ".join(f"{w:g}" for w in weights)
    else:
        static_opt, weights_text = float(static_opt), "given"
    estimate, stderr = moe_risk_monte_carlo(spec, draws, seed, n_jobs=jobs)
    verdict = {
        "ideal_risk": ideal_risk(spec),
        "routing_penalty": routing_penalty(spec),
        "moe_risk": moe_risk_closed_form(spec),
        "monte_carlo": estimate,
        "monte_carlo_stderr": stderr,
        "static_opt": static_opt,
        "superiority": superiority_condition(spec, static_opt),
    }

    table = Table(title=f"routing risk, T={spec.num_tasks}")
    table.add_column("quantity")
    table.add_column("value", justify="right")
    table.add_row("R_ideal", f"{verdict['ideal_risk']:.6f}")
    table.add_row("routing penalty", f"{verdict['routing_penalty']:.6f}")
    table.add_row("R(MoE) closed form", f"{verdict['moe_risk']:.6f}")
    table.add_row(f"R(MoE) Monte Carlo ({draws} draws/task)", f"{estimate:.6f} ± {stderr:.2g}")
    table.add_row(f"static optimum ({weights_text})", f"{static_opt:.6f}")
    table.add_row("superiority", "[green]true[/green]" if verdict["superiority"] else "[red]false[/red]")
    console.print(table)
    console.print(f"superiority={str(verdict['superiority']).lower()}")
    if out_path:
        write_json_atomic(out_path, verdict)


@cli.command("report")
@click.argument("run_dir", type=click.Path(file_okay=False))
@click.option("--title", default="Continual merge report")
def cmd_report(run_dir: str, title: str) -> None:
    """Summarize stored reports as a table and summary.md."""
    files = sorted((Path(run_dir) / "reports").glob("*.json"))
    if not files:
        raise ArtifactError(f"No reports under {Path(run_dir) / 'reports'}", path=run_dir)
    reports = [RunReport.from_dict(read_json(path)) for path in files]
    rank = {m: i for i, m in enumerate(METHODS)}
    reports.sort(key=lambda r: (rank.get(r.method, len(rank)), r.seed))
    inconsistent = [f"{r.method}/{r.seed}" for r in reports if not r.is_consistent()]
    if inconsistent:
        raise ArtifactError(f"Reports with metrics that do not follow from their matrix: {inconsistent}")

    table = aggregate(reports)
    rendered = SummaryTemplate().generate_files({
        "title": title,
        "reports": [r.to_dict() for r in reports],
        "aggregate": table.to_dict("records"),
    })
    for name, text in rendered.items():
        write_text_atomic(Path(run_dir) / name, text)
    console.print(_metrics_table(title, table, "method"))


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run the CLI and map failures to exit codes: 2 validation, 3 runtime"""
    handler = create_error_handler()
    try:
        cli.main(args=list(argv) if argv is not None else None, prog_name="continual-merge",
                 standalone_mode=False, obj={})
    except click.exceptions.Exit as e:
        return int(e.exit_code)
    except click.ClickException as e:
        e.show()
        return EXIT_VALIDATION
    except click.exceptions.Abort:
        err_console.print("aborted")
        return EXIT_VALIDATION
    except MergeError as e:
        response = handler.handle_error(e)
        err_console.print(f"[red]error[/red] {response.code}: {response.message}")
        logger.debug("failure details: %s", response.to_dict())
        return handler.exit_code(e)
    except Exception as e:  # noqa: BLE001
        response = handler.handle_error(e)
        err_console.print(f"[red]error[/red] {response.code}: {response.message}")
        return handler.exit_code(e)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
