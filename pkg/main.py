import typer
import os
import shutil
import tempfile
import traceback
from dotenv import load_dotenv
from pydantic import BaseModel
from typing import Optional, List, Dict, Any

from src.config import RunConfig, load_config, apply_overrides
from src.core import Regime
from src.errors import ConfigError
from src.flows import (
    cycle_map,
    estimate_lipschitz,
    hamiltonian_residual,
    integrate_utau,
    regime_map,
    run_cycle,
    tube_filter,
)
from src.observables import sample_ensemble
from src.concentration import concentration_experiment, reduction_experiment
from src.wep import wep_experiment
from src.parallel import resolve_threads
from src.reports import csv_name, emit_csv, utc_now, write_manifest, write_summary

# Load environment variables (don't override existing env vars)
load_dotenv(override=False)

# --- 1. SETUP APP ---
app = typer.Typer(help="Deterministic Cartan-Randers model simulator and verification suite.")

COMMANDS = ("simulate", "concentration", "reduction", "wep", "lipschitz")

EXIT_OK = 0
EXIT_VERDICT_FAILED = 1
EXIT_CONFIG_ERROR = 2
EXIT_RUNTIME_ERROR = 3

# --- 2. DATA MODELS ---
class ExperimentResult(BaseModel):
    """What a logic_* function hands back to the runner."""
    model_config = {"arbitrary_types_allowed": True}

    reports: List[Any]
    verdicts: Dict[str, bool]
    metrics: Dict[str, Any]


def _progress(message: str):
    typer.echo(message, err=True)


# --- 3. SHARED LOGIC ---

def logic_simulate(config: RunConfig, threads: int) -> ExperimentResult:
    """Runs U_t over a sampled ensemble, then follows member 0 through U_tau."""
    spec = config.to_spec()
    exp = config.experiment
    _progress(f"Sampling {exp.count} members at N = {spec.n_factors}...")
    ensemble = sample_ensemble(spec.measure, spec.n_factors, exp.count, spec.seed)
    initial = hamiltonian_residual(ensemble, spec)

    _progress("Running the regime schedule...")
    cycled = run_cycle(ensemble, spec, exp.dt, threads)
    after = hamiltonian_residual(cycled, spec)

    _progress(f"Integrating member 0 to tau = {exp.tau_end}...")
    trajectory = integrate_utau(cycled.member(0), spec, exp.tau_end, exp.dtau)
    return ExperimentResult(
        reports=[trajectory],
        verdicts={},
        metrics={
            "initial_residual": initial,
            "cycle_residual": after,
            "t_end": cycled.t,
            "tau_end": trajectory.final.tau,
        },
    )


def logic_concentration(config: RunConfig, threads: int) -> ExperimentResult:
    spec = config.to_spec()
    exp = config.experiment
    obs = config.observable()
    _progress(f"Measuring tail of {obs.name} over {exp.count} members...")
    report = concentration_experiment(
        spec, obs, exp.count, exp.dt, center=exp.center, rho_points=exp.rho_points,
        coefficient=exp.bound_coefficient, threads=threads,
    )
    return ExperimentResult(
        reports=[report],
        verdicts={"concentration": report.verdict},
        metrics={
            "observable": report.observable,
            "sigma_f": report.sigma_f,
            "m_f": report.m_f,
            "fitted_exponent": report.fitted_exponent,
            "r_squared": report.r_squared,
            "scaled_bound_log": report.scaled_bound_log,
            "complexity_bound_log": report.complexity_bound_log,
        },
    )


def logic_reduction(config: RunConfig, threads: int) -> ExperimentResult:
    spec = config.to_spec()
    exp = config.experiment
    obs = config.observable()
    _progress(f"Measuring dispersion of {obs.name} across the concentration regime...")
    report = reduction_experiment(spec, obs, exp.count, exp.dt, threads=threads)
    return ExperimentResult(
        reports=[report],
        verdicts={"reduction": report.verdict},
        metrics={
            "contraction_ratio": report.contraction_ratio,
            "predicted_ratio": report.predicted_ratio,
            "ratio_stderr": report.ratio_stderr,
        },
    )


def logic_wep(config: RunConfig, threads: int) -> ExperimentResult:
    spec = config.to_spec()
    exp = config.experiment
    n_a, n_b, h = config.wep_setup()
    _progress(f"Dropping subsystems A ({n_a}) and B ({n_b}) over {exp.count} members...")
    report = wep_experiment(
        spec, n_a, n_b, h, exp.wep.tau_grid(), exp.count,
        dt=exp.dt, dtau=exp.dtau, threads=threads,
    )
    return ExperimentResult(
        reports=[report],
        verdicts={"wep": report.verdict},
        metrics={
            "eotvos": report.eotvos,
            "eotvos_stderr": report.eotvos_stderr,
            "tail_prefactor": report.tail_prefactor,
            "tail_exponent": report.tail_exponent,
            "scaled_bound_log": report.scaled_bound_log,
        },
    )


def logic_lipschitz(config: RunConfig, threads: int) -> ExperimentResult:
    spec = config.to_spec()
    exp = config.experiment
    settings = exp.lipschitz
    if settings.map == "cycle":
        flow = cycle_map(spec, exp.dt)
    else:
        flow = regime_map(spec, Regime(settings.map), settings.duration, exp.dt)
    tube = config.certification_tube()
    accept = tube_filter(tube) if tube > 0 else None
    _progress(f"Certifying the {settings.map} map on {settings.pairs} pairs...")
    certificate = estimate_lipschitz(
        flow, spec.measure, settings.pairs, spec.seed, spec.n_factors,
        accept=accept, refine_steps=settings.refine_steps,
    )
    return ExperimentResult(
        reports=[certificate],
        verdicts={"lipschitz": certificate.passed},
        metrics={"estimate": certificate.estimate, "pairs_tested": certificate.pairs_tested},
    )


LOGIC = {
    "simulate": logic_simulate,
    "concentration": logic_concentration,
    "reduction": logic_reduction,
    "wep": logic_wep,
    "lipschitz": logic_lipschitz,
}


def _publish(staging: str, output_dir: str, names: List[str]):
    for name in names:
        os.replace(os.path.join(staging, name), os.path.join(output_dir, name))


def run(command: str, config: RunConfig, output_dir: str, threads: Optional[int] = None) -> int:
    """Runs one experiment and writes its files into output_dir; returns the exit code."""
    if command not in LOGIC:
        typer.secho(f"Unknown command '{command}', expected one of {COMMANDS}", fg="red", err=True)
        return EXIT_CONFIG_ERROR
    started = utc_now()
    staging = None
    try:
        workers = resolve_threads(threads, config.experiment.threads)
        os.makedirs(output_dir, exist_ok=True)
        staging = tempfile.mkdtemp(prefix=".staging-", dir=output_dir)

        result = LOGIC[command](config, workers)

        run_id = config.run_id()
        files = []
        for report in result.reports:
            name = csv_name(report)
            emit_csv(report, os.path.join(staging, name))
            files.append(name)
        write_summary(os.path.join(staging, "summary.json"), command, run_id, result.verdicts, result.metrics)
        write_manifest(
            os.path.join(staging, "manifest.json"), run_id, config.seed, config.model_dump(mode="json"),
            started, utc_now(), result.verdicts, files,
        )
        _publish(staging, output_dir, files + ["summary.json", "manifest.json"])
        os.rmdir(staging)
        staging = None
    except ConfigError as e:
        typer.secho(f"Configuration error: {e}", fg="red", err=True)
        return EXIT_CONFIG_ERROR
    except Exception as e:
        traceback.print_exc()
        typer.secho(f"Error: {e}", fg="red", err=True)
        return EXIT_RUNTIME_ERROR
    finally:
        if staging is not None:
            shutil.rmtree(staging, ignore_errors=True)

    _print_summary(command, run_id, result)
    return EXIT_OK if all(result.verdicts.values()) else EXIT_VERDICT_FAILED


def _print_summary(command: str, run_id: str, result: ExperimentResult):
    typer.echo(f"\n🧪 {command} run {run_id[:12]}\n")
    typer.echo("=" * 80)
    for key, value in result.metrics.items():
        typer.echo(f"   • {key}: {value}")
    typer.echo("=" * 80)
    if not result.verdicts:
        typer.echo("\n📊 No verdicts for this command.")
        return
    typer.echo("\n📊 Verdicts:")
    for name, passed in result.verdicts.items():
        icon = "✅" if passed else "❌"
        typer.secho(f"   {icon} {name}: {'pass' if passed else 'fail'}", fg="green" if passed else "red")


# --- 4. TYPER INTERFACE (CLI) ---

def _cli_run(command: str, config_path: str, out: str, seed: Optional[int], threads: Optional[int]):
    try:
        config = apply_overrides(load_config(config_path), seed=seed)
    except ConfigError as e:
        typer.secho(f"Configuration error: {e}", fg="red", err=True)
        raise typer.Exit(code=EXIT_CONFIG_ERROR)
    code = run(command, config, out, threads)
    raise typer.Exit(code=code)


ConfigOption = typer.Option(..., "--config", help="Path to the TOML (or JSON) run configuration")
OutOption = typer.Option(..., "--out", help="Directory that receives the CSV, summary and manifest files")
SeedOption = typer.Option(None, "--seed", help="Overrides the configured 64-bit seed")
ThreadsOption = typer.Option(None, "--threads", help="Worker threads; falls back to DCRM_THREADS")


@app.command()
def simulate(config: str = ConfigOption, out: str = OutOption,
             seed: Optional[int] = SeedOption, threads: Optional[int] = ThreadsOption):
    """
    Run the regime schedule on an ensemble and write member 0's tau trajectory.
    """
    _cli_run("simulate", config, out, seed, threads)


@app.command()
def concentration(config: str = ConfigOption, out: str = OutOption,
                  seed: Optional[int] = SeedOption, threads: Optional[int] = ThreadsOption):
    """
    Compare the observable's empirical tail with the Gaussian concentration bound.
    """
    _cli_run("concentration", config, out, seed, threads)


@app.command()
def reduction(config: str = ConfigOption, out: str = OutOption,
              seed: Optional[int] = SeedOption, threads: Optional[int] = ThreadsOption):
    """
    Measure how much the concentration regime shrinks the observable's dispersion.
    """
    _cli_run("reduction", config, out, seed, threads)


@app.command()
def wep(config: str = ConfigOption, out: str = OutOption,
        seed: Optional[int] = SeedOption, threads: Optional[int] = ThreadsOption):
    """
    Compare the free fall of two subsystems' observable coordinates.
    """
    _cli_run("wep", config, out, seed, threads)


@app.command()
def lipschitz(config: str = ConfigOption, out: str = OutOption,
              seed: Optional[int] = SeedOption, threads: Optional[int] = ThreadsOption):
    """
    Certify that the configured U_t map is 1-Lipschitz.
    """
    _cli_run("lipschitz", config, out, seed, threads)


if __name__ == "__main__":
    app()
