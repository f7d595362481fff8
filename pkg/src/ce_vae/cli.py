"""CLI interface for ce-vae."""

import logging
import sys
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence

import click
import numpy as np
import yaml
from pydantic import ValidationError
from rich.console import Console
from rich.logging import RichHandler

from ce_vae import __version__
from ce_vae.channels import DatasetKind, observe
from ce_vae.estimators import (
    ESTIMATOR_IDS,
    build_estimator,
    fit_sample_lmmse,
    fit_sample_lmmse_noisy,
)
from ce_vae.evaluation import emit_csv, emit_history_csv, snr_sweep
from ce_vae.exceptions import (
    CeVaeError,
    ConfigConflictError,
    ConfigurationError,
    DataError,
    MissingCheckpointError,
    NumericalError,
    UnknownEstimatorError,
    UsageError,
)
from ce_vae.models import (
    GAUSSIAN_SCENARIO,
    SCENARIO_PRESETS,
    EpochRecord,
    ExperimentPlan,
    RunManifest,
    VaeConfig,
)
from ce_vae.parsers import parse_plan
from ce_vae.storage import load_dataset, save_dataset
from ce_vae.studies import StudyRunner, generate_scenario
from ce_vae.training import Trainer
from ce_vae.vae import VaeModel, build_architecture


# Progress and diagnostics go to stderr; results only to files.
console = Console(stderr=True)

logger = logging.getLogger(__name__)

EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4

MANIFEST_NAME = "manifest.yaml"

# Fields that fix the network layout; they cannot change when resuming.
ARCHITECTURE_FIELDS = (
    "geometry",
    "latent_dim",
    "base_channels",
    "width_multiplier",
    "blocks",
    "kernel_size",
    "stride",
)


def setup_logging(verbose: int) -> None:
    """Setup logging configuration.

    Args:
        verbose: Verbosity level (0=WARNING, 1=INFO, 2=DEBUG)
    """
    level = logging.WARNING
    if verbose == 1:
        level = logging.INFO
    elif verbose >= 2:
        level = logging.DEBUG

    logging.basicConfig(
        level=level,
        format="%(message)s",
        handlers=[RichHandler(console=console, rich_tracebacks=True)],
        force=True,
    )


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the process exit code."""
    if isinstance(error, UsageError):
        return EXIT_USAGE
    if isinstance(error, (DataError, OSError)):
        return EXIT_IO
    if isinstance(error, NumericalError):
        return EXIT_NUMERICAL
    return EXIT_FAILURE


@contextmanager
def command_errors(action: str) -> Iterator[None]:
    """Print a failure for ``action`` and exit with the code of its error class."""
    try:
        yield
    except (CeVaeError, OSError) as e:
        console.print(f"[bold red]✗ {action} failed:[/bold red] {e}", style="red")
        sys.exit(exit_code_for(e))
    except Exception as e:
        logger.debug("Unexpected error", exc_info=True)
        console.print(f"[bold red]✗ Unexpected error:[/bold red] {e}", style="red")
        sys.exit(EXIT_FAILURE)


def _prune(data: Dict[str, Any]) -> Dict[str, Any]:
    """Drop ``None`` values, recursing into nested mappings."""
    pruned = {}
    for key, value in data.items():
        if isinstance(value, dict):
            value = _prune(value)
            if not value:
                continue
        if value is not None:
            pruned[key] = value
    return pruned


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config_file(path: Optional[Path]) -> Dict[str, Any]:
    """Read a YAML config file into a dict (empty when ``path`` is None).

    Raises:
        ConfigurationError: If the file is not a YAML mapping
    """
    if path is None:
        return {}
    try:
        with open(path, "r") as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigurationError(f"{path}: invalid YAML: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: config must be a mapping of keys to values")
    return data


def resolve_vae_config(
    config_file: Optional[Path],
    overrides: Dict[str, Any],
    base: Optional[Dict[str, Any]] = None,
) -> VaeConfig:
    """Flags > config-file keys > ``base`` > built-in defaults.

    Raises:
        ConfigurationError: If the merged values are invalid
    """
    data = _merge(base or {}, load_config_file(config_file))
    data = _merge(data, _prune(overrides))
    try:
        return VaeConfig(**data)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid VAE configuration: {e}") from e


def split_counts(count: int, split: Optional[str]) -> Dict[str, int]:
    """Per-split sample counts from ``--count`` and an optional ``train/val/test`` spec.

    Without a spec, validation and test each get a tenth of ``count``.

    Raises:
        UsageError: If the spec is malformed or does not add up to ``count``
    """
    if split is None:
        held_out = max(1, count // 10)
        counts = {"train": count - 2 * held_out, "val": held_out, "test": held_out}
    else:
        parts = split.split("/")
        try:
            values = [int(part) for part in parts]
        except ValueError:
            values = []
        if len(values) != 3:
            raise UsageError(f"--split must look like TRAIN/VAL/TEST, got '{split}'")
        if sum(values) != count:
            raise UsageError(f"--split {split} adds up to {sum(values)}, not --count {count}")
        counts = dict(zip(("train", "val", "test"), values))
    if min(counts.values()) < 1:
        raise UsageError(f"Every split needs at least one sample, got {counts}")
    return counts


def refuse_existing(paths: Sequence[Path], force: bool) -> None:
    """Raise unless all outputs are new or ``--force`` was given.

    Raises:
        UsageError: If an output exists and ``force`` is False
    """
    if force:
        return
    existing = [str(p) for p in paths if p.exists()]
    if existing:
        raise UsageError(f"Refusing to overwrite {', '.join(existing)} (use --force)")


def write_manifest(
    out_dir: Path,
    command: str,
    started: float,
    config: Optional[Dict[str, Any]] = None,
    seeds: Optional[Dict[str, int]] = None,
    inputs: Sequence[Path] = (),
    outputs: Sequence[Path] = (),
    failures: Sequence[str] = (),
) -> Path:
    """Write the run manifest next to the outputs."""
    manifest = RunManifest(
        command=command,
        config=config or {},
        seeds=seeds or {},
        inputs=[str(p) for p in inputs],
        outputs=[str(p) for p in outputs],
        version=__version__,
        duration_seconds=max(0.0, time.monotonic() - started),
        failures=list(failures),
    )
    path = out_dir / MANIFEST_NAME
    manifest.to_yaml(path)
    logger.info(f"Wrote manifest to {path}")
    return path


def check_resume_compatible(checkpoint: VaeConfig, requested: VaeConfig) -> None:
    """Raise if ``requested`` changes the layout of a resumed model.

    Raises:
        ConfigConflictError: Naming the field with both values
    """
    for name in ARCHITECTURE_FIELDS:
        old, new = getattr(checkpoint, name), getattr(requested, name)
        if old != new:
            raise ConfigConflictError(
                f"Cannot resume: checkpoint has {name}={old} but the configuration asks for {new}"
            )


def _scenario_tag(dataset: Path) -> str:
    """Scenario recorded by ``generate`` in the manifest beside ``dataset``, if any."""
    manifest_path = dataset.parent / MANIFEST_NAME
    if not manifest_path.exists():
        return ""
    try:
        manifest = RunManifest.from_yaml(manifest_path)
    except (ValidationError, yaml.YAMLError):
        return ""
    return str(manifest.config.get("scenario", "")) if manifest.command == "generate" else ""


def _parse_csv_list(text: str) -> List[str]:
    return [item.strip() for item in text.split(",") if item.strip()]


def _parse_snr_grid(text: str) -> List[float]:
    try:
        return [float(item) for item in _parse_csv_list(text)]
    except ValueError as e:
        raise UsageError(f"--snr must be a comma-separated list of numbers, got '{text}'") from e


def output_options(f):
    """Options shared by every command that writes files."""
    f = click.option(
        "--threads",
        default=1,
        type=click.IntRange(min=1),
        envvar="CE_VAE_THREADS",
        show_default=True,
        help="Worker threads for generation and sweeps (env: CE_VAE_THREADS)",
    )(f)
    f = click.option("--force", is_flag=True, help="Overwrite existing outputs")(f)
    f = click.option(
        "--out",
        "-o",
        "out_dir",
        required=True,
        type=click.Path(file_okay=False, path_type=Path),
        help="Output directory",
    )(f)
    return f


@click.group()
@click.option(
    "-v",
    "--verbose",
    count=True,
    help="Increase verbosity (-v for INFO, -vv for DEBUG)",
)
@click.version_option(version=__version__, prog_name="ce-vae")
def cli(verbose: int) -> None:
    """ce-vae - VAE-based channel estimation: data generation, training and evaluation.

    Settings resolve as: command-line flags > --config YAML keys > built-in defaults.
    """
    setup_logging(verbose)


@cli.command()
@click.argument(
    "scenario", type=click.Choice(sorted(SCENARIO_PRESETS) + [GAUSSIAN_SCENARIO])
)
@click.option("--count", default=2400, type=click.IntRange(min=3), show_default=True,
              help="Total samples across splits")
@click.option("--split", default=None, help="Per-split counts as TRAIN/VAL/TEST")
@click.option("--seed", default=None, type=click.IntRange(min=0),
              help="Override the scenario seed")
@click.option("--nv", default=None, type=click.IntRange(min=1), help="Vertical antennas")
@click.option("--nh", default=None, type=click.IntRange(min=1), help="Horizontal antennas")
@click.option("--config", "config_file", default=None,
              type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="YAML config (its geometry is used)")
@output_options
def generate(
    scenario: str,
    count: int,
    split: Optional[str],
    seed: Optional[int],
    nv: Optional[int],
    nh: Optional[int],
    config_file: Optional[Path],
    out_dir: Path,
    force: bool,
    threads: int,
) -> None:
    """Generate normalized train/val/test channel datasets for SCENARIO."""
    started = time.monotonic()
    with command_errors("Generation"):
        counts = split_counts(count, split)
        config = resolve_vae_config(config_file, {"geometry": {"n_v": nv, "n_h": nh}})
        outputs = [out_dir / f"{name}.cedf" for name in counts]
        if scenario == GAUSSIAN_SCENARIO:
            outputs.append(out_dir / "covariance.npy")
        refuse_existing(outputs + [out_dir / MANIFEST_NAME], force)

        console.print(
            f"[bold]Generating scenario {scenario}: "
            f"{counts['train']}/{counts['val']}/{counts['test']} samples[/bold]"
        )
        data = generate_scenario(
            scenario, config, counts, seed=seed, parallel_workers=threads
        )
        out_dir.mkdir(parents=True, exist_ok=True)
        for name in counts:
            save_dataset(getattr(data, name), out_dir / f"{name}.cedf")
        if data.covariance is not None:
            np.save(out_dir / "covariance.npy", data.covariance)

        seeds = {"scenario": seed} if seed is not None else {}
        write_manifest(
            out_dir,
            "generate",
            started,
            config={
                "scenario": scenario,
                "counts": counts,
                "geometry": config.geometry.to_dict(),
            },
            seeds=seeds,
            outputs=outputs,
        )
        console.print(f"[bold green]✓ Datasets written to {out_dir}[/bold green]")


@cli.command()
@click.argument("train_set", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.argument("val_set", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--config", "config_file", default=None,
              type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="YAML file with VaeConfig keys")
@click.option("--resume", default=None,
              type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="Continue training this checkpoint")
@click.option("--epochs", default=None, type=click.IntRange(min=1),
              help="Epoch cap for this run")
@click.option("--seed", default=None, type=click.IntRange(min=0),
              help="Initialization, shuffling and noise seed")
@click.option("--latent-dim", default=None, type=click.IntRange(min=1), help="Latent dimension")
@click.option("--base-channels", default=None, type=click.IntRange(min=1),
              help="Base channel width")
@click.option("--batch-size", default=None, type=click.IntRange(min=2), help="Mini-batch size")
@click.option("--learning-rate", default=None, type=float, help="Adam learning rate")
@click.option("--patience", default=None, type=click.IntRange(min=1),
              help="Early-stopping patience")
@click.option("--snr-mode", default=None, type=click.Choice(["fixed", "uniform"]),
              help="Training SNR policy")
@click.option("--snr-db", default=None, type=float, help="SNR of the fixed policy (dB)")
@click.option("--val-snr", default=None, type=float, help="Validation SNR (dB)")
@output_options
def train(
    train_set: Path,
    val_set: Path,
    config_file: Optional[Path],
    resume: Optional[Path],
    epochs: Optional[int],
    seed: Optional[int],
    latent_dim: Optional[int],
    base_channels: Optional[int],
    batch_size: Optional[int],
    learning_rate: Optional[float],
    patience: Optional[int],
    snr_mode: Optional[str],
    snr_db: Optional[float],
    val_snr: Optional[float],
    out_dir: Path,
    force: bool,
    threads: int,
) -> None:
    """Train a VAE on TRAIN_SET, early-stopping on the clean VAL_SET.

    A clean TRAIN_SET is noised with the configured SNR policy; a noisy one is used as is.
    """
    started = time.monotonic()
    with command_errors("Training"):
        checkpoint_path = out_dir / "model.cevm"
        history_path = out_dir / "history.csv"
        refuse_existing([checkpoint_path, history_path, out_dir / MANIFEST_NAME], force)

        train_ds = load_dataset(train_set)
        val_ds = load_dataset(val_set)
        overrides = {
            "seed": seed,
            "latent_dim": latent_dim,
            "base_channels": base_channels,
            "batch_size": batch_size,
            "learning_rate": learning_rate,
            "patience": patience,
            "validation_snr_db": val_snr,
            "snr_policy": {"mode": snr_mode, "snr_db": snr_db},
        }

        if resume is not None:
            model = VaeModel.load(resume)
            config = resolve_vae_config(config_file, overrides, base=model.config.to_dict())
            check_resume_compatible(model.config, config)
            model.config = config
            console.print(
                f"[bold]Resuming {resume} after epoch {len(model.history)}[/bold]"
            )
        else:
            base = {"geometry": train_ds.geometry.to_dict()}
            config = resolve_vae_config(config_file, overrides, base=base)
            model = build_architecture(config)

        if train_ds.kind == DatasetKind.CLEAN:
            train_ds = observe(train_ds, config.snr_policy, config.seed)

        def report(record: EpochRecord) -> None:
            console.print(
                f"epoch {record.epoch}: loss {record.train_loss:.4f}, "
                f"val NMSE {record.val_nmse:.5f}"
            )

        console.print(
            f"[bold]Training {model.parameter_count()} parameters on {train_ds.count} "
            f"samples[/bold]"
        )
        Trainer(model, config, on_epoch=report).fit(train_ds, val_ds, max_epochs=epochs)

        out_dir.mkdir(parents=True, exist_ok=True)
        model.save(checkpoint_path)
        emit_history_csv(model.history, history_path)
        inputs = [train_set, val_set] + ([resume] if resume is not None else [])
        write_manifest(
            out_dir,
            "train",
            started,
            config={**config.to_dict(), "epochs": epochs},
            seeds={"model": config.seed},
            inputs=inputs,
            outputs=[checkpoint_path, history_path],
        )
        console.print(f"[bold green]✓ Training complete![/bold green] Saved to {checkpoint_path}")


@cli.command(name="eval")
@click.argument("test_set", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--checkpoint", "checkpoints", multiple=True,
              type=click.Path(dir_okay=False, path_type=Path),
              help="Trained model for the 'vae' estimator (repeatable)")
@click.option("--estimators", default=None,
              help=f"Comma-separated estimator ids from: {', '.join(ESTIMATOR_IDS)}")
@click.option("--snr", "snr_text", default=None, help="Comma-separated SNR grid (dB)")
@click.option("--seed", default=None, type=click.IntRange(min=0), help="Evaluation noise seed")
@click.option("--train-set", default=None,
              type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="Dataset the 'lmmse' estimator is fitted on")
@click.option("--covariance", default=None,
              type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="Prior covariance (.npy) for the 'oracle' estimator")
@click.option("--scenario", default=None, help="Scenario tag written to the CSV")
@click.option("--config", "config_file", default=None,
              type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="Plan YAML supplying estimators, snr_grid and noise_seed")
@output_options
def evaluate(
    test_set: Path,
    checkpoints: Sequence[Path],
    estimators: Optional[str],
    snr_text: Optional[str],
    seed: Optional[int],
    train_set: Optional[Path],
    covariance: Optional[Path],
    scenario: Optional[str],
    config_file: Optional[Path],
    out_dir: Path,
    force: bool,
    threads: int,
) -> None:
    """Sweep estimators over an SNR grid on the clean TEST_SET and write results.csv."""
    started = time.monotonic()
    with command_errors("Evaluation"):
        plan = parse_plan(config_file) if config_file is not None else ExperimentPlan()
        estimator_ids = _parse_csv_list(estimators) if estimators else list(plan.estimators)
        unknown = [e for e in estimator_ids if e not in ESTIMATOR_IDS]
        if unknown:
            raise UnknownEstimatorError(
                f"Unknown estimator '{unknown[0]}'; known ids: {', '.join(ESTIMATOR_IDS)}"
            )
        snr_grid = _parse_snr_grid(snr_text) if snr_text else list(plan.snr_grid)
        if "vae" in estimator_ids and not checkpoints:
            raise MissingCheckpointError("Estimator 'vae' needs --checkpoint")
        noise_seed = seed if seed is not None else plan.noise_seed
        results_path = out_dir / "results.csv"
        refuse_existing([results_path, out_dir / MANIFEST_NAME], force)

        test = load_dataset(test_set)
        tag = scenario if scenario is not None else _scenario_tag(test_set)

        lmmse_fit = None
        if "lmmse" in estimator_ids and train_set is not None:
            fit_ds = load_dataset(train_set)
            if fit_ds.kind == DatasetKind.CLEAN:
                lmmse_fit = fit_sample_lmmse(fit_ds)
            else:
                lmmse_fit = fit_sample_lmmse_noisy(fit_ds)
        cov = np.load(covariance) if covariance is not None else None

        others = {
            est_id: build_estimator(
                est_id, test.geometry, lmmse_fit=lmmse_fit, covariance=cov
            )
            for est_id in estimator_ids
            if est_id != "vae"
        }
        records = snr_sweep(
            others, test, snr_grid, noise_seed, scenario=tag, parallel_workers=threads
        )
        if "vae" in estimator_ids:
            for checkpoint in checkpoints:
                model = VaeModel.load(checkpoint)
                records += snr_sweep(
                    {"vae": build_estimator("vae", test.geometry, model=model)},
                    test,
                    snr_grid,
                    noise_seed,
                    scenario=tag,
                    extras={"checkpoint": checkpoint.stem},
                    parallel_workers=threads,
                )

        emit_csv(records, results_path)
        failures = [
            f"{r.estimator} @ {r.snr_db} dB: {r.extras.get('error', '')}"
            for r in records
            if r.failed
        ]
        inputs = [test_set, *checkpoints] + [p for p in (train_set, covariance) if p]
        write_manifest(
            out_dir,
            "eval",
            started,
            config={"estimators": estimator_ids, "snr_grid": snr_grid, "scenario": tag},
            seeds={"noise": noise_seed},
            inputs=inputs,
            outputs=[results_path],
            failures=failures,
        )
        console.print(f"[bold green]✓ Evaluation complete![/bold green] {len(records)} rows")
        console.print(f"Results: {results_path}")
        if failures:
            console.print(f"[yellow]{len(failures)} cell(s) failed; see the manifest[/yellow]")


@cli.command()
@click.argument("kind", type=click.Choice(["sweep", "size", "pretrain", "cross", "width"]))
@click.argument("plan_file", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--fail-fast", is_flag=True, help="Stop at the first failing arm")
@output_options
def study(
    kind: str, plan_file: Path, fail_fast: bool, out_dir: Path, force: bool, threads: int
) -> None:
    """Run the KIND experiment protocol described by PLAN_FILE and write <KIND>.csv.

    Failed arms are recorded in the manifest and make the exit code nonzero.
    """
    started = time.monotonic()
    with command_errors("Study"):
        results_path = out_dir / f"{kind}.csv"
        refuse_existing([results_path, out_dir / MANIFEST_NAME], force)
        console.print(f"[bold]Running '{kind}' study from {plan_file}[/bold]")

        with StudyRunner.from_file(
            plan_file, parallel_workers=threads, continue_on_failure=not fail_fast
        ) as runner:
            records = runner.run(kind)
            emit_csv(records, results_path)
            seeds = {"noise": runner.plan.noise_seed, "model": runner.plan.vae.seed}
            if runner.plan.data_seed is not None:
                seeds["data"] = runner.plan.data_seed
            write_manifest(
                out_dir,
                "study",
                started,
                config={"kind": kind, "plan": runner.plan.to_dict()},
                seeds=seeds,
                inputs=[plan_file],
                outputs=[results_path],
                failures=runner.failures,
            )
            failures = list(runner.failures)

        console.print(f"Results: {results_path} ({len(records)} rows)")
        if failures:
            console.print(
                f"[bold red]✗ {len(failures)} arm(s) failed:[/bold red] " + "; ".join(failures)
            )
            sys.exit(EXIT_FAILURE)
        console.print("[bold green]✓ Study complete![/bold green]")


if __name__ == "__main__":
    cli()
