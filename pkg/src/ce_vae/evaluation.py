"""NMSE evaluation, SNR sweeps and CSV result files."""

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import TYPE_CHECKING, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from ce_vae.channels import ChannelDataset, DatasetKind, add_awgn, noise_rng
from ce_vae.exceptions import CeVaeError, DatasetError, ShapeError
from ce_vae.models import EpochRecord, EvalRecord

if TYPE_CHECKING:
    from ce_vae.estimators import Estimator


logger = logging.getLogger(__name__)

CSV_HEADER = ["estimator", "scenario", "snr_db", "nmse", "samples", "extras"]
HISTORY_HEADER = ["epoch", "train_loss", "val_nmse"]


def nmse(estimates: np.ndarray, truths: np.ndarray) -> float:
    """``(1/(T*N)) * sum_i ||h_i - h_hat_i||^2``.

    Raises:
        ShapeError: If the arrays differ in shape or are empty
    """
    estimates = np.atleast_2d(estimates)
    truths = np.atleast_2d(truths)
    if estimates.shape != truths.shape:
        raise ShapeError(f"estimates {estimates.shape} and truths {truths.shape} differ")
    if truths.size == 0:
        raise ShapeError("nmse needs at least one sample")
    return float(np.sum(np.abs(truths - estimates) ** 2) / truths.size)


def _clean_value(value: object) -> str:
    return str(value).replace(";", ",").replace("=", ":").replace("\n", " ")


def _run_cell(
    estimator_id: str,
    estimator: "Estimator",
    snr_db: float,
    y: np.ndarray,
    noise_var: float,
    test: ChannelDataset,
    scenario: str,
    extras: Mapping[str, str],
) -> EvalRecord:
    try:
        estimates = estimator.estimate(y, noise_var, h_true=test.samples)
        value: Optional[float] = nmse(estimates, test.samples)
        if not np.isfinite(value):
            raise ShapeError(f"non-finite NMSE {value}")
        cell_extras = dict(extras)
    except (CeVaeError, np.linalg.LinAlgError) as e:
        logger.error(f"Estimator '{estimator_id}' failed at {snr_db} dB: {e}")
        value = None
        cell_extras = {**extras, "error": _clean_value(e)}
    return EvalRecord(
        estimator=estimator_id,
        scenario=scenario,
        snr_db=snr_db,
        nmse=value,
        samples=test.count,
        extras=cell_extras,
    )


def sort_records(records: Iterable[EvalRecord]) -> List[EvalRecord]:
    """Canonical order: estimator, then SNR; ties keep their input order."""
    return sorted(records, key=lambda r: (r.estimator, r.snr_db))


def snr_sweep(
    estimators: Mapping[str, "Estimator"],
    test: ChannelDataset,
    snr_grid: Sequence[float],
    noise_seed: int,
    scenario: Optional[str] = None,
    extras: Optional[Mapping[str, str]] = None,
    parallel_workers: int = 1,
) -> List[EvalRecord]:
    """Evaluate every estimator at every SNR on one clean test set.

    The noise at each SNR comes from ``noise_rng(noise_seed, snr)`` and is shared by all
    estimators. A failing cell is recorded with ``nmse=None`` and the sweep continues.

    Args:
        estimators: Estimators keyed by id
        test: Clean, normalized test channels
        snr_grid: SNRs in dB
        noise_seed: Seed of the evaluation noise
        scenario: Tag recorded in each row (default: the dataset's)
        extras: Key/values copied into every row
        parallel_workers: Threads evaluating (estimator, SNR) cells

    Returns:
        Records in canonical order
    """
    if test.kind != DatasetKind.CLEAN:
        raise DatasetError("snr_sweep needs a clean test set")
    scenario = scenario if scenario is not None else test.scenario
    extras = dict(extras or {})

    observations: Dict[float, Tuple[np.ndarray, float]] = {}
    for snr in snr_grid:
        y, var = add_awgn(test.samples, snr, noise_rng(noise_seed, snr))
        observations[snr] = (y, var)

    cells = [(est_id, snr) for est_id in estimators for snr in snr_grid]
    logger.info(
        f"Sweeping {len(estimators)} estimator(s) over {len(snr_grid)} SNR(s) on "
        f"{test.count} '{scenario}' samples"
    )

    def run(cell: Tuple[str, float]) -> EvalRecord:
        est_id, snr = cell
        y, var = observations[snr]
        record = _run_cell(est_id, estimators[est_id], snr, y, var, test, scenario, extras)
        logger.debug(f"{est_id} @ {snr} dB: NMSE {record.nmse}")
        return record

    if parallel_workers > 1:
        with ThreadPoolExecutor(max_workers=parallel_workers) as executor:
            records = list(executor.map(run, cells))
    else:
        records = [run(cell) for cell in cells]
    return sort_records(records)


def _format_extras(extras: Mapping[str, str]) -> str:
    return ";".join(f"{key}={_clean_value(extras[key])}" for key in sorted(extras))


def _parse_extras(text: str) -> Dict[str, str]:
    if not text:
        return {}
    return dict(item.split("=", 1) for item in text.split(";"))


def emit_csv(records: Iterable[EvalRecord], path: Path) -> None:
    """Write records in canonical order.

    Floats are written with ``repr`` so parsing recovers them exactly. Extras are encoded
    as ``key=value`` pairs joined by ``;`` with sorted keys; ``;`` and ``=`` inside values
    are replaced by ``,`` and ``:``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in sort_records(records):
            writer.writerow(
                [
                    r.estimator,
                    r.scenario,
                    repr(float(r.snr_db)),
                    "" if r.nmse is None else repr(float(r.nmse)),
                    r.samples,
                    _format_extras(r.extras),
                ]
            )
    logger.info(f"Wrote results to {path}")


def read_csv(path: Path) -> List[EvalRecord]:
    """Parse a file written by ``emit_csv``."""
    with open(path, "r", newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != CSV_HEADER:
            raise DatasetError(f"{path}: unexpected header {reader.fieldnames}")
        return [
            EvalRecord(
                estimator=row["estimator"],
                scenario=row["scenario"],
                snr_db=float(row["snr_db"]),
                nmse=float(row["nmse"]) if row["nmse"] else None,
                samples=int(row["samples"]),
                extras=_parse_extras(row["extras"]),
            )
            for row in reader
        ]


def emit_history_csv(history: Iterable[EpochRecord], path: Path) -> None:
    """Write one ``epoch,train_loss,val_nmse`` row per epoch."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(HISTORY_HEADER)
        for record in history:
            writer.writerow([record.epoch, repr(record.train_loss), repr(record.val_nmse)])
