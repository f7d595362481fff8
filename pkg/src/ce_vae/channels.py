"""Synthetic channel generation, normalization and AWGN observation.

Seeding discipline: every sample draws from its own Philox stream keyed by
``(scenario seed, split, sample index)``, so splits are disjoint and results do not depend
on how generation is scheduled across workers.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import IntEnum
from typing import Callable, Optional, Union

import numpy as np

from ce_vae.exceptions import DatasetError, ShapeError
from ce_vae.models import GaussianPriorConfig, ScenarioConfig, SnrPolicy, UraGeometry


logger = logging.getLogger(__name__)

SPLITS = {"train": 0, "val": 1, "test": 2}
_NOISE_STREAM = 3
_OBSERVE_STREAM = 4


class DatasetKind(IntEnum):
    CLEAN = 0
    NOISY = 1


@dataclass
class ChannelDataset:
    """Ordered channel (or observation) vectors for one array geometry.

    ``samples`` has shape (T, N); ``noise_vars`` holds the per-sample noise variance of
    noisy datasets and is ``None`` for clean ones.
    """

    geometry: UraGeometry
    kind: DatasetKind
    samples: np.ndarray
    noise_vars: Optional[np.ndarray] = None
    normalized: bool = False
    scenario: str = ""

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.complex128)
        if self.samples.ndim != 2 or self.samples.shape[1] != self.geometry.n:
            raise ShapeError(
                f"Dataset samples must have shape (T, {self.geometry.n}), got {self.samples.shape}"
            )
        if not np.all(np.isfinite(self.samples)):
            raise DatasetError("Dataset holds non-finite samples")
        if self.kind == DatasetKind.NOISY:
            if self.noise_vars is None:
                raise DatasetError("Noisy datasets need per-sample noise variances")
            self.noise_vars = np.asarray(self.noise_vars, dtype=np.float64)
            if self.noise_vars.shape != (self.count,):
                raise DatasetError(
                    f"Expected {self.count} noise variances, got shape {self.noise_vars.shape}"
                )
            if np.any(self.noise_vars < 0) or not np.all(np.isfinite(self.noise_vars)):
                raise DatasetError("Noise variances must be finite and non-negative")
        elif self.noise_vars is not None:
            raise DatasetError("Clean datasets carry no noise variances")

    @property
    def count(self) -> int:
        return int(self.samples.shape[0])

    @property
    def n(self) -> int:
        return self.geometry.n

    def mean_power(self) -> float:
        """``(1/(T*N)) * sum ||h_i||^2``."""
        return float(np.sum(np.abs(self.samples) ** 2) / self.samples.size)

    def subset(self, count: int) -> "ChannelDataset":
        """First ``count`` samples; prefixes of one dataset are nested by construction."""
        if not 0 <= count <= self.count:
            raise DatasetError(f"Cannot take {count} samples from a dataset of {self.count}")
        noise_vars = None if self.noise_vars is None else self.noise_vars[:count].copy()
        return replace(self, samples=self.samples[:count].copy(), noise_vars=noise_vars)


def sample_rng(seed: int, split: int, index: int) -> np.random.Generator:
    """Independent Philox stream for one sample of one split."""
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence(entropy=seed, spawn_key=(split, index)))
    )


def noise_rng(seed: int, snr_db: float) -> np.random.Generator:
    """Noise stream shared by all estimators evaluated at one SNR."""
    code = int(np.float64(snr_db).view(np.uint64))
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence(entropy=seed, spawn_key=(_NOISE_STREAM, code)))
    )


def steering_vector(
    geo: UraGeometry,
    azimuth: Union[float, np.ndarray],
    elevation: Union[float, np.ndarray],
) -> np.ndarray:
    """URA far-field response: Kronecker product of vertical and horizontal phase ramps.

    The vertical ramp advances by ``2*pi*spacing_v*sin(elevation)`` per row and the
    horizontal one by ``2*pi*spacing_h*cos(elevation)*sin(azimuth)`` per column.

    Args:
        geo: Array geometry
        azimuth: Azimuth angle(s) in radians, scalar or shape (L,)
        elevation: Elevation angle(s) in radians, same shape as ``azimuth``

    Returns:
        Unit-modulus vector of shape (N,), or (L, N) for array input
    """
    az = np.atleast_1d(np.asarray(azimuth, dtype=np.float64))
    el = np.atleast_1d(np.asarray(elevation, dtype=np.float64))
    m = np.arange(geo.n_v)
    n = np.arange(geo.n_h)
    vertical = np.exp(2j * np.pi * geo.spacing_v * np.outer(np.sin(el), m))
    horizontal = np.exp(2j * np.pi * geo.spacing_h * np.outer(np.cos(el) * np.sin(az), n))
    response = (vertical[:, :, None] * horizontal[:, None, :]).reshape(az.size, geo.n)
    return response[0] if np.ndim(azimuth) == 0 else response


def sum_of_paths(
    gains: np.ndarray, steering: np.ndarray, delays: np.ndarray, carrier_frequency: float
) -> np.ndarray:
    """``h = sum_l g_l * a_l * exp(-2j*pi*f_c*tau_l)`` for steering rows ``a_l``."""
    phasors = gains * np.exp(-2j * np.pi * carrier_frequency * delays)
    return phasors @ steering


def generate_channel(cfg: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    """Draw one multipath channel.

    Path count is uniform in ``[min_paths, max_paths]``. Delays are uniform in
    ``[0, delay_spread]`` and path powers decay as ``exp(-gain_decay * tau / delay_spread)``,
    normalized to unit total power per channel. A LOS draw pins path 0 to zero delay and
    the mean angles.
    """
    los = rng.random() < cfg.los_probability
    paths = int(rng.integers(cfg.min_paths, cfg.max_paths + 1))
    mean_az = rng.uniform(*cfg.azimuth_range)
    mean_el = rng.uniform(*cfg.elevation_range)
    azimuths = mean_az + cfg.azimuth_spread * rng.standard_normal(paths)
    elevations = mean_el + cfg.elevation_spread * rng.standard_normal(paths)
    delays = rng.uniform(0.0, cfg.delay_spread, size=paths)
    phases = rng.uniform(0.0, 2 * np.pi, size=paths)
    if los:
        azimuths[0], elevations[0], delays[0] = mean_az, mean_el, 0.0

    if cfg.delay_spread > 0:
        powers = np.exp(-cfg.gain_decay * delays / cfg.delay_spread)
    else:
        powers = np.ones(paths)
    gains = np.sqrt(powers / powers.sum()) * np.exp(1j * phases)
    steering = steering_vector(cfg.geometry, azimuths, elevations)
    return sum_of_paths(gains, steering, delays, cfg.carrier_frequency)


def gaussian_covariance(cfg: GaussianPriorConfig) -> np.ndarray:
    """Seeded low-rank-plus-identity covariance ``C0`` with ``trace(C0) = N``."""
    n = cfg.geometry.n
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.seed)))
    shape = (n, cfg.rank)
    factor = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)
    cov = factor @ factor.conj().T / cfg.rank + cfg.loading * np.eye(n)
    cov *= n / np.trace(cov).real
    return 0.5 * (cov + cov.conj().T)


def generate_gaussian_channel(sqrt_cov: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw ``h ~ CN(0, L L^H)`` for a covariance factor ``L``."""
    n = sqrt_cov.shape[0]
    w = (rng.standard_normal(n) + 1j * rng.standard_normal(n)) / np.sqrt(2.0)
    return sqrt_cov @ w


class ChannelGenerator:
    """Generates clean datasets for one scenario, optionally across worker threads."""

    def __init__(
        self,
        scenario: Union[ScenarioConfig, GaussianPriorConfig],
        seed: Optional[int] = None,
        parallel_workers: int = 1,
    ):
        """Initialize ChannelGenerator.

        Args:
            scenario: Multipath scenario or Gaussian prior
            seed: Overrides the scenario seed when given
            parallel_workers: Threads used for generation (default: 1)
        """
        self.scenario = scenario
        self.seed = scenario.seed if seed is None else seed
        self.parallel_workers = max(1, parallel_workers)
        self.covariance: Optional[np.ndarray] = None
        self._draw: Callable[[np.random.Generator], np.ndarray]
        if isinstance(scenario, GaussianPriorConfig):
            self.covariance = gaussian_covariance(scenario)
            sqrt_cov = np.linalg.cholesky(self.covariance)
            self._draw = lambda rng: generate_gaussian_channel(sqrt_cov, rng)
        else:
            self._draw = lambda rng: generate_channel(scenario, rng)

    @property
    def geometry(self) -> UraGeometry:
        return self.scenario.geometry

    def _generate_range(self, split: int, start: int, stop: int) -> np.ndarray:
        return np.stack([self._draw(sample_rng(self.seed, split, i)) for i in range(start, stop)])

    def generate(self, count: int, split: str = "train") -> ChannelDataset:
        """Generate ``count`` clean, unnormalized channels for ``split``.

        Raises:
            DatasetError: If ``split`` is unknown or ``count`` < 1
        """
        if split not in SPLITS:
            raise DatasetError(f"Unknown split '{split}'; expected one of {', '.join(SPLITS)}")
        if count < 1:
            raise DatasetError(f"Sample count must be positive, got {count}")

        split_id = SPLITS[split]
        logger.info(
            f"Generating {count} '{self.scenario.scenario_id}' channels for split '{split}'"
        )
        if self.parallel_workers == 1 or count < 2 * self.parallel_workers:
            samples = self._generate_range(split_id, 0, count)
        else:
            bounds = np.linspace(0, count, self.parallel_workers + 1).astype(int)
            with ThreadPoolExecutor(max_workers=self.parallel_workers) as executor:
                chunks = executor.map(
                    lambda b: self._generate_range(split_id, b[0], b[1]),
                    zip(bounds[:-1], bounds[1:]),
                )
                samples = np.concatenate(list(chunks))
        return ChannelDataset(
            geometry=self.geometry,
            kind=DatasetKind.CLEAN,
            samples=samples,
            scenario=self.scenario.scenario_id,
        )


def normalization_scale(ds: ChannelDataset) -> float:
    """Global factor that brings the mean per-entry power of ``ds`` to one.

    Raises:
        DatasetError: If the dataset has zero energy
    """
    power = ds.mean_power()
    if power <= 0:
        raise DatasetError("Cannot normalize an all-zero dataset")
    return float(1.0 / np.sqrt(power))


def normalize_dataset(ds: ChannelDataset) -> ChannelDataset:
    """Scale a clean dataset so ``(1/(T*N)) * sum ||h_i||^2 = 1``.

    Raises:
        DatasetError: If ``ds`` holds noisy observations or has zero energy
    """
    if ds.kind != DatasetKind.CLEAN:
        raise DatasetError("Only clean channel datasets can be normalized")
    scale = normalization_scale(ds)
    logger.debug(f"Normalizing dataset of {ds.count} samples with scale {scale:.6g}")
    return replace(ds, samples=ds.samples * scale, normalized=True)


def noise_variance(snr_db: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """``10^(-snr_db/10)`` under the unit-power normalization."""
    var = 10.0 ** (-np.asarray(snr_db, dtype=np.float64) / 10.0)
    return var if var.ndim else float(var)


def add_awgn(
    h: np.ndarray, snr_db: Union[float, np.ndarray], rng: np.random.Generator
) -> tuple:
    """Corrupt channels with circularly-symmetric complex Gaussian noise.

    Args:
        h: Channel(s) of shape (N,) or (T, N)
        snr_db: Scalar SNR or one SNR per row of ``h``
        rng: Noise generator

    Returns:
        Tuple ``(y, noise_var)``; ``noise_var`` is a float or an array of shape (T,)
    """
    var = noise_variance(snr_db)
    scale = np.sqrt(np.asarray(var) / 2.0)
    if np.ndim(scale):
        scale = scale[:, None]
    noise = scale * (rng.standard_normal(h.shape) + 1j * rng.standard_normal(h.shape))
    return h + noise, var


def observe(
    ds: ChannelDataset, policy: SnrPolicy, seed: int, split: str = "train"
) -> ChannelDataset:
    """Turn clean channels into noisy observations with per-sample noise variances."""
    if ds.kind != DatasetKind.CLEAN:
        raise DatasetError("observe() expects a clean dataset")
    rng = np.random.Generator(
        np.random.Philox(
            np.random.SeedSequence(entropy=seed, spawn_key=(_OBSERVE_STREAM, SPLITS[split]))
        )
    )
    snrs = policy.draw(rng, ds.count)
    y, var = add_awgn(ds.samples, snrs, rng)
    return replace(ds, kind=DatasetKind.NOISY, samples=y, noise_vars=np.asarray(var))
