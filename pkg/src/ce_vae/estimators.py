"""Channel estimators: VAE-based conditional LMMSE, LS, sample-covariance LMMSE,
genie-aided OMP and the Gaussian-prior oracle.

Every estimator works on batches: ``estimate(y, noise_var, h_true=None)`` takes
observations of shape (T, N), a scalar or per-sample noise variance, and returns estimates
of shape (T, N).
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import ClassVar, List, Optional, Union

import numpy as np

from ce_vae.channels import ChannelDataset, DatasetKind
from ce_vae.exceptions import (
    ConfigurationError,
    DatasetError,
    EstimationError,
    FactorizationError,
    MissingCheckpointError,
    ShapeError,
    UnknownEstimatorError,
)
from ce_vae.linalg import cholesky, cholesky_solve, is_hermitian
from ce_vae.models import UraGeometry, VaeConfig
from ce_vae.vae import VaeModel, build_architecture


logger = logging.getLogger(__name__)

NoiseVar = Union[float, np.ndarray]

ESTIMATOR_IDS = ("vae", "ls", "lmmse", "genie-omp", "untrained", "oracle")

_CHUNK = 256


def _per_sample(noise_var: NoiseVar, count: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(noise_var, dtype=np.float64), (count,))


def lmmse_filter(
    mean: np.ndarray, cov: np.ndarray, y: np.ndarray, noise_var: NoiseVar
) -> np.ndarray:
    """``mu + C (C + noise_var I)^{-1} (y - mu)`` row by row; rows with zero noise return y.

    Samples sharing one noise variance share one Cholesky factorization.
    """
    y = np.atleast_2d(y)
    n = y.shape[1]
    variances = _per_sample(noise_var, y.shape[0])
    out = y.astype(np.complex128, copy=True)
    for var in np.unique(variances):
        if var == 0:
            continue
        rows = variances == var
        lower = cholesky(cov + var * np.eye(n))
        solved = cholesky_solve(lower, (y[rows] - mean).T)
        out[rows] = mean + (cov @ solved).T
    return out


class Estimator(ABC):
    """Common batch interface."""

    estimator_id: ClassVar[str]
    needs_truth: ClassVar[bool] = False

    @abstractmethod
    def estimate(
        self, y: np.ndarray, noise_var: NoiseVar, h_true: Optional[np.ndarray] = None
    ) -> np.ndarray:
        raise NotImplementedError


class LsEstimator(Estimator):
    """Least squares: with an identity system matrix the estimate is the observation."""

    estimator_id = "ls"

    def estimate(
        self, y: np.ndarray, noise_var: NoiseVar, h_true: Optional[np.ndarray] = None
    ) -> np.ndarray:
        return np.array(np.atleast_2d(y), dtype=np.complex128)


def ls_estimate(y: np.ndarray) -> np.ndarray:
    return LsEstimator().estimate(y, 0.0)


@dataclass
class FittedLmmse:
    """Global sample mean and covariance of a training set."""

    mean: np.ndarray
    covariance: np.ndarray
    count: int


def fit_sample_lmmse(ds: ChannelDataset) -> FittedLmmse:
    """Fit mean and unbiased sample covariance on clean channels.

    Raises:
        DatasetError: If ``ds`` is not clean or has fewer than two samples
    """
    if ds.kind != DatasetKind.CLEAN:
        raise DatasetError("fit_sample_lmmse expects clean channels; use fit_sample_lmmse_noisy")
    if ds.count < 2:
        raise DatasetError(f"Sample covariance needs at least 2 samples, got {ds.count}")
    mean = ds.samples.mean(axis=0)
    centered = ds.samples - mean
    cov = centered.T @ centered.conj() / (ds.count - 1)
    cov = 0.5 * (cov + cov.conj().T)
    logger.info(f"Fitted sample LMMSE on {ds.count} clean samples")
    return FittedLmmse(mean=mean, covariance=cov, count=ds.count)


def fit_sample_lmmse_noisy(ds: ChannelDataset) -> FittedLmmse:
    """Fit on noisy observations: sample covariance minus the mean noise variance,
    with negative eigenvalues clipped to zero."""
    if ds.kind != DatasetKind.NOISY:
        raise DatasetError("fit_sample_lmmse_noisy expects noisy observations")
    if ds.count < 2:
        raise DatasetError(f"Sample covariance needs at least 2 samples, got {ds.count}")
    mean = ds.samples.mean(axis=0)
    centered = ds.samples - mean
    cov = centered.T @ centered.conj() / (ds.count - 1)
    cov = 0.5 * (cov + cov.conj().T) - float(np.mean(ds.noise_vars)) * np.eye(ds.n)
    eigvals, eigvecs = np.linalg.eigh(cov)
    clipped = int(np.sum(eigvals < 0))
    if clipped:
        logger.debug(f"Clipped {clipped} negative eigenvalues of the noisy-fit covariance")
    cov = (eigvecs * np.maximum(eigvals, 0.0)) @ eigvecs.conj().T
    logger.info(f"Fitted noisy sample LMMSE on {ds.count} observations")
    return FittedLmmse(mean=mean, covariance=cov, count=ds.count)


class SampleLmmseEstimator(Estimator):
    estimator_id = "lmmse"

    def __init__(self, fitted: FittedLmmse):
        if not is_hermitian(fitted.covariance):
            raise ConfigurationError("Fitted covariance is not Hermitian")
        self.fitted = fitted

    def estimate(
        self, y: np.ndarray, noise_var: NoiseVar, h_true: Optional[np.ndarray] = None
    ) -> np.ndarray:
        return lmmse_filter(self.fitted.mean, self.fitted.covariance, y, noise_var)


def sample_lmmse_estimate(fitted: FittedLmmse, y: np.ndarray, noise_var: NoiseVar) -> np.ndarray:
    return SampleLmmseEstimator(fitted).estimate(y, noise_var)


class OracleCmeEstimator(Estimator):
    """Conditional mean for a known zero-mean Gaussian prior ``N(0, C0)``."""

    estimator_id = "oracle"

    def __init__(self, covariance: np.ndarray):
        self.covariance = covariance
        self.mean = np.zeros(covariance.shape[0], dtype=np.complex128)

    def estimate(
        self, y: np.ndarray, noise_var: NoiseVar, h_true: Optional[np.ndarray] = None
    ) -> np.ndarray:
        return lmmse_filter(self.mean, self.covariance, y, noise_var)


def oracle_cme(covariance: np.ndarray, y: np.ndarray, noise_var: NoiseVar) -> np.ndarray:
    return OracleCmeEstimator(covariance).estimate(y, noise_var)


def vae_estimate(model: VaeModel, y: np.ndarray, noise_var: NoiseVar) -> np.ndarray:
    """Conditional LMMSE with moments decoded at the encoder mean.

    ``h = mu(z) + C(z) (C(z) + noise_var I)^{-1} (y - mu(z))`` with ``z = mu_phi(y)``.
    Rows with zero noise variance return ``y``.

    Raises:
        EstimationError: Naming the sample whose covariance could not be factored
    """
    model.eval()
    y = np.atleast_2d(np.asarray(y, dtype=np.complex128))
    variances = _per_sample(noise_var, y.shape[0])
    n = model.geometry.n
    out = y.copy()
    for start in range(0, y.shape[0], _CHUNK):
        stop = min(start + _CHUNK, y.shape[0])
        block = y[start:stop]
        var = variances[start:stop]
        moments = model.decode(model.encode(block).mu)
        cov = moments.covariance(model.geometry)
        residual = block - moments.mu
        try:
            lower = cholesky(cov + var[:, None, None] * np.eye(n))
        except FactorizationError as e:
            index = start + (e.matrix_index or 0)
            raise EstimationError(f"VAE estimate failed for sample {index}: {e}", index) from e
        solved = cholesky_solve(lower, residual)
        estimate = moments.mu + np.einsum("bnm,bm->bn", cov, solved)
        noiseless = var == 0
        estimate[noiseless] = block[noiseless]
        out[start:stop] = estimate
    return out


class VaeEstimator(Estimator):
    estimator_id = "vae"

    def __init__(self, model: VaeModel):
        self.model = model

    def estimate(
        self, y: np.ndarray, noise_var: NoiseVar, h_true: Optional[np.ndarray] = None
    ) -> np.ndarray:
        return vae_estimate(self.model, y, noise_var)


class UntrainedVaeEstimator(VaeEstimator):
    """VAE with zeroed output heads: identity covariance and zero mean, i.e. y/(1+noise)."""

    estimator_id = "untrained"

    def __init__(self, geometry: UraGeometry, base_config: Optional[VaeConfig] = None):
        config = (base_config or VaeConfig(geometry=geometry)).model_copy(
            update={"geometry": geometry, "zero_init_heads": True}
        )
        super().__init__(build_architecture(config))


@dataclass
class OmpDictionary:
    """Unit-norm atoms (columns) of an oversampled 2-D DFT grid."""

    atoms: np.ndarray
    oversampling: int

    @property
    def size(self) -> int:
        return int(self.atoms.shape[1])


def build_omp_dictionary(geo: UraGeometry, oversampling: int = 2) -> OmpDictionary:
    """Kronecker product of per-axis ``oversampling``-times oversampled DFT grids.

    With the default factor 2 per axis the grid has ``4N`` atoms.
    """
    if oversampling < 1:
        raise ConfigurationError(f"oversampling must be >= 1, got {oversampling}")

    def grid(m: int) -> np.ndarray:
        rows = np.arange(m)[:, None]
        cols = np.arange(oversampling * m)[None, :]
        return np.exp(2j * np.pi * rows * cols / (oversampling * m)) / np.sqrt(m)

    return OmpDictionary(atoms=np.kron(grid(geo.n_v), grid(geo.n_h)), oversampling=oversampling)


def omp_path(atoms: np.ndarray, y: np.ndarray, k_max: int, tol: float = 1e-12) -> List[np.ndarray]:
    """OMP iterates for sparsity 1..k_max.

    Each iterate is the orthogonal projection of ``y`` onto the atoms selected so far; the
    path stops early once the residual vanishes.
    """
    basis: List[np.ndarray] = []
    selected: List[int] = []
    estimate = np.zeros_like(y, dtype=np.complex128)
    residual = y.astype(np.complex128, copy=True)
    norm_y = np.linalg.norm(y)
    iterates = []
    for _ in range(k_max):
        correlation = np.abs(atoms.conj().T @ residual)
        correlation[selected] = -1.0
        index = int(np.argmax(correlation))
        direction = atoms[:, index].copy()
        for u in basis:
            direction -= u * np.vdot(u, direction)
        length = np.linalg.norm(direction)
        if length <= tol:
            break
        direction /= length
        basis.append(direction)
        selected.append(index)
        estimate = estimate + direction * np.vdot(direction, y)
        residual = y - estimate
        iterates.append(estimate)
        if np.linalg.norm(residual) <= tol * max(norm_y, tol):
            break
    return iterates


def genie_omp_estimate(
    dictionary: OmpDictionary, y: np.ndarray, h_true: np.ndarray, k_max: Optional[int] = None
) -> np.ndarray:
    """Per-sample OMP with the sparsity picked by the true channel.

    Args:
        dictionary: OMP dictionary
        y: Observations (T, N) or (N,)
        h_true: True channels, same shape as ``y``
        k_max: Largest sparsity tried (default 2N, clamped to the atom count)
    """
    y2 = np.atleast_2d(y)
    h2 = np.atleast_2d(h_true)
    if y2.shape != h2.shape:
        raise ShapeError(f"y {y2.shape} and h_true {h2.shape} must have the same shape")
    n = y2.shape[1]
    k_max = 2 * n if k_max is None else k_max
    if k_max > dictionary.size:
        logger.warning(f"k_max {k_max} exceeds {dictionary.size} atoms; clamping")
        k_max = dictionary.size

    out = np.zeros_like(y2, dtype=np.complex128)
    for i, (obs, truth) in enumerate(zip(y2, h2)):
        iterates = omp_path(dictionary.atoms, obs, k_max)
        if not iterates:
            continue
        errors = [np.linalg.norm(truth - est) for est in iterates]
        out[i] = iterates[int(np.argmin(errors))]
    return out if np.ndim(y) > 1 else out[0]


class GenieOmpEstimator(Estimator):
    estimator_id = "genie-omp"
    needs_truth = True

    def __init__(self, dictionary: OmpDictionary, k_max: Optional[int] = None):
        self.dictionary = dictionary
        self.k_max = k_max

    def estimate(
        self, y: np.ndarray, noise_var: NoiseVar, h_true: Optional[np.ndarray] = None
    ) -> np.ndarray:
        if h_true is None:
            raise ConfigurationError("genie-omp needs the true channels")
        return genie_omp_estimate(self.dictionary, y, h_true, self.k_max)


def build_estimator(
    estimator_id: str,
    geometry: UraGeometry,
    model: Optional[VaeModel] = None,
    lmmse_fit: Optional[FittedLmmse] = None,
    covariance: Optional[np.ndarray] = None,
    omp_oversampling: int = 2,
) -> Estimator:
    """Instantiate an estimator by id.

    Raises:
        UnknownEstimatorError: If ``estimator_id`` is not registered
        MissingCheckpointError: If ``vae`` is requested without a model
        ConfigurationError: If ``lmmse``/``oracle`` lack their fit/covariance
    """
    if estimator_id not in ESTIMATOR_IDS:
        raise UnknownEstimatorError(
            f"Unknown estimator '{estimator_id}'; known ids: {', '.join(ESTIMATOR_IDS)}"
        )
    if estimator_id == "vae":
        if model is None:
            raise MissingCheckpointError("Estimator 'vae' needs a trained model checkpoint")
        return VaeEstimator(model)
    if estimator_id == "ls":
        return LsEstimator()
    if estimator_id == "lmmse":
        if lmmse_fit is None:
            raise ConfigurationError("Estimator 'lmmse' needs a training set to fit on")
        return SampleLmmseEstimator(lmmse_fit)
    if estimator_id == "genie-omp":
        return GenieOmpEstimator(build_omp_dictionary(geometry, omp_oversampling))
    if estimator_id == "untrained":
        return UntrainedVaeEstimator(geometry)
    if covariance is None:
        raise ConfigurationError("Estimator 'oracle' needs the prior covariance")
    return OracleCmeEstimator(covariance)
