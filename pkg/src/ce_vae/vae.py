"""Variational autoencoder with a structured conditional covariance decoder.

The encoder maps a noisy observation ``y`` (real/imaginary parts stacked as two channels)
to a diagonal Gaussian ``q(z|y)``. The decoder maps ``z`` to a conditional mean ``mu`` and
a positive spectrum ``c`` defining ``C = Q^H diag(c) Q``. Training minimizes the negative
single-sample ELBO against the noisy observation with the covariance shifted by the noise
variance.
"""

import copy
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from ce_vae.exceptions import (
    ArchitectureError,
    FileFormatError,
    MissingCheckpointError,
    NonFiniteError,
    NumericalError,
    ShapeError,
    UsageError,
)
from ce_vae.linalg import (
    apply_q,
    block_toeplitz_from_c,
    cholesky,
    cholesky_logdet,
    cholesky_solve,
    q_diag_quadratic,
)
from ce_vae.models import EpochRecord, UraGeometry, VaeConfig
from ce_vae.nn import LayerKind, LayerSpec, Sequential, Tensor
from ce_vae.nn.layers import conv1d_output_length, conv_transpose1d_output_length
from ce_vae.storage import load_checkpoint, save_checkpoint


logger = logging.getLogger(__name__)

NoiseVar = Union[float, np.ndarray]

# channels of the last transposed conv feeding the dense output head
HEAD_CHANNELS = 3


def width_sequence(base: int, multiplier: float = 1.75, blocks: int = 3) -> List[int]:
    """Channel widths: ``base`` then repeated multiply-and-round (half up) per block."""
    widths = [base]
    for _ in range(blocks):
        widths.append(int(math.floor(widths[-1] * multiplier + 0.5)))
    return widths


def encoder_specs(cfg: VaeConfig) -> List[LayerSpec]:
    """Layer list of the encoder.

    Raises:
        ArchitectureError: If N does not halve cleanly through the strided blocks
    """
    n = cfg.geometry.n
    factor = cfg.stride**cfg.blocks
    if n % factor != 0:
        raise ArchitectureError(
            f"Antenna count N={n} must be divisible by stride**blocks={factor}"
        )
    widths = width_sequence(cfg.base_channels, cfg.width_multiplier, cfg.blocks)
    padding = cfg.kernel_size // 2
    specs = [
        LayerSpec(kind=LayerKind.CONV1D, in_channels=2, out_channels=widths[0], kernel_size=1)
    ]
    length = n
    for c_in, c_out in zip(widths[:-1], widths[1:]):
        specs += [
            LayerSpec(
                kind=LayerKind.CONV1D,
                in_channels=c_in,
                out_channels=c_out,
                kernel_size=cfg.kernel_size,
                stride=cfg.stride,
                padding=padding,
            ),
            LayerSpec(kind=LayerKind.BATCHNORM1D, features=c_out),
            LayerSpec(kind=LayerKind.RELU),
        ]
        length = conv1d_output_length(length, cfg.kernel_size, cfg.stride, padding)
    if length != n // factor:
        raise ArchitectureError(
            f"Encoder reduces length {n} to {length}, expected {n // factor}; "
            f"kernel {cfg.kernel_size} does not halve cleanly"
        )
    specs += [
        LayerSpec(kind=LayerKind.FLATTEN),
        LayerSpec(
            kind=LayerKind.DENSE,
            in_features=widths[-1] * length,
            out_features=2 * cfg.latent_dim,
            zero_init=cfg.zero_init_heads,
        ),
    ]
    return specs


def decoder_specs(cfg: VaeConfig) -> List[LayerSpec]:
    """Layer list of the decoder; mirrors the encoder and ends in a 6N-output dense head."""
    n = cfg.geometry.n
    widths = width_sequence(cfg.base_channels, cfg.width_multiplier, cfg.blocks)
    padding = cfg.kernel_size // 2
    output_padding = cfg.stride - 1
    length = n // cfg.stride**cfg.blocks
    specs = [
        LayerSpec(
            kind=LayerKind.DENSE, in_features=cfg.latent_dim, out_features=widths[-1] * length
        ),
        LayerSpec(kind=LayerKind.UNFLATTEN, out_channels=widths[-1], length=length),
    ]
    reversed_widths = widths[::-1]
    for c_in, c_out in zip(reversed_widths[:-1], reversed_widths[1:]):
        specs += [
            LayerSpec(
                kind=LayerKind.CONV_TRANSPOSE1D,
                in_channels=c_in,
                out_channels=c_out,
                kernel_size=cfg.kernel_size,
                stride=cfg.stride,
                padding=padding,
                output_padding=output_padding,
            ),
            LayerSpec(kind=LayerKind.BATCHNORM1D, features=c_out),
            LayerSpec(kind=LayerKind.RELU),
        ]
        length = conv_transpose1d_output_length(
            length, cfg.kernel_size, cfg.stride, padding, output_padding
        )
    if length != n:
        raise ArchitectureError(f"Decoder restores length {length}, expected {n}")

    head_length = conv_transpose1d_output_length(
        length, cfg.kernel_size, cfg.stride, padding, output_padding
    )
    specs += [
        LayerSpec(
            kind=LayerKind.CONV_TRANSPOSE1D,
            in_channels=widths[0],
            out_channels=HEAD_CHANNELS,
            kernel_size=cfg.kernel_size,
            stride=cfg.stride,
            padding=padding,
            output_padding=output_padding,
        ),
        LayerSpec(kind=LayerKind.FLATTEN),
        LayerSpec(
            kind=LayerKind.DENSE,
            in_features=HEAD_CHANNELS * head_length,
            out_features=6 * n,
            zero_init=cfg.zero_init_heads,
        ),
    ]
    return specs


@dataclass
class LatentGaussian:
    """Batched ``q(z|y) = N(mu, diag(sigma^2))``; both arrays are (B, N_L)."""

    mu: np.ndarray
    sigma: np.ndarray


@dataclass
class ConditionalMoments:
    """Batched decoder outputs: complex ``mu`` (B, N) and positive spectrum ``c`` (B, 4N)."""

    mu: np.ndarray
    c: np.ndarray

    def covariance(self, geo: UraGeometry) -> np.ndarray:
        return block_toeplitz_from_c(self.c, geo)


def reparameterize(lat: LatentGaussian, eps: np.ndarray) -> np.ndarray:
    """``z = mu + sigma * eps``."""
    if eps.shape != lat.mu.shape:
        raise ShapeError(f"eps shape {eps.shape} does not match latent shape {lat.mu.shape}")
    return lat.mu + lat.sigma * eps


def kl_divergence(lat: LatentGaussian) -> np.ndarray:
    """Closed-form KL(q(z|y) || N(0, I)) per sample, shape (B,)."""
    var = lat.sigma**2
    return 0.5 * np.sum(-np.log(var) + lat.mu**2 + var - 1.0, axis=-1)


def _noise_column(noise_var: NoiseVar, batch: int) -> np.ndarray:
    var = np.broadcast_to(np.asarray(noise_var, dtype=np.float64), (batch,))
    if np.any(var < 0):
        raise UsageError("noise variance must be non-negative")
    return var


def _nll_terms(
    target: np.ndarray, mom: ConditionalMoments, noise_var: NoiseVar, geo: UraGeometry
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Loss values plus what the gradient needs: the Cholesky factor and ``C~^{-1} r``."""
    batch, n = target.shape
    cov = mom.covariance(geo)
    cov = cov + _noise_column(noise_var, batch)[:, None, None] * np.eye(n)
    lower = cholesky(cov)
    residual = target - mom.mu
    solved = cholesky_solve(lower, residual)
    quad = np.real(np.sum(residual.conj() * solved, axis=-1))
    values = n * math.log(math.pi) + cholesky_logdet(lower) + quad
    return values, lower, solved


def reconstruction_nll(
    target: np.ndarray, mom: ConditionalMoments, noise_var: NoiseVar, geo: UraGeometry
) -> np.ndarray:
    """Per-sample ``log det(pi * C~) + r^H C~^{-1} r`` with ``C~ = C + noise_var * I`` and
    ``r = target - mu``.

    Args:
        target: Complex array (B, N)
        mom: Decoder moments
        noise_var: Scalar or per-sample noise variance (>= 0)
        geo: Array geometry

    Returns:
        Array of shape (B,)

    Raises:
        FactorizationError: If ``C~`` is not positive definite
    """
    values, _, _ = _nll_terms(np.atleast_2d(target), mom, noise_var, geo)
    return values


def reconstruction_nll_grad(
    target: np.ndarray, mom: ConditionalMoments, noise_var: NoiseVar, geo: UraGeometry
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-sample NLL with gradients.

    Returns:
        ``(values, grad_mu, grad_c)``: ``grad_mu`` is complex (B, N) holding the gradient
        w.r.t. the real part in its real part and w.r.t. the imaginary part in its imaginary
        part; ``grad_c`` is real (B, 4N)
    """
    target = np.atleast_2d(target)
    values, lower, solved = _nll_terms(target, mom, noise_var, geo)
    n = target.shape[1]
    inverse = cholesky_solve(lower, np.broadcast_to(np.eye(n, dtype=complex), lower.shape))
    grad_c = np.real(q_diag_quadratic(inverse, geo)) - np.abs(apply_q(solved, geo)) ** 2
    grad_mu = -2.0 * solved
    return values, grad_mu, grad_c


class VaeModel:
    """Encoder/decoder stacks, their configuration and the training history."""

    def __init__(
        self,
        config: VaeConfig,
        encoder: Sequential,
        decoder: Sequential,
        history: Optional[List[EpochRecord]] = None,
    ):
        self.config = config
        self.encoder = encoder
        self.decoder = decoder
        self.history: List[EpochRecord] = list(history or [])
        self.eval()

    @property
    def geometry(self) -> UraGeometry:
        return self.config.geometry

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    def train(self, mode: bool = True) -> None:
        self.encoder.train(mode)
        self.decoder.train(mode)

    def eval(self) -> None:
        self.train(False)

    def parameters(self) -> List[Tensor]:
        return self.encoder.parameters() + self.decoder.parameters()

    def named_tensors(self) -> List[Tuple[str, Tensor]]:
        """Parameters and batch-norm running statistics in declaration order."""
        return self.encoder.named_tensors() + self.decoder.named_tensors()

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        self.encoder.zero_grad()
        self.decoder.zero_grad()

    def clone(self) -> "VaeModel":
        return copy.deepcopy(self)

    def _stack(self, y: np.ndarray) -> np.ndarray:
        y = np.atleast_2d(y)
        if y.shape[1] != self.geometry.n:
            raise ShapeError(f"Model expects length-{self.geometry.n} inputs, got {y.shape[1]}")
        return np.stack([y.real, y.imag], axis=1)

    def _split_latent(self, out: np.ndarray) -> LatentGaussian:
        sigma = np.exp(out[:, self.latent_dim :])
        if not np.all(np.isfinite(sigma)) or np.any(sigma <= 0):
            raise NonFiniteError(
                "Encoder sigma head overflowed", layer_index=len(self.encoder.layers) - 1
            )
        return LatentGaussian(mu=out[:, : self.latent_dim], sigma=sigma)

    def _split_moments(self, out: np.ndarray) -> ConditionalMoments:
        n = self.geometry.n
        c = np.exp(out[:, 2 * n :])
        if not np.all(np.isfinite(c)) or np.any(c <= 0):
            raise NonFiniteError(
                "Decoder covariance head overflowed", layer_index=len(self.decoder.layers) - 1
            )
        return ConditionalMoments(mu=out[:, :n] + 1j * out[:, n : 2 * n], c=c)

    def encode(self, y: np.ndarray) -> LatentGaussian:
        """Encode observations of shape (N,) or (B, N) into a batched latent Gaussian."""
        return self._split_latent(self.encoder.forward(self._stack(y)))

    def decode(self, z: np.ndarray) -> ConditionalMoments:
        """Decode latents of shape (N_L,) or (B, N_L) into batched conditional moments."""
        z = np.atleast_2d(z)
        if z.shape[1] != self.latent_dim:
            raise ShapeError(
                f"Decoder expects latent dimension {self.latent_dim}, got {z.shape[1]}"
            )
        return self._split_moments(self.decoder.forward(z))

    def elbo_loss(self, y: np.ndarray, noise_var: NoiseVar, eps: np.ndarray) -> float:
        """Mean negative single-sample ELBO over the batch (no gradients).

        Args:
            y: Noisy observations (B, N)
            noise_var: Scalar or per-sample noise variance
            eps: Standard-normal draws (B, N_L) used for reparameterization
        """
        lat = self.encode(y)
        mom = self.decode(reparameterize(lat, eps))
        nll = reconstruction_nll(np.atleast_2d(y), mom, noise_var, self.geometry)
        return float(np.mean(nll + kl_divergence(lat)))

    def loss_and_backward(self, y: np.ndarray, noise_var: NoiseVar, eps: np.ndarray) -> float:
        """Evaluate the mean negative ELBO and accumulate its gradient into all parameters.

        Raises:
            NumericalError: If the KL term comes out negative
        """
        y = np.atleast_2d(y)
        batch = y.shape[0]
        n = self.geometry.n
        latent = self.latent_dim

        enc_out = self.encoder.forward(self._stack(y))
        lat = self._split_latent(enc_out)
        z = reparameterize(lat, eps)
        dec_out = self.decoder.forward(z)
        mom = self._split_moments(dec_out)

        kl = kl_divergence(lat)
        if np.any(kl < -1e-10):
            raise NumericalError(f"KL divergence is negative ({kl.min():.3e})")
        nll, grad_mu, grad_c = reconstruction_nll_grad(y, mom, noise_var, self.geometry)

        grad_dec = np.empty_like(dec_out)
        grad_dec[:, :n] = grad_mu.real / batch
        grad_dec[:, n : 2 * n] = grad_mu.imag / batch
        grad_dec[:, 2 * n :] = grad_c * mom.c / batch
        grad_z = self.decoder.backward(grad_dec)

        grad_enc = np.empty_like(enc_out)
        grad_enc[:, :latent] = grad_z + lat.mu / batch
        grad_enc[:, latent:] = grad_z * eps * lat.sigma + (lat.sigma**2 - 1.0) / batch
        self.encoder.backward(grad_enc)
        return float(np.mean(nll + kl))

    def save(self, path: Path) -> None:
        header = {
            "config": self.config.to_dict(),
            "history": [record.model_dump() for record in self.history],
        }
        tensors = [(name, tensor.data) for name, tensor in self.named_tensors()]
        save_checkpoint(path, header, tensors)

    @classmethod
    def load(cls, path: Path) -> "VaeModel":
        """Rebuild a model from a checkpoint.

        Raises:
            MissingCheckpointError: If ``path`` does not exist
            FileFormatError: If the tensors do not match the stored architecture
        """
        path = Path(path)
        if not path.exists():
            raise MissingCheckpointError(f"Checkpoint not found: {path}")
        header, tensors = load_checkpoint(path)
        model = build_architecture(VaeConfig(**header["config"]))
        model.history = [EpochRecord(**record) for record in header.get("history", [])]
        expected = model.named_tensors()
        if [name for name, _ in tensors] != [name for name, _ in expected]:
            raise FileFormatError(f"{path}: tensor names do not match the stored architecture")
        for (name, data), (_, tensor) in zip(tensors, expected):
            if data.shape != tensor.shape:
                raise FileFormatError(
                    f"{path}: tensor '{name}' has shape {data.shape}, expected {tensor.shape}"
                )
            tensor.data[...] = data
        logger.info(f"Loaded model ({model.parameter_count()} parameters) from {path}")
        return model


def build_architecture(cfg: VaeConfig) -> VaeModel:
    """Build a freshly initialized model for ``cfg``.

    Raises:
        ArchitectureError: If the geometry is incompatible with the strided blocks
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.seed)))
    encoder = Sequential.from_specs(encoder_specs(cfg), rng, name="encoder")
    decoder = Sequential.from_specs(decoder_specs(cfg), rng, name="decoder")
    model = VaeModel(cfg, encoder, decoder)
    logger.debug(
        f"Built VAE: N={cfg.geometry.n}, N_L={cfg.latent_dim}, widths "
        f"{width_sequence(cfg.base_channels, cfg.width_multiplier, cfg.blocks)}, "
        f"{model.parameter_count()} parameters"
    )
    return model
