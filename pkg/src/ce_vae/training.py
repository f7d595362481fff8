"""Mini-batch Adam training with validation-based early stopping."""

import logging
from typing import Callable, List, Optional

import numpy as np

from ce_vae.channels import ChannelDataset, DatasetKind, add_awgn, noise_rng
from ce_vae.estimators import vae_estimate
from ce_vae.evaluation import nmse
from ce_vae.exceptions import (
    ConfigConflictError,
    DatasetError,
    NumericalError,
    TrainingAbortedError,
)
from ce_vae.models import EpochRecord, VaeConfig
from ce_vae.nn import Adam
from ce_vae.vae import VaeModel


logger = logging.getLogger(__name__)


class Trainer:
    """Trains a ``VaeModel`` in place on noisy observations.

    Each epoch shuffles the training set with a stream keyed by ``(seed, epoch)``, so a
    resumed run draws the same batches it would have drawn uninterrupted. The optimizer
    state is always fresh.
    """

    def __init__(
        self,
        model: VaeModel,
        config: Optional[VaeConfig] = None,
        on_epoch: Optional[Callable[[EpochRecord], None]] = None,
    ):
        """Initialize Trainer.

        Args:
            model: Model to train (mutated in place)
            config: Training hyperparameters (default: the model's own config)
            on_epoch: Called with every finished epoch record
        """
        self.model = model
        self.config = config or model.config
        self.on_epoch = on_epoch

    def _check_inputs(self, train: ChannelDataset, val: ChannelDataset) -> None:
        n = self.model.geometry.n
        for name, ds in (("training", train), ("validation", val)):
            if ds.n != n:
                raise ConfigConflictError(
                    f"{name.capitalize()} data has N={ds.n} but the model expects N={n}"
                )
        if train.kind != DatasetKind.NOISY:
            raise DatasetError("Training data must be noisy observations")
        if val.kind != DatasetKind.CLEAN:
            raise DatasetError("Validation data must be clean channels")
        if train.count < 2:
            raise DatasetError(f"Training needs at least 2 samples, got {train.count}")

    def _batches(self, count: int, rng: np.random.Generator) -> List[np.ndarray]:
        order = rng.permutation(count)
        size = self.config.batch_size
        batches = [order[i : i + size] for i in range(0, count, size)]
        return [b for b in batches if len(b) >= 2]

    def _snapshot(self) -> List[np.ndarray]:
        return [tensor.data.copy() for _, tensor in self.model.named_tensors()]

    def _restore(self, state: List[np.ndarray]) -> None:
        for (_, tensor), data in zip(self.model.named_tensors(), state):
            tensor.data[...] = data

    def fit(
        self,
        train: ChannelDataset,
        val: ChannelDataset,
        max_epochs: Optional[int] = None,
    ) -> VaeModel:
        """Train until validation NMSE stops improving or the epoch cap is reached.

        Args:
            train: Noisy observations with per-sample noise variances
            val: Clean validation channels; noised once at the validation SNR
            max_epochs: Epochs to run in this call (default: config cap)

        Returns:
            The model, holding the parameters of its best validation epoch

        Raises:
            ConfigConflictError: If data and model disagree on N
            TrainingAbortedError: On a non-finite loss or gradient
        """
        self._check_inputs(train, val)
        cfg = self.config
        cap = max_epochs if max_epochs is not None else cfg.max_epochs

        val_y, val_var = add_awgn(
            val.samples, cfg.validation_snr_db, noise_rng(cfg.seed, cfg.validation_snr_db)
        )
        optimizer = Adam(self.model.parameters(), lr=cfg.learning_rate)
        first_epoch = len(self.model.history) + 1
        best_nmse = np.inf
        best_state = self._snapshot()
        stale = 0

        logger.info(
            f"Training on {train.count} samples (batch {cfg.batch_size}, lr {cfg.learning_rate}) "
            f"from epoch {first_epoch}, cap {cap}, patience {cfg.patience}"
        )
        for epoch in range(first_epoch, first_epoch + cap):
            rng = np.random.Generator(
                np.random.Philox(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(epoch,)))
            )
            self.model.train()
            losses = []
            for batch_index, rows in enumerate(self._batches(train.count, rng)):
                eps = rng.standard_normal((len(rows), self.model.latent_dim))
                self.model.zero_grad()
                try:
                    loss = self.model.loss_and_backward(
                        train.samples[rows], train.noise_vars[rows], eps
                    )
                    if not np.isfinite(loss):
                        raise NumericalError(f"loss is {loss}")
                    optimizer.step()
                except NumericalError as e:
                    raise TrainingAbortedError(
                        f"Training aborted at epoch {epoch}, batch {batch_index}: {e}",
                        epoch=epoch,
                        batch=batch_index,
                    ) from e
                losses.append(loss)
                logger.debug(f"epoch {epoch} batch {batch_index}: loss {loss:.6f}")

            self.model.eval()
            val_nmse = nmse(vae_estimate(self.model, val_y, val_var), val.samples)
            record = EpochRecord(
                epoch=epoch, train_loss=float(np.mean(losses)), val_nmse=val_nmse
            )
            self.model.history.append(record)
            logger.info(
                f"Epoch {epoch}: train loss {record.train_loss:.4f}, val NMSE {val_nmse:.5f}"
            )
            if self.on_epoch is not None:
                self.on_epoch(record)

            if val_nmse < best_nmse:
                best_nmse = val_nmse
                best_state = self._snapshot()
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    logger.info(f"No improvement for {stale} epochs, stopping at epoch {epoch}")
                    break

        self._restore(best_state)
        logger.info(f"Best validation NMSE {best_nmse:.5f}")
        return self.model


def train_vae(
    model: VaeModel,
    train: ChannelDataset,
    val: ChannelDataset,
    config: Optional[VaeConfig] = None,
    max_epochs: Optional[int] = None,
) -> VaeModel:
    """Train ``model`` in place; see ``Trainer.fit``."""
    return Trainer(model, config).fit(train, val, max_epochs=max_epochs)
