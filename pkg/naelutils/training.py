# coding: utf-8
"""
Staged training: PRN first, then NAN on PRN-correctness labels, then ARN on the reused PRN stage output. Each stage updates one network and leaves the other two untouched.
"""
import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
import polars as pl
from sklearn.utils.class_weight import compute_class_weight
from tqdm import tqdm

from .dataset import TFIDataset, split_indices
from .definitions import (
    DEFAULT_SEED,
    VERDICTS,
    CompatibilityError,
    DegenerateLabelError,
    ParameterDomainError,
    TrainingError,
)
from .nael_model import RELIABLE, UNRELIABLE, NaelModel
from .tensor_nn import Adam, Module, Tensor, no_grad, softmax_xent

HISTORY_SCHEMA = {
    "epoch": pl.Int64,
    "split": pl.String,
    "loss": pl.Float64,
    "accuracy": pl.Float64,
    "updates": pl.Int64,
}


@dataclass(frozen=True)
class TrainingHyper:
    """
    Attributes
    ----------
    epochs : int
        Passes over the training data
    batch_size : int
        Samples per weight update, the last partial batch included
    lr, beta1, beta2, epsilon : float
        Adam settings, the learning rate stays constant
    seed : int
        Seed of the per-epoch shuffles and of the validation holdout
    val_fraction : float
        Stratified fraction held out for validation, 0 to train on everything
    """

    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = DEFAULT_SEED
    val_fraction: float = 0.0

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ParameterDomainError(f"epochs and batch size must be positive, got {self.epochs}, {self.batch_size}")
        if not self.lr > 0:
            raise ParameterDomainError(f"learning rate must be positive, got {self.lr}")
        if not 0 <= self.val_fraction < 1:
            raise ParameterDomainError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")

    def updates_per_epoch(self, n: int) -> int:
        """ceil(n / batch_size)"""
        return -(-n // self.batch_size)


def batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """
    Shuffled batches covering `n` samples once. A trailing batch of a single sample is merged into the previous one, since batch normalization has no statistics on it.
    """
    order = rng.permutation(n)
    chunks = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = np.concatenate(chunks[-2:])
        chunks.pop()
    return chunks


def fit(
    network: Module,
    forward: Callable[[np.ndarray], Tensor],
    labels: np.ndarray,
    hyper: TrainingHyper,
    class_weights: np.ndarray | None = None,
    desc: str = "training",
) -> pl.DataFrame:
    """
    Adam on the softmax cross-entropy of `forward(batch_indices)` against `labels[batch_indices]`, updating the parameters of `network` only.

    Parameters
    ----------
    network : Module
        Network being trained. Put in train mode while fitting and back in eval mode after
    forward : Callable[[np.ndarray], Tensor]
        Maps indices into the training data to logits, recording the graph through `network`
    labels : np.ndarray
        Class of every sample
    hyper : TrainingHyper
        Optimization settings
    class_weights : np.ndarray, optional
        Per-class loss weights
    desc : str, optional
        Label of the progress bar

    Returns
    -------
    pl.DataFrame
        One row per epoch and split: epoch, split, loss, accuracy, updates. Training rows report the running mean over the epoch.

    Raises
    ------
    TrainingError
        If the loss stops being finite
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ParameterDomainError("cannot train on an empty dataset")
    if hyper.val_fraction > 0:
        train_idx, val_idx = split_indices(labels, (1 - hyper.val_fraction, hyper.val_fraction), hyper.seed)
    else:
        train_idx, val_idx = np.arange(labels.size), np.array([], dtype=np.int64)
    rng = np.random.default_rng(hyper.seed)
    optimizer = Adam(network.named_parameters(), hyper.lr, hyper.beta1, hyper.beta2, hyper.epsilon)
    rows, updates = [], 0
    for epoch in tqdm(range(1, hyper.epochs + 1), desc=desc):
        network.train()
        total_loss, correct = 0.0, 0
        for batch in batches(train_idx.size, hyper.batch_size, rng):
            indices = train_idx[batch]
            optimizer.zero_grad()
            loss, probabilities = softmax_xent(forward(indices), labels[indices], class_weights)
            if not np.isfinite(loss.data):
                raise TrainingError(f"{desc} loss is not finite", updates + 1)
            loss.backward()
            optimizer.step()
            updates += 1
            total_loss += float(loss.data) * indices.size
            correct += int(np.sum(probabilities.argmax(axis=1) == labels[indices]))
        rows.append(
            {"epoch": epoch, "split": "train", "loss": total_loss / train_idx.size, "accuracy": correct / train_idx.size, "updates": updates}
        )
        logging.info(f"{desc} epoch {epoch}: loss {rows[-1]['loss']:.4f}, accuracy {rows[-1]['accuracy']:.3f}")
        if val_idx.size:
            network.eval()
            rows.append({"epoch": epoch, "split": "val", **_score(forward, labels, val_idx, class_weights, hyper.batch_size), "updates": updates})
    network.eval()
    optimizer.zero_grad()
    return pl.DataFrame(rows, schema=HISTORY_SCHEMA)


def _score(forward, labels, indices, class_weights, batch_size) -> dict[str, float]:
    total_loss, correct = 0.0, 0
    with no_grad():
        for start in range(0, indices.size, batch_size):
            chunk = indices[start : start + batch_size]
            loss, probabilities = softmax_xent(forward(chunk), labels[chunk], class_weights)
            total_loss += float(loss.data) * chunk.size
            correct += int(np.sum(probabilities.argmax(axis=1) == labels[chunk]))
    return {"loss": total_loss / indices.size, "accuracy": correct / indices.size}


def _check_images(model: NaelModel, dataset: TFIDataset) -> None:
    if len(dataset) == 0:
        raise ParameterDomainError("cannot train on an empty dataset")
    if tuple(dataset.image_shape) != tuple(model.config.input_shape[1:]):
        raise CompatibilityError(
            f"dataset images are {dataset.image_shape}, the networks expect {model.config.input_shape[1:]}"
        )


def train_prn(model: NaelModel, dataset: TFIDataset, hyper: TrainingHyper = TrainingHyper()) -> pl.DataFrame:
    """12-class cross-entropy through the whole PRN. Returns the training history."""
    _check_images(model, dataset)

    def forward(indices: np.ndarray) -> Tensor:
        return model.prn(model.as_input(dataset.tfis[indices])).logits

    return fit(model.prn, forward, dataset.labels, hyper, desc="prn")


@dataclass
class MapDataset:
    """
    Gradient maps of the PRN decisions with their reliability labels.

    Attributes
    ----------
    maps : np.ndarray
        (N, 8, 8) float32
    labels : np.ndarray
        (N,) uint8, 0 when the PRN decision was right, 1 otherwise
    prn_classes : np.ndarray
        (N,) PRN decisions
    """

    maps: np.ndarray
    labels: np.ndarray
    prn_classes: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def label_counts(self) -> dict[str, int]:
        counts = np.bincount(self.labels, minlength=2)
        return dict(zip(VERDICTS, counts.tolist()))


def label_nan_dataset(model: NaelModel, dataset: TFIDataset, batch_size: int = 64) -> MapDataset:
    """
    Runs the PRN over `dataset` and labels every gradient map reliable if and only if the PRN decision equals the true class.
    """
    _check_images(model, dataset)
    maps, predicted = [], []
    for start in tqdm(range(0, len(dataset), batch_size), desc="gradient maps"):
        stage = model.prn_stage(dataset.tfis[start : start + batch_size])
        maps.append(stage.maps.astype(np.float32))
        predicted.append(stage.predicted)
    predicted = np.concatenate(predicted)
    labels = np.where(predicted == dataset.labels, RELIABLE, UNRELIABLE).astype(np.uint8)
    result = MapDataset(np.concatenate(maps), labels, predicted)
    logging.info(f"NAN labels: {result.label_counts()}")
    return result


def train_nan(model: NaelModel, maps: MapDataset, hyper: TrainingHyper = TrainingHyper()) -> pl.DataFrame:
    """
    Binary cross-entropy on the reliability labels, with balanced inverse-frequency class weights.

    Raises
    ------
    DegenerateLabelError
        If every map carries the same label
    """
    present = np.unique(maps.labels)
    if present.size < 2:
        raise DegenerateLabelError(f"every gradient map is labeled {VERDICTS[int(present[0])] if present.size else 'nothing'}")
    weights = compute_class_weight("balanced", classes=np.array([RELIABLE, UNRELIABLE]), y=maps.labels)
    logging.debug(f"NAN class weights: {weights}")
    values = maps.maps.astype(model.dtype, copy=False)

    def forward(indices: np.ndarray) -> Tensor:
        return model.nan(Tensor(values[indices]))

    return fit(model.nan, forward, maps.labels, hyper, class_weights=weights, desc="nan")


def train_arn(model: NaelModel, dataset: TFIDataset, hyper: TrainingHyper = TrainingHyper()) -> pl.DataFrame:
    """12-class cross-entropy through the ARN, fed by the frozen PRN stage it reuses, on every record."""
    _check_images(model, dataset)
    model.prn.eval()
    reuse = model.config.arn_reuse_point

    def forward(indices: np.ndarray) -> Tensor:
        with no_grad():
            _, intermediates = model.prn.body(model.as_input(dataset.tfis[indices]))
        return model.arn(intermediates[reuse])

    return fit(model.arn, forward, dataset.labels, hyper, desc="arn")
