"""Training protocol: 4-image mini-batches, ADAM, frozen-patch validation, early stopping."""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import streams
from .checkpoint import Checkpoint
from .data import (
    IMAGES_PER_BATCH,
    DataError,
    ImageCache,
    ImageRecord,
    PatchBatch,
    build_batch,
    build_minibatch,
    by_split,
    freeze_coords,
)
from .model import ModelConfig, QualityNet
from .nn import ParamSet, Tensor
from .optim import AdamState, adam_step
from .pooling import loss_simple, loss_weighted, pool_weighted

log = logging.getLogger(__name__)


def image_losses(batch: PatchBatch, model: QualityNet, train: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
    """Per-image loss ``[B]``: patchwise MAE for average pooling, |q_hat - q_t| for weighted."""
    if batch.distorted.ndim != 5:
        raise DataError("patch batch must keep all patches of an image together ([B, Np, 3, 32, 32])")
    cfg = model.config
    b, n = batch.n_images, batch.n_patches
    flat = batch.distorted.reshape((b * n,) + batch.distorted.shape[2:])
    ref = None
    if cfg.task == "fr":
        if batch.reference is None:
            raise DataError("full-reference model needs reference patches in the batch")
        ref = batch.reference.reshape(flat.shape)
    out = model.forward(flat, ref, train=train, rng=rng)
    y = out.quality.reshape(b, n)
    targets = batch.targets.astype(model.dtype)
    if cfg.pooling == "average":
        return loss_simple(y, targets)
    q_hat, _ = pool_weighted(y, out.weight.reshape(b, n))
    return loss_weighted(q_hat, Tensor(targets))


def batch_loss(batch: PatchBatch, model: QualityNet, train: bool = False,
               rng: np.random.Generator | None = None) -> Tensor:
    """Mean image loss over the batch (scalar, graph retained)."""
    return image_losses(batch, model, train, rng).mean()


@dataclass
class EarlyStopping:
    """Keeps the parameter snapshot with the lowest validation loss seen so far."""

    best_loss: float = math.inf
    best_epoch: int = -1
    best_params: ParamSet | None = None

    def update(self, epoch: int, val_loss: float, params: ParamSet) -> bool:
        if val_loss < self.best_loss:
            self.best_loss, self.best_epoch = val_loss, epoch
            self.best_params = params.copy()
            return True
        return False


@dataclass
class TrainState:
    model: QualityNet
    adam: AdamState
    seed: int
    cache: ImageCache
    val_coords: dict[str, np.ndarray]
    epoch: int = 0
    stopper: EarlyStopping = field(default_factory=EarlyStopping)
    history: list[tuple[int, float, float]] = field(default_factory=list)
    shuffle_rng: np.random.Generator | None = None
    patch_rng: np.random.Generator | None = None
    dropout_rng: np.random.Generator | None = None

    @property
    def best_val_loss(self) -> float:
        return self.stopper.best_loss


def new_state(config: ModelConfig, seed: int, val_records: Sequence[ImageRecord],
              cache: ImageCache | None = None) -> TrainState:
    cache = cache or ImageCache()
    model = QualityNet.initialize(config, streams.stream(seed, "init"))
    return TrainState(
        model=model,
        adam=AdamState(),
        seed=seed,
        cache=cache,
        val_coords=freeze_coords(val_records, cache, streams.stream(seed, "validation")),
        shuffle_rng=streams.stream(seed, "shuffle"),
        patch_rng=streams.stream(seed, "patches"),
        dropout_rng=streams.stream(seed, "dropout"),
    )


def train_epoch(state: TrainState, train_records: Sequence[ImageRecord]) -> float:
    """Shuffle, consume the training images in groups of 4, take one ADAM step per group."""
    if len(train_records) < IMAGES_PER_BATCH:
        raise DataError(f"need at least {IMAGES_PER_BATCH} training images, got {len(train_records)}")
    model = state.model
    need_ref = model.config.task == "fr"
    order = state.shuffle_rng.permutation(len(train_records))
    losses = []
    for start in range(0, len(order) - IMAGES_PER_BATCH + 1, IMAGES_PER_BATCH):
        recs = [train_records[i] for i in order[start:start + IMAGES_PER_BATCH]]
        batch = build_minibatch(recs, state.cache, need_ref, state.patch_rng)
        model.params.zero_grad()
        loss = batch_loss(batch, model, train=True, rng=state.dropout_rng)
        loss.backward()
        adam_step(model.params, {k: p.grad for k, p in model.params.items() if p.grad is not None}, state.adam)
        losses.append(loss.item())
    state.epoch += 1
    return float(np.mean(losses))


def validate(model: QualityNet, val_records: Sequence[ImageRecord], frozen: dict[str, np.ndarray],
             cache: ImageCache, chunk: int = IMAGES_PER_BATCH) -> float:
    """Mean image loss in eval mode over the frozen validation patches."""
    if not val_records:
        raise DataError("validation set is empty")
    need_ref = model.config.task == "fr"
    total = 0.0
    for start in range(0, len(val_records), chunk):
        recs = list(val_records[start:start + chunk])
        batch = build_batch(recs, cache, need_ref, coords=[frozen[r.id] for r in recs])
        total += float(image_losses(batch, model, train=False).data.astype(np.float64).sum())
    return total / len(val_records)


@dataclass
class FitResult:
    best: Checkpoint
    last: Checkpoint
    history: list[tuple[int, float, float]]


def fit(records: Sequence[ImageRecord], config: ModelConfig, epochs: int, seed: int,
        cache: ImageCache | None = None,
        on_epoch: Callable[[int, float, float], None] | None = None) -> FitResult:
    """Train for ``epochs`` epochs and return the snapshot with the best validation loss."""
    train_records, val_records = by_split(records, "train"), by_split(records, "val")
    if config.task == "fr" and any(r.reference_path is None for r in train_records + val_records):
        raise DataError("full-reference training needs a reference image for every record")
    state = new_state(config, seed, val_records, cache)
    if epochs == 0:
        state.stopper.update(0, validate(state.model, val_records, state.val_coords, state.cache),
                             state.model.params)
    for _ in range(epochs):
        train_loss = train_epoch(state, train_records)
        val_loss = validate(state.model, val_records, state.val_coords, state.cache)
        state.history.append((state.epoch, train_loss, val_loss))
        state.stopper.update(state.epoch, val_loss, state.model.params)
        log.info("epoch %d train %.4f val %.4f", state.epoch, train_loss, val_loss)
        if on_epoch is not None:
            on_epoch(state.epoch, train_loss, val_loss)

    meta = {"seed": str(seed), "epochs": str(epochs)}
    best = Checkpoint(config, state.stopper.best_params, None, {
        **meta, "epoch": str(state.stopper.best_epoch), "best_val_loss": repr(state.stopper.best_loss)})
    last = Checkpoint(config, state.model.params.copy(), state.adam, {
        **meta, "epoch": str(state.epoch), "best_val_loss": repr(state.stopper.best_loss)})
    return FitResult(best, last, state.history)


def write_history(path: str | os.PathLike, history: Sequence[tuple[int, float, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for epoch, tr, va in history:
            writer.writerow([epoch, repr(float(tr)), repr(float(va))])


def read_history(path: str | os.PathLike) -> list[tuple[int, float, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [(int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"])) for r in csv.DictReader(fh)]
