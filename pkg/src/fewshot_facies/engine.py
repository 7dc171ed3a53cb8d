"""Meta-training and meta-testing of the shared binary segmenter."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
from scipy import ndimage

from .backbone import FewShotSegmenter
from .checkpoint import state_checksum
from .episodes import (Episode, EpisodeSampler, SourceDataset, binarize_mask, build_support_set)
from .metrics import ConfusionMatrix, MetricsReport, accumulate, compute_report
from .volume import SeismicVolume, SplitSpec

log = logging.getLogger(__name__)

EPS = 1e-7


class InvalidEpisodeError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, state: dict):
        super().__init__(message)
        self.state = state


class ContractViolationError(RuntimeError):
    pass


class LabelAccessError(PermissionError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 8
    shots: int = 5
    learning_rate: float = 5e-5
    weight_decay: float = 1e-3
    lr_decay_factor: float = 0.25
    lr_patience_epochs: int = 5
    max_epochs: int = 50
    steps_per_epoch: int = 100
    val_episodes: int = 16
    augment: bool = True
    use_best_checkpoint: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("rates must be non-negative")
        if not 0 < self.lr_decay_factor < 1:
            raise ValueError("lr_decay_factor must lie in (0, 1)")
        if self.shots < 1 or self.batch_size < 1:
            raise ValueError("shots and batch_size must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, optimizer, factor: float = 0.25, patience: int = 5):
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.best = math.inf
        self.bad_epochs = 0

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def step(self, metric: float) -> None:
        if metric < self.best:
            self.best = metric
            self.bad_epochs = 0
            return
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            for group in self.optimizer.param_groups:
                group["lr"] *= self.factor
            self.bad_epochs = 0


def multiclass_bce(probs: torch.Tensor, targets: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Pixel-wise binary cross-entropy averaged over classes and pixels.

    ``probs`` and ``targets`` are ``(C, H, W)``; probabilities are clamped to
    ``[eps, 1 - eps]``.
    """
    p = probs.clamp(eps, 1 - eps)
    t = targets.to(p.dtype)
    return -(t * torch.log(p) + (1 - t) * torch.log(1 - p)).mean()


def episode_loss(model: FewShotSegmenter, episode: Episode,
                 generator: Optional[torch.Generator] = None) -> torch.Tensor:
    if episode.query_mask is None:
        raise InvalidEpisodeError("episode has no query mask")
    support = binarize_mask(episode.support_masks, episode.class_count)
    query = binarize_mask(episode.query_mask, episode.class_count)
    logits = model.classwise_logits(episode.support_images, support, episode.query_image, generator=generator)
    return multiclass_bce(torch.sigmoid(logits), torch.as_tensor(query))


def augment_episode(episode: Episode, rng: np.random.Generator, max_rotation: float = 20.0,
                    noise_sd: float = 4.0) -> Episode:
    """Independent flip / small rotation / noise for every image-mask pair."""

    def one(img, mask):
        if rng.random() < 0.5:
            img, mask = img[:, ::-1], mask[:, ::-1]
        angle = rng.uniform(-max_rotation, max_rotation)
        if max_rotation > 0:
            img = ndimage.rotate(img, angle, reshape=False, order=1, mode="reflect")
            mask = ndimage.rotate(mask, angle, reshape=False, order=0, mode="reflect")
        if noise_sd > 0:
            img = img + rng.normal(0, noise_sd, img.shape)
        return np.clip(img, 0, 255).astype(np.float32), np.ascontiguousarray(mask)

    pairs = [one(i, m) for i, m in zip(episode.support_images, episode.support_masks)]
    qi, qm = one(episode.query_image, episode.query_mask)
    return Episode(np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]), qi, qm,
                   episode.class_count, episode.dataset_id)


@dataclass
class TrainResult:
    history: List[dict]
    best_val_loss: float
    best_epoch: int
    final_val_loss: float


def validation_loss(model: FewShotSegmenter, episodes: Sequence[Episode]) -> float:
    was_training = model.training
    model.eval()
    with torch.no_grad():
        losses = [float(episode_loss(model, e)) for e in episodes]
    model.train(was_training)
    return float(np.mean(losses))


def meta_train(model: FewShotSegmenter, train_sources: Sequence[SourceDataset],
               val_sources: Sequence[SourceDataset], config: TrainConfig, log_path=None,
               on_epoch: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Episodic training over mixed-class-count sources.

    Every minibatch sums the per-episode losses (each already averaged over
    its own C classes) and takes a single optimizer step on all shared
    parameters.  The validation loss over a fixed episode set drives the
    plateau scheduler and best-checkpoint selection.
    """
    torch.manual_seed(config.seed)
    sampler = EpisodeSampler(train_sources, config.shots, seed=config.seed, worker_id=0)
    val_eps = EpisodeSampler(val_sources, config.shots, seed=config.seed, worker_id=1).batch(config.val_episodes)
    aug_rng = np.random.default_rng([config.seed, 2])
    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    sched = PlateauScheduler(opt, config.lr_decay_factor, config.lr_patience_epochs)

    log_file = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_file = open(log_path, "w")

    def emit(rec):
        history.append(rec)
        if log_file:
            log_file.write(json.dumps(rec) + "\n")

    history: List[dict] = []
    best_val, best_epoch, best_state = math.inf, -1, None
    step = 0
    val = math.nan
    try:
        for epoch in range(config.max_epochs):
            model.train()
            for _ in range(config.steps_per_epoch):
                batch = sampler.batch(config.batch_size)
                if config.augment:
                    batch = [augment_episode(e, aug_rng) for e in batch]
                total = sum(episode_loss(model, e, generator=gen) for e in batch)
                if not torch.isfinite(total):
                    raise TrainingDivergedError(
                        f"non-finite loss at step {step}",
                        {"step": step, "epoch": epoch, "lr": sched.lr,
                         "recent": [r["loss"] for r in history[-5:]]},
                    )
                opt.zero_grad(set_to_none=True)
                total.backward()
                opt.step()
                step += 1
                emit({"step": step, "epoch": epoch, "loss": total.item() / len(batch), "val_loss": None,
                      "lr": sched.lr})
            val = validation_loss(model, val_eps)
            emit({"step": step, "epoch": epoch, "loss": None, "val_loss": val, "lr": sched.lr})
            if val < best_val:
                best_val, best_epoch = val, epoch
                best_state = copy.deepcopy(model.state_dict())
            sched.step(val)
            if on_epoch:
                on_epoch(epoch, val)
    finally:
        if log_file:
            log_file.close()
    if config.use_best_checkpoint and best_state is not None:
        model.load_state_dict(best_state)
    return TrainResult(history, best_val, best_epoch, val)


@dataclass
class PredictionStack:
    per_class_probs: np.ndarray  # (C, H, W)
    aggregated: np.ndarray  # (H, W), values 1..C
    axis: str = ""
    index: int = -1
    support_indices: List[int] = field(default_factory=list)


def aggregate_argmax(per_class_probs: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class id
    return np.argmax(per_class_probs, axis=0).astype(np.int64) + 1


class TargetData:
    """Held-out volume whose labels are only released for support masks and scoring.

    Every label read is recorded in ``access_log`` as ``(purpose, axis, index)``.
    """

    ALLOWED = ("support", "metrics")

    def __init__(self, volume: SeismicVolume, split: SplitSpec, dataset_id: str = "target"):
        split.validate(volume.shape)
        self._volume = volume
        self.split = split
        self.dataset_id = dataset_id
        self.class_count = volume.class_count
        self.access_log: List[tuple] = []

    def image(self, axis: str, index: int) -> np.ndarray:
        return self._volume.slice_image(axis, index)

    def labels(self, axis: str, index: int, purpose: str) -> np.ndarray:
        if purpose not in self.ALLOWED:
            raise LabelAccessError(f"target labels are not available for {purpose!r}")
        self.access_log.append((purpose, axis, index))
        return self._volume.slice_mask(axis, index)

    def indices(self, partition: str, axis: str) -> List[int]:
        ranges = self.split.partitions()[partition].get(axis, [])
        return [i for start, stop in ranges for i in range(start, stop)]


@dataclass
class MetaTestResult:
    predictions: Dict[str, List[PredictionStack]]
    reports: Dict[str, MetricsReport]
    checksum: str


def predict_slice(model: FewShotSegmenter, support_images: np.ndarray, support_masks: np.ndarray,
                  query_image: np.ndarray, class_count: int) -> PredictionStack:
    binary = binarize_mask(support_masks, class_count)
    with torch.no_grad():
        probs = model.predict_classwise(support_images, binary, query_image).numpy()
    return PredictionStack(probs, aggregate_argmax(probs))


def meta_test(model: FewShotSegmenter, target: TargetData, shots: int, mode: str = "spanning",
              axes: Sequence[str] = ("inline", "crossline"), keep_probs: bool = True) -> MetaTestResult:
    """Segment every test slice of ``target`` from K support slices, without touching parameters."""
    before = state_checksum(model)
    was_training = model.training
    model.eval()
    predictions, reports = {}, {}
    c = target.class_count
    for axis in axes:
        train_idx = target.indices("train", axis)
        test_idx = target.indices("test", axis)
        if not train_idx or not test_idx:
            continue
        cache: Dict[tuple, tuple] = {}
        cm = ConfusionMatrix(c)
        preds = []
        for q in test_idx:
            sup = tuple(build_support_set(train_idx, shots, mode, query_index=q))
            if sup not in cache:
                cache[sup] = (np.stack([target.image(axis, i) for i in sup]),
                              np.stack([target.labels(axis, i, "support") for i in sup]))
            s_img, s_mask = cache[sup]
            stack = predict_slice(model, s_img, s_mask, target.image(axis, q), c)
            stack.axis, stack.index, stack.support_indices = axis, q, list(sup)
            if not keep_probs:
                stack.per_class_probs = None
            cm = accumulate(cm, target.labels(axis, q, "metrics"), stack.aggregated)
            preds.append(stack)
        predictions[axis] = preds
        reports[axis] = compute_report(cm)
    model.train(was_training)
    after = state_checksum(model)
    if after != before:
        raise ContractViolationError("model parameters changed during meta-testing")
    return MetaTestResult(predictions, reports, after)
