"""Comparators: target-only episodic training, a supervised ResNet-UNet, and transfer learning."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import DoubleConv, FewShotSegmenter, ImageEncoder, NetworkConfig, pad_to_multiple
from .engine import PlateauScheduler, TrainConfig, TrainResult, meta_train
from .episodes import SourceDataset
from .metrics import MetricsReport, evaluate_masks
from .volume import slice_patches

VARIANTS = ("fewshot-target-only", "resnet-unet", "transfer-learning")


@dataclass
class BaselineConfig:
    variant: str = "resnet-unet"
    class_count: int = 6
    shots: int = 5
    batch_size: int = 8
    learning_rate: float = 5e-5
    weight_decay: float = 1e-3
    lr_decay_factor: float = 0.25
    lr_patience_epochs: int = 5
    steps: int = 1000
    steps_per_epoch: int = 100
    finetune_steps: int = 100
    finetune_lr_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown baseline variant {self.variant!r}")
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")

    @classmethod
    def from_dict(cls, d: dict) -> "BaselineConfig":
        return cls(**d)


class ResNetUNet(nn.Module):
    """U-Net with the few-shot image encoder; the last layer has exactly C outputs."""

    def __init__(self, class_count: int, cfg: Optional[NetworkConfig] = None):
        super().__init__()
        self.cfg = cfg = cfg or NetworkConfig.toy()
        self.class_count = class_count
        self.encoder = ImageEncoder(cfg)
        w4, w8, w16, w32 = cfg.widths
        d16, d8, d4 = cfg.decoder_widths
        self.up16 = nn.ConvTranspose2d(w32, d16, 2, 2)
        self.merge16 = DoubleConv(d16 + w16, d16)
        self.up8 = nn.ConvTranspose2d(d16, d8, 2, 2)
        self.merge8 = DoubleConv(d8 + w8, d8)
        self.up4 = nn.ConvTranspose2d(d8, d4, 2, 2)
        self.merge4 = DoubleConv(d4 + w4, d4)
        self.head = nn.Conv2d(d4, class_count, 1)

    def reset_head(self, class_count: int) -> None:
        self.class_count = class_count
        self.head = nn.Conv2d(self.head.in_channels, class_count, 1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """``(B,1,H,W)`` images in [0, 255] to ``(B,C,H,W)`` logits."""
        x, (h, w) = pad_to_multiple(images)
        f = self.encoder(x / 127.5 - 1.0)
        y = self.merge16(torch.cat([self.up16(f[32]), f[16]], 1))
        y = self.merge8(torch.cat([self.up8(y), f[8]], 1))
        y = self.merge4(torch.cat([self.up4(y), f[4]], 1))
        logits = F.interpolate(self.head(y), size=x.shape[-2:], mode="bilinear", align_corners=False)
        return logits[..., :h, :w]

    def predict(self, images) -> np.ndarray:
        """Masks valued in 1..C for a ``(N,H,W)`` stack."""
        was = self.training
        self.eval()
        with torch.no_grad():
            logits = self(torch.as_tensor(np.asarray(images), dtype=torch.float32)[:, None])
        self.train(was)
        return logits.argmax(1).numpy() + 1


def _check_labels(masks: np.ndarray, class_count: int) -> None:
    if masks.size and (masks.min() < 1 or masks.max() > class_count):
        raise ValueError(f"labels must lie in 1..{class_count}")


def _ce(model: ResNetUNet, images: np.ndarray, masks: np.ndarray) -> torch.Tensor:
    x = torch.as_tensor(images, dtype=torch.float32)[:, None]
    y = torch.as_tensor(masks.astype(np.int64) - 1)
    return F.cross_entropy(model(x), y)


def supervised_loss(model: ResNetUNet, images: np.ndarray, masks: np.ndarray) -> float:
    was = model.training
    model.eval()
    with torch.no_grad():
        loss = float(_ce(model, images, masks))
    model.train(was)
    return loss


def train_resnet_unet(train: SourceDataset, config: BaselineConfig, val: Optional[SourceDataset] = None,
                      net_cfg: Optional[NetworkConfig] = None) -> Tuple[ResNetUNet, List[dict]]:
    """Plain C-way supervised training with per-pixel cross-entropy."""
    _check_labels(train.masks, config.class_count)
    torch.manual_seed(config.seed)
    rng = np.random.default_rng([config.seed, 3])
    model = ResNetUNet(config.class_count, net_cfg)
    opt = torch.optim.AdamW(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    sched = PlateauScheduler(opt, config.lr_decay_factor, config.lr_patience_epochs)
    history = []
    model.train()
    for step in range(1, config.steps + 1):
        idx = rng.choice(len(train), size=min(config.batch_size, len(train)), replace=False)
        images, masks = train.images[idx], train.masks[idx]
        flip = rng.random(len(idx)) < 0.5
        images = np.where(flip[:, None, None], images[:, :, ::-1], images)
        masks = np.where(flip[:, None, None], masks[:, :, ::-1], masks)
        loss = _ce(model, images, masks)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        rec = {"step": step, "loss": loss.item(), "val_loss": None, "lr": sched.lr}
        if val is not None and step % config.steps_per_epoch == 0:
            rec["val_loss"] = supervised_loss(model, val.images, val.masks)
            sched.step(rec["val_loss"])
        history.append(rec)
    return model, history


def _freeze_bn_stats(model: nn.Module) -> None:
    for m in model.modules():
        if isinstance(m, nn.modules.batchnorm._BatchNorm):
            m.eval()


def transfer_finetune(model: ResNetUNet, support_images: Sequence[np.ndarray], support_masks: Sequence[np.ndarray],
                      shots: int, config: BaselineConfig, patch_size: Optional[int] = None,
                      stride: Optional[int] = None) -> Tuple[ResNetUNet, List[str]]:
    """Fine-tune a source-trained ResNet-UNet on patches from exactly ``shots`` target slices.

    Returns a new model and the names of parameters whose values changed.
    All parameters are trainable at ``finetune_lr_scale`` times the source
    learning rate; batch-norm running statistics stay frozen.  If the target
    class count differs, the output layer is re-initialised first.
    """
    if len(support_images) == 0:
        raise ValueError("empty support set")
    if len(support_images) != shots or len(support_masks) != shots:
        raise ValueError(f"expected exactly {shots} support slices, got {len(support_images)}")
    model = copy.deepcopy(model)
    torch.manual_seed(config.seed)
    if model.class_count != config.class_count:
        model.reset_head(config.class_count)
    images, masks = [], []
    for img, msk in zip(support_images, support_masks):
        _check_labels(np.asarray(msk), config.class_count)
        ps = patch_size or min(img.shape)
        for p in slice_patches(np.asarray(img), np.asarray(msk), ps, stride or ps):
            images.append(p.pixels)
            masks.append(p.mask)
    images, masks = np.stack(images).astype(np.float32), np.stack(masks)

    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    opt = torch.optim.AdamW(model.parameters(), lr=config.learning_rate * config.finetune_lr_scale,
                            weight_decay=config.weight_decay)
    rng = np.random.default_rng([config.seed, 4])
    model.train()
    _freeze_bn_stats(model)
    for _ in range(config.finetune_steps):
        idx = rng.choice(len(images), size=min(config.batch_size, len(images)), replace=False)
        loss = _ce(model, images[idx], masks[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    model.eval()
    updated = [n for n, p in model.named_parameters() if n not in before or before[n].shape != p.shape
               or not torch.equal(before[n], p.detach())]
    return model, updated


def train_baseline1(target_train: SourceDataset, target_val: SourceDataset, config: TrainConfig,
                    net_cfg: Optional[NetworkConfig] = None, log_path=None) -> Tuple[FewShotSegmenter, TrainResult]:
    """The few-shot model trained episodically on the target dataset alone."""
    torch.manual_seed(config.seed)
    model = FewShotSegmenter(net_cfg)
    result = meta_train(model, [target_train], [target_val], config, log_path=log_path)
    return model, result


def evaluate_resnet_unet(model: ResNetUNet, images: Sequence[np.ndarray], truths: Sequence[np.ndarray]) -> MetricsReport:
    preds = [model.predict(np.asarray(img)[None])[0] for img in images]
    return evaluate_masks(truths, preds, model.class_count)
