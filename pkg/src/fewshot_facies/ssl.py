"""SimCLR-style contrastive pretraining of the image encoder on unlabeled patches."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from torch import nn

from .backbone import FewShotSegmenter, ImageEncoder, NetworkConfig
from .checkpoint import load_checkpoint, save_checkpoint


class InvalidBatchError(ValueError):
    pass


@dataclass
class ContrastiveConfig:
    temperature: float = 0.07
    batch_size: int = 32
    epochs: int = 10
    learning_rate: float = 3e-4
    weight_decay: float = 1e-4
    rotation_degrees: float = 20.0
    flip_prob: float = 0.5
    blur_sigma: Tuple[float, float] = (0.1, 2.0)
    noise_sd: Tuple[float, float] = (1e-4, 5e-2)  # fraction of the 0..255 range
    brightness: Tuple[float, float] = (0.5, 1.5)
    contrast: Tuple[float, float] = (0.0, 2.0)
    crop_scale: Tuple[float, float] = (0.6, 1.0)  # area fraction kept before resizing back
    projection_dim: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        for name in ("blur_sigma", "noise_sd", "brightness", "contrast", "crop_scale"):
            lo, hi = getattr(self, name)
            setattr(self, name, (float(lo), float(hi)))
            if lo > hi or lo < 0:
                raise ValueError(f"{name} must be a valid non-negative interval, got {(lo, hi)}")
        if not 0 < self.crop_scale[0] <= self.crop_scale[1] <= 1:
            raise ValueError("crop_scale must lie in (0, 1]")
        if self.batch_size < 2:
            raise InvalidBatchError("contrastive batches need at least 2 pairs")

    @classmethod
    def identity(cls, **kw) -> "ContrastiveConfig":
        """Every augmentation pinned to its no-op value."""
        base = dict(rotation_degrees=0.0, flip_prob=0.0, blur_sigma=(0.0, 0.0), noise_sd=(0.0, 0.0),
                    brightness=(1.0, 1.0), contrast=(1.0, 1.0), crop_scale=(1.0, 1.0))
        base.update(kw)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "ContrastiveConfig":
        return cls(**d)


def augment(patch: np.ndarray, rng: np.random.Generator, cfg: ContrastiveConfig) -> np.ndarray:
    x = np.asarray(patch, dtype=np.float64)
    h, w = x.shape
    if cfg.flip_prob > 0 and rng.random() < cfg.flip_prob:
        x = x[:, ::-1]
    if cfg.rotation_degrees > 0:
        x = ndimage.rotate(x, rng.uniform(-cfg.rotation_degrees, cfg.rotation_degrees), reshape=False,
                           order=1, mode="reflect")
    lo, hi = cfg.crop_scale
    if hi < 1 or lo < 1:
        scale = rng.uniform(lo, hi)
        ch, cw = max(2, int(round(h * math.sqrt(scale)))), max(2, int(round(w * math.sqrt(scale))))
        r, c = rng.integers(0, h - ch + 1), rng.integers(0, w - cw + 1)
        x = ndimage.zoom(x[r:r + ch, c:c + cw], (h / ch, w / cw), order=1, mode="nearest", grid_mode=True)
    lo, hi = cfg.blur_sigma
    if hi > 0:
        x = ndimage.gaussian_filter(x, rng.uniform(lo, hi), mode="reflect")
    x = x * rng.uniform(*cfg.brightness)
    factor = rng.uniform(*cfg.contrast)
    if factor != 1.0:
        x = x.mean() + factor * (x - x.mean())
    lo, hi = cfg.noise_sd
    if hi > 0:
        x = x + rng.normal(0.0, rng.uniform(lo, hi) * 255.0, x.shape)
    return np.clip(x, 0.0, 255.0).astype(np.float32)


def augment_pair(patch: np.ndarray, rng: np.random.Generator,
                 cfg: Optional[ContrastiveConfig] = None) -> Tuple[np.ndarray, np.ndarray]:
    cfg = cfg or ContrastiveConfig()
    return augment(patch, rng, cfg), augment(patch, rng, cfg)


def _similarity_logits(z: torch.Tensor, temperature: float) -> torch.Tensor:
    sim = z @ z.T / temperature
    return sim.masked_fill(torch.eye(len(z), dtype=torch.bool, device=z.device), float("-inf"))


def _positive_index(n_pairs: int, device=None) -> torch.Tensor:
    i = torch.arange(n_pairs, device=device)
    return torch.cat([i + n_pairs, i])


def ntxent_loss(projections: torch.Tensor, temperature: float) -> torch.Tensor:
    """NT-Xent over ``2B`` unit rows where rows ``i`` and ``i + B`` are positives."""
    n = projections.shape[0]
    if n % 2 or n < 4:
        raise InvalidBatchError(f"need 2B rows with B >= 2, got {n}")
    logits = _similarity_logits(projections, temperature)
    return F.cross_entropy(logits, _positive_index(n // 2, projections.device))


def retrieval_accuracy(projections: torch.Tensor, topk=(1, 5)) -> List[float]:
    """Fraction of rows whose positive ranks within the top-k of the other 2B-1 rows."""
    n = projections.shape[0]
    logits = _similarity_logits(projections, 1.0)
    pos = _positive_index(n // 2, projections.device)
    rank = (logits > logits[torch.arange(n), pos][:, None]).sum(1)
    return [float((rank < k).float().mean()) for k in topk]


class ProjectionHead(nn.Sequential):
    def __init__(self, width: int, out_dim: int):
        super().__init__(nn.Linear(width, width), nn.ReLU(inplace=True), nn.Linear(width, out_dim))


class ContrastiveModel(nn.Module):
    def __init__(self, net_cfg: NetworkConfig, projection_dim: int):
        super().__init__()
        self.encoder = ImageEncoder(net_cfg)
        self.head = ProjectionHead(self.encoder.out_width, projection_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = self.encoder(x / 127.5 - 1.0)[32]
        return F.normalize(self.head(feats.mean((2, 3))), dim=1)


@dataclass
class PretrainResult:
    encoder: ImageEncoder
    history: List[dict]
    initial_loss: float
    final_loss: float
    top1: float
    top5: float


def _views(patches, idx, rng, cfg):
    pairs = [augment_pair(patches[i], rng, cfg) for i in idx]
    v = np.stack([p[0] for p in pairs] + [p[1] for p in pairs])
    return torch.from_numpy(v)[:, None]


def pretrain_encoder(patches: np.ndarray, cfg: ContrastiveConfig, net_cfg: Optional[NetworkConfig] = None,
                     log_path=None) -> PretrainResult:
    """Train encoder + projection head with NT-Xent; only the encoder is returned.

    ``history`` holds one record per epoch with the mean training loss and
    the top-1/top-5 retrieval accuracy on a frozen validation batch.
    """
    net_cfg = net_cfg or NetworkConfig.toy()
    patches = np.asarray(patches, dtype=np.float32)
    b = cfg.batch_size
    if len(patches) < 2 * b:
        raise InvalidBatchError(f"need >= {2 * b} patches, got {len(patches)}")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng([cfg.seed, 10])
    model = ContrastiveModel(net_cfg, cfg.projection_dim)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    val_rng = np.random.default_rng([cfg.seed, 11])
    val_batch = _views(patches, val_rng.choice(len(patches), b, replace=False), val_rng, cfg)

    def evaluate():
        model.eval()
        with torch.no_grad():
            z = model(val_batch)
            out = (float(ntxent_loss(z, cfg.temperature)), *retrieval_accuracy(z))
        model.train()
        return out

    history = []
    v_loss, top1, top5 = evaluate()
    history.append({"epoch": -1, "loss": None, "val_loss": v_loss, "top1": top1, "top5": top5})
    first_loss = None
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(patches))
        losses = []
        for start in range(0, len(order) - b + 1, b):
            x = _views(patches, order[start:start + b], rng, cfg)
            loss = ntxent_loss(model(x), cfg.temperature)
            if not torch.isfinite(loss):
                raise RuntimeError(f"contrastive loss diverged at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
            if first_loss is None:
                first_loss = losses[0]
        v_loss, top1, top5 = evaluate()
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "val_loss": v_loss,
                        "top1": top1, "top5": top5})
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        Path(log_path).write_text("".join(json.dumps(r) + "\n" for r in history))
    return PretrainResult(model.encoder, history, first_loss, history[-1]["loss"], top1, top5)


def save_encoder(encoder: ImageEncoder, path, **extra) -> Path:
    state = {f"image_encoder.{k}": v for k, v in encoder.state_dict().items()}
    cfg = encoder.cfg
    manifest = {"preset": cfg.preset, "widths": list(cfg.widths), "gp_strides": list(cfg.gp_strides),
                "network": cfg.to_dict(), "origin": "ssl-pretrain", **extra}
    return save_checkpoint(path, state, manifest)


def load_encoder_into(model: FewShotSegmenter, path) -> dict:
    """Copy pretrained encoder weights into ``model``; shapes must match exactly."""
    state, manifest = load_checkpoint(path, expect={"preset": model.cfg.preset, "widths": list(model.cfg.widths)})
    enc = {k[len("image_encoder."):]: v for k, v in state.items() if k.startswith("image_encoder.")}
    model.image_encoder.load_state_dict(enc, strict=True)
    return manifest
