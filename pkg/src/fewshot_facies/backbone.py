"""Image encoder, mask encoder, decoder and the shared binary few-shot segmenter."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .gp import GPHead

STRIDES = (4, 8, 16, 32)


@dataclass
class NetworkConfig:
    preset: str = "toy"
    widths: Tuple[int, int, int, int] = (16, 32, 64, 128)  # image features at strides 4/8/16/32
    mask_width: int = 16
    decoder_widths: Tuple[int, int, int] = (64, 32, 16)  # after merging strides 16, 8, 4
    gp_strides: Tuple[int, int] = (16, 32)
    shared_gp_params: bool = False
    gp_max_support_rows: int = 4096
    in_channels: int = 3

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.decoder_widths = tuple(self.decoder_widths)
        self.gp_strides = tuple(self.gp_strides)
        if min(self.widths) <= 0 or self.mask_width <= 0 or min(self.decoder_widths) <= 0:
            raise ValueError("network widths must be positive")
        if self.gp_strides != (16, 32):
            raise ValueError("GP heads attach at the bottleneck (32) and the level above it (16)")

    @classmethod
    def toy(cls, **kw) -> "NetworkConfig":
        return cls(preset="toy", **kw)

    @classmethod
    def full(cls, **kw) -> "NetworkConfig":
        kw.setdefault("widths", (256, 512, 1024, 2048))
        kw.setdefault("mask_width", 64)
        kw.setdefault("decoder_widths", (256, 128, 64))
        return cls(preset="resnet50-like", **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _conv_bn(cin, cout, stride=1, k=3):
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ImageEncoder(nn.Module):
    """ResNet-style encoder returning features at strides 4, 8, 16 and 32."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.preset == "resnet50-like":
            from torchvision.models import resnet50

            net = resnet50(weights=None)
            self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
            self.stages = nn.ModuleList([net.layer1, net.layer2, net.layer3, net.layer4])
        else:
            w = cfg.widths
            self.stem = _conv_bn(cfg.in_channels, w[0], stride=2)
            cins = (w[0],) + w[:-1]
            self.stages = nn.ModuleList([BasicBlock(ci, co, 2) for ci, co in zip(cins, w)])

    @property
    def out_width(self) -> int:
        return self.cfg.widths[-1]

    def forward(self, x: torch.Tensor) -> Dict[int, torch.Tensor]:
        if x.shape[1] == 1 and self.cfg.in_channels != 1:
            x = x.expand(-1, self.cfg.in_channels, -1, -1)
        x = self.stem(x)
        feats = {}
        for stride, stage in zip(STRIDES, self.stages):
            x = stage(x)
            feats[stride] = x
        return feats


class MaskEncoder(nn.Module):
    """Strided conv stack embedding a binary mask at the GP strides."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        fm = cfg.mask_width
        self.down = nn.Sequential(
            nn.Conv2d(1, fm // 2, 3, 2, 1), nn.ReLU(inplace=True),
            nn.Conv2d(fm // 2, fm, 3, 2, 1), nn.ReLU(inplace=True),
            nn.Conv2d(fm, fm, 3, 2, 1), nn.ReLU(inplace=True),
            nn.Conv2d(fm, fm, 3, 2, 1), nn.ReLU(inplace=True),
        )
        self.head16 = nn.Conv2d(fm, fm, 1)
        self.to32 = nn.Sequential(nn.Conv2d(fm, fm, 3, 2, 1), nn.ReLU(inplace=True))
        self.head32 = nn.Conv2d(fm, fm, 1)

    def forward(self, mask: torch.Tensor) -> Dict[int, torch.Tensor]:
        x = self.down(2.0 * mask - 1.0)
        return {16: self.head16(x), 32: self.head32(self.to32(x))}


class DoubleConv(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(_conv_bn(cin, cout), _conv_bn(cout, cout))


class Decoder(nn.Module):
    """U-Net style decoder over GP outputs (strides 32, 16) and image skips (8, 4)."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        gp_ch = cfg.mask_width + 1
        d16, d8, d4 = cfg.decoder_widths
        w = cfg.widths
        self.bottom = DoubleConv(gp_ch, d16)
        self.up16 = nn.ConvTranspose2d(d16, d16, 2, 2)
        self.merge16 = DoubleConv(d16 + gp_ch, d16)
        self.up8 = nn.ConvTranspose2d(d16, d8, 2, 2)
        self.merge8 = DoubleConv(d8 + w[1], d8)
        self.up4 = nn.ConvTranspose2d(d8, d4, 2, 2)
        self.merge4 = DoubleConv(d4 + w[0], d4)
        self.out = nn.Conv2d(d4, 1, 1)

    def forward(self, gp_outputs: Dict[int, torch.Tensor], skips: Dict[int, torch.Tensor],
                out_size: Tuple[int, int]) -> torch.Tensor:
        g16, g32 = gp_outputs[16], gp_outputs[32]
        s8, s4 = skips[8], skips[4]
        if g32.shape[0] != g16.shape[0] or s8.shape[0] not in (1, g16.shape[0]):
            raise ValueError("decoder inputs disagree on batch size")
        chain = [g32, g16, s8, s4]
        for coarse, fine in zip(chain, chain[1:]):
            if tuple(2 * d for d in coarse.shape[-2:]) != tuple(fine.shape[-2:]):
                raise ValueError("decoder inputs are spatially inconsistent")
        b = g16.shape[0]
        x = self.up16(self.bottom(g32))
        x = self.merge16(torch.cat([x, g16], 1))
        x = self.up8(x)
        x = self.merge8(torch.cat([x, s8.expand(b, -1, -1, -1)], 1))
        x = self.up4(x)
        x = self.merge4(torch.cat([x, s4.expand(b, -1, -1, -1)], 1))
        logits = self.out(x)
        return F.interpolate(logits, size=out_size, mode="bilinear", align_corners=False)[:, 0]


def pad_to_multiple(x: torch.Tensor, multiple: int = 32) -> Tuple[torch.Tensor, Tuple[int, int]]:
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph or pw:
        mode = "reflect" if ph < h and pw < w else "replicate"
        x = F.pad(x, (0, pw, 0, ph), mode=mode)
    return x, (h, w)


class FewShotSegmenter(nn.Module):
    """One shared binary segmenter; C-class prediction runs it once per class.

    Nothing in the module depends on the class count.
    """

    def __init__(self, cfg: Optional[NetworkConfig] = None):
        super().__init__()
        self.cfg = cfg = cfg or NetworkConfig.toy()
        self.image_encoder = ImageEncoder(cfg)
        self.mask_encoder = MaskEncoder(cfg)
        widths = dict(zip(STRIDES, cfg.widths))
        if cfg.shared_gp_params:
            head = GPHead(widths[32], max_support_rows=cfg.gp_max_support_rows)
            self.gp_heads = nn.ModuleDict({"16": head, "32": head})
        else:
            self.gp_heads = nn.ModuleDict({
                str(s): GPHead(widths[s], max_support_rows=cfg.gp_max_support_rows) for s in cfg.gp_strides
            })
        self.decoder = Decoder(cfg)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def _as_batch(self, images) -> torch.Tensor:
        x = images if torch.is_tensor(images) else np.ascontiguousarray(images)
        x = torch.as_tensor(x, dtype=self.dtype)
        if x.ndim == 2:
            x = x[None]
        if x.ndim == 3:
            x = x[:, None]
        return x

    def normalize_input(self, x: torch.Tensor) -> torch.Tensor:
        # images live in [0, 255]
        return x / 127.5 - 1.0

    def encode_image(self, images) -> Dict[int, torch.Tensor]:
        x = self._as_batch(images)
        if x.shape[-1] <= 0 or x.shape[-2] <= 0:
            raise ValueError("image has non-positive spatial size")
        return self.image_encoder(self.normalize_input(x))

    def encode_mask(self, masks) -> Dict[int, torch.Tensor]:
        return self.mask_encoder(self._as_batch(masks))

    def decode(self, gp_outputs, shallow_skips, out_size) -> torch.Tensor:
        return torch.sigmoid(self.decode_logits(gp_outputs, shallow_skips, out_size))

    def decode_logits(self, gp_outputs, shallow_skips, out_size) -> torch.Tensor:
        return self.decoder(gp_outputs, shallow_skips, out_size)

    def classwise_logits(self, support_images, support_binary_masks, query_image,
                         generator: Optional[torch.Generator] = None) -> torch.Tensor:
        """Logits ``(C, H, W)`` for ``(K,H,W)`` images, ``(C,K,H,W)`` binary masks and a query image.

        Support/query images are encoded once; all C support-mask sets are
        encoded in one batch and the GP factorization is shared across classes.
        """
        sup = self._as_batch(support_images)
        qry = self._as_batch(query_image)
        masks = torch.as_tensor(support_binary_masks, dtype=self.dtype)
        c, k = masks.shape[:2]
        if masks.shape[-2:] != sup.shape[-2:] or qry.shape[-2:] != sup.shape[-2:] or k != sup.shape[0]:
            raise ValueError("support images, support masks and query must share H x W and K")
        h, w = qry.shape[-2:]
        both, _ = pad_to_multiple(torch.cat([sup, qry]))
        masks_p, _ = pad_to_multiple(masks.reshape(c * k, 1, h, w))
        feats = self.encode_image(both)
        menc = self.encode_mask(masks_p)
        gp_out = {}
        for s in self.cfg.gp_strides:
            f = feats[s]
            e = menc[s].reshape(c, k, *menc[s].shape[1:])
            gp_out[s] = self.gp_heads[str(s)](f[:k], e, f[k], generator=generator)
        skips = {s: feats[s][k:] for s in (4, 8)}
        logits = self.decode_logits(gp_out, skips, both.shape[-2:])
        return logits[:, :h, :w]

    @torch.no_grad()
    def predict_binary(self, support_images, support_binary_masks, query_image) -> torch.Tensor:
        m = torch.as_tensor(support_binary_masks, dtype=self.dtype)
        return torch.sigmoid(self.classwise_logits(support_images, m[None], query_image))[0]

    @torch.no_grad()
    def predict_classwise(self, support_images, support_binary_masks, query_image) -> torch.Tensor:
        return torch.sigmoid(self.classwise_logits(support_images, support_binary_masks, query_image))


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
