"""Gaussian-process regression from image-feature space to mask-feature space.

All functions operate on torch tensors so gradients flow into the kernel
hyperparameters and the encoders.  The linear solve uses a Cholesky
factorization of ``K_SS + noise^2 I`` with scale-aware jitter escalation;
the inverse is never formed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import torch
from torch import nn

JITTERS = (0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)


class NumericInputError(ValueError):
    pass


class ConditioningError(RuntimeError):
    pass


@dataclass
class KernelParams:
    sigma: torch.Tensor | float
    length: torch.Tensor | float
    noise: torch.Tensor | float = 0.0

    def __post_init__(self):
        v = {name: torch.as_tensor(getattr(self, name), dtype=torch.float64) for name in ("sigma", "length", "noise")}
        for name, x in v.items():
            if not torch.isfinite(x).all():
                raise NumericInputError(f"{name} must be finite")
        if v["sigma"] <= 0 or v["length"] <= 0:
            raise ValueError("sigma and length must be strictly positive")
        if v["noise"] < 0:
            raise ValueError("noise must be non-negative")


@dataclass
class GPosterior:
    mean: torch.Tensor  # (m, F')
    variance: torch.Tensor  # (m,)


def se_kernel(z1: torch.Tensor, z2: torch.Tensor, params: KernelParams) -> torch.Tensor:
    if z1.shape != z2.shape:
        raise ValueError(f"dimension mismatch: {tuple(z1.shape)} vs {tuple(z2.shape)}")
    sq = ((z2 - z1) ** 2).sum(-1)
    return params.sigma ** 2 * torch.exp(-sq / (2 * params.length ** 2))


def gram_matrix(a: torch.Tensor, b: torch.Tensor, params: KernelParams) -> torch.Tensor:
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"feature dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    sq = (a * a).sum(-1)[:, None] + (b * b).sum(-1)[None, :] - 2.0 * a @ b.T
    sq = sq.clamp_min(0.0)
    return params.sigma ** 2 * torch.exp(-sq / (2 * params.length ** 2))


def _check_finite(**tensors):
    for name, t in tensors.items():
        if not torch.isfinite(t).all():
            raise NumericInputError(f"{name} contains non-finite values")


def _factorize(k_ss: torch.Tensor, noise: torch.Tensor | float) -> torch.Tensor:
    n = k_ss.shape[0]
    a = k_ss + (noise ** 2) * torch.eye(n, dtype=k_ss.dtype, device=k_ss.device)
    scale = torch.diagonal(k_ss).sum().detach() / n
    eye = torch.eye(n, dtype=k_ss.dtype, device=k_ss.device)
    for eps in JITTERS:
        chol, info = torch.linalg.cholesky_ex(a + eps * scale * eye if eps else a)
        if int(info) == 0:
            return chol
    raise ConditioningError(f"Cholesky failed after jitter {JITTERS[-1]:g} x mean diagonal")


def class_wise_posteriors(support_feats: torch.Tensor, support_mask_encs: Sequence[torch.Tensor] | torch.Tensor,
                          query_feats: torch.Tensor, params: KernelParams) -> List[GPosterior]:
    """Posteriors for C classes sharing one support-image set.

    The factorization and the predictive variance depend only on the image
    features, so they are computed once and the variance tensor is shared by
    every returned posterior.
    """
    encs = torch.stack(list(support_mask_encs)) if not torch.is_tensor(support_mask_encs) else support_mask_encs
    c, n, f_out = encs.shape
    if support_feats.shape[0] != n:
        raise ValueError(f"{n} mask-encoding rows for {support_feats.shape[0]} support rows")
    if n < 1:
        raise ValueError("need at least one support row")
    _check_finite(support_feats=support_feats, support_mask_encs=encs, query_feats=query_feats)

    chol = _factorize(gram_matrix(support_feats, support_feats, params), params.noise)
    k_sq = gram_matrix(support_feats, query_feats, params)
    rhs = encs.permute(1, 0, 2).reshape(n, c * f_out)
    alpha = torch.cholesky_solve(rhs, chol)
    means = (k_sq.T @ alpha).reshape(-1, c, f_out).permute(1, 0, 2)

    v = torch.linalg.solve_triangular(chol, k_sq, upper=False)
    prior = params.sigma ** 2 * torch.ones(query_feats.shape[0], dtype=k_sq.dtype, device=k_sq.device)
    variance = (prior - (v * v).sum(0)).clamp_min(0.0)
    return [GPosterior(means[j], variance) for j in range(c)]


def gp_posterior(support_feats: torch.Tensor, support_mask_enc: torch.Tensor, query_feats: torch.Tensor,
                 params: KernelParams) -> GPosterior:
    return class_wise_posteriors(support_feats, support_mask_enc[None], query_feats, params)[0]


def subsample_rows(n: int, cap: int, generator: Optional[torch.Generator]) -> Optional[torch.Tensor]:
    """Uniform subset of row indices when ``n`` exceeds ``cap``; ``None`` means keep all."""
    if n <= cap:
        return None
    return torch.randperm(n, generator=generator)[:cap].sort().values


class GPHead(nn.Module):
    """Learnable SE-kernel GP regression at one latent stride.

    Hyperparameters are stored as logs so they stay positive under gradient
    descent.  ``max_support_rows`` caps the number of support rows used while
    training.
    """

    def __init__(self, feature_dim: int, sigma: float = 1.0, length: Optional[float] = None, noise: float = 0.1,
                 max_support_rows: int = 4096):
        super().__init__()
        length = math.sqrt(feature_dim) if length is None else length
        self.log_sigma = nn.Parameter(torch.tensor(math.log(sigma)))
        self.log_length = nn.Parameter(torch.tensor(math.log(length)))
        self.log_noise = nn.Parameter(torch.tensor(math.log(noise)))
        self.max_support_rows = max_support_rows

    def params(self, dtype=torch.float64) -> KernelParams:
        return KernelParams(self.log_sigma.exp().to(dtype), self.log_length.exp().to(dtype),
                            self.log_noise.exp().to(dtype))

    def forward(self, support_feats: torch.Tensor, support_mask_encs: torch.Tensor, query_feats: torch.Tensor,
                generator: Optional[torch.Generator] = None) -> torch.Tensor:
        """Map ``(K,F,h,w)`` support features, ``(C,K,F',h,w)`` mask encodings and ``(F,h,w)`` query
        features to ``(C, F'+1, h, w)``: posterior mean channels plus a predictive-std channel.
        """
        k, f, h, w = support_feats.shape
        c, _, f_out = support_mask_encs.shape[:3]
        dtype = support_feats.dtype
        s = support_feats.permute(0, 2, 3, 1).reshape(k * h * w, f).double()
        e = support_mask_encs.permute(0, 1, 3, 4, 2).reshape(c, k * h * w, f_out).double()
        q = query_feats.permute(1, 2, 0).reshape(h * w, f).double()
        if self.training:
            keep = subsample_rows(s.shape[0], self.max_support_rows, generator)
            if keep is not None:
                s, e = s[keep], e[:, keep]
        posts = class_wise_posteriors(s, e, q, self.params())
        mean = torch.stack([p.mean for p in posts])  # (C, hw, F')
        std = posts[0].variance.clamp_min(1e-12).sqrt()
        std = std[None, :, None].expand(c, -1, 1)
        out = torch.cat([mean, std], dim=-1).reshape(c, h, w, f_out + 1).permute(0, 3, 1, 2)
        return out.to(dtype)
