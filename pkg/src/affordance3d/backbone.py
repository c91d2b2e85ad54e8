"""Patch transformer encoder with a masked-center decoder."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import InvalidConfig
from .geometry import PatchSet, PointCloud
from .io import load_arrays, read_header, save_arrays

CHECKPOINT_VERSION = "affordance3d.backbone.v1"


@dataclass
class BackboneConfig:
    depth: int = 12
    embed_dim: int = 384
    heads: int = 6
    M: int = 64
    k: int = 32
    mask_ratio: float = 0.6
    mlp_ratio: float = 4.0
    patch_hidden: int = 128
    quant_bins: int = 8

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise InvalidConfig("embed_dim must be divisible by heads")
        if not 0 <= self.mask_ratio < 1:
            raise InvalidConfig("mask_ratio must lie in [0, 1)")
        if self.M < 1 or self.k < 1 or self.depth < 0:
            raise InvalidConfig("M, k must be positive and depth non-negative")

    @classmethod
    def paper(cls, **kw):
        return cls(**kw)

    @classmethod
    def toy(cls, **kw):
        base = dict(depth=4, embed_dim=64, heads=4, M=16, k=128, patch_hidden=64)
        base.update(kw)
        return cls(**base)

    @classmethod
    def profile(cls, name, **kw):
        if name == "paper":
            return cls.paper(**kw)
        if name == "toy":
            return cls.toy(**kw)
        raise InvalidConfig(f"unknown profile {name!r}")

    @property
    def num_masked(self):
        return masked_count(self.mask_ratio, self.M)


def masked_count(mask_ratio, M):
    """Number of masked patches, ``mask_ratio * M`` rounded half up."""
    return int(math.floor(mask_ratio * M + 0.5))


def init_weights(module):
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * (q.shape[-1] ** -0.5)
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, c))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim, heads, mlp_ratio=4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class PatchEncoder(nn.Module):
    """Shared per-point network with max-pooling, applied to re-centered patches."""

    def __init__(self, hidden, out_dim):
        super().__init__()
        self.first = nn.Sequential(nn.Linear(3, hidden), nn.LayerNorm(hidden), nn.GELU(), nn.Linear(hidden, hidden))
        self.second = nn.Sequential(
            nn.Linear(2 * hidden, 2 * hidden), nn.LayerNorm(2 * hidden), nn.GELU(), nn.Linear(2 * hidden, out_dim)
        )

    def forward(self, groups):
        # groups: B x M x k x 3
        feat = self.first(groups)
        glob = feat.max(dim=2, keepdim=True).values.expand_as(feat)
        feat = self.second(torch.cat([glob, feat], dim=-1))
        return feat.max(dim=2).values


@dataclass
class BackboneOutput:
    patch_tokens: torch.Tensor  # B x M x d (unmasked) or B x |visible| x d
    visible_index: torch.Tensor  # B x |visible|
    masked_index: torch.Tensor | None = None  # B x |masked|
    predicted_centers: torch.Tensor | None = None  # B x |masked| x 3


class PointBackbone(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.patch_embed = PatchEncoder(config.patch_hidden, d)
        self.pos_embed = nn.Sequential(nn.Linear(3, config.patch_hidden), nn.GELU(), nn.Linear(config.patch_hidden, d))
        self.blocks = nn.ModuleList(Block(d, config.heads, config.mlp_ratio) for _ in range(config.depth))
        self.norm = nn.LayerNorm(d)
        self.mask_token = nn.Parameter(torch.zeros(d))
        self.decoder = nn.Sequential(nn.Linear(2 * d, d), nn.GELU(), nn.Linear(d, 3))
        self.apply(init_weights)
        nn.init.trunc_normal_(self.mask_token, std=0.02)

    def embed_patches(self, neighborhoods, centers, positional=True):
        """Tokens for re-centered patches ``B x M x k x 3`` with centers ``B x M x 3``."""
        tokens = self.patch_embed(neighborhoods)
        if positional:
            tokens = tokens + self.pos_embed(centers)
        return tokens

    def _transform(self, tokens):
        for blk in self.blocks:
            tokens = blk(tokens)
        return self.norm(tokens)

    def quantize(self, centers):
        bins = self.config.quant_bins
        cell = torch.clamp(torch.floor((centers + 1) * 0.5 * bins), 0, bins - 1)
        return (cell + 0.5) / bins * 2 - 1

    def sample_mask(self, batch, M=None, generator=None):
        """``(visible, masked)`` index tensors, each row sorted ascending."""
        M = self.config.M if M is None else M
        n_mask = masked_count(self.config.mask_ratio, M)
        if n_mask >= M:
            raise InvalidConfig("mask_ratio leaves no visible patches")
        if n_mask == 0:
            full = torch.arange(M).expand(batch, M)
            return full.clone(), torch.zeros(batch, 0, dtype=torch.long)
        noise = torch.rand(batch, M, generator=generator)
        order = noise.argsort(dim=1)
        masked = order[:, :n_mask].sort(dim=1).values
        visible = order[:, n_mask:].sort(dim=1).values
        return visible, masked

    def encode(self, neighborhoods, centers, mask=False, generator=None) -> BackboneOutput:
        """Unmasked forward, or (``mask=True``) a masked forward plus center decoding."""
        tokens = self.embed_patches(neighborhoods, centers)
        b, m, d = tokens.shape
        if not mask:
            return BackboneOutput(self._transform(tokens), torch.arange(m).expand(b, m))
        visible, masked = self.sample_mask(b, m, generator)
        vis_tokens = torch.gather(tokens, 1, visible[..., None].expand(-1, -1, d))
        latent = self._transform(vis_tokens)
        if masked.shape[1] == 0:
            return BackboneOutput(latent, visible, masked, None)
        masked_centers = torch.gather(centers, 1, masked[..., None].expand(-1, -1, 3))
        pred = self.decode_centers(latent, masked_centers)
        return BackboneOutput(latent, visible, masked, pred)

    def decode_centers(self, latent, masked_centers):
        """Predict masked centers from mask queries and the pooled visible latent.

        Queries see only an 8^3-bin quantisation of their own center.
        """
        query = self.mask_token + self.pos_embed(self.quantize(masked_centers))
        ctx = latent.mean(dim=1, keepdim=True).expand(-1, query.shape[1], -1)
        return self.decoder(torch.cat([query, ctx], dim=-1))

    def forward(self, neighborhoods, centers):
        return self.encode(neighborhoods, centers).patch_tokens


def group_tensors(cloud: PointCloud, patches: PatchSet, dtype=torch.float32):
    """Re-centered member coordinates ``M x k x 3`` and centers ``M x 3``."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    neigh = pts[patches.member_indices] - patches.centers[:, None, :]
    return torch.as_tensor(neigh, dtype=dtype), torch.as_tensor(patches.centers, dtype=dtype)


def embed_patches(model: PointBackbone, cloud: PointCloud, patches: PatchSet, positional=True):
    neigh, centers = group_tensors(cloud, patches)
    return model.embed_patches(neigh[None], centers[None], positional=positional)[0]


def save_backbone(path, model: PointBackbone, extra: dict | None = None):
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    header = {"version": CHECKPOINT_VERSION, "config": asdict(model.config), "extra": extra or {}}
    save_arrays(path, arrays, header=header)


def load_backbone(path) -> PointBackbone:
    arrays = load_arrays(path)
    if "header" not in arrays:
        raise InvalidConfig(f"{path}: checkpoint has no header")
    header = read_header(arrays)
    if header.get("version") != CHECKPOINT_VERSION:
        raise InvalidConfig(f"{path}: unsupported checkpoint version {header.get('version')!r}")
    model = PointBackbone(BackboneConfig(**header["config"]))
    state = {k[len("param/"):]: torch.as_tensor(v) for k, v in arrays.items() if k.startswith("param/")}
    model.load_state_dict(state)
    return model
