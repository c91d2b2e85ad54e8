"""Stage 2: cross-modal affinity transfer pre-training."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import BackboneConfig, PointBackbone, group_tensors
from .errors import InvalidConfig, InvalidInput, NonFiniteLoss
from .geometry import PatchSet, make_patches

log = logging.getLogger(__name__)

KOLEO_EPS = 1e-8


def _tensor(x, dtype=None):
    if isinstance(x, torch.Tensor):
        return x, False
    return torch.as_tensor(np.asarray(x), dtype=dtype or torch.float64), True


def _out(t, was_numpy):
    return t.detach().numpy() if was_numpy else t


def pool_patch_features(per_point, patches):
    """Mean of per-point features over each patch's members.

    ``per_point`` is ``N x d`` (or ``B x N x d`` with ``member_indices``
    ``B x M x k``); accepts numpy arrays or tensors.
    """
    members = patches.member_indices if isinstance(patches, PatchSet) else patches
    x, was_np = _tensor(per_point)
    idx = torch.as_tensor(np.asarray(members) if not isinstance(members, torch.Tensor) else members, dtype=torch.long)
    if x.dim() == 2:
        pooled = x[idx].mean(dim=1)
    else:
        b, m, k = idx.shape
        flat = torch.gather(x, 1, idx.reshape(b, m * k, 1).expand(-1, -1, x.shape[-1]))
        pooled = flat.reshape(b, m, k, -1).mean(dim=2)
    return _out(pooled, was_np)


def affinity(pooled, return_zero_rows=False):
    """Pairwise cosine similarity of rows; rows with zero norm give all-zero entries."""
    x, was_np = _tensor(pooled)
    norm = x.norm(dim=-1, keepdim=True)
    zero = norm == 0
    xn = x / torch.where(zero, torch.ones_like(norm), norm)
    a = xn @ xn.transpose(-1, -2)
    out = _out(a, was_np)
    if return_zero_rows:
        return out, _out(zero.squeeze(-1), was_np)
    return out


def loss_rec(predicted, target):
    p, was_np = _tensor(predicted)
    t, _ = _tensor(target, p.dtype)
    if p.shape != t.shape:
        raise InvalidInput(f"shape mismatch {tuple(p.shape)} vs {tuple(t.shape)}")
    return _out(((p - t) ** 2).mean(), was_np)


def loss_aff(a3d, a2d):
    """Mean squared difference of the two affinity matrices (batch-averaged)."""
    a, was_np = _tensor(a3d)
    b, _ = _tensor(a2d, a.dtype)
    if a.shape != b.shape or a.shape[-1] != a.shape[-2]:
        raise InvalidInput(f"affinity shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return _out(((a - b) ** 2).mean(), was_np)


def nearest_neighbor_distance(x, eps=KOLEO_EPS):
    """Per-row distance to the nearest other row after l2 normalisation, clamped at ``eps``."""
    xn = F.normalize(x, dim=-1)
    diff = xn.unsqueeze(-2) - xn.unsqueeze(-3)
    sq = (diff * diff).sum(-1)
    m = x.shape[-2]
    eye = torch.eye(m, dtype=torch.bool, device=x.device)
    sq = sq.masked_fill(eye, float("inf"))
    # sqrt(max(sq, eps^2)) == max(dist, eps) and keeps a finite gradient
    return torch.sqrt(torch.clamp(sq.min(dim=-1).values, min=eps * eps))


def loss_div(student_pooled, eps=KOLEO_EPS):
    """KoLeo spreading loss: ``-mean(log d_j)`` over nearest-neighbour distances."""
    x, was_np = _tensor(student_pooled)
    if x.shape[-2] < 2:
        raise InvalidInput("diversity loss needs at least two rows")
    return _out(-torch.log(nearest_neighbor_distance(x, eps)).mean(), was_np)


# ---------------------------------------------------------------------------
# training

@dataclass
class PretrainConfig:
    lambda_rec: float = 1.0
    lambda_aff: float = 0.1
    lambda_div: float = 0.2
    epochs: int = 150
    batch_size: int = 128
    lr: float = 1e-4
    warmup_epochs: int = 15
    weight_decay: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if min(self.lambda_rec, self.lambda_aff, self.lambda_div) < 0:
            raise InvalidConfig("loss weights must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidConfig("epochs and batch_size must be positive")

    @classmethod
    def paper(cls, **kw):
        return cls(**kw)

    @classmethod
    def toy(cls, **kw):
        base = dict(epochs=30, warmup_epochs=3, batch_size=8, lr=1e-3)
        base.update(kw)
        return cls(**base)

    @classmethod
    def profile(cls, name, **kw):
        if name == "paper":
            return cls.paper(**kw)
        if name == "toy":
            return cls.toy(**kw)
        raise InvalidConfig(f"unknown profile {name!r}")


@dataclass
class LossReport:
    L_rec: float
    L_aff: float
    L_div: float
    L_total: float


@dataclass
class PretrainSample:
    object_id: str
    neighborhoods: torch.Tensor  # M x k x 3
    centers: torch.Tensor  # M x 3
    teacher_affinity: torch.Tensor  # M x M


def prepare_samples(items, config: BackboneConfig, start_index=0):
    """Build samples from ``(object_id, cloud, lifted_features)`` triples."""
    out = []
    for oid, cloud, feats in items:
        patches = make_patches(cloud, config.M, config.k, start_index)
        neigh, centers = group_tensors(cloud, patches)
        teacher = affinity(pool_patch_features(np.asarray(feats, dtype=np.float64), patches))
        out.append(PretrainSample(oid, neigh, centers, torch.as_tensor(teacher, dtype=torch.float32)))
    return out


def collate(samples):
    return (
        torch.stack([s.neighborhoods for s in samples]),
        torch.stack([s.centers for s in samples]),
        torch.stack([s.teacher_affinity for s in samples]),
        [s.object_id for s in samples],
    )


def compute_losses(model: PointBackbone, batch, config: PretrainConfig, generator=None):
    """Loss terms for one batch: masked pass for reconstruction, unmasked pass for affinity/diversity."""
    neigh, centers, a2d, _ = batch
    zero = torch.zeros((), dtype=neigh.dtype)
    l_rec = l_aff = l_div = zero
    if config.lambda_rec > 0:
        masked = model.encode(neigh, centers, mask=True, generator=generator)
        if masked.predicted_centers is not None:
            true = torch.gather(centers, 1, masked.masked_index[..., None].expand(-1, -1, 3))
            l_rec = loss_rec(masked.predicted_centers, true)
    if config.lambda_aff > 0 or config.lambda_div > 0:
        # student patch features are the patch tokens themselves
        tokens = model.encode(neigh, centers).patch_tokens
        a3d = affinity(tokens)
        l_aff = loss_aff(a3d, a2d)
        l_div = loss_div(tokens)
    total = config.lambda_rec * l_rec + config.lambda_aff * l_aff + config.lambda_div * l_div
    return {"L_rec": l_rec, "L_aff": l_aff, "L_div": l_div, "L_total": total}


def pretrain_step(model, batch, config: PretrainConfig, optimizer=None, generator=None) -> LossReport:
    """One optimisation step of the weighted CMAT objective on the backbone."""
    terms = compute_losses(model, batch, config, generator)
    for name, val in terms.items():
        if not torch.isfinite(val):
            raise NonFiniteLoss(name, batch[3], float(val.detach()))
    if optimizer is not None:
        optimizer.zero_grad(set_to_none=True)
        if terms["L_total"].requires_grad:
            terms["L_total"].backward()
        optimizer.step()
    return LossReport(**{k: float(v.detach()) for k, v in terms.items()})


def make_optimizer(params_groups, weight_decay):
    return torch.optim.AdamW(params_groups, weight_decay=weight_decay)


def decay_groups(model, lr, weight_decay=None):
    """Split parameters so biases, norms and embeddings skip weight decay."""
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        (decay if p.dim() >= 2 else no_decay).append(p)
    groups = [{"params": decay, "lr": lr, "base_lr": lr}, {"params": no_decay, "lr": lr, "base_lr": lr, "weight_decay": 0.0}]
    if weight_decay is not None:
        groups[0]["weight_decay"] = weight_decay
    return groups


def cosine_lr(step, total_steps, warmup_steps, min_ratio=0.01):
    """Multiplier on the base learning rate: linear warmup then cosine decay."""
    if warmup_steps > 0 and step < warmup_steps:
        return (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    t = min((step - warmup_steps) / span, 1.0)
    return min_ratio + (1 - min_ratio) * 0.5 * (1 + math.cos(math.pi * t))


def seed_everything(seed):
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))


def pretrain(samples, backbone_config: BackboneConfig, config: PretrainConfig, model=None, on_epoch=None, check_invariants=True):
    """Pre-train a backbone; returns ``(model, per-epoch log records)``."""
    seed_everything(config.seed)
    model = model if model is not None else PointBackbone(backbone_config)
    model.train()
    opt = make_optimizer(decay_groups(model, config.lr), config.weight_decay)
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    steps_per_epoch = math.ceil(len(samples) / config.batch_size)
    total = steps_per_epoch * config.epochs
    warm = steps_per_epoch * config.warmup_epochs
    step = 0
    history = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(samples))
        sums = {"L_rec": 0.0, "L_aff": 0.0, "L_div": 0.0, "L_total": 0.0}
        for s in range(steps_per_epoch):
            scale = cosine_lr(step, total, warm)
            for g in opt.param_groups:
                g["lr"] = g["base_lr"] * scale
            batch = collate([samples[i] for i in order[s * config.batch_size:(s + 1) * config.batch_size]])
            rep = pretrain_step(model, batch, config, opt, gen)
            n = len(batch[3])
            for key in sums:
                sums[key] += getattr(rep, key) * n
            step += 1
        record = {"epoch": epoch, **{k: v / len(samples) for k, v in sums.items()}}
        if check_invariants:
            check_affinity_invariants(model, samples[: min(4, len(samples))])
        history.append(record)
        log.info(json.dumps(record))
        if on_epoch is not None:
            on_epoch(record)
    model.eval()
    return model, history


def check_affinity_invariants(model, samples, tol=1e-5):
    with torch.no_grad():
        neigh, centers, a2d, _ = collate(samples)
        a3d = affinity(model.encode(neigh, centers).patch_tokens.double())
    for a in (a3d, a2d.double()):
        if not torch.allclose(a, a.transpose(-1, -2), atol=tol):
            raise AssertionError("affinity matrix is not symmetric")
        if (a.abs() > 1 + tol).any():
            raise AssertionError("affinity entries outside [-1, 1]")
        diag = torch.diagonal(a, dim1=-2, dim2=-1)
        if not torch.all((diag - 1).abs() < tol) and not torch.all((diag == 0) | ((diag - 1).abs() < tol)):
            raise AssertionError("affinity diagonal is not 1")


@torch.no_grad()
def mean_nn_distance(model, samples):
    """Mean nearest-neighbour distance among normalised patch tokens, averaged over objects."""
    neigh, centers, _, _ = collate(samples)
    tokens = model.encode(neigh, centers).patch_tokens.double()
    return float(nearest_neighbor_distance(tokens).mean())


def pretrain_config_dict(cfg: PretrainConfig):
    return asdict(cfg)
