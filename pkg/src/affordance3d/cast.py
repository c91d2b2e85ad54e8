"""Stage 3: prompt-conditioned affordance segmentation transformer."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import kernels
from .backbone import BackboneConfig, Block, PointBackbone, group_tensors, init_weights
from .cmat import cosine_lr, decay_groups, seed_everything
from .errors import InvalidConfig, InvalidInput, InvalidPrompt, NonFiniteLoss
from .geometry import PatchSet, PointCloud, make_patches
from .grounding import ProceduralTeacher
from .io import load_arrays, read_header, save_arrays

log = logging.getLogger(__name__)

MODEL_VERSION = "affordance3d.cast.v1"
PROMPT_KINDS = ("text", "image", "both", "none")
FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25
DICE_SMOOTH = 1.0
FOURIER_BANDS = 4


def fourier_features(points, bands=FOURIER_BANDS):
    freqs = math.pi * 2.0 ** torch.arange(bands, dtype=points.dtype)
    ang = points[..., None] * freqs
    return torch.cat([points, ang.sin().flatten(-2), ang.cos().flatten(-2)], dim=-1)


# ---------------------------------------------------------------------------
# prompts

@dataclass
class Prompt:
    kind: str
    text_feature: np.ndarray | None = None
    image_feature: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in PROMPT_KINDS:
            raise InvalidPrompt(f"unknown prompt kind {self.kind!r}")
        want_text = self.kind in ("text", "both")
        want_img = self.kind in ("image", "both")
        if want_text != (self.text_feature is not None) or want_img != (self.image_feature is not None):
            raise InvalidPrompt(f"prompt kind {self.kind!r} does not match the populated features")

    @property
    def modalities(self):
        return {"text": ("text",), "image": ("image",), "both": ("text", "image"), "none": ()}[self.kind]

    @classmethod
    def build(cls, text_feature=None, image_feature=None):
        kind = {(True, True): "both", (True, False): "text", (False, True): "image", (False, False): "none"}[
            (text_feature is not None, image_feature is not None)
        ]
        return cls(kind, text_feature, image_feature)


class HashTextEncoder:
    """Bag-of-words text embedding: each lowercase word hashes to a fixed Gaussian vector."""

    name = "hash-bow"

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim = dim
        self.seed = seed

    def word_vector(self, word):
        digest = hashlib.blake2b(f"{self.seed}:{word}".encode(), digest_size=8).digest()
        return np.random.default_rng(int.from_bytes(digest, "little")).standard_normal(self.dim)

    def encode(self, text: str) -> np.ndarray:
        words = re.findall(r"[a-z0-9]+", text.lower())
        if not words:
            raise InvalidPrompt("empty text prompt")
        v = np.sum([self.word_vector(w) for w in words], axis=0)
        return v / np.linalg.norm(v)


class PretrainedTextEncoderStub:
    """Slot for a frozen pretrained language model returning one vector per phrase."""

    name = "pretrained-text"

    def __init__(self, dim: int = 768):
        self.dim = dim

    def encode(self, text: str) -> np.ndarray:
        raise NotImplementedError("no pretrained language model weights are bundled")


# ---------------------------------------------------------------------------
# configuration

@dataclass
class CastConfig:
    fusion_blocks: int = 6
    shared_dim: int = 256
    heads: int = 8
    mlp_ratio: float = 4.0
    fp_neighbors: int = 3
    lambda_focal: float = 1.0
    lambda_dice: float = 1.0
    text_dim: int = 64
    image_dim: int = 32
    prompt_kinds: tuple = ("text",)

    def __post_init__(self):
        self.prompt_kinds = tuple(self.prompt_kinds)
        if self.shared_dim % self.heads:
            raise InvalidConfig("shared_dim must be divisible by heads")
        if self.fp_neighbors < 1:
            raise InvalidConfig("fp_neighbors must be >= 1")
        bad = set(self.prompt_kinds) - {"text", "image"}
        if bad:
            raise InvalidConfig(f"unknown prompt modalities {sorted(bad)}")

    @classmethod
    def profile(cls, name, **kw):
        if name == "paper":
            return cls(**kw)
        if name == "toy":
            base = dict(fusion_blocks=2, shared_dim=64, heads=4)
            base.update(kw)
            return cls(**base)
        raise InvalidConfig(f"unknown profile {name!r}")


@dataclass
class FinetuneConfig:
    epochs: int = 100
    batch_size: int = 16
    lr_backbone: float = 1e-5
    lr_head: float = 1e-4
    weight_decay: float = 0.05
    freeze_backbone: bool = False
    seed: int = 0

    @classmethod
    def profile(cls, name, **kw):
        if name == "paper":
            return cls(**kw)
        if name == "toy":
            base = dict(epochs=200, batch_size=2, lr_backbone=1e-4, lr_head=5e-4)
            base.update(kw)
            return cls(**base)
        raise InvalidConfig(f"unknown profile {name!r}")


@dataclass
class SegmentationMask:
    logits: np.ndarray
    scores: np.ndarray


# ---------------------------------------------------------------------------
# model

def propagate(patch_features, idx, weights):
    """Weighted sum of patch features at ``idx`` (``... x N x K``) with ``weights``."""
    if isinstance(patch_features, torch.Tensor):
        idx = torch.as_tensor(idx, dtype=torch.long)
        w = torch.as_tensor(weights, dtype=patch_features.dtype)
        if patch_features.dim() == 2:
            return (patch_features[idx] * w[..., None]).sum(-2)
        b, n, k = idx.shape
        g = torch.gather(patch_features, 1, idx.reshape(b, n * k, 1).expand(-1, -1, patch_features.shape[-1]))
        return (g.reshape(b, n, k, -1) * w[..., None]).sum(-2)
    pf = np.asarray(patch_features)
    return (pf[np.asarray(idx)] * np.asarray(weights)[..., None]).sum(-2)


def feature_propagation(patch_features, patches: PatchSet, cloud, fp_neighbors: int = 3):
    """Inverse-distance-weighted upsampling of patch features to every point."""
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    k = min(fp_neighbors, patches.M)
    idx, w = kernels.idw_weights(points, patches.centers, k)
    return propagate(patch_features, idx, w)


class CastModel(nn.Module):
    def __init__(self, backbone: PointBackbone, config: CastConfig):
        super().__init__()
        self.backbone = backbone
        self.config = config
        s = config.shared_dim
        self.proj_3d = nn.Linear(backbone.config.embed_dim, s)
        self.proj_text = nn.Linear(config.text_dim, s)
        self.proj_img = nn.Linear(config.image_dim, s)
        self.E_point = nn.Parameter(torch.zeros(s))
        self.E_text = nn.Parameter(torch.zeros(s))
        self.E_img = nn.Parameter(torch.zeros(s))
        self.blocks = nn.ModuleList(Block(s, config.heads, config.mlp_ratio) for _ in range(config.fusion_blocks))
        self.head_norm = nn.LayerNorm(s)
        self.head = nn.Sequential(nn.Linear(s + 3 + 6 * FOURIER_BANDS, s), nn.GELU(), nn.Linear(s, 1))
        for name, mod in self.named_children():
            if name != "backbone":
                mod.apply(init_weights)
        for p in (self.E_point, self.E_text, self.E_img):
            nn.init.trunc_normal_(p, std=0.02)

    def head_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("backbone.")]

    def project_tokens(self, patch_tokens, text=None, image=None):
        """Sequence ``[prompt tokens; patch tokens]`` and the prompt-token count."""
        parts = []
        if text is not None:
            parts.append((self.proj_text(text) + self.E_text).unsqueeze(1))
        if image is not None:
            parts.append((self.proj_img(image) + self.E_img).unsqueeze(1))
        parts.append(self.proj_3d(patch_tokens) + self.E_point)
        return torch.cat(parts, dim=1), len(parts) - 1

    def fuse(self, seq):
        for blk in self.blocks:
            seq = blk(seq)
        return seq

    def forward(self, neighborhoods, centers, fp_idx, fp_w, points, text=None, image=None):
        tokens = self.backbone.encode(neighborhoods, centers).patch_tokens
        seq, q = self.project_tokens(tokens, text, image)
        fused = self.fuse(seq)
        if fused.shape[1] != seq.shape[1]:
            raise AssertionError("fusion changed the token count")
        per_point = propagate(fused[:, q:], fp_idx, fp_w)
        # point coordinates are the skip features of the finest level
        return self.head(torch.cat([self.head_norm(per_point), fourier_features(points)], dim=-1)).squeeze(-1)


# ---------------------------------------------------------------------------
# losses

def loss_focal(logits, target, gamma=FOCAL_GAMMA, alpha=FOCAL_ALPHA):
    """Mean binary focal loss; targets are binarised at 0.5."""
    logits = torch.as_tensor(logits)
    target = torch.as_tensor(target, dtype=logits.dtype)
    if logits.numel() == 0:
        raise InvalidInput("focal loss on empty input")
    if logits.shape != target.shape:
        raise InvalidInput("logits and targets must align")
    y = target >= 0.5
    log_pt = torch.where(y, F.logsigmoid(logits), F.logsigmoid(-logits))
    pt = log_pt.exp()
    alpha_t = torch.where(y, torch.full_like(logits, alpha), torch.full_like(logits, 1 - alpha))
    return (-alpha_t * (1 - pt) ** gamma * log_pt).mean()


def loss_dice(scores, target, smooth=DICE_SMOOTH):
    """Soft dice loss on the last axis, averaged over any leading batch axes."""
    scores = torch.as_tensor(scores)
    target = torch.as_tensor(target, dtype=scores.dtype)
    if scores.numel() == 0:
        raise InvalidInput("dice loss on empty input")
    if scores.shape != target.shape:
        raise InvalidInput("scores and targets must align")
    inter = (scores * target).sum(-1)
    return (1 - (2 * inter + smooth) / (scores.sum(-1) + target.sum(-1) + smooth)).mean()


def segmentation_loss(logits, target, config: CastConfig):
    return config.lambda_focal * loss_focal(logits, target) + config.lambda_dice * loss_dice(torch.sigmoid(logits), target)


# ---------------------------------------------------------------------------
# data

@dataclass
class SegSample:
    object_id: str
    prompt_id: str
    neighborhoods: torch.Tensor
    centers: torch.Tensor
    fp_idx: torch.Tensor
    fp_w: torch.Tensor
    points: torch.Tensor
    target: torch.Tensor
    text: torch.Tensor | None = None
    image: torch.Tensor | None = None

    @property
    def kind(self):
        return Prompt.build(self.text, self.image).kind


@dataclass
class Geometry:
    neighborhoods: torch.Tensor
    centers: torch.Tensor
    fp_idx: torch.Tensor
    fp_w: torch.Tensor
    points: torch.Tensor
    patches: PatchSet = field(repr=False)


def prepare_geometry(cloud, backbone_config: BackboneConfig, fp_neighbors=3, start_index=0) -> Geometry:
    patches = make_patches(cloud, backbone_config.M, backbone_config.k, start_index)
    neigh, centers = group_tensors(cloud, patches)
    idx, w = kernels.idw_weights(cloud.points, patches.centers, min(fp_neighbors, patches.M))
    return Geometry(neigh, centers, torch.as_tensor(idx), torch.as_tensor(w, dtype=torch.float32),
                    torch.as_tensor(cloud.points, dtype=torch.float32), patches)


def make_sample(object_id, prompt_id, geom: Geometry, target, prompt: Prompt) -> SegSample:
    t = lambda a: None if a is None else torch.as_tensor(np.asarray(a), dtype=torch.float32)  # noqa: E731
    return SegSample(object_id, prompt_id, geom.neighborhoods, geom.centers, geom.fp_idx, geom.fp_w, geom.points,
                     t(target), t(prompt.text_feature), t(prompt.image_feature))


def collate(samples):
    stack = lambda name: None if getattr(samples[0], name) is None else torch.stack([getattr(s, name) for s in samples])  # noqa: E731
    return dict(
        neighborhoods=stack("neighborhoods"), centers=stack("centers"), fp_idx=stack("fp_idx"), fp_w=stack("fp_w"),
        points=stack("points"), text=stack("text"), image=stack("image"),
    ), stack("target")


def batches_by_kind(samples, batch_size, rng):
    """Shuffled batches whose samples share one prompt kind."""
    by_kind = {}
    for i in rng.permutation(len(samples)):
        by_kind.setdefault(samples[i].kind, []).append(int(i))
    out = []
    for kind in sorted(by_kind):
        ids = by_kind[kind]
        out += [ids[j:j + batch_size] for j in range(0, len(ids), batch_size)]
    return [out[i] for i in rng.permutation(len(out))]


# ---------------------------------------------------------------------------
# training / inference

def build_model(backbone_config: BackboneConfig, cast_config: CastConfig, backbone: PointBackbone | None = None) -> CastModel:
    if backbone is None:
        backbone = PointBackbone(backbone_config)
    elif backbone.config != backbone_config:
        raise InvalidConfig("checkpoint backbone config differs from the requested one")
    else:
        backbone = copy.deepcopy(backbone)  # fine-tuning must not touch the caller's checkpoint
    return CastModel(backbone, cast_config)


def optimizer_groups(model: CastModel, cfg: FinetuneConfig):
    """Two learning-rate groups: the backbone and everything newly initialised."""
    groups = []
    if not cfg.freeze_backbone:
        for g in decay_groups(model.backbone, cfg.lr_backbone):
            g["group"] = "backbone"
            groups.append(g)
    head = nn.ModuleDict({n: m for n, m in model.named_children() if n != "backbone"})
    extra = [model.E_point, model.E_text, model.E_img]
    for g in decay_groups(head, cfg.lr_head):
        g["group"] = "cast"
        groups.append(g)
    groups.append({"params": extra, "lr": cfg.lr_head, "base_lr": cfg.lr_head, "weight_decay": 0.0, "group": "cast"})
    return groups


def finetune(samples, backbone_config: BackboneConfig, cast_config: CastConfig, cfg: FinetuneConfig,
             backbone: PointBackbone | None = None, on_epoch=None):
    """Fine-tune with focal + dice loss and differential learning rates.

    Returns ``(model, per-epoch records)``.
    """
    seed_everything(cfg.seed)
    model = build_model(backbone_config, cast_config, backbone)
    if cfg.freeze_backbone:
        for p in model.backbone.parameters():
            p.requires_grad_(False)
    for s in samples:
        check_prompt(model, Prompt.build(s.text, s.image))
    opt = torch.optim.AdamW(optimizer_groups(model, cfg), weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    per_epoch = len(batches_by_kind(samples, cfg.batch_size, np.random.default_rng(0)))
    total = per_epoch * cfg.epochs
    step = 0
    history = []
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        running = 0.0
        for ids in batches_by_kind(samples, cfg.batch_size, rng):
            scale = cosine_lr(step, total, 0)
            for g in opt.param_groups:
                g["lr"] = g["base_lr"] * scale
            inputs, target = collate([samples[i] for i in ids])
            logits = model(**inputs)
            loss = segmentation_loss(logits, target, cast_config)
            if not torch.isfinite(loss):
                raise NonFiniteLoss("L_seg", [samples[i].object_id for i in ids], float(loss.detach()))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            running += float(loss.detach()) * len(ids)
            step += 1
        record = {"epoch": epoch, "L_seg": running / len(samples)}
        history.append(record)
        log.info(json.dumps(record))
        if on_epoch is not None:
            on_epoch(record)
    model.eval()
    return model, history


def check_prompt(model: CastModel, prompt: Prompt):
    missing = set(prompt.modalities) - set(model.config.prompt_kinds)
    if missing:
        raise InvalidPrompt(f"model was not trained with {sorted(missing)} prompts")


@torch.no_grad()
def segment(model: CastModel, cloud: PointCloud, prompt: Prompt, start_index: int = 0) -> SegmentationMask:
    check_prompt(model, prompt)
    geom = prepare_geometry(cloud, model.backbone.config, model.config.fp_neighbors, start_index)
    t = lambda a: None if a is None else torch.as_tensor(np.asarray(a), dtype=torch.float32)[None]  # noqa: E731
    logits = model(geom.neighborhoods[None], geom.centers[None], geom.fp_idx[None], geom.fp_w[None], geom.points[None],
                   t(prompt.text_feature), t(prompt.image_feature))[0].double().numpy()
    return SegmentationMask(logits, 1.0 / (1.0 + np.exp(-logits)))


@torch.no_grad()
def predict_samples(model: CastModel, samples, batch_size=16):
    """Sigmoid scores for prepared samples, in input order."""
    out = [None] * len(samples)
    for ids in batches_by_kind(samples, batch_size, np.random.default_rng(0)):
        inputs, _ = collate([samples[i] for i in ids])
        scores = torch.sigmoid(model(**inputs)).double().numpy()
        for i, s in zip(ids, scores):
            out[i] = s
    return out


def save_model(path, model: CastModel, teacher: dict | None = None, text_encoder: dict | None = None, extra: dict | None = None):
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    header = {
        "version": MODEL_VERSION,
        "backbone": asdict(model.backbone.config),
        "cast": {**asdict(model.config), "prompt_kinds": list(model.config.prompt_kinds)},
        "teacher": teacher or {},
        "text_encoder": text_encoder or {},
        "extra": extra or {},
    }
    save_arrays(path, arrays, header=header)


def load_model(path):
    """Returns ``(model, header)``."""
    arrays = load_arrays(path)
    header = read_header(arrays)
    if header.get("version") != MODEL_VERSION:
        raise InvalidConfig(f"{path}: unsupported model version {header.get('version')!r}")
    model = CastModel(PointBackbone(BackboneConfig(**header["backbone"])), CastConfig(**header["cast"]))
    state = {k[len("param/"):]: torch.as_tensor(v) for k, v in arrays.items() if k.startswith("param/")}
    model.load_state_dict(state)
    model.eval()
    return model, header


def teacher_from_header(header) -> ProceduralTeacher:
    t = header.get("teacher") or {}
    return ProceduralTeacher(t.get("feature_dim", 32), t.get("num_parts", 16), t.get("noise_scale", 0.0), t.get("seed", 0), t.get("stride", 1))


def text_encoder_from_header(header) -> HashTextEncoder:
    t = header.get("text_encoder") or {}
    return HashTextEncoder(t.get("dim", 64), t.get("seed", 0))
