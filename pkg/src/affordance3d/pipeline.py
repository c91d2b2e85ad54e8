"""Glue between the dataset manifest and the three training stages."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig
from .cast import CastModel, HashTextEncoder, Prompt, make_sample, predict_samples, prepare_geometry
from .datasets import DatasetManifest
from .geometry import camera_ring
from .grounding import ProceduralTeacher, lift_features, load_lifted, save_lifted
from .io import load_arrays, load_cloud_npz
from .metrics import MetricsReport, aggregate, score_pair

log = logging.getLogger(__name__)

LIFTED_DIR = "lifted"


def open_manifest(data_dir) -> DatasetManifest:
    path = Path(data_dir) / "manifest.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.jsonl under {data_dir}")
    return DatasetManifest.read(path)


def teacher_dict(teacher: ProceduralTeacher):
    return {
        "name": teacher.name, "feature_dim": teacher.feature_dim, "num_parts": teacher.num_parts,
        "noise_scale": teacher.noise_scale, "seed": teacher.seed, "stride": teacher.stride,
    }


def lifted_path(manifest: DatasetManifest, object_id):
    return manifest.root / LIFTED_DIR / f"{object_id}.npz"


def lift_dataset(manifest: DatasetManifest, teacher, views=12, overwrite=False, records=None):
    """Lift teacher features for every object (or ``records``); returns written paths."""
    (manifest.root / LIFTED_DIR).mkdir(exist_ok=True)
    cams = camera_ring(views)
    out = []
    for rec in records if records is not None else manifest.records:
        path = lifted_path(manifest, rec.object_id)
        if overwrite or not path.exists():
            cloud = load_cloud_npz(manifest.root / rec.arrays)
            save_lifted(path, lift_features(cloud, cams, teacher))
        out.append(path)
    return out


def pretrain_items(manifest: DatasetManifest, split="train", teacher=None, views=12):
    """``(object_id, cloud, lifted features)`` for a split, lifting on demand."""
    recs = manifest.split(split)
    missing = [r for r in recs if not lifted_path(manifest, r.object_id).exists()]
    if missing:
        log.info("lifting %d objects without cached features", len(missing))
        lift_dataset(manifest, teacher or ProceduralTeacher(), views, records=missing)
    return [
        (r.object_id, load_cloud_npz(manifest.root / r.arrays), load_lifted(lifted_path(manifest, r.object_id)).features)
        for r in recs
    ]


def prompt_for(record, root, kinds, text_encoder, teacher) -> Prompt | None:
    if record.kind not in kinds:
        return None
    if record.kind == "text":
        return Prompt("text", text_encoder.encode(record.text))
    buf = load_arrays(Path(root) / record.exemplar)["part_id_buffer"]
    return Prompt("image", image_feature=teacher.encode_exemplar(buf))


def segmentation_samples(manifest: DatasetManifest, split, backbone_config: BackboneConfig, kinds=("text",),
                         text_encoder=None, teacher=None, fp_neighbors=3, records=None):
    text_encoder = text_encoder or HashTextEncoder()
    teacher = teacher or ProceduralTeacher()
    samples = []
    for rec in records if records is not None else manifest.split(split):
        cloud = load_cloud_npz(manifest.root / rec.arrays)
        geom = prepare_geometry(cloud, backbone_config, fp_neighbors)
        for pr in rec.prompts:
            prompt = prompt_for(pr, manifest.root, kinds, text_encoder, teacher)
            if prompt is None:
                continue
            target = load_arrays(manifest.root / pr.heatmap)[pr.heatmap_key]
            samples.append(make_sample(rec.object_id, pr.prompt_id, geom, target, prompt))
    return samples


def evaluate_samples(model: CastModel, samples) -> MetricsReport:
    preds = predict_samples(model, samples)
    rows = [score_pair(s.object_id, s.prompt_id, p, s.target.double().numpy()) for s, p in zip(samples, preds)]
    rows.sort(key=lambda r: (r.object_id, r.prompt_id))
    return aggregate(rows)


def mean_aiou(model, samples) -> float:
    return float(np.mean([r.aiou for r in evaluate_samples(model, samples).per_object]))
