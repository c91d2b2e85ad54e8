"""Synthetic affordance objects, seen/unseen splits and the dataset manifest.

Objects are composites of parametric surface primitives sampled
area-proportionally to a fixed point count. Part ids are global across
categories so a teacher keyed on part id sees a consistent vocabulary.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import InvalidConfig, InvalidInput, InvalidSpec
from .geometry import PointCloud, camera_ring, normalize_cloud, project_points
from .io import save_arrays, save_cloud_npz, save_cloud_ply

NUM_POINTS = 2048
SMOOTH_DECAY = 0.05
CATEGORIES = ("mug", "chair", "hammer", "door")
SPLITS = ("train", "seen-test", "unseen-test")

PART_IDS = {
    "mug_body": 0,
    "mug_handle": 1,
    "chair_seat": 2,
    "chair_back": 3,
    "chair_leg": 4,
    "hammer_handle": 5,
    "hammer_head": 6,
    "door_panel": 7,
    "door_knob": 8,
}

PROMPT_TEXT = {
    "grasp": "grasp the handle",
    "contain": "contain liquid inside the body",
    "sit": "sit on the seat",
    "lean": "lean against the backrest",
    "move": "move it by the legs",
    "pound": "pound with the head",
    "open": "open the door with the knob",
    "push": "push the panel",
}


@dataclass
class Part:
    part_id: int
    primitive: str  # cylinder | box | torus_arc | sphere_cap
    params: dict
    rotation: tuple = (0.0, 0.0, 0.0)  # xyz euler degrees
    translation: tuple = (0.0, 0.0, 0.0)
    affordances: tuple = ()


@dataclass
class SyntheticObjectSpec:
    category: str
    parts: list[Part]
    num_points: int = NUM_POINTS
    seed: int = 0
    smooth: bool = False
    object_id: str = ""

    @property
    def affordances(self):
        tags = []
        for p in self.parts:
            for t in p.affordances:
                if t not in tags:
                    tags.append(t)
        return tags


# ---------------------------------------------------------------------------
# primitive surfaces: (area, sampler(rng, n) -> n x 3) in the local frame

def _cylinder(p):
    r, h = p["radius"], p["height"]
    caps = p.get("caps", "both")
    ncap = {"none": 0, "bottom": 1, "top": 1, "both": 2}[caps]
    side, cap = 2 * math.pi * r * h, math.pi * r * r
    area = side + ncap * cap

    def sample(rng, n):
        which = rng.random(n) * area
        th = rng.random(n) * 2 * math.pi
        out = np.empty((n, 3))
        on_side = which < side
        out[:, 0] = r * np.cos(th)
        out[:, 2] = r * np.sin(th)
        out[:, 1] = rng.random(n) * h
        rad = r * np.sqrt(rng.random(n))
        capped = ~on_side
        out[capped, 0] = rad[capped] * np.cos(th[capped])
        out[capped, 2] = rad[capped] * np.sin(th[capped])
        if caps == "both":
            out[capped, 1] = np.where(which[capped] < side + cap, 0.0, h)
        else:
            out[capped, 1] = 0.0 if caps == "bottom" else h
        return out

    return area, sample, min(r, h)


def _box(p):
    sx, sy, sz = p["size"]
    faces = [  # (axis fixed, area)
        (0, sy * sz), (0, sy * sz), (1, sx * sz), (1, sx * sz), (2, sx * sy), (2, sx * sy)
    ]
    areas = np.array([a for _, a in faces])
    area = areas.sum()
    half = np.array([sx, sy, sz]) / 2

    def sample(rng, n):
        f = np.searchsorted(np.cumsum(areas) / area, rng.random(n), side="right")
        f = np.minimum(f, 5)
        out = (rng.random((n, 3)) * 2 - 1) * half
        axis = f // 2
        sign = np.where(f % 2 == 0, -1.0, 1.0)
        out[np.arange(n), axis] = sign * half[axis]
        return out

    return area, sample, min(sx, sy, sz)


def _torus_arc(p):
    big, small = p["major"], p["minor"]
    a0, a1 = math.radians(p["start"]), math.radians(p["end"])
    area = 2 * math.pi * small * big * abs(a1 - a0)

    def sample(rng, n):
        out = np.empty((0, 3))
        while len(out) < n:
            m = 2 * (n - len(out)) + 16
            th = a0 + (a1 - a0) * rng.random(m)
            ph = rng.random(m) * 2 * math.pi
            keep = rng.random(m) * (big + small) <= big + small * np.cos(ph)
            th, ph = th[keep], ph[keep]
            ring = big + small * np.cos(ph)
            pts = np.stack([ring * np.cos(th), ring * np.sin(th), small * np.sin(ph)], axis=1)
            out = np.concatenate([out, pts])
        return out[:n]

    return area, sample, min(small, big * abs(a1 - a0))


def _sphere_cap(p):
    rad, polar = p["radius"], math.radians(p["polar"])
    area = 2 * math.pi * rad * rad * (1 - math.cos(polar))

    def sample(rng, n):
        ct = 1 - rng.random(n) * (1 - math.cos(polar))
        st = np.sqrt(np.clip(1 - ct * ct, 0, None))
        ph = rng.random(n) * 2 * math.pi
        return rad * np.stack([st * np.cos(ph), st * np.sin(ph), ct], axis=1)  # pole on +z

    return area, sample, min(rad, polar)


_PRIMITIVES = {"cylinder": _cylinder, "box": _box, "torus_arc": _torus_arc, "sphere_cap": _sphere_cap}


def _rotation(deg):
    rx, ry, rz = (math.radians(a) for a in deg)
    cx, sx, cy, sy, cz, sz = math.cos(rx), math.sin(rx), math.cos(ry), math.sin(ry), math.cos(rz), math.sin(rz)
    mx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    my = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    mz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return mz @ my @ mx


def _allocate(areas, n):
    """Largest-remainder split of ``n`` points proportional to ``areas``."""
    quota = np.asarray(areas) / np.sum(areas) * n
    counts = np.floor(quota).astype(int)
    rest = n - counts.sum()
    order = np.argsort(-(quota - counts), kind="stable")
    counts[order[:rest]] += 1
    return counts


def generate_object(spec: SyntheticObjectSpec) -> PointCloud:
    """Sample the composite surface to ``num_points`` points, with labels and heatmaps.

    Heatmaps are 1 on parts tagged with the affordance and 0 elsewhere; with
    ``spec.smooth`` untagged points get ``exp(-dist / 0.05)`` to the nearest
    tagged point.
    """
    if not spec.parts:
        raise InvalidSpec("object spec has no parts")
    built = []
    for part in spec.parts:
        if part.primitive not in _PRIMITIVES:
            raise InvalidSpec(f"unknown primitive {part.primitive!r}")
        area, sampler, extent = _PRIMITIVES[part.primitive](part.params)
        if not (area > 0 and extent > 0):
            raise InvalidSpec(f"degenerate {part.primitive} in part {part.part_id}")
        built.append((part, area, sampler))
    rng = np.random.default_rng(spec.seed)
    counts = _allocate([a for _, a, _ in built], spec.num_points)
    pts, labels, owners = [], [], []
    for j, ((part, _, sampler), c) in enumerate(zip(built, counts)):
        local = sampler(rng, int(c))
        pts.append(local @ _rotation(part.rotation).T + np.asarray(part.translation, dtype=np.float64))
        labels.append(np.full(int(c), part.part_id))
        owners.append(np.full(int(c), j))
    points = np.concatenate(pts)
    labels = np.concatenate(labels)
    owners = np.concatenate(owners)
    heatmaps = {}
    for tag in spec.affordances:
        tagged = np.isin(owners, [j for j, (p, _, _) in enumerate(built) if tag in p.affordances])
        heatmaps[tag] = tagged.astype(np.float64)
    cloud = normalize_cloud(PointCloud(points, labels, heatmaps))
    if spec.smooth:
        for tag, h in cloud.heatmaps.items():
            src = np.nonzero(h > 0)[0]
            rest = np.nonzero(h == 0)[0]
            _, d2 = kernels.knn(cloud.points[src], cloud.points[rest], 1)
            h[rest] = np.exp(-np.sqrt(d2[:, 0]) / SMOOTH_DECAY)
    return cloud


def category_spec(category: str, seed: int, num_points: int = NUM_POINTS, smooth: bool = False, object_id: str = "") -> SyntheticObjectSpec:
    """Randomised dimensions for one of the built-in categories."""
    rng = np.random.default_rng([seed, CATEGORIES.index(category) if category in CATEGORIES else 99])
    u = lambda lo, hi: float(rng.uniform(lo, hi))  # noqa: E731
    P = PART_IDS
    if category == "mug":
        r, h = u(0.35, 0.45), u(0.8, 1.0)
        big = u(0.22, 0.3)
        parts = [
            Part(P["mug_body"], "cylinder", {"radius": r, "height": h, "caps": "bottom"}, affordances=("contain",)),
            Part(P["mug_handle"], "torus_arc", {"major": big, "minor": u(0.04, 0.06), "start": -90, "end": 90},
                 translation=(r, h / 2, 0.0), affordances=("grasp",)),
        ]
    elif category == "chair":
        w, d, seat_h = u(0.7, 0.9), u(0.7, 0.9), u(0.4, 0.5)
        back_h, leg_r = u(0.6, 0.9), u(0.035, 0.05)
        parts = [
            Part(P["chair_seat"], "box", {"size": (w, 0.08, d)}, translation=(0, seat_h, 0), affordances=("sit",)),
            Part(P["chair_back"], "box", {"size": (w, back_h, 0.07)}, translation=(0, seat_h + 0.04 + back_h / 2, -d / 2 + 0.035),
                 affordances=("lean",)),
        ]
        for sx in (-1, 1):
            for sz in (-1, 1):
                parts.append(Part(P["chair_leg"], "cylinder", {"radius": leg_r, "height": seat_h - 0.04, "caps": "none"},
                                  translation=(sx * (w / 2 - 0.06), 0, sz * (d / 2 - 0.06)), affordances=("move",)))
    elif category == "hammer":
        length, hr = u(1.0, 1.3), u(0.045, 0.06)
        hw = u(0.45, 0.6)
        parts = [
            Part(P["hammer_handle"], "cylinder", {"radius": hr, "height": length, "caps": "bottom"}, affordances=("grasp",)),
            Part(P["hammer_head"], "box", {"size": (hw, u(0.12, 0.16), u(0.12, 0.16))}, translation=(u(-0.08, 0.08), length, 0),
                 affordances=("pound",)),
        ]
    elif category == "door":
        w, h = u(0.8, 1.0), u(1.8, 2.1)
        knob = u(0.09, 0.12)
        parts = [
            Part(P["door_panel"], "box", {"size": (w, h, 0.06)}, translation=(0, h / 2, 0), affordances=("push",)),
            Part(P["door_knob"], "sphere_cap", {"radius": knob, "polar": 90.0}, translation=(w / 2 - 0.15, h / 2, 0.03),
                 affordances=("open",)),
            Part(P["door_knob"], "sphere_cap", {"radius": knob, "polar": 90.0}, rotation=(0, 180, 0),
                 translation=(w / 2 - 0.15, h / 2, -0.03), affordances=("open",)),
        ]
    else:
        raise InvalidSpec(f"unknown category {category!r}")
    return SyntheticObjectSpec(category, parts, num_points, seed, smooth, object_id)


# ---------------------------------------------------------------------------
# manifest

@dataclass
class PromptRecord:
    prompt_id: str
    kind: str  # text | image
    text: str | None
    exemplar: str | None
    heatmap: str  # container path relative to the dataset root
    heatmap_key: str
    affordance: str


@dataclass
class ObjectRecord:
    object_id: str
    category: str
    split: str
    cloud: str  # PLY path relative to the dataset root
    arrays: str  # array container path relative to the dataset root
    prompts: list[PromptRecord] = field(default_factory=list)


@dataclass
class DatasetManifest:
    records: list[ObjectRecord]
    root: Path | None = None

    def split(self, name):
        return [r for r in self.records if r.split == name]

    def categories(self, split):
        return sorted({r.category for r in self.records if r.split == split})

    def write(self, path):
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")

    @classmethod
    def read(cls, path):
        path = Path(path)
        records = []
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            d = json.loads(line)
            d["prompts"] = [PromptRecord(**p) for p in d["prompts"]]
            if d["split"] not in SPLITS:
                raise InvalidInput(f"unknown split {d['split']!r}")
            records.append(ObjectRecord(**d))
        return cls(records, path.parent)

    def __eq__(self, other):
        return isinstance(other, DatasetManifest) and self.records == other.records


def build_splits(objects, unseen_categories, seen_test_fraction=0.2, seed=0) -> DatasetManifest:
    """Partition object records into train / seen-test / unseen-test.

    ``objects`` are :class:`ObjectRecord` (split field ignored). Held-out
    categories go wholly to unseen-test; a seeded ``seen_test_fraction`` of
    each remaining category goes to seen-test.
    """
    unseen = set(unseen_categories)
    cats = {o.category for o in objects}
    if not unseen:
        raise InvalidConfig("hold out at least one category")
    if cats and cats <= unseen:
        raise InvalidConfig("every category is held out; nothing left to train on")
    rng = np.random.default_rng(seed)
    out = []
    for cat in sorted(cats):
        group = sorted((o for o in objects if o.category == cat), key=lambda o: o.object_id)
        if cat in unseen:
            out.extend(_with_split(o, "unseen-test") for o in group)
            continue
        n_test = int(round(seen_test_fraction * len(group)))
        test_ids = set(rng.permutation(len(group))[:n_test].tolist())
        out.extend(_with_split(o, "seen-test" if i in test_ids else "train") for i, o in enumerate(group))
    out.sort(key=lambda o: o.object_id)
    return DatasetManifest(out)


def _with_split(rec, split):
    return ObjectRecord(rec.object_id, rec.category, split, rec.cloud, rec.arrays, list(rec.prompts))


def render_exemplar(category: str, affordance: str, seed: int, view: int = 1) -> np.ndarray:
    """Part-id buffer of a donor object with only the ``affordance`` parts kept."""
    spec = category_spec(category, seed)
    cloud = generate_object(spec)
    cam = camera_ring(12)[view]
    buf = project_points(cloud, cam).part_id_buffer
    keep = [p.part_id for p in spec.parts if affordance in p.affordances]
    return np.where(np.isin(buf, keep), buf, -1)


def generate_dataset(out_dir, num_objects: int, unseen=("door",), seed: int = 0, smooth: bool = False,
                     categories=CATEGORIES, num_points: int = NUM_POINTS) -> DatasetManifest:
    """Write clouds, exemplars and ``manifest.jsonl`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "clouds").mkdir(parents=True, exist_ok=True)
    (out / "exemplars").mkdir(exist_ok=True)
    unknown = set(unseen) - set(categories)
    if unknown:
        raise InvalidConfig(f"unknown held-out categories {sorted(unknown)}")
    records = []
    exemplars = {}
    for i in range(num_objects):
        cat = categories[i % len(categories)]
        oid = f"{cat}_{i:04d}"
        spec = category_spec(cat, seed * 100003 + i, num_points, smooth, oid)
        cloud = generate_object(spec)
        save_cloud_ply(out / "clouds" / f"{oid}.ply", cloud)
        save_cloud_npz(out / "clouds" / f"{oid}.npz", cloud)
        prompts = []
        for aff in spec.affordances:
            key = (cat, aff)
            if key not in exemplars:
                rel = f"exemplars/{cat}_{aff}.npz"
                save_arrays(out / rel, {"part_id_buffer": render_exemplar(cat, aff, seed * 100003 + 99991)})
                exemplars[key] = rel
            common = dict(heatmap=f"clouds/{oid}.npz", heatmap_key=f"heatmap/{aff}", affordance=aff)
            prompts.append(PromptRecord(f"{aff}/text", "text", PROMPT_TEXT[aff], None, **common))
            prompts.append(PromptRecord(f"{aff}/image", "image", None, exemplars[key], **common))
        records.append(ObjectRecord(oid, cat, "train", f"clouds/{oid}.ply", f"clouds/{oid}.npz", prompts))
    manifest = build_splits(records, unseen, seed=seed)
    manifest.root = out
    manifest.write(out / "manifest.jsonl")
    return manifest
