"""Dataset plumbing: manifests, synthetic data, folds, image files.

A manifest is a CSV with header ``id,path,label``; labels are category
names and category indices follow the sorted order of the names seen.
Synthetic datasets generate one deterministic sinusoidal texture per
class (plus seeded noise), reference images with a ``synthetic:`` URI
scheme, and fabricate per-class transcripts over disjoint vocabularies
so the text pathway separates classes too.
"""

import csv
import dataclasses
import io
import os

import numpy as np
from PIL import Image

from .errors import InvalidInputError, ParseError
from .llm import Transcript
from .params import make_rng

MANIFEST_HEADER = ["id", "path", "label"]
SYNTHETIC_SCHEME = "synthetic:"


@dataclasses.dataclass(frozen=True)
class Sample:
    id: int
    ref: str
    label: int


@dataclasses.dataclass
class DatasetManifest:
    categories: list
    samples: list

    @property
    def c(self):
        return len(self.categories)

    def __len__(self):
        return len(self.samples)

    def ids(self):
        return [s.id for s in self.samples]

    def labels_by_id(self):
        return {s.id: s.label for s in self.samples}

    def by_id(self, sample_id):
        for s in self.samples:
            if s.id == sample_id:
                return s
        raise KeyError(sample_id)


@dataclasses.dataclass
class Dataset:
    """Manifest plus materialized images and per-category transcripts."""

    manifest: DatasetManifest
    images: dict
    transcripts: dict

    def image(self, sample_id):
        return self.images[sample_id]


def load_manifest(path):
    """Parse and validate a manifest CSV.

    Raises a parse error with the offending line number for malformed
    rows, and reports every missing image file in one error.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("manifest is empty", line=1)
    if rows[0] != MANIFEST_HEADER:
        raise ParseError(
            f"header {rows[0]!r} != expected {MANIFEST_HEADER!r}", line=1)
    if len(rows) == 1:
        raise ParseError("manifest has a header but no rows", line=1)

    seen_ids = set()
    parsed = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != 3:
            raise ParseError(f"expected 3 fields, got {len(row)}", line=lineno)
        raw_id, ref, label = (cell.strip() for cell in row)
        try:
            sample_id = int(raw_id)
        except ValueError:
            raise ParseError(f"id {raw_id!r} is not an integer",
                             line=lineno) from None
        if sample_id in seen_ids:
            raise ParseError(f"duplicate id {sample_id}", line=lineno)
        if not ref:
            raise ParseError("empty path", line=lineno)
        if not label:
            raise ParseError("empty label", line=lineno)
        seen_ids.add(sample_id)
        parsed.append((sample_id, ref, label))

    if not parsed:
        raise ParseError("manifest has no data rows", line=len(rows))

    categories = sorted({label for _, _, label in parsed})
    index = {name: i for i, name in enumerate(categories)}
    manifest = DatasetManifest(
        categories=categories,
        samples=[Sample(id=i, ref=ref, label=index[label])
                 for i, ref, label in parsed])

    base = os.path.dirname(os.path.abspath(path))
    missing = []
    for s in manifest.samples:
        if s.ref.startswith(SYNTHETIC_SCHEME):
            continue
        full = s.ref if os.path.isabs(s.ref) else os.path.join(base, s.ref)
        if not os.path.exists(full):
            missing.append(s.ref)
    if missing:
        raise InvalidInputError(
            f"{len(missing)} image files missing: {missing}")
    return manifest


def save_manifest(path, manifest):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for s in manifest.samples:
            writer.writerow([s.id, s.ref, manifest.categories[s.label]])


# ---------------------------------------------------------------------------
# synthetic data

def class_template(label, size, channels):
    """Deterministic per-class texture in [0, 1]: a tilted sinusoid whose
    frequency pair and phase are functions of the label alone."""
    fx = 1 + label % 4
    fy = 1 + label // 4
    phase = label * 0.7
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    plane = 0.5 + 0.5 * np.sin(2.0 * np.pi * (fx * xx + fy * yy) / size + phase)
    return np.repeat(plane[:, :, None], channels, axis=2)


def _class_transcript(name, label):
    """Six text blocks over a vocabulary unique to this class."""
    words = [f"c{label}w{j}" for j in range(12)]
    responses = []
    for i in range(6):
        chunk = words[2 * i:2 * i + 8] or words
        responses.append(" ".join(chunk * 3))
    return Transcript(category=name, family="nanomaterial",
                      responses=responses, provider="synthetic")


def synth_dataset(c=10, per_class=20, size=32, channels=1, noise=0.0, seed=0,
                  image_dir=None):
    """Class-conditional synthetic dataset.

    Images are the class template plus seeded Gaussian noise, clipped
    back to [0, 1]; at noise=0 each class collapses to a single point,
    so a nearest-template rule is exact. With ``image_dir`` the images
    are also written as PNGs and referenced by path instead of the
    ``synthetic:`` URI scheme.
    """
    if c < 2:
        raise InvalidInputError("need at least 2 classes")
    if per_class < 1:
        raise InvalidInputError("need at least 1 sample per class")
    rng = make_rng(seed, 17)
    categories = [f"class{k:02d}" for k in range(c)]
    samples = []
    images = {}
    next_id = 0
    for k in range(c):
        template = class_template(k, size, channels)
        for i in range(per_class):
            img = template
            if noise > 0.0:
                img = np.clip(template + noise * rng.normal(size=template.shape),
                              0.0, 1.0)
            ref = f"{SYNTHETIC_SCHEME}{categories[k]}/{i:04d}"
            if image_dir is not None:
                os.makedirs(image_dir, exist_ok=True)
                ref = os.path.join(image_dir, f"{categories[k]}_{i:04d}.png")
                save_png(ref, img)
            images[next_id] = np.asarray(img, dtype=np.float64)
            samples.append(Sample(id=next_id, ref=ref, label=k))
            next_id += 1
    manifest = DatasetManifest(categories=categories, samples=samples)
    transcripts = {name: _class_transcript(name, k)
                   for k, name in enumerate(categories)}
    return Dataset(manifest=manifest, images=images, transcripts=transcripts)


# ---------------------------------------------------------------------------
# folds

@dataclasses.dataclass
class FoldPlan:
    k: int
    folds: list  # (train_ids, val_ids) pairs


def kfold_split(manifest, k, seed=0):
    """Stratified k-fold plan: per class, a seeded shuffle dealt
    round-robin, so per-fold class counts differ by at most one."""
    if k < 2:
        raise InvalidInputError(f"k={k}; cross-validation needs k >= 2")
    by_class = {}
    for s in manifest.samples:
        by_class.setdefault(s.label, []).append(s.id)
    smallest = min(len(ids) for ids in by_class.values())
    if k > smallest:
        raise InvalidInputError(
            f"k={k} exceeds the smallest class size ({smallest})")

    val_sets = [[] for _ in range(k)]
    for label in sorted(by_class):
        ids = sorted(by_class[label])
        rng = make_rng(seed, 13, label)
        rng.shuffle(ids)
        for pos, sample_id in enumerate(ids):
            val_sets[pos % k].append(sample_id)

    all_ids = set(manifest.ids())
    folds = []
    for f in range(k):
        val = sorted(val_sets[f])
        train = sorted(all_ids.difference(val))
        folds.append((train, val))
    return FoldPlan(k=k, folds=folds)


def holdout_split(manifest, fraction=0.2, seed=0):
    """Single stratified split; at least one validation sample per class."""
    if not 0.0 < fraction < 1.0:
        raise InvalidInputError(f"holdout fraction {fraction} not in (0, 1)")
    by_class = {}
    for s in manifest.samples:
        by_class.setdefault(s.label, []).append(s.id)
    train, val = [], []
    for label in sorted(by_class):
        ids = sorted(by_class[label])
        if len(ids) < 2:
            raise InvalidInputError(
                f"class {label} has {len(ids)} sample(s); need 2 for a split")
        rng = make_rng(seed, 19, label)
        rng.shuffle(ids)
        n_val = min(len(ids) - 1, max(1, round(fraction * len(ids))))
        val.extend(ids[:n_val])
        train.extend(ids[n_val:])
    return sorted(train), sorted(val)


# ---------------------------------------------------------------------------
# image files

def save_png(path, array01):
    """Write a [0, 1] float image as 8-bit PNG (grayscale or RGB)."""
    arr = np.asarray(array01, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path, format="PNG")


def load_image(path):
    """Read an image file into float64 [0, 1], shape (H, W, C)."""
    with Image.open(path) as img:
        arr = np.asarray(img, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def materialize_images(manifest, base_dir=""):
    """Load every on-disk image referenced by a manifest."""
    images = {}
    for s in manifest.samples:
        if s.ref.startswith(SYNTHETIC_SCHEME):
            raise InvalidInputError(
                f"sample {s.id} has a synthetic reference {s.ref!r}; "
                f"synthetic datasets carry their images in memory")
        full = s.ref if os.path.isabs(s.ref) else os.path.join(base_dir, s.ref)
        images[s.id] = load_image(full)
    return images
