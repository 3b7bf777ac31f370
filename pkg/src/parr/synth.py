"""Synthetic attribute-conditioned images and dataset manifests.

Each attribute owns one block of a fixed grid covering the image.  An active
attribute paints its block in that attribute's palette color (accessory-like
groups draw a centered square glyph on the neutral background instead of a
full fill); inactive blocks stay neutral gray.  All colors are multiples of
51/255 so an 8-bit PNG round-trip is exact, and a small seeded jitter plus
Gaussian noise keep the task from being pixel-identical across instances.

The manifest is JSON lines: a header row holding the schema hash and image
geometry, then one record per image.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, ManifestError
from .schema import AttributeSchema, AttributeVector

# Glyph treatment for wearable extras; everything else fills its whole block.
GLYPH_GROUPS = frozenset({"accessory", "bag", "backpack"})

_LEVELS = (0, 51, 102, 153, 204, 255)
GRAY = (51, 51, 51)
_PALETTE = [
    (255, 0, 0),
    (0, 255, 0),
    (0, 0, 255),
    (255, 255, 0),
    (255, 0, 255),
    (0, 255, 255),
    (255, 153, 0),
    (153, 0, 255),
    (0, 153, 51),
    (204, 102, 0),
    (102, 204, 255),
    (255, 102, 153),
    (153, 255, 0),
    (0, 102, 255),
    (204, 0, 102),
    (102, 51, 0),
]


def attribute_color(index: int) -> tuple[int, int, int]:
    if index >= len(_PALETTE):
        raise ConfigError(
            f"only {len(_PALETTE)} block colors defined, attribute {index} requested"
        )
    return _PALETTE[index]


def block_grid(n_attr: int, image_hw: tuple[int, int]) -> tuple[int, int, int, int]:
    """(rows, cols, block_h, block_w) of the attribute grid."""
    h, w = image_hw
    cols = 2 if n_attr > 1 else 1
    rows = math.ceil(n_attr / cols)
    if h % rows or w % cols:
        raise ConfigError(
            f"image {image_hw} does not divide into a {rows}x{cols} block grid"
        )
    return rows, cols, h // rows, w // cols


@dataclass(frozen=True)
class SynthConfig:
    schema: AttributeSchema
    image_hw: tuple[int, int] = (32, 16)
    n_categories: int = 25
    images_per_category: int = 125
    noise_std: float = 0.05
    seed: int = 0
    unseen_fraction: float = 0.2
    split_fractions: tuple[float, float, float] = (0.8, 0.12, 0.08)
    jitter: int = 2

    def __post_init__(self):
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}")
        n = self.schema.n_attr
        if n > 24:
            raise ConfigError("synthetic generation supports at most 24 attributes")
        if self.n_categories > 2**n:
            raise ConfigError(
                f"{self.n_categories} categories requested but only "
                f"{2**n} distinct attribute vectors exist"
            )
        if self.n_categories < 1 or self.images_per_category < 1:
            raise ConfigError("need at least one category and one image each")
        if not 0 <= self.unseen_fraction < 1:
            raise ConfigError(f"bad unseen_fraction {self.unseen_fraction}")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9 or min(self.split_fractions) < 0:
            raise ConfigError(f"split fractions must sum to 1: {self.split_fractions}")
        block_grid(n, self.image_hw)  # validates divisibility


def render(
    schema: AttributeSchema,
    attrs,
    instance_seed,
    *,
    image_hw: tuple[int, int] = (32, 16),
    noise_std: float = 0.0,
    jitter: int = 2,
) -> np.ndarray:
    """Deterministic (3, H, W) float image in [0, 1] for one attribute vector.

    `instance_seed` may be anything numpy accepts as a seed (ints or
    sequences); equal seeds give identical pixels.
    """
    vec = schema.check_query(attrs)
    h, w = image_hw
    rows, cols, bh, bw = block_grid(schema.n_attr, image_hw)
    img = np.zeros((h, w, 3), dtype=np.float64)
    img[:] = np.array(GRAY) / 255.0
    for i, bit in enumerate(vec.bits):
        r0 = (i // cols) * bh
        c0 = (i % cols) * bw
        if not bit:
            continue
        color = np.array(attribute_color(i)) / 255.0
        if schema.attributes[i].group in GLYPH_GROUPS:
            gy = max(1, bh // 8)
            gx = max(1, bw // 8)
            img[r0 + gy : r0 + bh - gy, c0 + gx : c0 + bw - gx] = color
        else:
            img[r0 : r0 + bh, c0 : c0 + bw] = color
    rng = np.random.default_rng(instance_seed)
    if jitter:
        dy, dx = rng.integers(-jitter, jitter + 1, size=2)
        img = np.roll(img, (int(dy), int(dx)), axis=(0, 1))
    if noise_std:
        img = img + rng.normal(0.0, noise_std, size=img.shape)
    return np.clip(img, 0.0, 1.0).transpose(2, 0, 1)


def decode_attributes(schema: AttributeSchema, image: np.ndarray) -> AttributeVector:
    """Inverse of render: nearest-color readout at each block center.

    Reads the 2x2 pixels around each block center (safe under the +-2px
    jitter) and declares the bit active when the patch is closer to the
    attribute's color than to the neutral gray.
    """
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ConfigError(f"expected a (3, H, W) image, got {img.shape}")
    _, h, w = img.shape
    rows, cols, bh, bw = block_grid(schema.n_attr, (h, w))
    bits = []
    gray = np.array(GRAY) / 255.0
    for i in range(schema.n_attr):
        r0 = (i // cols) * bh + bh // 2
        c0 = (i % cols) * bw + bw // 2
        patch = img[:, r0 - 1 : r0 + 1, c0 - 1 : c0 + 1].mean(axis=(1, 2))
        color = np.array(attribute_color(i)) / 255.0
        bits.append(
            int(
                np.linalg.norm(patch - color) < np.linalg.norm(patch - gray)
            )
        )
    return AttributeVector(tuple(bits))


@dataclass(frozen=True)
class ManifestRecord:
    image: str
    attrs: tuple[int, ...]
    category: int
    split: str


@dataclass
class Manifest:
    schema_hash: str
    image_hw: tuple[int, int]
    records: list[ManifestRecord] = field(default_factory=list)

    def split(self, name: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == name]

    def categories(self, split_name: str | None = None) -> dict[int, tuple[int, ...]]:
        recs = self.records if split_name is None else self.split(split_name)
        return {r.category: r.attrs for r in recs}


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        json.dumps(
            {
                "schema_hash": manifest.schema_hash,
                "image_hw": list(manifest.image_hw),
                "n_records": len(manifest.records),
            },
            sort_keys=True,
        )
    ]
    for r in manifest.records:
        lines.append(
            json.dumps(
                {
                    "image": r.image,
                    "attrs": list(r.attrs),
                    "category": r.category,
                    "split": r.split,
                },
                sort_keys=True,
            )
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path: str | Path, schema: AttributeSchema | None = None) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ManifestError(f"{path}: empty manifest")
    try:
        header = json.loads(lines[0])
        schema_hash = header["schema_hash"]
        image_hw = tuple(header["image_hw"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ManifestError(f"{path}:1: bad manifest header: {exc}") from exc
    if schema is not None and schema.schema_hash() != schema_hash:
        raise ManifestError(
            f"{path}: manifest was generated for schema {schema_hash[:12]}..., "
            f"got {schema.schema_hash()[:12]}..."
        )
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            records.append(
                ManifestRecord(
                    image=obj["image"],
                    attrs=tuple(int(b) for b in obj["attrs"]),
                    category=int(obj["category"]),
                    split=str(obj["split"]),
                )
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"{path}:{lineno}: bad record: {exc}") from exc
    if not records:
        raise ManifestError(f"{path}: manifest has no records")
    return Manifest(schema_hash=schema_hash, image_hw=image_hw, records=records)


def _sample_categories(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    n_attr = cfg.schema.n_attr
    codes = rng.choice(2**n_attr, size=cfg.n_categories, replace=False)
    vectors = (
        (codes[:, None] >> np.arange(n_attr)[None, :]) & 1
    ).astype(np.int64)
    return vectors


def _write_png(path: Path, image_chw: np.ndarray) -> None:
    arr = np.round(image_chw.transpose(1, 2, 0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def generate_dataset(cfg: SynthConfig, out_dir: str | Path) -> Manifest:
    """Render every image and write manifest.jsonl plus images/ under out_dir.

    Categories are sampled without replacement; a fixed fraction is held out
    of the train split entirely (unseen categories), appearing only in the
    gallery and query splits.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    vectors = _sample_categories(cfg, rng)
    n_unseen = int(round(cfg.unseen_fraction * cfg.n_categories))
    unseen = set(
        rng.choice(cfg.n_categories, size=n_unseen, replace=False).tolist()
    )
    f_train, f_gallery, f_query = cfg.split_fractions
    per = cfg.images_per_category
    records = []
    for cat in range(cfg.n_categories):
        attrs = tuple(int(b) for b in vectors[cat])
        if cat in unseen:
            n_train = 0
            denom = f_gallery + f_query
            n_gallery = per if denom == 0 else int(round(per * f_gallery / denom))
        else:
            n_train = int(round(per * f_train))
            n_gallery = int(round(per * f_gallery))
        for j in range(per):
            name = f"images/cat{cat:03d}_{j:04d}.png"
            img = render(
                cfg.schema,
                attrs,
                instance_seed=(cfg.seed, cat, j),
                image_hw=cfg.image_hw,
                noise_std=cfg.noise_std,
                jitter=cfg.jitter,
            )
            _write_png(out_dir / name, img)
            if j < n_train:
                split = "train"
            elif j < n_train + n_gallery:
                split = "gallery"
            else:
                split = "query"
            records.append(
                ManifestRecord(image=name, attrs=attrs, category=cat, split=split)
            )
    manifest = Manifest(
        schema_hash=cfg.schema.schema_hash(),
        image_hw=cfg.image_hw,
        records=records,
    )
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest


def load_split_arrays(
    manifest: Manifest, root: str | Path, split: str
) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[str]]:
    """(images, labels, categories, paths) for one split, in manifest order."""
    root = Path(root)
    recs = manifest.split(split)
    if not recs:
        raise ManifestError(f"split {split!r} has no records")
    images = np.stack([load_image(root / r.image) for r in recs]).astype(np.float32)
    labels = np.array([r.attrs for r in recs], dtype=np.int64)
    cats = np.array([r.category for r in recs], dtype=np.int64)
    return images, labels, cats, [r.image for r in recs]
