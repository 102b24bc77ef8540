"""Image IO, dataset manifests, and the procedural toy datasets.

Two toy families stand in for real corpora at desk scale:

* ``vessel-tree``: branching random-walk vessel masks rendered as warm,
  vignetted fundus-like photos with dark vessels and a bright disc.
* ``cell-blob``: one perturbed ellipse per image at a random position,
  rendered bright on a textured background.

Everything here is a pure function of its config and seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import jsonschema
import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, ContractError, ImageFormatError, ManifestError, MissingFilesError
from .rng import derive_seed, make_rng

FAMILIES = ("vessel-tree", "cell-blob")
DEFAULT_COUNTS = {"vessel-tree": 64, "cell-blob": 35}
IMAGE_SUFFIXES = (".png", ".pgm", ".ppm")
LUMA = np.array([0.299, 0.587, 0.114])

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass
class PairedSample:
    mask: np.ndarray   # (1, H, W) in [0, 1]
    photo: np.ndarray  # (3, H, W) in [0, 1]
    id: str

    def __post_init__(self):
        if self.mask.shape[1:] != self.photo.shape[1:]:
            raise ContractError(f"{self.id}: mask {self.mask.shape} and photo {self.photo.shape} differ in size")


@dataclass
class ToyGenConfig:
    family: str = "vessel-tree"
    image_size: int = 32
    count: int | None = None
    seed: int = 0
    noise: float = 0.02

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown toy family {self.family!r}; choose from {FAMILIES}")
        if self.count is None:
            self.count = DEFAULT_COUNTS[self.family]
        n = self.image_size
        if self.count < 1:
            raise ConfigError("count must be >= 1")
        if n < 8 or n & (n - 1):
            raise ConfigError(f"image_size must be a power of two, got {n}")
        if self.noise < 0:
            raise ConfigError("noise amplitude must be >= 0")


# -- image IO ----------------------------------------------------------------------

def to_uint8(values) -> np.ndarray:
    """Round-half-up quantization of [0, 1] values to 0..255."""
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ImageFormatError("cannot quantize non-finite pixel values")
    return np.floor(np.clip(v, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def load_image(path) -> np.ndarray:
    """8-bit PNG/PGM/PPM to a (C, H, W) float array in [0, 1], C in {1, 3}."""
    path = Path(path)
    if path.suffix.lower() not in IMAGE_SUFFIXES:
        raise ImageFormatError(f"{path}: unsupported image format {path.suffix!r}")
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            raise ImageFormatError(f"{path}: unsupported mode {im.mode!r}; need 8-bit grayscale or RGB")
        arr = np.asarray(im, dtype=np.uint8)
    arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
    return arr.astype(np.float64) / 255.0


def save_image(values, path) -> None:
    """Write (H, W), (1, H, W) or (3, H, W) values in [0, 1] as an 8-bit image."""
    path = Path(path)
    if path.suffix.lower() not in IMAGE_SUFFIXES:
        raise ImageFormatError(f"{path}: unsupported image format {path.suffix!r}")
    arr = np.asarray(values)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim == 3 and arr.shape[0] == 3:
        img = Image.fromarray(to_uint8(arr).transpose(1, 2, 0), mode="RGB")
    elif arr.ndim == 2:
        img = Image.fromarray(to_uint8(arr), mode="L")
    else:
        raise ImageFormatError(f"cannot save array of shape {np.shape(values)} as an image")
    if path.suffix.lower() == ".pgm" and img.mode != "L":
        raise ImageFormatError(f"{path}: PGM holds grayscale only")
    img.save(path)


def grayscale(image: np.ndarray) -> np.ndarray:
    """Luma (0.299, 0.587, 0.114) of a (3, H, W) image; (1, H, W) passes through."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape[0] == 1:
        return image[0]
    if image.shape[0] != 3:
        raise ContractError(f"expected 1 or 3 channels, got {image.shape[0]}")
    return np.tensordot(LUMA, image, axes=(0, 0))


# -- connectivity helpers -------------------------------------------------------------

def count_components(mask: np.ndarray) -> int:
    """Number of 8-connected foreground components."""
    _, n = ndimage.label(np.asarray(mask).reshape(np.shape(mask)[-2:]) > 0.5, structure=EIGHT_CONNECTED)
    return int(n)


# -- vessel-tree family ------------------------------------------------------------------

def _stamp(canvas: np.ndarray, y: float, x: float, radius: float) -> None:
    n = canvas.shape[0]
    r = int(math.ceil(radius))
    cy, cx = int(round(y)), int(round(x))
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            py, px = cy + dy, cx + dx
            if 0 <= py < n and 0 <= px < n and dy * dy + dx * dx <= radius * radius + 1e-9:
                canvas[py, px] = 1.0


def _walk(canvas, rng, y, x, angle, length, depth, levels, radii, step, bend=0.0):
    n = canvas.shape[0]
    points = []
    for _ in range(int(length / step)):
        angle += rng.normal(0.0, 0.07) + bend
        y += math.sin(angle) * step
        x += math.cos(angle) * step
        if not (0 <= round(y) < n and 0 <= round(x) < n):
            break
        _stamp(canvas, y, x, radii[depth])
        points.append((y, x, angle))
    if depth + 1 >= levels or len(points) < 4:
        return
    for _ in range(int(rng.integers(1, 3))):
        py, px, pa = points[int(rng.integers(len(points) // 4, len(points)))]
        turn = rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.1)
        _walk(canvas, rng, py, px, pa + turn, length * rng.uniform(0.4, 0.6), depth + 1,
              levels, radii, step)


def _vessel_attempt(rng: np.random.Generator, n: int) -> np.ndarray:
    canvas = np.zeros((n, n))
    levels = int(rng.integers(2, 5))
    scale = n / 32.0
    radii = [1.0 * scale, 0.5 * scale, 0.5 * scale, 0.5 * scale]
    y0 = n * (0.5 + rng.uniform(-0.08, 0.08))
    x0 = n * (0.22 + rng.uniform(-0.05, 0.05))
    _stamp(canvas, y0, x0, radii[0])
    # two arcades leaving the root, as around an optic disc
    for sign in (-1.0, 1.0):
        angle = sign * rng.uniform(0.7, 1.2)
        _walk(canvas, rng, y0, x0, angle, n * rng.uniform(0.7, 1.0), 0, levels, radii, 0.7,
              bend=-sign * 0.025)
    return canvas


def vessel_mask(seed: int, index: int, image_size: int = 32, max_attempts: int = 200) -> np.ndarray:
    """One (1, H, W) binary vessel tree: one 8-connected component, 2-30% foreground."""
    for attempt in range(max_attempts):
        rng = make_rng(seed, f"vessel/{index}/{attempt}")
        canvas = _vessel_attempt(rng, image_size)
        frac = canvas.mean()
        if 0.02 <= frac <= 0.30 and count_components(canvas) == 1:
            return canvas[None]
    raise RuntimeError(f"no valid vessel mask after {max_attempts} attempts (seed={seed}, index={index})")


def gen_toy_vessel_masks(cfg: ToyGenConfig) -> list[np.ndarray]:
    if cfg.family != "vessel-tree":
        raise ConfigError(f"gen_toy_vessel_masks needs family 'vessel-tree', got {cfg.family!r}")
    return [vessel_mask(cfg.seed, i, cfg.image_size) for i in range(cfg.count)]


def _coords(n: int):
    c = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    return np.meshgrid(c, c, indexing="ij")


def render_vessel_photo(mask, seed: int, noise: float = 0.02) -> np.ndarray:
    """Fundus-like (3, H, W) photo for a (1, H, W) soft or binary mask.

    Photo value at a pixel depends only on the mask value at that pixel (plus
    position and seeded noise), so a mask edit changes only the edited pixels.
    """
    m = np.asarray(mask, dtype=np.float64).reshape(np.shape(mask)[-2:])
    n = m.shape[0]
    yy, xx = _coords(n)
    rng = make_rng(seed, "render/vessel")
    cy, cx = 0.0 + rng.uniform(-0.03, 0.03), -0.56 + rng.uniform(-0.03, 0.03)
    r2 = yy * yy + xx * xx
    tone = np.array([0.80, 0.42, 0.20])[:, None, None]
    background = tone * (1.0 - 0.35 * r2)[None]
    disc = 0.22 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.09 ** 2))
    photo = (background + np.array([1.0, 0.9, 0.6])[:, None, None] * disc[None]) * (1.0 - 0.6 * m)[None]
    if noise > 0:
        photo = photo + noise * rng.standard_normal(photo.shape)
    return np.clip(photo, 0.0, 1.0)


# -- cell-blob family ----------------------------------------------------------------------

def _cell_attempt(rng: np.random.Generator, n: int) -> np.ndarray:
    cy, cx = rng.uniform(0.25, 0.75, size=2) * n
    a, b = rng.uniform(0.10, 0.20, size=2) * n
    rot = rng.uniform(0, math.pi)
    amps = rng.uniform(0.0, 0.12, size=3)
    phases = rng.uniform(0, 2 * math.pi, size=3)
    yy, xx = np.meshgrid(np.arange(n) + 0.5, np.arange(n) + 0.5, indexing="ij")
    dy, dx = yy - cy, xx - cx
    phi = np.arctan2(dy, dx)
    t = phi - rot
    r_ell = a * b / np.sqrt((b * np.cos(t)) ** 2 + (a * np.sin(t)) ** 2)
    wobble = 1.0 + sum(amps[k] * np.cos((k + 2) * phi + phases[k]) for k in range(3))
    return (np.hypot(dy, dx) <= r_ell * wobble).astype(np.float64)


def cell_mask(seed: int, index: int, image_size: int = 32, max_attempts: int = 200) -> np.ndarray:
    for attempt in range(max_attempts):
        canvas = _cell_attempt(make_rng(seed, f"cell/{index}/{attempt}"), image_size)
        if canvas.sum() >= 4 and count_components(canvas) == 1:
            return canvas[None]
    raise RuntimeError(f"no valid cell mask after {max_attempts} attempts (seed={seed}, index={index})")


def render_cell_photo(mask, seed: int, noise: float = 0.02) -> np.ndarray:
    """Bright cell body over a low-frequency textured background."""
    m = np.asarray(mask, dtype=np.float64).reshape(np.shape(mask)[-2:])
    n = m.shape[0]
    yy, xx = _coords(n)
    rng = make_rng(seed, "render/cell")
    fy, fx, ph = rng.uniform(1.5, 3.0), rng.uniform(1.5, 3.0), rng.uniform(0, 2 * math.pi)
    texture = 0.05 * np.sin(fy * math.pi * yy + ph) * np.cos(fx * math.pi * xx)
    background = np.array([0.30, 0.34, 0.38])[:, None, None] + texture[None]
    cell = np.array([0.82, 0.74, 0.70])[:, None, None] * (1.0 - 0.15 * (yy * yy + xx * xx))[None]
    photo = background * (1.0 - m)[None] + cell * m[None]
    if noise > 0:
        photo = photo + noise * rng.standard_normal(photo.shape)
    return np.clip(photo, 0.0, 1.0)


def render_toy_photo(mask, seed: int, noise: float = 0.02, family: str = "vessel-tree") -> np.ndarray:
    if family == "vessel-tree":
        return render_vessel_photo(mask, seed, noise)
    if family == "cell-blob":
        return render_cell_photo(mask, seed, noise)
    raise ConfigError(f"unknown toy family {family!r}")


def _paired(cfg: ToyGenConfig, make_mask) -> list[PairedSample]:
    prefix = "vessel" if cfg.family == "vessel-tree" else "cell"
    out = []
    for i in range(cfg.count):
        mask = make_mask(cfg.seed, i, cfg.image_size)
        photo = render_toy_photo(mask, derive_seed(cfg.seed, f"photo/{i}"), cfg.noise, cfg.family)
        out.append(PairedSample(mask, photo, f"{prefix}-{i:04d}"))
    return out


def gen_toy_vessel_dataset(cfg: ToyGenConfig) -> list[PairedSample]:
    if cfg.family != "vessel-tree":
        raise ConfigError(f"expected family 'vessel-tree', got {cfg.family!r}")
    return _paired(cfg, vessel_mask)


def gen_toy_cell_dataset(cfg: ToyGenConfig | None = None) -> list[PairedSample]:
    cfg = cfg or ToyGenConfig(family="cell-blob")
    if cfg.family != "cell-blob":
        raise ConfigError(f"expected family 'cell-blob', got {cfg.family!r}")
    return _paired(cfg, cell_mask)


def gen_toy_dataset(cfg: ToyGenConfig) -> list[PairedSample]:
    return gen_toy_vessel_dataset(cfg) if cfg.family == "vessel-tree" else gen_toy_cell_dataset(cfg)


# -- manifests ------------------------------------------------------------------------------
#
# JSON lines. Line 1 is a header object; every further line is one record.
# Paths are stored relative to the manifest's directory.

MANIFEST_VERSION = 1

MANIFEST_HEADER_SCHEMA = {
    "type": "object",
    "required": ["schema", "version", "kind", "provenance"],
    "properties": {
        "schema": {"const": "medsynth-manifest"},
        "version": {"type": "integer"},
        "kind": {"enum": ["paired", "masks-only"]},
        "provenance": {"enum": ["real", "synthetic", "toy"]},
        "image_size": {"type": "integer", "minimum": 1},
        "config_hash": {"type": "string"},
    },
}

MANIFEST_RECORD_SCHEMA = {
    "type": "object",
    "required": ["id", "mask", "split"],
    "additionalProperties": False,
    "properties": {
        "id": {"type": "string", "minLength": 1},
        "mask": {"type": "string"},
        "photo": {"type": ["string", "null"]},
        "split": {"enum": ["train", "test", None]},
    },
}


@dataclass
class ManifestRecord:
    id: str
    mask: str
    photo: str | None = None
    split: str | None = None


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    kind: str = "paired"
    provenance: str = "toy"
    root: Path = field(default_factory=Path)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.root = Path(self.root)
        self.validate()

    def validate(self) -> None:
        if self.kind not in ("paired", "masks-only"):
            raise ManifestError(f"unknown manifest kind {self.kind!r}")
        if self.provenance not in ("real", "synthetic", "toy"):
            raise ManifestError(f"unknown provenance {self.provenance!r}")
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ManifestError(f"duplicate ids: {', '.join(dup)}")
        if self.kind == "paired":
            lacking = [r.id for r in self.records if not r.photo]
            if lacking:
                raise ManifestError(f"paired manifest records without photo: {', '.join(lacking)}")

    def __len__(self):
        return len(self.records)

    def path(self, rel: str) -> Path:
        return self.root / rel

    def subset(self, split: str) -> "DatasetManifest":
        return replace(self, records=[r for r in self.records if r.split == split])

    def missing_files(self) -> list[Path]:
        missing = []
        for r in self.records:
            for rel in (r.mask, r.photo):
                if rel and not self.path(rel).exists():
                    missing.append(self.path(rel))
        return missing

    def header(self) -> dict:
        return {"schema": "medsynth-manifest", "version": MANIFEST_VERSION, "kind": self.kind,
                "provenance": self.provenance, **self.extra}

    def to_jsonl(self) -> str:
        lines = [json.dumps(self.header(), sort_keys=True)]
        for r in self.records:
            rec = {"id": r.id, "mask": r.mask, "split": r.split}
            if r.photo is not None:
                rec["photo"] = r.photo
            lines.append(json.dumps(rec, sort_keys=True))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_jsonl())


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    """Parse and validate a manifest; with ``check_files`` every missing path is reported at once."""
    path = Path(path)
    try:
        lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    except OSError as exc:
        raise FileNotFoundError(f"cannot read manifest {path}: {exc}") from None
    if not lines:
        raise ManifestError(f"{path}: empty manifest")
    try:
        header = json.loads(lines[0])
        jsonschema.validate(header, MANIFEST_HEADER_SCHEMA)
        records = []
        for ln in lines[1:]:
            rec = json.loads(ln)
            jsonschema.validate(rec, MANIFEST_RECORD_SCHEMA)
            records.append(ManifestRecord(rec["id"], rec["mask"], rec.get("photo"), rec.get("split")))
    except (json.JSONDecodeError, jsonschema.ValidationError) as exc:
        raise ManifestError(f"{path}: {getattr(exc, 'message', exc)}") from None
    if header["version"] != MANIFEST_VERSION:
        raise ManifestError(f"{path}: manifest version {header['version']} unsupported")
    extra = {k: v for k, v in header.items() if k not in ("schema", "version", "kind", "provenance")}
    manifest = DatasetManifest(records, header["kind"], header["provenance"], path.parent, extra)
    if check_files:
        missing = manifest.missing_files()
        if missing:
            raise MissingFilesError(missing)
    return manifest


def split_dataset(manifest: DatasetManifest, train_fraction: float, seed: int) -> DatasetManifest:
    """Seeded train/test assignment; at least one record lands on each side."""
    n = len(manifest)
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n_train = int(round(n * train_fraction))
    if n_train < 1 or n_train > n - 1:
        raise ConfigError(f"cannot split {n} records with train_fraction {train_fraction}")
    order = make_rng(seed, "split").permutation(n)
    train = set(order[:n_train].tolist())
    records = [replace(r, split="train" if i in train else "test") for i, r in enumerate(manifest.records)]
    return replace(manifest, records=records)


def write_dataset(samples: list[PairedSample], directory, provenance: str = "toy",
                  extra: dict | None = None, splits: dict | None = None,
                  suffix: str = ".png") -> DatasetManifest:
    """Write masks/photos under ``directory`` and return (unsaved) manifest for them."""
    directory = Path(directory)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    (directory / "photos").mkdir(parents=True, exist_ok=True)
    records = []
    for s in samples:
        mask_rel = f"masks/{s.id}{suffix}"
        photo_rel = f"photos/{s.id}.png"
        save_image(s.mask, directory / mask_rel)
        save_image(s.photo, directory / photo_rel)
        records.append(ManifestRecord(s.id, mask_rel, photo_rel, (splits or {}).get(s.id)))
    return DatasetManifest(records, "paired", provenance, directory, dict(extra or {}))


def write_masks(masks: list[np.ndarray], ids: list[str], directory, provenance: str = "synthetic",
                extra: dict | None = None) -> DatasetManifest:
    directory = Path(directory)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    for m, i in zip(masks, ids):
        rel = f"masks/{i}.png"
        save_image(m, directory / rel)
        records.append(ManifestRecord(i, rel, None, None))
    return DatasetManifest(records, "masks-only", provenance, directory, dict(extra or {}))


def load_arrays(manifest: DatasetManifest, split: str | None = None):
    """Stack a manifest's images: (ids, masks (N,1,H,W), photos (N,3,H,W) or None)."""
    records = [r for r in manifest.records if split is None or r.split == split]
    ids = [r.id for r in records]
    masks = np.stack([load_image(manifest.path(r.mask))[:1] for r in records]) if records else None
    photos = None
    if manifest.kind == "paired" and records:
        photos = np.stack([load_image(manifest.path(r.photo)) for r in records])
    return ids, masks, photos
