"""Dataset manifests, image/mask codecs, and the synthetic scene generator.

Images are 8-bit grayscale PNG, masks 8-bit index PNG, manifests line-
oriented text (image<TAB>mask[<TAB>edges]) with `# key: value` header lines
for the class names and split. The generator renders labeled shapes, then
degrades the image the way thermal captures degrade: intensity crossover
between overlapping objects, blur, contrast compression, and sensor noise.
The mask always comes from the clean geometry.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from . import config
from .autodiff import Tensor

IGNORE_INDEX = 255

# fixed overlay palette, one RGB per class index
PALETTE = [
    (0, 0, 0), (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 190), (0, 128, 128), (170, 110, 40),
    (128, 0, 0), (170, 255, 195), (128, 128, 0), (255, 215, 180),
    (0, 0, 128), (128, 128, 128), (255, 250, 200),
]


@dataclass
class ManifestEntry:
    image: Path
    mask: Path
    edges: Path | None = None


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)
    class_names: list = field(default_factory=list)
    split: str = "train"
    path: Path | None = None

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.entries)


def read_image_array(path) -> np.ndarray:
    """(H, W) float array in [0, 1] from an 8-bit grayscale raster."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float64)
    except Exception as exc:  # Pillow raises various decode errors
        raise ValueError(f"malformed image {path}: {exc}") from exc
    return arr / 255.0


def read_image(path) -> Tensor:
    return Tensor(read_image_array(path)[None, None].astype(config.dtype()))


def read_mask(path, num_classes: int | None = None) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"mask not found: {path}")
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P"):
                raise ValueError(f"mask {path} must be 8-bit indexed, got mode {im.mode}")
            arr = np.asarray(im, dtype=np.int64)
    except ValueError:
        raise
    except Exception as exc:
        raise ValueError(f"malformed mask {path}: {exc}") from exc
    if num_classes is not None:
        bad = (arr >= num_classes) & (arr != IGNORE_INDEX)
        if bad.any():
            raise ValueError(f"mask {path}: label {int(arr[bad].flat[0])} outside "
                             f"[0, {num_classes - 1}] and not {IGNORE_INDEX}")
    return arr


def write_mask(mask: np.ndarray, path) -> None:
    mask = np.asarray(mask)
    if mask.min() < 0 or mask.max() > 255:
        raise ValueError("mask labels must fit in 8 bits")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask.astype(np.uint8), mode="L").save(path)


def write_image(image: np.ndarray, path) -> None:
    """Store a [0, 1] float image as 8-bit grayscale."""
    data = np.clip(np.asarray(image), 0.0, 1.0)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(data * 255.0).astype(np.uint8), mode="L").save(path)


def write_overlay(image: np.ndarray, mask: np.ndarray, path) -> None:
    """Blend the fixed class palette over the grayscale image."""
    gray = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    rgb = np.stack([gray] * 3, axis=-1) * 255.0
    colors = np.array(PALETTE, dtype=np.float64)
    labeled = (mask != IGNORE_INDEX) & (mask > 0)
    idx = np.clip(mask, 0, len(PALETTE) - 1)
    rgb[labeled] = 0.45 * rgb[labeled] + 0.55 * colors[idx[labeled]]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(rgb).astype(np.uint8), mode="RGB").save(path)


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent
    lines = [f"# split: {manifest.split}", f"# classes: {','.join(manifest.class_names)}"]
    for e in manifest.entries:
        cols = [Path(e.image).relative_to(base).as_posix(), Path(e.mask).relative_to(base).as_posix()]
        if e.edges is not None:
            cols.append(Path(e.edges).relative_to(base).as_posix())
        lines.append("\t".join(cols))
    path.write_text("\n".join(lines) + "\n")
    manifest.path = path


def load_manifest(path, validate_labels: bool = True) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    base = path.parent
    manifest = DatasetManifest(path=path)
    for raw in path.read_text().splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition(":")
            key = key.strip()
            if key == "split":
                manifest.split = value.strip()
            elif key == "classes":
                manifest.class_names = [c.strip() for c in value.split(",") if c.strip()]
            continue
        cols = line.split("\t")
        if len(cols) not in (2, 3):
            raise ValueError(f"{path}: bad manifest line {line!r}")
        entry = ManifestEntry(base / cols[0], base / cols[1],
                              base / cols[2] if len(cols) == 3 else None)
        for p in (entry.image, entry.mask, entry.edges):
            if p is not None and not p.exists():
                raise FileNotFoundError(f"{path}: referenced file missing: {p}")
        manifest.entries.append(entry)
    if not manifest.class_names:
        raise ValueError(f"{path}: no '# classes:' header")
    if validate_labels:
        for e in manifest.entries:
            read_mask(e.mask, manifest.num_classes)
    return manifest


# ---------------------------------------------------------------------------
# synthetic scene generation

DEFAULT_CLASSES = ("background", "disc", "rectangle", "bar", "blob", "slab")
# base radiated intensity per class; spread so the clean limit is threshold-separable
DEFAULT_INTENSITY = (0.08, 0.26, 0.44, 0.62, 0.80, 0.98)
# shape drawn for each foreground class
CLASS_SHAPES = ("disc", "rectangle", "bar", "disc", "rectangle")


@dataclass
class SynthSceneSpec:
    size: int = 32
    num_objects: tuple = (3, 6)          # inclusive range per scene
    class_intensity: tuple = DEFAULT_INTENSITY
    intensity_jitter: float = 0.03       # bounded uniform, keeps classes separable
    blur_sigma: float = 0.7
    noise_sigma: float = 0.02
    crossover_rate: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.crossover_rate <= 1.0:
            raise ValueError(f"crossover_rate must be in [0, 1], got {self.crossover_rate}")
        if any(not 0.0 <= v <= 1.0 for v in self.class_intensity):
            raise ValueError("class intensities must be in [0, 1]")

    @property
    def num_classes(self) -> int:
        return len(self.class_intensity)


def _draw_shape(rng, shape: str, size: int) -> np.ndarray:
    """Boolean footprint of one object on a size x size canvas."""
    yy, xx = np.mgrid[0:size, 0:size]
    cy = rng.uniform(size * 0.15, size * 0.85)
    cx = rng.uniform(size * 0.15, size * 0.85)
    if shape == "disc":
        r = rng.uniform(size * 0.10, size * 0.22)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if shape == "rectangle":
        hh = rng.uniform(size * 0.08, size * 0.20)
        hw = rng.uniform(size * 0.08, size * 0.20)
        return (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)
    if shape == "bar":
        long = rng.uniform(size * 0.18, size * 0.38)
        thin = rng.uniform(size * 0.04, size * 0.08)
        if rng.random() < 0.5:
            return (np.abs(yy - cy) <= thin) & (np.abs(xx - cx) <= long)
        return (np.abs(yy - cy) <= long) & (np.abs(xx - cx) <= thin)
    raise ValueError(f"unknown shape {shape!r}")


def render_scene(spec: SynthSceneSpec, rng) -> tuple[np.ndarray, np.ndarray]:
    """One (image, mask) pair; mask comes from geometry before degradation."""
    size = spec.size
    n_fg = spec.num_classes - 1
    count = int(rng.integers(spec.num_objects[0], spec.num_objects[1] + 1))
    footprints, classes, intensities = [], [], []
    for _ in range(count):
        cls = int(rng.integers(1, n_fg + 1))
        shape = CLASS_SHAPES[(cls - 1) % len(CLASS_SHAPES)]
        footprints.append(_draw_shape(rng, shape, size))
        classes.append(cls)
        jitter = rng.uniform(-spec.intensity_jitter, spec.intensity_jitter)
        intensities.append(float(np.clip(spec.class_intensity[cls] + jitter, 0.0, 1.0)))

    # thermal crossover: an object may take an overlapping predecessor's intensity
    for i in range(count):
        neighbors = [j for j in range(i) if (footprints[i] & footprints[j]).any()]
        if neighbors and rng.random() < spec.crossover_rate:
            intensities[i] = intensities[int(rng.choice(neighbors))]

    bg_jitter = rng.uniform(-spec.intensity_jitter, spec.intensity_jitter)
    image = np.full((size, size), np.clip(spec.class_intensity[0] + bg_jitter, 0.0, 1.0))
    mask = np.zeros((size, size), dtype=np.int64)
    for fp, cls, value in zip(footprints, classes, intensities):
        image[fp] = value
        mask[fp] = cls

    if spec.blur_sigma > 0:
        image = ndimage.gaussian_filter(image, sigma=spec.blur_sigma, mode="reflect")
    image = 0.3 + 0.4 * image  # compress contrast into [0.3, 0.7]
    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, image.shape)
    return np.clip(image, 0.0, 1.0), mask


def thermogen(spec: SynthSceneSpec, count: int, seed: int, out_dir,
              split: str = "train", class_names: tuple = DEFAULT_CLASSES) -> DatasetManifest:
    """Render `count` scenes under `out_dir` and return the written manifest."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if len(class_names) != spec.num_classes:
        raise ValueError(f"{len(class_names)} class names for {spec.num_classes} intensities")
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ValueError(f"cannot create output directory {out_dir}: {exc}") from exc
    manifest = DatasetManifest(class_names=list(class_names), split=split)
    for index in range(count):
        rng = np.random.default_rng([seed & 0xFFFFFFFF, index])  # per-scene stream
        image, mask = render_scene(spec, rng)
        image_path = out_dir / "images" / f"{index:05d}.png"
        mask_path = out_dir / "masks" / f"{index:05d}.png"
        write_image(image, image_path)
        write_mask(mask, mask_path)
        manifest.entries.append(ManifestEntry(image_path, mask_path))
    save_manifest(manifest, out_dir / "manifest.txt")
    return manifest


def dataset_stats(manifest: DatasetManifest) -> list[dict]:
    """Per-class image and pixel counts, one row per class."""
    pixels = np.zeros(manifest.num_classes, dtype=np.int64)
    images = np.zeros(manifest.num_classes, dtype=np.int64)
    for e in manifest.entries:
        mask = read_mask(e.mask, manifest.num_classes)
        present = np.unique(mask)
        for k in present[present != IGNORE_INDEX]:
            images[k] += 1
        counts = np.bincount(mask[mask != IGNORE_INDEX].ravel(), minlength=manifest.num_classes)
        pixels += counts[:manifest.num_classes]
    return [
        {"class": k, "name": manifest.class_names[k], "images": int(images[k]), "pixels": int(pixels[k])}
        for k in range(manifest.num_classes)
    ]
