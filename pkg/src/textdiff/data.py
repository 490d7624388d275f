"""Dataset generation, folder loading, and split management.

The synthetic task is text-disambiguation by construction: every image
contains one disk and one square of similar intensity, the annotation names
which one is the target, and the mask covers only the named shape. An
image alone never determines the target, so text is causally necessary.
"""

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from PIL import Image

from .errors import (
    ConfigError,
    DataError,
    MissingMaskError,
    MissingTextError,
    PlacementError,
    SplitSizeError,
    UnreadableFileError,
)
from .seeding import numpy_rng

DISK, SQUARE = 0, 1
CLASS_PHRASES = {DISK: "round opacity", SQUARE: "square consolidation"}
TEXT_TEMPLATES = (
    "the lesion is the {cls} in the {loc}",
    "{cls} seen in the {loc} region",
    "segment the {cls} located in the {loc}",
    "finding consistent with a {cls} near the {loc}",
)
_PLACEMENT_TRIES = 200


@dataclass
class SegmentationSample:
    """One (image, annotation, mask) triple; image is (H, W, C) in [-1, 1]."""

    image: np.ndarray
    text: str
    mask: np.ndarray
    image_id: str

    def __post_init__(self):
        if self.image.ndim != 3:
            raise ConfigError(f"image must be (H,W,C), got {self.image.shape}")
        if self.mask.shape != self.image.shape[:2]:
            raise ConfigError(
                f"mask shape {self.mask.shape} != image spatial shape {self.image.shape[:2]}"
            )


@dataclass
class DatasetManifest:
    root: Optional[Path]
    train_ids: List[str] = field(default_factory=list)
    test_ids: List[str] = field(default_factory=list)
    resolution: int = 64
    provenance: str = "synthetic"

    def __post_init__(self):
        overlap = set(self.train_ids) & set(self.test_ids)
        if overlap:
            raise ConfigError(f"ids appear in both splits: {sorted(overlap)[:5]}")

    @property
    def all_ids(self) -> List[str]:
        return list(self.train_ids) + list(self.test_ids)


def _disk_raster(res: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:res, 0:res]
    return (((yy - cy) ** 2 + (xx - cx) ** 2) <= r * r).astype(np.uint8)


def _square_raster(res: int, cy: float, cx: float, half: float) -> np.ndarray:
    yy, xx = np.mgrid[0:res, 0:res]
    return ((np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)).astype(np.uint8)


def _place_shapes(res: int, rng: np.random.Generator):
    """Sample a disjoint disk and square (2 px margin); raise if it never fits."""
    r_lo, r_hi = max(3.0, 0.14 * res), max(4.0, 0.22 * res)
    for _ in range(_PLACEMENT_TRIES):
        r = rng.uniform(r_lo, r_hi)
        half = rng.uniform(r_lo, r_hi)
        if r + 1 >= res - r - 1 or half + 1 >= res - half - 1:
            continue  # shape cannot fit inside the frame at all
        dy, dx = rng.uniform(r + 1, res - r - 1, size=2)
        sy, sx = rng.uniform(half + 1, res - half - 1, size=2)
        disk = _disk_raster(res, dy, dx, r)
        square = _square_raster(res, sy, sx, half)
        pad_disk = _disk_raster(res, dy, dx, r + 2)
        pad_square = _square_raster(res, sy, sx, half + 2)
        if not (pad_disk & pad_square).any() and disk.any() and square.any():
            return disk, square, (dy, dx), (sy, sx)
    raise PlacementError(f"could not place two disjoint shapes at resolution {res}")


def _location_phrase(center: Tuple[float, float], res: int) -> str:
    cy, cx = center
    return ("upper " if cy < res / 2 else "lower ") + ("left" if cx < res / 2 else "right")


def normalize_image(u8: np.ndarray) -> np.ndarray:
    """uint8 [0,255] -> float32 [-1,1], channel-last with explicit channel dim."""
    arr = u8.astype(np.float32) / 127.5 - 1.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def denormalize_image(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round((np.asarray(img) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def generate_synthetic(
    n: int,
    resolution: int = 64,
    seed: int = 0,
    train_n: Optional[int] = None,
) -> Tuple[DatasetManifest, Dict[str, SegmentationSample]]:
    """Generate n two-shape images with texts naming the target shape.

    Deterministic given seed; the split defaults to a 2:1 train/test ratio.
    """
    if n < 2:
        raise ConfigError(f"need n >= 2 samples, got {n}")
    rng = numpy_rng(seed)
    width = max(3, len(str(n - 1)))
    samples: Dict[str, SegmentationSample] = {}
    for i in range(n):
        image_id = f"img_{i:0{width}d}"
        disk, square, disk_c, square_c = _place_shapes(resolution, rng)
        background = rng.uniform(20.0, 50.0)
        canvas = np.full((resolution, resolution), background, dtype=np.float64)
        canvas[disk == 1] = rng.uniform(150.0, 230.0)
        canvas[square == 1] = rng.uniform(150.0, 230.0)
        canvas += rng.normal(0.0, 4.0, size=canvas.shape)
        u8 = np.clip(np.round(canvas), 0, 255).astype(np.uint8)

        target = int(rng.integers(0, 2))
        mask = disk if target == DISK else square
        center = disk_c if target == DISK else square_c
        template = TEXT_TEMPLATES[int(rng.integers(0, len(TEXT_TEMPLATES)))]
        text = template.format(
            cls=CLASS_PHRASES[target], loc=_location_phrase(center, resolution)
        )
        samples[image_id] = SegmentationSample(
            image=normalize_image(u8), text=text, mask=mask.copy(), image_id=image_id
        )

    ids = sorted(samples.keys())
    if train_n is None:
        train_n = (2 * n) // 3
    if not (0 < train_n < n):
        raise SplitSizeError(f"train_n must be in (0, {n}), got {train_n}")
    perm = numpy_rng(seed + 1).permutation(len(ids))
    train_ids = sorted(ids[i] for i in perm[:train_n])
    test_ids = sorted(ids[i] for i in perm[train_n:])
    manifest = DatasetManifest(
        root=None,
        train_ids=train_ids,
        test_ids=test_ids,
        resolution=resolution,
        provenance="synthetic",
    )
    return manifest, samples


def write_dataset(root, manifest: DatasetManifest, samples: Dict[str, SegmentationSample]):
    """Materialize samples as images/, masks/, texts.csv, manifest.json."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for image_id in sorted(samples.keys()):
        s = samples[image_id]
        u8 = denormalize_image(s.image)
        img = Image.fromarray(u8[:, :, 0] if u8.shape[2] == 1 else u8)
        img.save(root / "images" / f"{image_id}.png")
        Image.fromarray((s.mask * 255).astype(np.uint8)).save(root / "masks" / f"{image_id}.png")
    with open(root / "texts.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["image_id", "text"])
        for image_id in sorted(samples.keys()):
            w.writerow([image_id, samples[image_id].text])
    payload = {
        "train_ids": manifest.train_ids,
        "test_ids": manifest.test_ids,
        "resolution": manifest.resolution,
        "provenance": manifest.provenance,
    }
    (root / "manifest.json").write_text(json.dumps(payload, indent=2) + "\n")
    return root


def _read_texts(path: Path) -> Dict[str, str]:
    if not path.exists():
        raise DataError(f"missing texts file {path}")
    with open(path, newline="", encoding="utf-8") as f:
        r = csv.reader(f)
        header = next(r, None)
        if header is None or [h.strip() for h in header[:2]] != ["image_id", "text"]:
            raise DataError(f"{path} must start with header 'image_id,text'")
        return {row[0]: row[1] for row in r if row}


def _load_image(path: Path, resolution: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("L", "RGB"):
                im = im.convert("L") if len(im.getbands()) == 1 else im.convert("RGB")
            if im.size != (resolution, resolution):
                im = im.resize((resolution, resolution), Image.BILINEAR)
            return np.asarray(im)
    except (OSError, SyntaxError) as e:
        raise UnreadableFileError(f"cannot read image {path.stem}: {e}") from e


def _load_mask(path: Path, resolution: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            im = im.convert("L")
            if im.size != (resolution, resolution):
                im = im.resize((resolution, resolution), Image.NEAREST)
            return (np.asarray(im) > 0).astype(np.uint8)
    except (OSError, SyntaxError) as e:
        raise UnreadableFileError(f"cannot read mask {path.stem}: {e}") from e


def load_folder(
    root, resolution: int = 256
) -> Tuple[DatasetManifest, Dict[str, SegmentationSample]]:
    """Load an images/ + masks/ + texts.csv folder, resizing to `resolution`.

    Images are resized bilinearly and scaled per channel to [-1, 1]; masks
    use nearest-neighbor and are re-binarized.
    """
    root = Path(root)
    images_dir = root / "images"
    if not images_dir.is_dir():
        raise DataError(f"{root} has no images/ directory")
    texts = _read_texts(root / "texts.csv")

    samples: Dict[str, SegmentationSample] = {}
    for img_path in sorted(images_dir.glob("*.png")):
        image_id = img_path.stem
        mask_path = root / "masks" / f"{image_id}.png"
        if not mask_path.exists():
            raise MissingMaskError(f"no mask for image {image_id!r}")
        if image_id not in texts:
            raise MissingTextError(f"no text row for image {image_id!r}")
        image = normalize_image(_load_image(img_path, resolution))
        mask = _load_mask(mask_path, resolution)
        samples[image_id] = SegmentationSample(
            image=image, text=texts[image_id], mask=mask, image_id=image_id
        )
    if not samples:
        raise DataError(f"no .png images found under {images_dir}")

    manifest_path = root / "manifest.json"
    if manifest_path.exists():
        meta = json.loads(manifest_path.read_text())
        manifest = DatasetManifest(
            root=root,
            train_ids=[i for i in meta.get("train_ids", []) if i in samples],
            test_ids=[i for i in meta.get("test_ids", []) if i in samples],
            resolution=resolution,
            provenance=meta.get("provenance", "folder"),
        )
    else:
        manifest = DatasetManifest(
            root=root,
            train_ids=sorted(samples.keys()),
            test_ids=[],
            resolution=resolution,
            provenance="folder",
        )
    return manifest, samples


def split(
    manifest: DatasetManifest, train_n: int, seed: int
) -> Tuple[DatasetManifest, DatasetManifest]:
    """Uniform random split without replacement; deterministic given seed."""
    ids = manifest.all_ids
    if not (0 < train_n < len(ids)):
        raise SplitSizeError(f"train_n must be in (0, {len(ids)}), got {train_n}")
    perm = numpy_rng(seed).permutation(len(ids))
    train_ids = sorted(ids[i] for i in perm[:train_n])
    test_ids = sorted(ids[i] for i in perm[train_n:])
    train_m = DatasetManifest(
        root=manifest.root,
        train_ids=train_ids,
        test_ids=[],
        resolution=manifest.resolution,
        provenance=manifest.provenance,
    )
    test_m = DatasetManifest(
        root=manifest.root,
        train_ids=[],
        test_ids=test_ids,
        resolution=manifest.resolution,
        provenance=manifest.provenance,
    )
    return train_m, test_m
