"""Dataset ingestion (MVTec AD layout), preprocessing and a synthetic generator.

Layout::

    <root>/<category>/train/good/*.png
    <root>/<category>/test/good/*.png
    <root>/<category>/test/<defect>/*.png
    <root>/<category>/ground_truth/<defect>/<name>_mask.png
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_SIZE = 256
GENERATOR_VERSION = "1"
STYLES = ("stripes", "checker", "blobs-texture", "placed-object")
DEFECTS = ("scratch", "blob", "missing-region")


class DatasetError(ValueError):
    """Missing or malformed dataset layout."""


@dataclass
class ImageRecord:
    id: str
    pixels: np.ndarray
    label: str
    category: str
    split: str
    mask: Optional[np.ndarray] = None
    path: Optional[str] = None

    @property
    def is_abnormal(self) -> bool:
        return self.label == "abnormal"


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def _to_rgb_uint8(img: Image.Image) -> Image.Image:
    if img.mode in ("L", "P", "LA", "RGBA", "CMYK", "YCbCr"):
        img = img.convert("L") if img.mode in ("L", "LA") else img.convert("RGB")
    elif img.mode != "RGB":
        raise DatasetError(f"unsupported image mode {img.mode!r}")
    if img.mode == "L":
        img = Image.merge("RGB", (img, img, img))
    return img


def preprocess(raw, size: int = IMAGE_SIZE, source: str = "<array>") -> np.ndarray:
    """Bilinear resize to size x size, grey replicated to RGB, values in [0, 1].

    ``raw`` is a PIL image, a path, or a uint8 array (HxW or HxWx3).
    """
    if isinstance(raw, (str, Path)):
        source = str(raw)
        try:
            with Image.open(raw) as im:
                im.load()
                raw = im.copy()
        except (OSError, SyntaxError) as exc:
            raise DatasetError(f"cannot decode image {source}: {exc}") from exc
    if isinstance(raw, np.ndarray):
        arr = raw
        if arr.dtype != np.uint8:
            raise DatasetError(f"{source}: expected uint8 pixels, got {arr.dtype}")
        raw = Image.fromarray(arr)
    img = _to_rgb_uint8(raw)
    if img.size != (size, size):
        w, h = img.size
        if w != h:
            log.warning("%s: non-square %dx%d image resampled to %dx%d", source, w, h, size, size)
        img = img.resize((size, size), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32) / np.float32(255.0)


def load_mask(path, size: int = IMAGE_SIZE) -> np.ndarray:
    try:
        with Image.open(path) as im:
            m = im.convert("L")
            if m.size != (size, size):
                m = m.resize((size, size), Image.NEAREST)
            return np.asarray(m) > 0
    except (OSError, SyntaxError) as exc:
        raise DatasetError(f"cannot decode mask {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

def _pngs(directory: Path) -> List[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() == ".png")


def _require(path: Path) -> Path:
    if not path.is_dir():
        raise DatasetError(f"missing dataset directory: {path}")
    return path


def load_dataset(root, category: str, size: int = IMAGE_SIZE) -> Tuple[List[ImageRecord], List[ImageRecord]]:
    base = _require(Path(root) / category)
    train_dir = _require(base / "train" / "good")
    test_dir = _require(base / "test")
    train = [
        ImageRecord(f"train/good/{p.stem}", preprocess(p, size), "normal", category, "train", path=str(p))
        for p in _pngs(train_dir)
    ]
    test = []
    for sub in sorted(d for d in test_dir.iterdir() if d.is_dir()):
        for p in _pngs(sub):
            rid = f"test/{sub.name}/{p.stem}"
            pixels = preprocess(p, size)
            if sub.name == "good":
                test.append(ImageRecord(rid, pixels, "normal", category, "test", path=str(p)))
                continue
            mpath = base / "ground_truth" / sub.name / f"{p.stem}_mask.png"
            if not mpath.is_file():
                raise DatasetError(f"missing ground-truth mask: {mpath}")
            test.append(ImageRecord(rid, pixels, "abnormal", category, "test", load_mask(mpath, size), str(p)))
    return train, test


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

@dataclass
class SyntheticConfig:
    category: str = "synth_object"
    style: str = "placed-object"
    n_train: int = 32
    n_test_good: int = 8
    n_test_defect: int = 8
    defect_types: Tuple[str, ...] = DEFECTS
    defect_size: Tuple[int, int] = (10, 28)
    noise: float = 0.02
    image_size: int = IMAGE_SIZE
    seed: int = 0

    def __post_init__(self):
        self.defect_types = tuple(self.defect_types)
        self.defect_size = tuple(int(v) for v in self.defect_size)
        if self.style not in STYLES:
            raise ValueError(f"style must be one of {STYLES}, got {self.style!r}")
        bad = set(self.defect_types) - set(DEFECTS)
        if bad or not self.defect_types:
            raise ValueError(f"defect types must be a non-empty subset of {DEFECTS}, got {self.defect_types}")
        if min(self.n_train, self.n_test_good, self.n_test_defect) < 1:
            raise ValueError("image counts must be >= 1")
        lo, hi = self.defect_size
        if not 2 <= lo <= hi <= self.image_size // 2:
            raise ValueError(f"defect size range {self.defect_size} out of bounds")


def _rng(cfg: SyntheticConfig, split: str, index: int, purpose: int) -> np.random.Generator:
    split_id = {"train": 0, "test_good": 1, "test_defect": 2}[split]
    return np.random.default_rng([cfg.seed, split_id, index, purpose])


def _palette(cfg: SyntheticConfig):
    rng = np.random.default_rng([cfg.seed, 99])
    return rng.uniform(0.15, 0.85, size=(4, 3))


def _render_stripes(cfg, rng, pal):
    n = cfg.image_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    theta = np.deg2rad(30.0)
    period = 20.0
    phase = rng.uniform(0, 2 * np.pi)
    t = 0.5 + 0.5 * np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)
    return pal[0] * t[..., None] + pal[1] * (1 - t[..., None])


def _render_checker(cfg, rng, pal):
    n = cfg.image_size
    cell = 16
    oy, ox = rng.integers(0, 2 * cell, size=2)
    yy, xx = np.mgrid[0:n, 0:n]
    t = (((yy + oy) // cell + (xx + ox) // cell) % 2).astype(np.float64)
    return pal[0] * t[..., None] + pal[1] * (1 - t[..., None])


def _render_blobs(cfg, rng, pal):
    n = cfg.image_size
    img = np.broadcast_to(pal[0], (n, n, 3)).copy()
    yy, xx = np.mgrid[0:n, 0:n]
    for _ in range(90):
        cy, cx = rng.uniform(-8, n + 8, size=2)
        r = rng.uniform(4, 9)
        img[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = pal[1]
    return img


def _object_mask(cfg, rng):
    n = cfg.image_size
    c = n / 2 + rng.integers(-4, 5, size=2)
    yy, xx = np.mgrid[0:n, 0:n]
    d2 = (yy - c[0]) ** 2 + (xx - c[1]) ** 2
    body = d2 <= (0.34 * n) ** 2
    ring = (d2 <= (0.22 * n) ** 2) & (d2 >= (0.16 * n) ** 2)
    bar = (np.abs(yy - c[0]) <= 0.05 * n) & (np.abs(xx - c[1] - 0.0) <= 0.3 * n) & ~ring
    return body, ring, bar


def _render_object(cfg, rng, pal):
    n = cfg.image_size
    yy = np.mgrid[0:n, 0:n][0] / n
    bg = 0.12 + 0.1 * yy
    img = np.repeat(bg[..., None], 3, axis=2)
    body, ring, bar = _object_mask(cfg, rng)
    img[body] = pal[0]
    img[ring] = pal[1]
    img[bar & body] = pal[2]
    return img


_RENDERERS = {
    "stripes": _render_stripes,
    "checker": _render_checker,
    "blobs-texture": _render_blobs,
    "placed-object": _render_object,
}


def _quantize(img: np.ndarray, noise: float, rng) -> np.ndarray:
    if noise:
        img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def render_normal(cfg: SyntheticConfig, split: str, index: int) -> np.ndarray:
    """Defect-free uint8 render for (split, index)."""
    base = _RENDERERS[cfg.style](cfg, _rng(cfg, split, index, 0), _palette(cfg))
    return _quantize(base, cfg.noise, _rng(cfg, split, index, 1))


def _defect_mask(cfg, kind, rng, region: Optional[np.ndarray]) -> np.ndarray:
    n = cfg.image_size
    lo, hi = cfg.defect_size
    yy, xx = np.mgrid[0:n, 0:n]
    # centre inside the object when there is one
    if region is not None and region.any():
        ys, xs = np.nonzero(region)
        k = int(rng.integers(len(ys)))
        cy, cx = float(ys[k]), float(xs[k])
    else:
        cy, cx = rng.uniform(hi, n - hi, size=2)
    size = rng.uniform(lo, hi)
    if kind == "scratch":
        ang = rng.uniform(0, np.pi)
        length = 2.0 * size
        dy, dx = np.sin(ang), np.cos(ang)
        along = (yy - cy) * dy + (xx - cx) * dx
        across = -(yy - cy) * dx + (xx - cx) * dy
        mask = (np.abs(along) <= length / 2) & (np.abs(across) <= max(1.5, size / 10))
    elif kind == "blob":
        ry, rx = size / 2 * rng.uniform(0.7, 1.3, size=2)
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    else:
        h, w = size * rng.uniform(0.7, 1.3, size=2)
        mask = (np.abs(yy - cy) <= h / 2) & (np.abs(xx - cx) <= w / 2)
    return mask


def render_defect(cfg: SyntheticConfig, index: int):
    """(defective uint8 image, bool mask, defect kind, defect-free uint8 render)."""
    clean = render_normal(cfg, "test_defect", index)
    rng = _rng(cfg, "test_defect", index, 2)
    kind = cfg.defect_types[index % len(cfg.defect_types)]
    region = None
    if cfg.style == "placed-object":
        body, _, _ = _object_mask(cfg, _rng(cfg, "test_defect", index, 0))
        region = body
    mask = _defect_mask(cfg, kind, rng, region)
    out = clean.astype(np.int16)
    if kind == "scratch":
        out[mask] = np.where(out[mask] < 128, out[mask] + 110, out[mask] - 110)
    elif kind == "blob":
        color = rng.integers(0, 256, size=3)
        out[mask] = color
    else:
        out[mask] = 128
    out = out.astype(np.uint8)
    # every masked pixel must differ from the clean render
    same = mask & (out == clean).all(axis=-1)
    out[same] = 255 - clean[same]
    return out, mask, kind, clean


def _save_png(path: Path, arr: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


def generate_synthetic(cfg: SyntheticConfig, root) -> Path:
    """Write one category in MVTec layout under ``root``; returns its directory."""
    base = Path(root) / cfg.category
    try:
        base.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {base}: {exc}") from exc
    for i in range(cfg.n_train):
        _save_png(base / "train" / "good" / f"{i:03d}.png", render_normal(cfg, "train", i))
    for i in range(cfg.n_test_good):
        _save_png(base / "test" / "good" / f"{i:03d}.png", render_normal(cfg, "test_good", i))
    for i in range(cfg.n_test_defect):
        img, mask, kind, _ = render_defect(cfg, i)
        _save_png(base / "test" / kind / f"{i:03d}.png", img)
        _save_png(base / "ground_truth" / kind / f"{i:03d}_mask.png", mask.astype(np.uint8) * 255)
    manifest = {"generator_version": GENERATOR_VERSION, "seed": cfg.seed, "config": asdict(cfg)}
    (base / "generation.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return base
