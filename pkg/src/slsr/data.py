"""Dataset ingestion, synthetic corpus generation and image preprocessing."""
from __future__ import annotations

import colorsys
import json
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

logger = logging.getLogger(__name__)

SPLITS = ("train", "query", "gallery", "generated")
MARKET_PATTERN = re.compile(r"^(-?\d+)_c(\d+)s(\d+)_")
MARKET_SUBDIRS = {
    "bounding_box_train": "train",
    "query": "query",
    "bounding_box_test": "gallery",
}
IMAGE_EXTS = {".jpg", ".jpeg", ".png", ".bmp"}


class DatasetError(Exception):
    pass


@dataclass
class ImageRecord:
    image_id: str
    identity: int
    camera: int
    split: str
    pixels: Optional[np.ndarray] = None
    path: Optional[str] = None
    cluster: Optional[int] = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if self.split == "generated" and self.camera != 0:
            raise ValueError("generated records must use camera 0")

    @property
    def materialized(self) -> bool:
        return self.pixels is not None

    def load(self) -> "ImageRecord":
        """Read pixels from ``path`` (scaled to [-1, 1]) if not already present."""
        if self.pixels is None:
            if self.path is None:
                raise DatasetError(f"record {self.image_id} has neither pixels nor path")
            with Image.open(self.path) as im:
                self.pixels = bytes_to_unit(np.asarray(im.convert("RGB")))
        return self

    def to_json(self) -> dict:
        out = {
            "image_id": self.image_id,
            "identity": int(self.identity),
            "camera": int(self.camera),
            "split": self.split,
        }
        if self.path is not None:
            out["path"] = self.path
        if self.cluster is not None:
            out["cluster"] = int(self.cluster)
        return out

    @classmethod
    def from_json(cls, d: dict) -> "ImageRecord":
        return cls(image_id=d["image_id"], identity=int(d["identity"]), camera=int(d["camera"]),
                   split=d["split"], path=d.get("path"), cluster=d.get("cluster"))


@dataclass
class DatasetBundle:
    records: list[ImageRecord]
    n_identities: int
    class_index: dict[int, int]
    planted_clusters: dict[int, int] = field(default_factory=dict)
    skipped: list[tuple[str, str]] = field(default_factory=list)

    def split(self, name: str) -> list[ImageRecord]:
        return [r for r in self.records if r.split == name]

    @property
    def train(self) -> list[ImageRecord]:
        return self.split("train")

    def labels(self, records: Sequence[ImageRecord]) -> np.ndarray:
        return np.array([self.class_index[r.identity] for r in records], dtype=np.int64)

    def to_json(self) -> dict:
        return {
            "n_identities": self.n_identities,
            "class_index": {str(k): v for k, v in sorted(self.class_index.items())},
            "planted_clusters": {str(k): v for k, v in sorted(self.planted_clusters.items())},
            "records": [r.to_json() for r in self.records],
        }

    @classmethod
    def from_json(cls, d: dict) -> "DatasetBundle":
        return cls(
            records=[ImageRecord.from_json(r) for r in d["records"]],
            n_identities=int(d["n_identities"]),
            class_index={int(k): int(v) for k, v in d["class_index"].items()},
            planted_clusters={int(k): int(v) for k, v in d.get("planted_clusters", {}).items()},
        )

    def save_manifest(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load_manifest(cls, path) -> "DatasetBundle":
        return cls.from_json(json.loads(Path(path).read_text()))


def build_class_index(records: Sequence[ImageRecord]) -> dict[int, int]:
    ids = sorted({r.identity for r in records if r.split == "train"})
    return {pid: i for i, pid in enumerate(ids)}


def bytes_to_unit(arr: np.ndarray) -> np.ndarray:
    """Map uint8 pixels to [-1, 1]: 0 -> -1, 255 -> +1."""
    return arr.astype(np.float32) / 127.5 - 1.0


def unit_to_bytes(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(arr, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# Market-1501 style directories


def parse_market_name(name: str) -> tuple[int, int]:
    m = MARKET_PATTERN.match(name)
    if m is None:
        raise ValueError(f"unparseable filename {name!r}")
    return int(m.group(1)), int(m.group(2))


def load_market_dir(root, keep_distractors: bool = True, keep_junk: bool = False) -> DatasetBundle:
    """Index a Market-1501 style tree.

    Pixels are loaded lazily (records carry paths). Identity ``-1`` (junk) is
    dropped unless ``keep_junk``; identity ``0`` (distractors) is kept in the
    gallery when ``keep_distractors`` but never enters training.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"not a directory: {root}")
    layout = [(root / sub, split) for sub, split in MARKET_SUBDIRS.items() if (root / sub).is_dir()]
    if not layout:
        layout = [(root, "train")]

    records: list[ImageRecord] = []
    skipped: list[tuple[str, str]] = []
    for folder, split in layout:
        for p in sorted(folder.iterdir()):
            if p.suffix.lower() not in IMAGE_EXTS:
                continue
            try:
                pid, cam = parse_market_name(p.name)
            except ValueError as e:
                skipped.append((str(p), str(e)))
                logger.warning("skipping %s: %s", p, e)
                continue
            if pid == -1 and not keep_junk:
                continue
            if pid == 0 and (split == "train" or not keep_distractors):
                continue
            records.append(ImageRecord(image_id=f"{split}/{p.stem}", identity=pid, camera=cam,
                                       split=split, path=str(p)))
    if not records:
        raise DatasetError(f"no usable images under {root}")
    class_index = build_class_index(records)
    return DatasetBundle(records=records, n_identities=len(class_index), class_index=class_index,
                         skipped=skipped)


def write_market_tree(bundle: DatasetBundle, root) -> DatasetBundle:
    """Write materialized records as PNGs in the Market layout; returns a path-backed bundle."""
    root = Path(root).resolve()
    inverse = {v: k for k, v in MARKET_SUBDIRS.items()}
    out = []
    for i, r in enumerate(bundle.records):
        if r.split == "generated":
            continue
        sub = root / inverse[r.split]
        sub.mkdir(parents=True, exist_ok=True)
        p = sub / f"{r.identity:04d}_c{r.camera}s1_{i:06d}_00.png"
        Image.fromarray(unit_to_bytes(r.pixels)).save(p)
        out.append(ImageRecord(image_id=f"{r.split}/{p.stem}", identity=r.identity, camera=r.camera,
                               split=r.split, path=str(p)))
    new = DatasetBundle(records=out, n_identities=bundle.n_identities,
                        class_index=dict(bundle.class_index),
                        planted_clusters=dict(bundle.planted_clusters))
    new.save_manifest(root / "bundle.json")
    return new


# ---------------------------------------------------------------------------
# Synthetic planted-cluster corpus


def _hsv(h, s, v) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v), dtype=np.float64)


# per-image nuisance strengths of the synthetic renderer
TINT_SPREAD = 0.25
PIXEL_NOISE = 0.06
MAX_SHIFT = 3


def _render_person(rng: np.random.Generator, size: int, look: dict, camera_tint: np.ndarray) -> np.ndarray:
    img = np.full((size, size, 3), 0.5, dtype=np.float64)
    img += rng.normal(0.0, 0.02, size=3)  # background drift
    dx, dy = rng.integers(-MAX_SHIFT, MAX_SHIFT + 1, size=2) if size >= 16 else (0, 0)

    def box(r0, r1, c0, c1):
        r0 = int(np.clip(round(r0 * size) + dy, 0, size))
        r1 = int(np.clip(round(r1 * size) + dy, 0, size))
        c0 = int(np.clip(round(c0 * size) + dx, 0, size))
        c1 = int(np.clip(round(c1 * size) + dx, 0, size))
        return slice(r0, r1), slice(c0, c1)

    head = box(0.05, 0.2, 0.4, 0.6)
    upper = box(0.2, 0.55, 0.25, 0.75)
    lower = box(0.55, 0.95, 0.3, 0.7)
    img[head] = look["skin"]
    img[upper] = look["upper"]
    img[lower] = look["lower"]

    # identity-specific stripe pattern on the torso
    rs, cs = upper
    rows = np.arange(rs.start, rs.stop)
    stripe = (np.floor((rows - rs.start + look["phase"]) / look["period"]) % 2 == 0)
    torso = img[rs, cs]
    torso[stripe] = torso[stripe] * (1.0 - look["stripe"])
    img[rs, cs] = torso
    # accessory patch (bag) at an identity-specific side
    if look["bag"] >= 0:
        side = 0.15 if look["bag"] == 0 else 0.75
        img[box(0.4, 0.6, side, side + 0.1)] = look["bag_color"]

    img = img * camera_tint * (1.0 + rng.normal(0.0, 0.03))
    img += rng.normal(0.0, PIXEL_NOISE, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def make_synthetic_corpus(n_identities: int = 30, n_latent_clusters: int = 3, images_per_identity: int = 10,
                          image_size: int = 32, seed: int = 0, n_cameras: int = 3,
                          n_test_identities: Optional[int] = None) -> DatasetBundle:
    """Planted-cluster stand-in for Market-1501.

    Identities in the same latent cluster share a hue family; identity looks
    differ by small hue/saturation shifts, torso stripes and an accessory.
    Test identities (query/gallery) are disjoint from training identities
    but drawn from the same families. Pixels are uint8-quantized so that a
    PNG round trip is lossless.
    """
    if n_latent_clusters < 1 or n_identities % n_latent_clusters:
        raise DatasetError(f"n_identities={n_identities} not divisible by n_latent_clusters={n_latent_clusters}")
    if image_size < 8:
        raise DatasetError("image_size must be >= 8")
    if n_cameras < 2:
        raise DatasetError("need at least 2 cameras")
    n_test = n_identities if n_test_identities is None else n_test_identities
    if n_test % n_latent_clusters:
        raise DatasetError("n_test_identities must be divisible by n_latent_clusters")

    rng = np.random.default_rng(seed)
    base_hue = rng.uniform(0, 1)
    tints = [np.ones(3)] + [1.0 + rng.uniform(-TINT_SPREAD, TINT_SPREAD, size=3) for _ in range(n_cameras - 1)]
    total = n_identities + n_test

    looks, planted = {}, {}
    for pid in range(1, total + 1):
        k = (pid - 1) % n_latent_clusters
        h = base_hue + k / n_latent_clusters
        looks[pid] = {
            "upper": _hsv(h + rng.uniform(-0.06, 0.06), rng.uniform(0.55, 0.95), rng.uniform(0.55, 0.95)),
            "lower": _hsv(h + rng.uniform(-0.06, 0.06), rng.uniform(0.4, 0.9), rng.uniform(0.3, 0.8)),
            "skin": _hsv(0.07, rng.uniform(0.3, 0.5), rng.uniform(0.6, 0.9)),
            "period": float(rng.integers(2, 5)),
            "phase": float(rng.integers(0, 4)),
            "stripe": rng.uniform(0.0, 0.35),
            "bag": int(rng.integers(-1, 2)),
            "bag_color": _hsv(h + rng.uniform(-0.1, 0.1), rng.uniform(0.2, 0.9), rng.uniform(0.2, 0.9)),
        }
        planted[pid] = k

    train_ids = list(range(1, n_identities + 1))
    test_ids = list(range(n_identities + 1, total + 1))
    records: list[ImageRecord] = []
    for pid in train_ids + test_ids:
        is_test = pid > n_identities
        seen_cams: set[int] = set()
        for j in range(images_per_identity):
            cam = j % n_cameras + 1
            px = _render_person(rng, image_size, looks[pid], tints[cam - 1])
            pixels = bytes_to_unit(unit_to_bytes(px * 2.0 - 1.0))
            if not is_test:
                split = "train"
            elif cam <= 2 and cam not in seen_cams:
                split = "query"
                seen_cams.add(cam)
            else:
                split = "gallery"
            records.append(ImageRecord(image_id=f"{pid:04d}_{j:03d}", identity=pid, camera=cam,
                                       split=split, pixels=pixels))
    class_index = build_class_index(records)
    return DatasetBundle(records=records, n_identities=len(class_index), class_index=class_index,
                         planted_clusters=planted)


# ---------------------------------------------------------------------------
# Preprocessing


@dataclass
class PreprocessConfig:
    resize_to: int = 256
    crop_to: int = 224
    horizontal_flip_prob: float = 0.5
    random_erasing: bool = True
    erasing_prob: float = 0.5
    mean_vector: Optional[tuple[float, float, float]] = None

    def __post_init__(self):
        if self.crop_to > self.resize_to:
            raise ValueError("crop_to must be <= resize_to")
        if self.crop_to < 1:
            raise ValueError("crop_to must be positive")
        for p in (self.horizontal_flip_prob, self.erasing_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")

    @classmethod
    def desk(cls, **kw) -> "PreprocessConfig":
        return cls(resize_to=40, crop_to=32, **kw)


def resize(pixels: np.ndarray, size: int) -> np.ndarray:
    h, w = pixels.shape[:2]
    if h < 1 or w < 1:
        raise DatasetError("image smaller than 1x1")
    if (h, w) == (size, size):
        return np.asarray(pixels, dtype=np.float32)
    t = torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float32)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False,
                        antialias=size < max(h, w))
    return out[0].permute(1, 2, 0).numpy()


def random_erase(img: np.ndarray, rng: np.random.Generator, probability: float = 0.5,
                 sl: float = 0.02, sh: float = 0.4, r1: float = 0.3, value: float = 0.0) -> np.ndarray:
    """Blank a random rectangle (Zhong et al. random erasing)."""
    if rng.uniform() > probability:
        return img
    h, w = img.shape[:2]
    area = h * w
    for _ in range(100):
        target = rng.uniform(sl, sh) * area
        aspect = rng.uniform(r1, 1.0 / r1)
        eh = int(round(math.sqrt(target * aspect)))
        ew = int(round(math.sqrt(target / aspect)))
        if 0 < eh < h and 0 < ew < w:
            y = int(rng.integers(0, h - eh + 1))
            x = int(rng.integers(0, w - ew + 1))
            img[y:y + eh, x:x + ew] = value
            return img
    return img


def _scaled(pixels: np.ndarray) -> np.ndarray:
    if pixels.dtype == np.uint8:
        return bytes_to_unit(pixels)
    return np.asarray(pixels, dtype=np.float32)


def preprocess(record: ImageRecord, cfg: PreprocessConfig, mode: str = "eval",
               rng: Optional[np.random.Generator] = None, resized: Optional[np.ndarray] = None) -> np.ndarray:
    """Return a ``crop_to x crop_to x 3`` float32 tensor.

    train: resize, random crop, random flip, scale, center, random erasing.
    eval: resize, center crop, scale, center.
    ``resized`` lets callers pass a cached resize of the record.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    if resized is None:
        record.load()
        px = record.pixels
        if px.ndim != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise DatasetError(f"image {record.image_id} smaller than 1x1")
        resized = resize(_scaled(px), cfg.resize_to)
    s, c = cfg.resize_to, cfg.crop_to
    if mode == "train":
        if rng is None:
            raise ValueError("train mode needs an rng")
        y = int(rng.integers(0, s - c + 1))
        x = int(rng.integers(0, s - c + 1))
        out = resized[y:y + c, x:x + c].copy()
        if rng.uniform() < cfg.horizontal_flip_prob:
            out = out[:, ::-1].copy()
    else:
        y = (s - c) // 2
        out = resized[y:y + c, y:y + c].copy()
    np.clip(out, -1.0, 1.0, out=out)
    if cfg.mean_vector is not None:
        out -= np.asarray(cfg.mean_vector, dtype=np.float32)
    if mode == "train" and cfg.random_erasing:
        out = random_erase(out, rng, probability=cfg.erasing_prob)
    return out


def channel_mean(records: Sequence[ImageRecord], cfg: PreprocessConfig) -> tuple[float, float, float]:
    """Per-channel mean of the scaled, resized images."""
    acc = np.zeros(3, dtype=np.float64)
    for r in records:
        r.load()
        acc += resize(_scaled(r.pixels), cfg.resize_to).reshape(-1, 3).mean(0)
    m = acc / max(len(records), 1)
    return (float(m[0]), float(m[1]), float(m[2]))


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample stream so augmentations do not depend on worker count or batch order."""
    return np.random.default_rng([seed, epoch, index])


class ImagePipeline:
    """Caches resized images and yields preprocessed NCHW float batches."""

    def __init__(self, records: Sequence[ImageRecord], cfg: PreprocessConfig, workers: int = 1):
        self.records = list(records)
        self.cfg = cfg
        self.workers = max(1, int(workers))
        self._resized: dict[int, np.ndarray] = {}

    def __len__(self):
        return len(self.records)

    def _item(self, idx: int, mode: str, seed: int, epoch: int) -> np.ndarray:
        if idx not in self._resized:
            r = self.records[idx].load()
            self._resized[idx] = resize(_scaled(r.pixels), self.cfg.resize_to)
        rng = sample_rng(seed, epoch, idx) if mode == "train" else None
        return preprocess(self.records[idx], self.cfg, mode, rng, resized=self._resized[idx])

    def batch(self, indices: Sequence[int], mode: str = "eval", seed: int = 0, epoch: int = 0) -> torch.Tensor:
        if self.workers > 1:
            with ThreadPoolExecutor(self.workers) as ex:
                items = list(ex.map(lambda i: self._item(i, mode, seed, epoch), indices))
        else:
            items = [self._item(i, mode, seed, epoch) for i in indices]
        arr = np.stack(items).transpose(0, 3, 1, 2)
        return torch.from_numpy(np.ascontiguousarray(arr))

    def epoch_batches(self, batch_size: int, seed: int, epoch: int, shuffle: bool = True,
                      mode: str = "train") -> Iterator[tuple[np.ndarray, torch.Tensor]]:
        n = len(self.records)
        order = np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)
        bounds = list(range(0, n, batch_size))
        # a trailing batch of one breaks batch norm; fold it into the previous batch
        if len(bounds) > 1 and n - bounds[-1] < 2:
            bounds.pop()
        for k, start in enumerate(bounds):
            stop = bounds[k + 1] if k + 1 < len(bounds) else n
            idx = order[start:stop]
            yield idx, self.batch(idx, mode, seed, epoch)
