"""Procedural two-domain benchmark.

Source scenes are smooth low-saturation backgrounds with a few saturated,
non-overlapping rectangles ("objects"). The target domain is an analytic
pixel-local transform of source scenes (fog by default), so the ideal
stylisation of any source image is known exactly.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .nets import Proposal
from .rng import XorShift64Star, derive_seed

Box = Tuple[int, int, int, int]

DOMAINS = ("source", "target", "stylized", "target_eval")
LABELED_DOMAINS = ("source", "stylized", "target_eval")


class DatasetError(RuntimeError):
    """Raised for missing or corrupt dataset files."""


@dataclass(frozen=True)
class SceneSpec:
    size: int = 64
    min_objects: int = 1
    max_objects: int = 4
    min_object_size: int = 6
    max_object_size: int = 16
    noise_amplitude: float = 0.03
    margin: int = 2

    def validate(self) -> None:
        if self.size < 8:
            raise ValueError(f"image size {self.size} too small")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError(f"bad object count range {self.min_objects}..{self.max_objects}")
        if self.min_object_size < 3 or self.min_object_size > self.max_object_size:
            raise ValueError(f"bad object size range {self.min_object_size}..{self.max_object_size}")
        if self.max_object_size > self.size:
            raise ValueError(f"objects up to {self.max_object_size}px do not fit a {self.size}px image")
        side = self.min_object_size + self.margin
        if self.max_objects * side * side > self.size * self.size:
            raise ValueError("requested objects cannot be placed without overlap")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class StyleTransform:
    """Pixel-local domain gap on images in [0, 1].

    fog: I' = I * exp(-beta * d) + airlight * (1 - exp(-beta * d)), with depth
    proxy d = 1 at the top row falling to 0 at the bottom row.
    colorshift: I' = clip(matrix @ I + bias).
    """

    kind: str = "fog"
    beta: float = 1.5
    airlight: float = 0.85
    matrix: Tuple[Tuple[float, float, float], ...] = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    bias: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.kind not in ("fog", "colorshift"):
            raise ValueError(f"unknown style kind {self.kind!r}")
        if self.kind == "fog" and self.beta < 0:
            raise ValueError("fog strength must be non-negative")

    def apply(self, image: np.ndarray) -> np.ndarray:
        """Transform an H x W x 3 float image in [0, 1]."""
        img = np.asarray(image, dtype=np.float64)
        if self.kind == "fog":
            H = img.shape[0]
            depth = 1.0 - np.arange(H, dtype=np.float64) / max(H - 1, 1)
            if math.isinf(self.beta):
                trans = np.zeros_like(depth)
            else:
                trans = np.exp(-self.beta * depth)
            trans = trans[:, None, None]
            out = img * trans + self.airlight * (1.0 - trans)
        else:
            m = np.asarray(self.matrix, dtype=np.float64)
            out = img @ m.T + np.asarray(self.bias, dtype=np.float64)
        return np.clip(out, 0.0, 1.0)


@dataclass
class DomainDataset:
    """Images as N x H x W x 3 uint8; boxes/masks only on labelled domains."""

    images: np.ndarray
    domain: str
    ids: List[str]
    boxes: Optional[List[List[Box]]] = None
    masks: Optional[np.ndarray] = None
    seed: int = 0
    spec_hash: str = ""

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}")
        labeled = self.boxes is not None
        if labeled != (self.domain in LABELED_DOMAINS):
            raise ValueError(f"domain {self.domain!r} {'must' if not labeled else 'must not'} carry labels")
        if len(self.ids) != len(self.images):
            raise ValueError("ids and images differ in length")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def size(self) -> Tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    def network_images(self, idx=None) -> np.ndarray:
        """Selected images as N x 3 x H x W float64 in [-1, 1]."""
        imgs = self.images if idx is None else self.images[idx]
        return to_network(imgs)

    def unit_images(self) -> np.ndarray:
        return self.images.astype(np.float64) / 255.0

    def with_images(self, images: np.ndarray, domain: str) -> "DomainDataset":
        return DomainDataset(images=images, domain=domain, ids=list(self.ids),
                             boxes=[list(b) for b in self.boxes] if domain in LABELED_DOMAINS else None,
                             masks=self.masks.copy() if domain in LABELED_DOMAINS else None,
                             seed=self.seed, spec_hash=self.spec_hash)

    def equals(self, other: "DomainDataset") -> bool:
        same_masks = (self.masks is None and other.masks is None) or (
            self.masks is not None and other.masks is not None and np.array_equal(self.masks, other.masks))
        return (self.domain == other.domain and self.ids == other.ids and self.seed == other.seed
                and self.spec_hash == other.spec_hash and np.array_equal(self.images, other.images)
                and self.boxes == other.boxes and same_masks)


def to_network(images_u8: np.ndarray) -> np.ndarray:
    return images_u8.astype(np.float64).transpose(0, 3, 1, 2) / 127.5 - 1.0


def from_network(images: np.ndarray) -> np.ndarray:
    """N x 3 x H x W in [-1, 1] to N x H x W x 3 floats in [0, 1]."""
    return np.clip((np.asarray(images).transpose(0, 2, 3, 1) + 1.0) / 2.0, 0.0, 1.0)


def quantize(unit: np.ndarray) -> np.ndarray:
    return np.round(np.clip(unit, 0.0, 1.0) * 255.0).astype(np.uint8)


def _render_scene(spec: SceneSpec, rng: XorShift64Star):
    S = spec.size
    base = rng.uniform(0.3, 0.6)
    c0 = np.array([base + rng.uniform(-0.06, 0.06) for _ in range(3)])
    base = rng.uniform(0.3, 0.6)
    c1 = np.array([base + rng.uniform(-0.06, 0.06) for _ in range(3)])
    angle = rng.uniform(0.0, 2.0 * math.pi)
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64)
    proj = xx * math.cos(angle) + yy * math.sin(angle)
    t = (proj - proj.min()) / max(proj.max() - proj.min(), 1e-9)
    img = c0[None, None, :] * (1.0 - t[..., None]) + c1[None, None, :] * t[..., None]
    img = img + rng.uniform_array(-spec.noise_amplitude, spec.noise_amplitude, (S, S, 3))

    count = rng.randint(spec.min_objects, spec.max_objects)
    boxes: List[Box] = []
    occupied = np.zeros((S, S), dtype=bool)
    for _ in range(count):
        for _attempt in range(200):
            w = rng.randint(spec.min_object_size, spec.max_object_size)
            h = rng.randint(spec.min_object_size, spec.max_object_size)
            x1 = rng.randint(0, S - w)
            y1 = rng.randint(0, S - h)
            m = spec.margin
            if not occupied[max(0, y1 - m):y1 + h + m, max(0, x1 - m):x1 + w + m].any():
                break
        else:
            continue
        occupied[y1:y1 + h, x1:x1 + w] = True
        dominant = rng.randint(0, 2)
        color = np.array([rng.uniform(0.0, 0.25) for _ in range(3)])
        color[dominant] = rng.uniform(0.75, 1.0)
        img[y1:y1 + h, x1:x1 + w, :] = color
        boxes.append((x1, y1, x1 + w, y1 + h))
    if len(boxes) < spec.min_objects:
        raise ValueError("could not place the minimum number of objects")
    mask = occupied.astype(np.uint8)
    return quantize(img), boxes, mask


def generate_source(n: int, spec: SceneSpec = SceneSpec(), seed: int = 0, domain: str = "source") -> DomainDataset:
    """``n`` labelled scenes; image ``i`` depends only on (seed, i)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    spec.validate()
    images, boxes, masks = [], [], []
    for i in range(n):
        rng = XorShift64Star(derive_seed(seed, i))
        img, b, m = _render_scene(spec, rng)
        images.append(img)
        boxes.append(b)
        masks.append(m)
    return DomainDataset(images=np.stack(images), domain=domain, ids=[f"{i:05d}" for i in range(n)],
                         boxes=boxes, masks=np.stack(masks), seed=seed, spec_hash=spec.digest())


def apply_style(dataset: DomainDataset, t: StyleTransform, domain: str = "target") -> DomainDataset:
    """Pixelwise-transformed copy; geometry unchanged. ``domain='target'`` drops labels."""
    styled = np.stack([quantize(t.apply(img.astype(np.float64) / 255.0)) for img in dataset.images])
    if domain in LABELED_DOMAINS and dataset.boxes is None:
        raise ValueError(f"cannot produce labelled domain {domain!r} from an unlabelled dataset")
    return dataset.with_images(styled, domain)


def style_oracle(images_u8: np.ndarray, t: StyleTransform) -> np.ndarray:
    """Exact (unquantised) stylisation of N x H x W x 3 uint8 images, in [0, 1]."""
    return np.stack([t.apply(img.astype(np.float64) / 255.0) for img in images_u8])


def jittered_proposals(boxes: Sequence[Sequence[float]], width: int, height: int, jitter: float = 0.1,
                       miss_rate: float = 0.0, false_rate: float = 0.0, seed: int = 0) -> List[Proposal]:
    """Imperfect proposals around ground-truth boxes without a trained detector.

    Each box is kept with probability 1 - miss_rate, its edges shifted by up to
    ``jitter`` times the box size, with confidence in [0.5, 1]. For every ground
    truth box a false positive of similar size appears with probability
    ``false_rate``, confidence in [0.3, 0.7].
    """
    for name, r in (("jitter", jitter), ("miss_rate", miss_rate), ("false_rate", false_rate)):
        if not 0.0 <= r <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {r}")
    rng = XorShift64Star(seed)
    out: List[Proposal] = []
    for (x1, y1, x2, y2) in boxes:
        keep = rng.random() >= miss_rate
        w, h = x2 - x1, y2 - y1
        offs = [rng.uniform(-jitter, jitter) for _ in range(4)]
        conf = rng.uniform(0.5, 1.0)
        if keep:
            nx1 = min(max(x1 + offs[0] * w, 0.0), width)
            ny1 = min(max(y1 + offs[1] * h, 0.0), height)
            nx2 = min(max(x2 + offs[2] * w, 0.0), width)
            ny2 = min(max(y2 + offs[3] * h, 0.0), height)
            if nx1 < nx2 and ny1 < ny2:
                out.append(Proposal(float(nx1), float(ny1), float(nx2), float(ny2), conf))
            else:
                out.append(Proposal(float(x1), float(y1), float(x2), float(y2), conf))
        if rng.random() < false_rate:
            fw = max(1.0, min(w, width))
            fh = max(1.0, min(h, height))
            fx = rng.uniform(0.0, width - fw)
            fy = rng.uniform(0.0, height - fh)
            out.append(Proposal(fx, fy, fx + fw, fy + fh, rng.uniform(0.3, 0.7)))
    out.sort(key=lambda p: -p.confidence)
    return out


# ------------------------------------------------------------------ storage

def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _save_png(arr: np.ndarray, path: Path) -> None:
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


def write_dataset(dataset: DomainDataset, directory) -> None:
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    labeled = dataset.boxes is not None
    if labeled:
        (root / "labels").mkdir(exist_ok=True)
        (root / "masks").mkdir(exist_ok=True)
    entries = []
    for i, image_id in enumerate(dataset.ids):
        img_path = root / "images" / f"{image_id}.png"
        _save_png(dataset.images[i], img_path)
        entry = {"id": image_id, "image": _sha(img_path)}
        if labeled:
            lbl_path = root / "labels" / f"{image_id}.txt"
            lbl_path.write_text("".join(f"{x1} {y1} {x2} {y2}\n" for x1, y1, x2, y2 in dataset.boxes[i]))
            mask_path = root / "masks" / f"{image_id}.png"
            _save_png(dataset.masks[i] * 255, mask_path)
            entry["label"] = _sha(lbl_path)
            entry["mask"] = _sha(mask_path)
        entries.append(entry)
    manifest = {"domain": dataset.domain, "seed": dataset.seed, "spec_hash": dataset.spec_hash,
                "labeled": labeled, "entries": entries}
    (root / "manifest").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _load_png(path: Path, image_id: str, expected: str) -> np.ndarray:
    if not path.exists():
        raise DatasetError(f"missing file for image id {image_id}: {path}")
    if _sha(path) != expected:
        raise DatasetError(f"checksum mismatch for {path} (image id {image_id})")
    with Image.open(path) as im:
        return np.array(im)


def read_dataset(directory) -> DomainDataset:
    root = Path(directory)
    manifest_path = root / "manifest"
    if not manifest_path.exists():
        raise DatasetError(f"missing manifest in {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"corrupt manifest {manifest_path}: {exc}") from exc
    images, boxes, masks, ids = [], [], [], []
    labeled = manifest["labeled"]
    for entry in manifest["entries"]:
        image_id = entry["id"]
        ids.append(image_id)
        images.append(_load_png(root / "images" / f"{image_id}.png", image_id, entry["image"]))
        if labeled:
            lbl_path = root / "labels" / f"{image_id}.txt"
            if not lbl_path.exists():
                raise DatasetError(f"missing file for image id {image_id}: {lbl_path}")
            if _sha(lbl_path) != entry["label"]:
                raise DatasetError(f"checksum mismatch for {lbl_path} (image id {image_id})")
            rows = []
            for line in lbl_path.read_text().splitlines():
                parts = line.split()
                if len(parts) != 4:
                    raise DatasetError(f"malformed label line {line!r} in {lbl_path}")
                rows.append(tuple(int(v) for v in parts))
            boxes.append(rows)
            masks.append((_load_png(root / "masks" / f"{image_id}.png", image_id, entry["mask"]) > 0).astype(np.uint8))
    return DomainDataset(images=np.stack(images), domain=manifest["domain"], ids=ids,
                         boxes=boxes if labeled else None, masks=np.stack(masks) if labeled else None,
                         seed=manifest["seed"], spec_hash=manifest["spec_hash"])
