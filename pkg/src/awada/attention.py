"""Foreground attention maps and attention-weighted loss averaging.

Maps are H x W float64 arrays in [0, 1]. A pixel (u, v) (column, row) lies in
box (x1, y1, x2, y2) when x1 <= u < x2 and y1 <= v < y2.
"""

from __future__ import annotations

import hashlib
import logging
import math
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from . import tensor as T
from .nets import Proposal, ProposalDetector, detect
from .rng import XorShift64Star, derive_seed
from .tensor import ShapeError, Tensor

log = logging.getLogger(__name__)

ACCUMULATIONS = ("hard", "mean", "median", "max")
SOURCE_KINDS = ("detector", "gt_boxes", "gt_inflate", "gt_masks", "random", "all_ones", "all_zeros")
DEFAULT_THRESHOLD = 0.5


class CacheError(RuntimeError):
    """Raised for missing, partial or corrupt attention caches."""


@dataclass(frozen=True)
class AttentionSource:
    """Where attention maps come from.

    ``all_zeros`` is a test fixture for the masking contract, not a training option.
    """

    kind: str = "detector"
    threshold: float = DEFAULT_THRESHOLD
    factor: float = 1.2
    p: float = 0.3
    seed: int = 0
    fn: str = "hard"

    def __post_init__(self):
        if self.kind not in SOURCE_KINDS:
            raise ValueError(f"unknown attention source {self.kind!r}")
        if self.fn not in ACCUMULATIONS:
            raise ValueError(f"unknown accumulation {self.fn!r}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold {self.threshold} outside [0, 1]")
        if self.factor <= 0:
            raise ValueError("inflate factor must be positive")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"random fraction {self.p} outside [0, 1]")

    def descriptor(self) -> str:
        if self.kind == "detector":
            return f"detector:c={self.threshold!r}:fn={self.fn}"
        if self.kind == "gt_inflate":
            return f"gt_inflate:factor={self.factor!r}"
        if self.kind == "random":
            return f"random:p={self.p!r}:seed={self.seed}"
        return self.kind

    @property
    def fractional(self) -> bool:
        return self.kind == "detector" and self.fn != "hard"


def _pixel_span(lo: float, hi: float, limit: int) -> Tuple[int, int]:
    """Integer pixel range [a, b) with lo <= p < hi, clipped to [0, limit)."""
    a = max(0, math.ceil(lo))
    b = min(limit, math.ceil(hi))
    return a, max(a, b)


def box_mask(box: Sequence[float], width: int, height: int) -> np.ndarray:
    m = np.zeros((height, width), dtype=bool)
    x1, y1, x2, y2 = box[:4]
    xa, xb = _pixel_span(x1, x2, width)
    ya, yb = _pixel_span(y1, y2, height)
    m[ya:yb, xa:xb] = True
    return m


def build_attention_map(proposals: Sequence[Proposal], c: float, width: int, height: int,
                        fn: str = "hard") -> np.ndarray:
    """Accumulate the confidences of proposals scoring at least ``c`` per pixel.

    hard gives 1 where any such proposal covers the pixel; mean, median and max
    give that statistic of the covering confidences. Uncovered pixels are 0.
    """
    if width < 1 or height < 1:
        raise ValueError(f"map size must be positive, got {width}x{height}")
    if fn not in ACCUMULATIONS:
        raise ValueError(f"unknown accumulation {fn!r}")
    kept = [p for p in proposals if p.confidence >= c]
    out = np.zeros((height, width), dtype=np.float64)
    if not kept:
        return out
    if fn == "hard":
        for p in kept:
            xa, xb = _pixel_span(p.x1, p.x2, width)
            ya, yb = _pixel_span(p.y1, p.y2, height)
            out[ya:yb, xa:xb] = 1.0
        return out
    members = np.stack([box_mask(p.box, width, height) for p in kept])
    confs = np.array([p.confidence for p in kept])[:, None, None]
    covered = members.any(axis=0)
    if fn == "max":
        vals = np.where(members, confs, -np.inf).max(axis=0)
    elif fn == "mean":
        vals = (members * confs).sum(axis=0) / np.maximum(members.sum(axis=0), 1)
    else:
        stacked = np.where(members, confs, np.nan)
        vals = np.zeros((height, width))
        if covered.any():
            vals[covered] = np.nanmedian(stacked[:, covered], axis=0)
    out[covered] = vals[covered]
    return np.clip(out, 0.0, 1.0)


def inflate_boxes(boxes: Sequence[Sequence[float]], factor: float, width: int, height: int) -> List[Tuple[float, ...]]:
    """Scale boxes about their centres by ``factor`` and clip them to the image.

    Boxes that end up with zero area after clipping are dropped and counted in a warning.
    """
    if factor <= 0:
        raise ValueError("inflate factor must be positive")
    out, dropped = [], 0
    for x1, y1, x2, y2 in boxes:
        cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
        hw, hh = (x2 - x1) * factor / 2.0, (y2 - y1) * factor / 2.0
        nx1, ny1 = max(0.0, cx - hw), max(0.0, cy - hh)
        nx2, ny2 = min(float(width), cx + hw), min(float(height), cy + hh)
        if nx1 < nx2 and ny1 < ny2:
            out.append((nx1, ny1, nx2, ny2))
        else:
            dropped += 1
    if dropped:
        log.warning("inflate_boxes dropped %d degenerate box(es)", dropped)
    return out


def random_mask(p: float, width: int, height: int, seed: int) -> np.ndarray:
    """Each pixel is foreground with probability ``p``, independently."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    rng = XorShift64Star(seed)
    return (rng.random_array((height, width)) < p).astype(np.float64)


def mask_from_gt(labels, width: int, height: int) -> np.ndarray:
    """Binary map from a list of boxes or a per-pixel mask array."""
    if isinstance(labels, np.ndarray) and labels.ndim == 2:
        if labels.shape != (height, width):
            raise ShapeError(f"mask shape {labels.shape} does not match {height}x{width}")
        return (labels > 0).astype(np.float64)
    out = np.zeros((height, width), dtype=np.float64)
    for box in labels:
        x1, y1, x2, y2 = box[:4]
        if x1 < 0 or y1 < 0 or x2 > width or y2 > height or not (x1 < x2 and y1 < y2):
            raise ValueError(f"label box {tuple(box)} outside a {width}x{height} image")
        out[box_mask(box, width, height)] = 1.0
    return out


def crop_resize(amap: np.ndarray, crop: Tuple[int, int, int, int], out_w: int, out_h: int) -> np.ndarray:
    """Cut ``crop = (x, y, w, h)`` from the map and resample it nearest-neighbour.

    Output pixel i reads source offset floor((i + 0.5) * w / out_w).
    """
    x, y, w, h = crop
    H, W = amap.shape
    if out_w < 1 or out_h < 1:
        raise ValueError("output size must be positive")
    if x < 0 or y < 0 or w < 1 or h < 1 or x + w > W or y + h > H:
        raise ValueError(f"crop {crop} outside a {W}x{H} map")
    cols = x + np.floor((np.arange(out_w) + 0.5) * w / out_w).astype(int)
    rows = y + np.floor((np.arange(out_h) + 0.5) * h / out_h).astype(int)
    return amap[np.ix_(rows, cols)].copy()


def awm_weight(loss_map: Tensor, attn: np.ndarray, normalize: bool = False) -> Tensor:
    """Attention-weighted mean: sum(loss * attn) / loss.size.

    With ``normalize`` the sum is divided by sum(attn) instead (0 when no
    attention). The first form is the default; the second trains worse.
    """
    attn = np.asarray(attn, dtype=np.float64)
    if attn.shape != loss_map.shape:
        raise ShapeError(f"attention shape {attn.shape} does not match loss map {loss_map.shape}")
    weighted = T.mul(loss_map, attn)
    if not normalize:
        return T.reduce_mean(weighted)
    total = float(attn.sum())
    if total == 0.0:
        return T.mul(T.reduce_sum(weighted), 0.0)
    return T.mul(T.reduce_sum(weighted), 1.0 / total)


def weighted_mean(loss_map: Tensor, attn: Optional[np.ndarray], normalize: bool = False) -> Tensor:
    """Plain mean when ``attn`` is None, otherwise ``awm_weight``."""
    if attn is None:
        return T.reduce_mean(loss_map)
    return awm_weight(loss_map, attn, normalize)


# ------------------------------------------------------------------ per-image maps

def attention_for_image(source: AttentionSource, index: int, width: int, height: int,
                        boxes=None, mask=None, image: Optional[np.ndarray] = None,
                        detector: Optional[ProposalDetector] = None) -> np.ndarray:
    """Map for one image; ``image`` is 3 x H x W in [-1, 1] (detector source only)."""
    kind = source.kind
    if kind == "all_ones":
        return np.ones((height, width))
    if kind == "all_zeros":
        return np.zeros((height, width))
    if kind == "random":
        return random_mask(source.p, width, height, derive_seed(source.seed, index))
    if kind == "detector":
        if detector is None:
            raise ValueError("detector attention source needs a trained detector")
        props = detect(detector, Tensor(image[None]))
        return build_attention_map(props, source.threshold, width, height, source.fn)
    if boxes is None:
        raise ValueError(f"attention source {kind!r} needs ground-truth labels")
    if kind == "gt_boxes":
        return mask_from_gt(boxes, width, height)
    if kind == "gt_inflate":
        return mask_from_gt(inflate_boxes(boxes, source.factor, width, height), width, height)
    if kind == "gt_masks":
        return mask_from_gt(np.asarray(mask), width, height)
    raise ValueError(kind)


def cache_representation(amap: np.ndarray, fractional: bool) -> np.ndarray:
    """The values a cache file stores: float32 planes or 8-bit levels."""
    if fractional:
        return amap.astype(np.float32).astype(np.float64)
    return np.round(np.clip(amap, 0.0, 1.0) * 255.0) / 255.0


def _encode(amap: np.ndarray, fractional: bool) -> Tuple[bytes, str]:
    if fractional:
        H, W = amap.shape
        header = np.array([H, W], dtype="<u4").tobytes()
        return header + amap.astype("<f4").tobytes(), "f32"
    from io import BytesIO
    buf = BytesIO()
    Image.fromarray(np.round(np.clip(amap, 0, 1) * 255).astype(np.uint8)).save(buf, format="PNG")
    return buf.getvalue(), "png"


def _decode(path: Path) -> np.ndarray:
    if path.suffix == ".f32":
        raw = path.read_bytes()
        H, W = np.frombuffer(raw[:8], dtype="<u4")
        return np.frombuffer(raw[8:], dtype="<f4").astype(np.float64).reshape(int(H), int(W))
    with Image.open(path) as im:
        return np.array(im).astype(np.float64) / 255.0


def precompute_attention_cache(dataset, source: AttentionSource, root, domain: str,
                               detector: Optional[ProposalDetector] = None, resume: bool = False) -> Path:
    """Write ``root/attn/<domain>/<id>.<ext>`` for every image plus an index.

    The index (id, source descriptor, threshold, sha256) is written last, so a
    directory without a matching index is a partial cache: ``resume`` keeps the
    existing files, otherwise the directory is rebuilt.
    """
    if source.kind == "detector" and detector is None:
        raise ValueError("detector attention source needs a trained detector")
    out = Path(root) / "attn" / domain
    index_path = out / "index"
    if out.exists():
        complete = index_path.exists() and _index_ids(index_path) == list(dataset.ids)
        if not complete:
            log.info("partial attention cache in %s: %s", out, "resuming" if resume else "rebuilding")
        if not resume:
            shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    if index_path.exists():
        index_path.unlink()
    H, W = dataset.size
    ext = "f32" if source.fractional else "png"
    rows = []
    images = dataset.network_images() if source.kind == "detector" else None
    for i, image_id in enumerate(dataset.ids):
        path = out / f"{image_id}.{ext}"
        if not (resume and path.exists()):
            amap = attention_for_image(
                source, i, W, H,
                boxes=dataset.boxes[i] if dataset.boxes is not None else None,
                mask=dataset.masks[i] if dataset.masks is not None else None,
                image=images[i] if images is not None else None, detector=detector)
            data, _ = _encode(amap, source.fractional)
            path.write_bytes(data)
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        rows.append(f"{image_id} {source.descriptor()} {source.threshold!r} {digest}\n")
    index_path.write_text("".join(rows))
    return out


def _index_ids(index_path: Path) -> List[str]:
    return [line.split()[0] for line in index_path.read_text().splitlines() if line.strip()]


def load_attention_cache(root, domain: str, ids: Sequence[str]) -> Dict[str, np.ndarray]:
    out = Path(root) / "attn" / domain
    index_path = out / "index"
    if not index_path.exists():
        raise CacheError(f"no attention cache index at {index_path}; run build-attn")
    entries = {}
    for line in index_path.read_text().splitlines():
        parts = line.split()
        if len(parts) != 4:
            raise CacheError(f"malformed index line {line!r} in {index_path}")
        entries[parts[0]] = parts[3]
    maps = {}
    for image_id in ids:
        if image_id not in entries:
            raise CacheError(f"attention cache for {domain} has no entry for image id {image_id}")
        candidates = [out / f"{image_id}.png", out / f"{image_id}.f32"]
        path = next((p for p in candidates if p.exists()), None)
        if path is None:
            raise CacheError(f"attention file missing for image id {image_id} in {out}")
        if hashlib.sha256(path.read_bytes()).hexdigest() != entries[image_id]:
            raise CacheError(f"checksum mismatch for attention map {path}")
        maps[image_id] = _decode(path)
    extra = set(entries) - set(ids)
    if extra:
        raise CacheError(f"attention cache for {domain} lists unknown image id {sorted(extra)[0]}")
    return maps
