"""Small convolutional networks: generators, patch discriminators, the frozen
segmenter used for semantic consistency, and a one-stage proposal detector."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterator, List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from . import tensor as T
from .rng import XorShift64Star
from .tensor import ShapeError, Tensor

INIT_SCALE = 0.05


@dataclass(frozen=True)
class Proposal:
    """Axis-aligned box (half-open pixel intervals) with a confidence score."""

    x1: float
    y1: float
    x2: float
    y2: float
    confidence: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2})")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    @property
    def box(self) -> Tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


class Module:
    """Named parameter container."""

    def __init__(self):
        self.params: Dict[str, Tensor] = {}
        self.instance_norm = False

    def _add(self, name: str, shape: Sequence[int], rng: XorShift64Star) -> None:
        data = rng.uniform_array(-INIT_SCALE, INIT_SCALE, shape)
        self.params[name] = Tensor(data, requires_grad=True, name=f"{type(self).__name__}.{name}")

    def _conv(self, name: str, cin: int, cout: int, k: int, rng: XorShift64Star) -> None:
        self._add(f"{name}.weight", (cout, cin, k, k), rng)
        self._add(f"{name}.bias", (cout,), rng)

    def _apply_conv(self, x: Tensor, name: str, stride: int = 1, pad: int = 1) -> Tensor:
        return T.conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], stride=stride, pad=pad)

    def _norm(self, x: Tensor) -> Tensor:
        return T.instance_norm(x) if self.instance_norm else x

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def freeze(self) -> None:
        for name, p in list(self.params.items()):
            self.params[name] = Tensor(p.data, requires_grad=False, name=p.name)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {k}: expected {p.shape}, got {arr.shape}")
            p.data = arr.copy()


def _check_image(x: Tensor, what: str) -> None:
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"{what} expects an N x 3 x H x W image batch, got {x.shape}")


class GeneratorNet(Module):
    """Encoder-decoder with two stride-2 convs mirrored by two nearest upsamplings.

    The last conv also sees the input image (channel concat), which lets the
    network start from a near-identity mapping.
    """

    def __init__(self, seed: int, widths: Sequence[int] = (16, 32, 16), instance_norm: bool = False):
        super().__init__()
        w1, w2, w3 = widths
        rng = XorShift64Star(seed)
        self._conv("enc1", 3, w1, 3, rng)
        self._conv("enc2", w1, w2, 3, rng)
        self._conv("dec1", w2, w3, 3, rng)
        self._conv("dec2", w3 + 3, 3, 3, rng)
        self.instance_norm = instance_norm

    def __call__(self, x: Tensor) -> Tensor:
        return generate(self, x)


def generate(net: GeneratorNet, image: Tensor) -> Tensor:
    _check_image(image, "generator")
    H, W = image.shape[2:]
    h = T.leaky_relu(net._norm(net._apply_conv(image, "enc1", stride=2)))
    h = T.leaky_relu(net._norm(net._apply_conv(h, "enc2", stride=2)))
    h = T.upsample2x(h)
    h = T.leaky_relu(net._norm(net._apply_conv(h, "dec1")))
    h = T.upsample2x(h)
    if h.shape[2] != H or h.shape[3] != W:
        h = T.crop2d(h, 0, 0, H, W)
    h = T.concat([h, image], axis=1)
    return T.tanh(net._apply_conv(h, "dec2"))


DISC_LAYERS = ((4, 2, 1), (4, 2, 1), (4, 2, 1))  # kernel, stride, pad


def discriminator_output_size(size: int) -> int:
    """Side length of the score map for a square input of side ``size``.

    Returns 0 when the input is too small for the default architecture.
    """
    for k, s, p in DISC_LAYERS:
        if size + 2 * p < k:
            return 0
        size = T.conv_output_size(size, k, s, p)
        if size < 1:
            return 0
    return size


class DiscriminatorNet(Module):
    def __init__(self, seed: int, widths: Sequence[int] = (16, 32)):
        super().__init__()
        rng = XorShift64Star(seed)
        w1, w2 = widths
        self._conv("c1", 3, w1, 4, rng)
        self._conv("c2", w1, w2, 4, rng)
        self._conv("c3", w2, 1, 4, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return discriminate(self, x)


def discriminate(net: DiscriminatorNet, image: Tensor) -> Tensor:
    """Per-patch probability that ``image`` comes from the discriminator's domain; N x 1 x h x w."""
    _check_image(image, "discriminator")
    H, W = image.shape[2:]
    if discriminator_output_size(H) < 1 or discriminator_output_size(W) < 1:
        raise ShapeError(f"discriminator input {H}x{W} is below the 8x8 receptive minimum")
    h = T.leaky_relu(net._apply_conv(image, "c1", stride=2))
    h = T.leaky_relu(net._apply_conv(h, "c2", stride=2))
    return T.sigmoid(net._apply_conv(h, "c3", stride=2))


class SegmenterNet(Module):
    """Per-pixel foreground/background classifier (channel 1 = foreground)."""

    def __init__(self, seed: int, width: int = 8):
        super().__init__()
        rng = XorShift64Star(seed)
        self._conv("c1", 3, width, 3, rng)
        self._conv("c2", width, width, 3, rng)
        self._conv("c3", width, 2, 3, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return segment(self, x)


def segment(net: SegmenterNet, image: Tensor) -> Tensor:
    _check_image(image, "segmenter")
    h = T.leaky_relu(net._apply_conv(image, "c1"))
    h = T.leaky_relu(net._apply_conv(h, "c2"))
    return T.softmax(net._apply_conv(h, "c3"), axis=1)


class ProposalDetector(Module):
    """Objectness score on a stride-1 grid; boxes come from grouping scored cells.

    ``group_threshold`` and ``box_margin`` are the box decoding parameters: cells
    scoring at least the threshold are joined into 4-connected groups, each
    group's extent (grown by ``box_margin`` pixels) is a box, and the group's
    mean score is its confidence.
    """

    def __init__(self, seed: int, width: int = 16, group_threshold: float = 0.3, box_margin: int = 0):
        super().__init__()
        rng = XorShift64Star(seed)
        self._conv("c1", 3, width, 3, rng)
        self._conv("c2", width, width, 3, rng)
        self._conv("c3", width, 1, 3, rng)
        self.group_threshold = group_threshold
        self.box_margin = box_margin

    def objectness(self, image: Tensor) -> Tensor:
        _check_image(image, "detector")
        h = T.leaky_relu(self._apply_conv(image, "c1"))
        h = T.leaky_relu(self._apply_conv(h, "c2"))
        return T.sigmoid(self._apply_conv(h, "c3"))


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


def decode_score_map(scores: np.ndarray, group_threshold: float, box_margin: int = 0,
                     max_out: int = 100, nms_iou: float = 0.5) -> List[Proposal]:
    H, W = scores.shape
    labels, count = ndimage.label(scores >= group_threshold)
    props = []
    for idx, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        ys, xs = sl
        conf = float(np.clip(scores[labels == idx].mean(), 0.0, 1.0))
        x1 = max(0, xs.start - box_margin)
        y1 = max(0, ys.start - box_margin)
        x2 = min(W, xs.stop + box_margin)
        y2 = min(H, ys.stop + box_margin)
        props.append(Proposal(float(x1), float(y1), float(x2), float(y2), conf))
    props.sort(key=lambda p: (-p.confidence, p.y1, p.x1))
    kept: List[Proposal] = []
    for p in props:
        if all(iou(p.box, q.box) < nms_iou for q in kept):
            kept.append(p)
        if len(kept) >= max_out:
            break
    return kept


def detect(net: ProposalDetector, image: Tensor, max_out: int = 100) -> List[Proposal]:
    """Proposals for a single 1 x 3 x H x W image, sorted by descending confidence.

    An untrained detector is accepted; its proposals are then noise.
    """
    if max_out < 1:
        raise ValueError("max_out must be >= 1")
    if image.ndim != 4 or image.shape[0] != 1:
        raise ShapeError(f"detect expects a single image batch 1 x 3 x H x W, got {image.shape}")
    scores = net.objectness(image.detach()).data[0, 0]
    return decode_score_map(scores, net.group_threshold, net.box_margin, max_out)


# ------------------------------------------------------------------ training

def _balanced_bce(prob: Tensor, target: np.ndarray) -> Tensor:
    """Mean of the foreground and background binary cross-entropies."""
    fg = target.astype(np.float64)
    bg = 1.0 - fg
    nf = max(fg.sum(), 1.0)
    nb = max(bg.sum(), 1.0)
    pos = T.mul(T.log(prob), fg * (0.5 / nf))
    neg = T.mul(T.log(T.add(T.neg(prob), 1.0)), bg * (0.5 / nb))
    return T.neg(T.add(T.reduce_sum(pos), T.reduce_sum(neg)))


def _batches(n: int, batch: int, rng: XorShift64Star) -> List[int]:
    return [rng.randint(0, n - 1) for _ in range(batch)]


def train_segmenter(net: SegmenterNet, images: np.ndarray, masks: np.ndarray, steps: int = 300,
                    batch: int = 4, lr: float = 1e-2, seed: int = 0) -> List[float]:
    """Fit ``net`` on N x 3 x H x W images in [-1, 1] with N x H x W binary masks."""
    opt = T.AdamState(net.parameters(), lr=lr, beta1=0.9)
    rng = XorShift64Star(seed)
    history = []
    for _ in range(steps):
        idx = _batches(len(images), batch, rng)
        net.zero_grad()
        probs = segment(net, Tensor(images[idx]))
        fg = T.reshape(_channel(probs, 1), (len(idx), 1) + probs.shape[2:])
        loss = _balanced_bce(fg, masks[idx][:, None])
        loss.backward()
        T.adam_step(opt)
        history.append(loss.item())
    return history


def _channel(x: Tensor, c: int) -> Tensor:
    """Select one channel of an NCHW tensor as N x 1 x H x W."""
    n, ch = x.shape[:2]
    sel = np.zeros((ch,))
    sel[c] = 1.0
    mask = np.broadcast_to(sel[None, :, None, None], x.shape).copy()
    return T.reduce_sum(T.mul(x, mask), axes=1)


def train_detector(net: ProposalDetector, images: np.ndarray, masks: np.ndarray, steps: int = 300,
                   batch: int = 4, lr: float = 1e-2, seed: int = 0) -> List[float]:
    """Fit the objectness map on images with box-rasterised foreground masks."""
    opt = T.AdamState(net.parameters(), lr=lr, beta1=0.9)
    rng = XorShift64Star(seed)
    history = []
    for _ in range(steps):
        idx = _batches(len(images), batch, rng)
        net.zero_grad()
        prob = net.objectness(Tensor(images[idx]))
        loss = _balanced_bce(prob, masks[idx][:, None])
        loss.backward()
        T.adam_step(opt)
        history.append(loss.item())
    return history


def pixel_accuracy(net: SegmenterNet, images: np.ndarray, masks: np.ndarray) -> float:
    probs = segment(net, Tensor(images)).data
    pred = probs[:, 1] > probs[:, 0]
    return float((pred == masks.astype(bool)).mean())
