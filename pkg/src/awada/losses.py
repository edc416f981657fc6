"""Training objectives of the style-transfer GAN with optional attention weighting.

Attention arguments are H x W numpy maps (or N x ... arrays matching the
per-pixel loss map); ``None`` means a plain spatial mean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from . import tensor as T
from .attention import weighted_mean
from .tensor import GradientError, ShapeError, Tensor

FORMS = ("log", "least_squares")


@dataclass(frozen=True)
class LossWeights:
    gan_st: float = 1.0
    gan_ts: float = 1.0
    cyc: float = 10.0
    sem: float = 1.0

    def __post_init__(self):
        for name in ("gan_st", "gan_ts", "cyc", "sem"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name}={v} must be finite and non-negative")


@dataclass(frozen=True)
class AwmPlacement:
    weight_disc: bool = True
    weight_gen: bool = True
    weight_cyc: bool = False
    weight_sem: bool = False

    @classmethod
    def none(cls) -> "AwmPlacement":
        return cls(False, False, False, False)

    def label(self) -> str:
        flags = (self.weight_disc, self.weight_gen, self.weight_cyc, self.weight_sem)
        return "".join("x" if f else "-" for f in flags)


def _attn_like(attn: Optional[np.ndarray], ref: Tensor) -> Optional[np.ndarray]:
    """Lift an H x W (or N x H x W) map to the shape of an N x 1 x H x W loss map."""
    if attn is None:
        return None
    a = np.asarray(attn, dtype=np.float64)
    if a.shape == ref.shape:
        return a
    if ref.ndim == 4 and ref.shape[1] == 1 and a.shape == (ref.shape[0],) + ref.shape[2:]:
        return a[:, None]
    if ref.ndim == 3 and a.shape == ref.shape[1:] and ref.shape[0] == 1:
        return a[None]
    raise ShapeError(f"attention shape {a.shape} does not match loss map {ref.shape}")


def _check_form(form: str) -> None:
    if form not in FORMS:
        raise ValueError(f"unknown GAN formulation {form!r}")


def gan_loss_discriminator(d_real: Tensor, d_fake: Tensor, form: str = "least_squares",
                           attn_real: Optional[np.ndarray] = None, attn_fake: Optional[np.ndarray] = None,
                           normalize: bool = False) -> Tensor:
    """Discriminator objective: real maps pushed to 1, fake maps to 0."""
    _check_form(form)
    if d_real.shape != d_fake.shape:
        raise ShapeError(f"real/fake score maps differ: {d_real.shape} vs {d_fake.shape}")
    ar, af = _attn_like(attn_real, d_real), _attn_like(attn_fake, d_fake)
    if form == "log":
        real = weighted_mean(T.log(d_real), ar, normalize)
        fake = weighted_mean(T.log(T.add(T.neg(d_fake), 1.0)), af, normalize)
        return T.neg(T.add(real, fake))
    real = weighted_mean(T.square(T.sub(d_real, 1.0)), ar, normalize)
    fake = weighted_mean(T.square(d_fake), af, normalize)
    return T.add(real, fake)


def gan_loss_generator(d_fake: Tensor, form: str = "least_squares", attn: Optional[np.ndarray] = None,
                       normalize: bool = False) -> Tensor:
    """Generator objective: fake maps pushed to 1."""
    _check_form(form)
    a = _attn_like(attn, d_fake)
    if form == "log":
        return T.neg(weighted_mean(T.log(d_fake), a, normalize))
    return weighted_mean(T.square(T.sub(d_fake, 1.0)), a, normalize)


def _l1_map(x: Tensor, recon: Tensor) -> Tensor:
    """Per-pixel L1 averaged over channels: N x C x H x W -> N x 1 x H x W."""
    if x.shape != recon.shape:
        raise ShapeError(f"reconstruction shape {recon.shape} != original {x.shape}")
    diff = T.absolute(T.sub(recon, x))
    n, c, h, w = diff.shape
    return T.reshape(T.reduce_mean(diff, axes=1), (n, 1, h, w))


def cycle_loss(x_s: Tensor, recon_s: Tensor, x_t: Tensor, recon_t: Tensor,
               attn_s: Optional[np.ndarray] = None, attn_t: Optional[np.ndarray] = None,
               normalize: bool = False) -> Tensor:
    ls = _l1_map(x_s, recon_s)
    lt = _l1_map(x_t, recon_t)
    return T.add(weighted_mean(ls, _attn_like(attn_s, ls), normalize),
                 weighted_mean(lt, _attn_like(attn_t, lt), normalize))


def _check_distribution(p: np.ndarray, what: str) -> None:
    if p.ndim != 4:
        raise ShapeError(f"{what} must be N x K x H x W, got {p.shape}")
    if np.any(p < -1e-12) or not np.allclose(p.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError(f"{what} is not a per-pixel probability distribution")


def semantic_loss(seg_orig, seg_stylized: Tensor, attn: Optional[np.ndarray] = None,
                  normalize: bool = False) -> Tensor:
    """Per-pixel KL(seg_stylized || seg_orig) with ``seg_orig`` held constant."""
    q = seg_orig.data if isinstance(seg_orig, Tensor) else np.asarray(seg_orig, dtype=np.float64)
    _check_distribution(q, "original-image prediction")
    _check_distribution(seg_stylized.data, "stylized-image prediction")
    if q.shape != seg_stylized.shape:
        raise ShapeError(f"prediction shapes differ: {q.shape} vs {seg_stylized.shape}")
    log_q = np.log(np.maximum(q, T.LOG_EPS))
    p = seg_stylized
    terms = T.mul(p, T.log(p))
    cross = T.mul(p, log_q)
    kl = T.reduce_sum(T.sub(terms, cross), axes=1)
    n, _, h, w = p.shape
    kl = T.reshape(kl, (n, 1, h, w))
    return weighted_mean(kl, _attn_like(attn, kl), normalize)


COMPONENTS = ("gan_st", "gan_ts", "cyc", "sem")


def total_loss(components: Mapping[str, Tensor], w: LossWeights) -> Tensor:
    """Weighted sum of the four loss groups; non-finite components abort."""
    out = None
    for name in COMPONENTS:
        comp = components[name]
        if not np.all(np.isfinite(comp.data)):
            raise GradientError(f"loss component {name} is not finite")
        term = T.mul(comp, getattr(w, name))
        out = term if out is None else T.add(out, term)
    return out
