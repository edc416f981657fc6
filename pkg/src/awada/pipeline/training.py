"""Alternating GAN training with attention-weighted losses."""

from __future__ import annotations

import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .. import tensor as T
from ..attention import crop_resize
from ..losses import (AwmPlacement, cycle_loss, gan_loss_discriminator, gan_loss_generator,
                      semantic_loss, total_loss)
from ..nets import (DiscriminatorNet, GeneratorNet, SegmenterNet, discriminate, discriminator_output_size,
                    generate, segment)
from ..rng import XorShift64Star, derive_seed
from ..synthdata import DomainDataset, from_network, to_network
from ..tensor import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .config import AwadaConfig

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e3

Rect = Tuple[int, int, int, int]


class TrainingError(RuntimeError):
    pass


def build_networks(config: AwadaConfig, seed: int):
    return (GeneratorNet(derive_seed(seed, 1), instance_norm=config.instance_norm),
            GeneratorNet(derive_seed(seed, 2), instance_norm=config.instance_norm),
            DiscriminatorNet(derive_seed(seed, 3)),
            DiscriminatorNet(derive_seed(seed, 4)))


class GanTrainer:
    """Two generators and two patch discriminators trained one batch at a time.

    ``attn_source`` / ``attn_target`` map image ids to full-resolution attention
    maps. Each step crops a random patch per image and applies the identical
    rectangle to that image's attention map before resizing it to each loss
    map. Loss groups whose placement flag is off use a plain mean.
    """

    def __init__(self, config: AwadaConfig, source: DomainDataset, target: DomainDataset,
                 segmenter: SegmenterNet, placement: AwmPlacement,
                 attn_source: Optional[Dict[str, np.ndarray]] = None,
                 attn_target: Optional[Dict[str, np.ndarray]] = None):
        self.config = config
        self.placement = placement
        if any((placement.weight_disc, placement.weight_gen, placement.weight_cyc, placement.weight_sem)):
            if attn_source is None or attn_target is None:
                raise TrainingError("attention-weighted training needs attention maps for both domains")
            for ds, maps, dom in ((source, attn_source, "source"), (target, attn_target, "target")):
                for image_id in ds.ids:
                    if image_id not in maps:
                        raise TrainingError(f"no {dom} attention map for image id {image_id}")
        self.attn_source = attn_source
        self.attn_target = attn_target
        self.source_ids = list(source.ids)
        self.target_ids = list(target.ids)
        self.source_images = source.network_images()
        self.target_images = target.network_images()
        self.segmenter = segmenter
        self.g_st, self.g_ts, self.d_t, self.d_s = build_networks(config, config.gan_seed)
        self.opt_g = T.AdamState(self.g_st.parameters() + self.g_ts.parameters(),
                                 lr=config.lr, beta1=config.beta1, beta2=config.beta2)
        self.opt_d = T.AdamState(self.d_t.parameters() + self.d_s.parameters(),
                                 lr=config.lr, beta1=config.beta1, beta2=config.beta2)
        self.rng = XorShift64Star(derive_seed(config.gan_seed, 5))
        self.step_index = 0
        self.crop_log: List[dict] = []
        self.history: List[Dict[str, float]] = []

    # ------------------------------------------------------------ helpers
    @property
    def networks(self) -> Dict[str, object]:
        return {"G_ST": self.g_st, "G_TS": self.g_ts, "D_T": self.d_t, "D_S": self.d_s}

    def _zero(self) -> None:
        for net in self.networks.values():
            net.zero_grad()

    def sample_batch(self, images: np.ndarray, ids: Sequence[str]):
        P = self.config.patch_size
        H, W = images.shape[2:]
        picks, rects = [], []
        for _ in range(self.config.batch_size):
            i = self.rng.randint(0, len(ids) - 1)
            x = self.rng.randint(0, W - P)
            y = self.rng.randint(0, H - P)
            picks.append(i)
            rects.append((x, y, P, P))
        patches = np.stack([images[i, :, y:y + P, x:x + P] for i, (x, y, _, _) in zip(picks, rects)])
        return [ids[i] for i in picks], rects, patches

    def _attn(self, maps, ids, rects, out_hw, record: List[Rect]) -> Optional[np.ndarray]:
        if maps is None:
            return None
        crops = []
        for image_id, rect in zip(ids, rects):
            record.append(rect)
            crops.append(crop_resize(maps[image_id], rect, out_hw[1], out_hw[0]))
        return np.stack(crops)

    # ------------------------------------------------------------ losses
    def compute_losses(self, xs: Tensor, xt: Tensor, src_ids, src_rects, tgt_ids, tgt_rects, log_entry=None):
        """Forward pass; returns (discriminator loss fn, generator loss components)."""
        cfg, pl = self.config, self.placement
        P = xs.shape[2:]
        fake_t = generate(self.g_st, xs)
        rec_s = generate(self.g_ts, fake_t)
        fake_s = generate(self.g_ts, xt)
        rec_t = generate(self.g_st, fake_s)

        used_s: List[Rect] = []
        used_t: List[Rect] = []
        dmap = (discriminator_output_size(P[0]), discriminator_output_size(P[1]))
        a_s_d = self._attn(self.attn_source, src_ids, src_rects, dmap, used_s) if (pl.weight_disc or pl.weight_gen) else None
        a_t_d = self._attn(self.attn_target, tgt_ids, tgt_rects, dmap, used_t) if (pl.weight_disc or pl.weight_gen) else None
        a_s_p = self._attn(self.attn_source, src_ids, src_rects, P, used_s) if (pl.weight_cyc or pl.weight_sem) else None
        a_t_p = self._attn(self.attn_target, tgt_ids, tgt_rects, P, used_t) if (pl.weight_cyc or pl.weight_sem) else None
        if log_entry is not None:
            log_entry["attn_source_rects"] = used_s
            log_entry["attn_target_rects"] = used_t

        norm = cfg.awm_normalize
        form = cfg.gan_form

        def disc_loss():
            real_t = discriminate(self.d_t, xt)
            fk_t = discriminate(self.d_t, fake_t.detach())
            real_s = discriminate(self.d_s, xs)
            fk_s = discriminate(self.d_s, fake_s.detach())
            ld_t = gan_loss_discriminator(real_t, fk_t, form,
                                          attn_real=a_t_d if pl.weight_disc else None,
                                          attn_fake=a_s_d if pl.weight_disc else None, normalize=norm)
            ld_s = gan_loss_discriminator(real_s, fk_s, form,
                                          attn_real=a_s_d if pl.weight_disc else None,
                                          attn_fake=a_t_d if pl.weight_disc else None, normalize=norm)
            return T.add(T.mul(ld_t, cfg.a1), T.mul(ld_s, cfg.a2))

        def gen_components():
            gan_st = gan_loss_generator(discriminate(self.d_t, fake_t), form,
                                        attn=a_s_d if pl.weight_gen else None, normalize=norm)
            gan_ts = gan_loss_generator(discriminate(self.d_s, fake_s), form,
                                        attn=a_t_d if pl.weight_gen else None, normalize=norm)
            cyc = cycle_loss(xs, rec_s, xt, rec_t,
                             attn_s=a_s_p if pl.weight_cyc else None,
                             attn_t=a_t_p if pl.weight_cyc else None, normalize=norm)
            sem = semantic_loss(segment(self.segmenter, xs).data, segment(self.segmenter, fake_t),
                                attn=a_s_p if pl.weight_sem else None, normalize=norm)
            if cfg.sem_bidirectional:
                sem = T.add(sem, semantic_loss(segment(self.segmenter, xt).data, segment(self.segmenter, fake_s),
                                               attn=a_t_p if pl.weight_sem else None, normalize=norm))
            return {"gan_st": gan_st, "gan_ts": gan_ts, "cyc": cyc, "sem": sem}

        return disc_loss, gen_components

    def _guard(self, name: str, value: float) -> None:
        if not math.isfinite(value):
            raise TrainingError(f"step {self.step_index}: {name} loss is not finite")
        if abs(value) > DIVERGENCE_LIMIT:
            raise TrainingError(f"step {self.step_index}: {name} loss {value:.3g} diverged (> {DIVERGENCE_LIMIT:g})")

    def step(self) -> Dict[str, float]:
        src_ids, src_rects, xs_np = self.sample_batch(self.source_images, self.source_ids)
        tgt_ids, tgt_rects, xt_np = self.sample_batch(self.target_images, self.target_ids)
        entry = {"step": self.step_index, "source": list(zip(src_ids, src_rects)),
                 "target": list(zip(tgt_ids, tgt_rects))}
        disc_loss, gen_components = self.compute_losses(Tensor(xs_np), Tensor(xt_np), src_ids, src_rects,
                                                        tgt_ids, tgt_rects, entry)
        self.crop_log.append(entry)

        self._zero()
        ld = disc_loss()
        self._guard("discriminator", ld.item())
        ld.backward()
        T.adam_step(self.opt_d)

        self._zero()
        comps = gen_components()
        for name, c in comps.items():
            self._guard(name, c.item())
        lg = total_loss(comps, self.config.loss_weights())
        self._guard("total", lg.item())
        lg.backward()
        T.adam_step(self.opt_g)

        record = {"disc": ld.item(), "total": lg.item(), **{k: v.item() for k, v in comps.items()}}
        self.history.append(record)
        self.step_index += 1
        return record

    def train(self, steps: int, checkpoint_path=None, checkpoint_every: int = 0) -> None:
        while self.step_index < steps:
            rec = self.step()
            if self.step_index % 100 == 0:
                log.info("step %d total %.4f disc %.4f", self.step_index, rec["total"], rec["disc"])
            if checkpoint_path and checkpoint_every and self.step_index % checkpoint_every == 0:
                self.save(checkpoint_path, stage="partial")

    def probe_losses(self, xs: np.ndarray, xt: np.ndarray, src_ids, src_rects, tgt_ids, tgt_rects) -> Dict[str, float]:
        disc_loss, gen_components = self.compute_losses(Tensor(xs), Tensor(xt), src_ids, src_rects,
                                                        tgt_ids, tgt_rects)
        comps = gen_components()
        out = {k: v.item() for k, v in comps.items()}
        out["disc"] = disc_loss().item()
        out["total"] = total_loss(comps, self.config.loss_weights()).item()
        return out

    # ------------------------------------------------------------ persistence
    def arrays(self) -> Dict[str, np.ndarray]:
        out = {}
        for prefix, net in self.networks.items():
            for k, v in net.state_dict().items():
                out[f"{prefix}/{k}"] = v
        for k, v in self.segmenter.state_dict().items():
            out[f"F/{k}"] = v
        for name, opt in (("opt_g", self.opt_g), ("opt_d", self.opt_d)):
            for k, v in opt.state_arrays().items():
                out[f"{name}/{k}"] = v
        return out

    def save(self, path, stage: str) -> None:
        meta = {"step_index": self.step_index, "rng_state": str(self.rng.get_state()),
                "opt_g_steps": self.opt_g.step_count, "opt_d_steps": self.opt_d.step_count,
                "placement": self.placement.label(), "gan_seed": self.config.gan_seed}
        save_checkpoint(path, stage, self.config.training_hash(), self.arrays(), meta)

    def load(self, path, force: bool = False) -> str:
        stage, meta, arrays = load_checkpoint(path, expected_hash=self.config.training_hash(), force=force)
        load_networks(self.networks, arrays)
        for name, opt, key in (("opt_g", self.opt_g, "opt_g_steps"), ("opt_d", self.opt_d, "opt_d_steps")):
            sub = {k[len(name) + 1:]: v for k, v in arrays.items() if k.startswith(name + "/")}
            opt.load_arrays(sub, meta[key])
        self.step_index = int(meta["step_index"])
        self.rng.set_state(int(meta["rng_state"]))
        return stage


def load_networks(networks: Dict[str, object], arrays: Dict[str, np.ndarray]) -> None:
    for prefix, net in networks.items():
        sub = {k[len(prefix) + 1:]: v for k, v in arrays.items() if k.startswith(prefix + "/")}
        net.load_state_dict(sub)


def segmenter_from_arrays(arrays: Dict[str, np.ndarray], seed: int = 0) -> SegmenterNet:
    net = SegmenterNet(seed)
    load_networks({"F": net}, arrays)
    net.freeze()
    return net


def stylize(g_st: GeneratorNet, images_u8: np.ndarray, chunk: int = 16) -> np.ndarray:
    """Run a generator over N x H x W x 3 uint8 images; returns floats in [0, 1]."""
    out = []
    for i in range(0, len(images_u8), chunk):
        x = Tensor(to_network(images_u8[i:i + chunk]))
        out.append(from_network(generate(g_st, x).data))
    return np.concatenate(out)
