"""The five training stages and their on-disk artifacts.

Workdir layout::

    data/{source,target,target_gt,source_val,target_val}/   datasets
    ckpt/baseline.awck, ckpt/detector_src.awck, ckpt/detector_stylized.awck, ckpt/awada.awck
    attn/{source,target}/                                   attention caches
    reports/                                                evaluation reports
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

from ..attention import AttentionSource, load_attention_cache, precompute_attention_cache
from ..losses import AwmPlacement
from ..nets import ProposalDetector, SegmenterNet, detect, train_detector, train_segmenter
from ..rng import derive_seed
from ..synthdata import (DomainDataset, apply_style, generate_source, quantize, read_dataset,
                         style_oracle, to_network, write_dataset)
from ..tensor import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .config import AwadaConfig
from .evaluation import EvalReport, EvalRow, compute_ap, fidelity_l1, precision_recall
from .training import GanTrainer, build_networks, load_networks, segmenter_from_arrays, stylize

log = logging.getLogger(__name__)

DATASETS = ("source", "target", "target_gt", "source_val", "target_val")


class PrerequisiteError(RuntimeError):
    """A stage input is missing; ``stage`` names the command that produces it."""

    def __init__(self, what: str, stage: str):
        super().__init__(f"missing {what}; run `{stage}` first")
        self.stage = stage


class Workdir:
    """Artifact paths; ``data_root`` lets several runs share one set of datasets."""

    def __init__(self, root, data_root=None):
        self.root = Path(root)
        self.data_root = Path(data_root) if data_root else self.root

    def data(self, name: str) -> Path:
        return self.data_root / "data" / name

    def sub(self, *parts: str) -> "Workdir":
        return Workdir(self.root.joinpath(*parts), data_root=self.data_root)

    def ckpt(self, name: str) -> Path:
        return self.root / "ckpt" / f"{name}.awck"

    @property
    def reports(self) -> Path:
        return self.root / "reports"


# ------------------------------------------------------------------ data

def gen_data(config: AwadaConfig, wd: Workdir) -> Dict[str, DomainDataset]:
    """Source, target (unlabelled) and validation sets from disjoint seed streams."""
    spec, style = config.scene_spec(), config.style_transform()
    seed = config.data_seed
    source = generate_source(config.n_source, spec, derive_seed(seed, 0))
    target_scenes = generate_source(config.n_target, spec, derive_seed(seed, 1))
    target = apply_style(target_scenes, style, domain="target")
    target_gt = apply_style(target_scenes, style, domain="target_eval")
    source_val = generate_source(config.n_val, spec, derive_seed(seed, 2))
    target_val = apply_style(generate_source(config.n_val, spec, derive_seed(seed, 3)), style, domain="target_eval")
    sets = {"source": source, "target": target, "target_gt": target_gt,
            "source_val": source_val, "target_val": target_val}
    for name, ds in sets.items():
        write_dataset(ds, wd.data(name))
    return sets


def load_data(wd: Workdir, name: str) -> DomainDataset:
    path = wd.data(name)
    if not (path / "manifest").exists():
        raise PrerequisiteError(f"dataset {name} in {path}", "gen-data")
    return read_dataset(path)


def _load_ckpt(wd: Workdir, name: str, stage: str):
    path = wd.ckpt(name)
    if not path.exists():
        raise PrerequisiteError(f"checkpoint {path}", stage)
    return load_checkpoint(path)


# ------------------------------------------------------------------ stage 1

def pretrain_segmenter(config: AwadaConfig, source: DomainDataset) -> SegmenterNet:
    net = SegmenterNet(derive_seed(config.seg_seed, 0))
    train_segmenter(net, source.network_images(), source.masks, steps=config.seg_steps,
                    seed=derive_seed(config.seg_seed, 1))
    net.freeze()
    return net


def stage1_train_baseline(config: AwadaConfig, wd: Workdir, out: Optional[Path] = None) -> Path:
    """Unweighted GAN training; the placement is forced to all-false."""
    source, target = load_data(wd, "source"), load_data(wd, "target")
    segmenter = pretrain_segmenter(config, source)
    trainer = GanTrainer(config, source, target, segmenter, AwmPlacement.none())
    trainer.train(config.total_steps())
    out = Path(out) if out else wd.ckpt("baseline")
    trainer.save(out, stage="baseline")
    return out


def load_segmenter(wd: Workdir) -> SegmenterNet:
    _, _, arrays = _load_ckpt(wd, "baseline", "train-baseline")
    return segmenter_from_arrays(arrays)


def load_generator(path: Path, config: AwadaConfig):
    stage, meta, arrays = load_checkpoint(path)
    g_st, g_ts, d_t, d_s = build_networks(config, int(meta.get("gan_seed", 0)))
    load_networks({"G_ST": g_st}, arrays)
    return g_st, meta


# ------------------------------------------------------------------ stage 2

def _train_detector(config: AwadaConfig, ds: DomainDataset, seed: int, images_u8=None) -> ProposalDetector:
    det = ProposalDetector(derive_seed(seed, 0))
    imgs = to_network(ds.images if images_u8 is None else images_u8)
    train_detector(det, imgs, ds.masks, steps=config.det_steps, batch=config.det_batch, lr=config.det_lr,
                   seed=derive_seed(seed, 1))
    return det


def save_detector(det: ProposalDetector, path: Path, label: str, config: AwadaConfig) -> None:
    arrays = {f"det/{k}": v for k, v in det.state_dict().items()}
    meta = {"group_threshold": det.group_threshold, "box_margin": det.box_margin}
    save_checkpoint(path, label, config.config_hash(), arrays, meta)


def load_detector(path: Path, stage_hint: str = "train-detectors") -> ProposalDetector:
    if not Path(path).exists():
        raise PrerequisiteError(f"detector checkpoint {path}", stage_hint)
    _, meta, arrays = load_checkpoint(path)
    det = ProposalDetector(0, group_threshold=meta["group_threshold"], box_margin=meta["box_margin"])
    load_networks({"det": det}, arrays)
    return det


def stylized_dataset(g_st, ds: DomainDataset) -> DomainDataset:
    return ds.with_images(quantize(stylize(g_st, ds.images)), "stylized")


def stage2_train_detectors(config: AwadaConfig, wd: Workdir) -> Tuple[ProposalDetector, ProposalDetector]:
    """Detector on raw source, and one on baseline-stylised source with the same labels."""
    source = load_data(wd, "source")
    if not wd.ckpt("baseline").exists():
        raise PrerequisiteError(f"checkpoint {wd.ckpt('baseline')}", "train-baseline")
    g_st, _ = load_generator(wd.ckpt("baseline"), config)
    stylized = stylized_dataset(g_st, source)
    det_src = _train_detector(config, source, derive_seed(config.det_seed, 10))
    det_sty = _train_detector(config, stylized, derive_seed(config.det_seed, 20))
    save_detector(det_src, wd.ckpt("detector_src"), "detector_src", config)
    save_detector(det_sty, wd.ckpt("detector_stylized"), "detector_stylized", config)
    return det_src, det_sty


# ------------------------------------------------------------------ stage 3

def stage3_build_caches(config: AwadaConfig, wd: Workdir, root: Optional[Path] = None,
                        source_kind: Optional[AttentionSource] = None, resume: bool = False) -> Tuple[Path, Path]:
    """Attention caches for both domains under ``root/attn`` (``root`` defaults to the workdir)."""
    src = source_kind or config.attention_source()
    root = Path(root) if root else wd.root
    source = load_data(wd, "source")
    det_src = det_sty = None
    if src.kind == "detector":
        det_src = load_detector(wd.ckpt("detector_src"))
        det_sty = load_detector(wd.ckpt("detector_stylized"))
    # ground-truth variants read the held-back target labels; GAN training never sees them
    target = load_data(wd, "target_gt" if src.kind in ("gt_boxes", "gt_inflate", "gt_masks") else "target")
    a = precompute_attention_cache(source, src, root, "source", detector=det_src, resume=resume)
    b = precompute_attention_cache(target, src, root, "target", detector=det_sty, resume=resume)
    return a, b


# ------------------------------------------------------------------ stage 4

def load_caches(root: Path, source: DomainDataset, target: DomainDataset):
    for domain in ("source", "target"):
        if not (Path(root) / "attn" / domain / "index").exists():
            raise PrerequisiteError(f"attention cache {Path(root) / 'attn' / domain}", "build-attn")
    return (load_attention_cache(root, "source", source.ids),
            load_attention_cache(root, "target", target.ids))


def stage4_train_awada(config: AwadaConfig, wd: Workdir, attn_root: Optional[Path] = None,
                       placement: Optional[AwmPlacement] = None, out: Optional[Path] = None,
                       steps: Optional[int] = None) -> GanTrainer:
    source, target = load_data(wd, "source"), load_data(wd, "target")
    a_s, a_t = load_caches(attn_root or wd.root, source, target)
    segmenter = load_segmenter(wd)
    trainer = GanTrainer(config, source, target, segmenter, placement or config.placement(), a_s, a_t)
    if not config.fresh_init:
        _, _, arrays = load_checkpoint(wd.ckpt("baseline"))
        load_networks(trainer.networks, arrays)
    trainer.train(steps if steps is not None else config.total_steps())
    trainer.save(Path(out) if out else wd.ckpt("awada"), stage="awada")
    return trainer


# ------------------------------------------------------------------ stage 5

def evaluate_checkpoint(config: AwadaConfig, wd: Workdir, ckpt: Path, det_seeds: Sequence[int],
                        label: str) -> EvalReport:
    """Freeze G_ST, measure fidelity to the style oracle, and train one detector per seed."""
    if not Path(ckpt).exists():
        raise PrerequisiteError(f"checkpoint {ckpt}", "train-awada")
    g_st, meta = load_generator(Path(ckpt), config)
    source, source_val, target_val = load_data(wd, "source"), load_data(wd, "source_val"), load_data(wd, "target_val")
    style = config.style_transform()
    fg, bg = fidelity_l1(stylize(g_st, source_val.images), style_oracle(source_val.images, style),
                         source_val.masks)
    train_set = stylized_dataset(g_st, source)
    rows = []
    for seed in det_seeds:
        det = _train_detector(config, train_set, derive_seed(seed, 30))
        ap, pr = detector_ap(det, target_val, with_curve=True)
        rows.append(EvalRow(int(meta.get("gan_seed", 0)), int(seed), fg, bg, ap, pr))
    return EvalReport(label, rows)


def detector_ap(det: ProposalDetector, ds: DomainDataset, with_curve: bool = False):
    """AP on a labelled dataset; optionally also the (recall, precision) curve."""
    imgs = ds.network_images()
    preds = [detect(det, Tensor(imgs[i:i + 1])) for i in range(len(ds))]
    ap = compute_ap(preds, ds.boxes)
    if not with_curve:
        return ap
    recall, precision = precision_recall(preds, ds.boxes)
    return ap, tuple(zip(recall.tolist(), precision.tolist()))


def write_report(report: EvalReport, directory: Path, name: str) -> Tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    txt, csv = directory / f"{name}.txt", directory / f"{name}.csv"
    txt.write_text(report.to_text())
    csv.write_text(report.to_csv())
    return txt, csv


stage5_stylize_and_eval = evaluate_checkpoint


def run_pipeline(config: AwadaConfig, wd: Workdir, det_seeds: Optional[Sequence[int]] = None,
                 with_data: bool = True) -> Dict[str, EvalReport]:
    """All five stages for ``config.gan_seed``; returns baseline and AWADA reports."""
    if with_data:
        gen_data(config, wd)
    seeds = list(det_seeds) if det_seeds is not None else config.seed_list("eval_det_seeds")
    stage1_train_baseline(config, wd)
    if config.attn_source == "detector":
        stage2_train_detectors(config, wd)
    stage3_build_caches(config, wd)
    stage4_train_awada(config, wd)
    return {"baseline": evaluate_checkpoint(config, wd, wd.ckpt("baseline"), seeds, "baseline"),
            "awada": evaluate_checkpoint(config, wd, wd.ckpt("awada"), seeds, "awada")}
