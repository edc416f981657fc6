"""Named ablation grids: loss placement, attention source, random masks, accumulation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from ..attention import AttentionSource
from ..losses import AwmPlacement
from ..rng import XorShift64Star, derive_seed
from .config import AwadaConfig
from .evaluation import EvalReport
from .stages import (PrerequisiteError, Workdir, evaluate_checkpoint, load_data, load_segmenter,
                     stage3_build_caches, stage4_train_awada, write_report)
from .training import GanTrainer

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AblationRow:
    name: str
    placement: Optional[AwmPlacement] = None      # None -> config default
    source: Optional[AttentionSource] = None      # None -> config default

    def resolve(self, config: AwadaConfig):
        return self.placement or config.placement(), self.source or config.attention_source()


def _placement(flags: str) -> AwmPlacement:
    return AwmPlacement(*(c == "x" for c in flags))


def _presets(config: AwadaConfig) -> Dict[str, List[AblationRow]]:
    det = config.attention_source()
    return {
        # loss placement rows: (disc, gen, cyc, sem)
        "table3": [AblationRow(name, placement=_placement(flags)) for name, flags in (
            ("none", "----"), ("disc", "x---"), ("gen", "-x--"), ("disc_gen", "xx--"),
            ("disc_gen_cyc", "xxx-"), ("all", "xxxx"))],
        "table4": [
            AblationRow("gt_masks", source=AttentionSource("gt_masks")),
            AblationRow("gt_boxes", source=AttentionSource("gt_boxes")),
            AblationRow("gt_inflate", source=AttentionSource("gt_inflate", factor=config.inflate_factor)),
            AblationRow("detector", source=AttentionSource("detector", threshold=det.threshold, fn="hard")),
        ],
        "table5": [AblationRow(f"random_p{p:g}", source=AttentionSource("random", p=p, seed=config.random_seed))
                   for p in (0.1, 0.3, 0.5)],
        "accum": [AblationRow(fn, source=AttentionSource("detector", threshold=det.threshold, fn=fn))
                  for fn in ("hard", "mean", "median", "max")],
    }


GRIDS = ("table3", "table4", "table5", "accum")


def preset_rows(grid: str, config: Optional[AwadaConfig] = None) -> List[AblationRow]:
    if grid not in GRIDS:
        raise ValueError(f"unknown grid {grid!r}; choose from {', '.join(GRIDS)}")
    return _presets(config or AwadaConfig())[grid]


def probe_batch(config: AwadaConfig, source, target):
    """A fixed, seed-independent batch used to compare loss values across runs."""
    rng = XorShift64Star(derive_seed(config.data_seed, 99))
    P, n = config.patch_size, config.batch_size
    out = []
    for ds in (source, target):
        imgs = ds.network_images()
        H, W = imgs.shape[2:]
        idx = [rng.randint(0, len(ds) - 1) for _ in range(n)]
        rects = [(rng.randint(0, W - P), rng.randint(0, H - P), P, P) for _ in range(n)]
        patches = np.stack([imgs[i, :, y:y + P, x:x + P] for i, (x, y, _, _) in zip(idx, rects)])
        out.append((patches, [ds.ids[i] for i in idx], rects))
    return out


def probe(trainer: GanTrainer, batch) -> Dict[str, float]:
    (xs, sid, srect), (xt, tid, trect) = batch
    return trainer.probe_losses(xs, xt, sid, srect, tid, trect)


def baseline_probe(config: AwadaConfig, wd: Workdir) -> Dict[str, float]:
    path = wd.ckpt("baseline")
    if not path.exists():
        raise PrerequisiteError(f"checkpoint {path}", "train-baseline")
    source, target = load_data(wd, "source"), load_data(wd, "target")
    trainer = GanTrainer(config, source, target, load_segmenter(wd), AwmPlacement.none())
    trainer.load(path)
    return probe(trainer, probe_batch(config, source, target))


def format_probe(losses: Dict[str, float]) -> str:
    return "".join(f"{k} = {v!r}\n" for k, v in sorted(losses.items()))


@dataclass
class AblationResult:
    grid: str
    reports: Dict[str, EvalReport] = field(default_factory=dict)
    probes: Dict[str, Dict[str, float]] = field(default_factory=dict)


def run_ablation(config: AwadaConfig, wd: Workdir, grid: str, det_seeds=None) -> AblationResult:
    """Train and evaluate every row of ``grid``.

    Rows share the workdir's datasets, baseline and detectors. Each row gets
    its own attention caches and checkpoint under ``ablate/<grid>/<row>/``;
    reports go to ``reports/<grid>/<row>.{txt,csv}`` next to a ``.probe``
    file holding the row's losses on the fixed probe batch.
    """
    rows = preset_rows(grid, config)
    seeds = list(det_seeds) if det_seeds is not None else config.seed_list("eval_det_seeds")
    source, target = load_data(wd, "source"), load_data(wd, "target")
    batch = probe_batch(config, source, target)
    result = AblationResult(grid)
    out_dir = wd.reports / grid
    for row in rows:
        placement, src = row.resolve(config)
        row_wd = wd.sub("ablate", grid, row.name)
        stage3_build_caches(config, wd, root=row_wd.root, source_kind=src)
        log.info("ablation %s/%s placement %s source %s", grid, row.name, placement.label(), src.descriptor())
        trainer = stage4_train_awada(config, wd, attn_root=row_wd.root, placement=placement,
                                     out=row_wd.ckpt("awada"))
        result.probes[row.name] = probe(trainer, batch)
        report = evaluate_checkpoint(config, wd, row_wd.ckpt("awada"), seeds,
                                     f"{grid}/{row.name} {placement.label()} {src.descriptor()}")
        result.reports[row.name] = report
        write_report(report, out_dir, row.name)
        (out_dir / f"{row.name}.probe").write_text(format_probe(result.probes[row.name]))
    return result
