"""Command-line entry point: ``awada <command> [flags]``.

Config values merge as defaults < ``--config`` file < flags. Every config
field is also a flag (``--patch-size 32``). Exit codes: 0 success, 1 usage
error, 2 runtime failure or missing prerequisite.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import logging
import os
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .attention import CacheError
from .pipeline.ablation import GRIDS, run_ablation
from .pipeline.checkpoint import CheckpointError
from .pipeline.config import AwadaConfig, ConfigError, load_config, parse_config_text
from .pipeline.evaluation import EvalReport, ReportError, parse_report
from .pipeline.stages import (PrerequisiteError, Workdir, evaluate_checkpoint, gen_data, load_caches, load_data,
                              load_generator, load_segmenter, stage1_train_baseline, stage2_train_detectors,
                              stage3_build_caches, stage4_train_awada, write_report)
from .pipeline.training import GanTrainer, TrainingError, stylize
from .synthdata import DatasetError, quantize

log = logging.getLogger("awada")

COMMANDS = ("gen-data", "train-baseline", "train-detectors", "build-attn", "train-awada",
            "stylize", "eval", "ablate", "export-plots")

# the config field each command's --seed (and AWADA_SEED) controls
SEED_KEY = {"gen-data": "data_seed", "train-baseline": "gan_seed", "train-detectors": "det_seed",
            "build-attn": "random_seed", "train-awada": "gan_seed", "stylize": "gan_seed",
            "eval": "gan_seed", "ablate": "gan_seed", "export-plots": None}

RUNTIME_ERRORS = (PrerequisiteError, TrainingError, CheckpointError, DatasetError, CacheError,
                  ReportError, OSError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad usage; we reserve 2 for runtime failures."""

    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


_DEFAULTS = AwadaConfig()


def _config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("config values (override the --config file)")
    for f in dataclasses.fields(AwadaConfig):
        default = getattr(_DEFAULTS, f.name)
        group.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, metavar="V",
                           default=argparse.SUPPRESS, help=f"default: {default}")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="awada", description="Style transfer with attention-weighted losses: data, training, evaluation.",
                     formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=fmt)
        p.add_argument("--workdir", default=".", help="root for all artifacts and relative paths")
        p.add_argument("--config", default=None, help="flat 'key = value' config file")
        p.add_argument("--seed", type=int, default=None,
                       help=f"sets {SEED_KEY[name]}; falls back to $AWADA_SEED" if SEED_KEY[name] else "unused")
        p.add_argument("-v", "--verbose", action="store_true", default=False, help="log progress")
        _config_flags(p)
        return p

    p = command("gen-data", "Generate the synthetic source, target and validation datasets.")
    p.add_argument("--out", default=None, help="dataset root (defaults to the workdir)")
    p.add_argument("--n", type=int, default=None, help="images per training domain (sets n_source and n_target)")

    command("train-baseline", "Pre-train the segmenter and train the unweighted style-transfer baseline.")
    command("train-detectors", "Train proposal detectors on raw and baseline-stylized source images.")

    p = command("build-attn", "Precompute attention caches for both domains.")
    p.add_argument("--out", default=None, help="cache root (defaults to the workdir)")
    p.add_argument("--resume", action="store_true", default=False, help="keep already written maps")

    p = command("train-awada", "Train the attention-weighted style-transfer networks.")
    p.add_argument("--attn", default=None, help="cache root (defaults to the workdir)")
    p.add_argument("--out", default="ckpt/awada.awck", help="checkpoint path")
    p.add_argument("--resume-from", default=None, help="partial checkpoint to continue from")

    p = command("stylize", "Translate a dataset with a trained source-to-target generator.")
    p.add_argument("--ckpt", default="ckpt/awada.awck", help="checkpoint holding G_ST")
    p.add_argument("--split", default="source_val", help="dataset to translate")
    p.add_argument("--out", default="stylized", help="output directory for PNG images")

    p = command("eval", "Fidelity to the style oracle and detection AP for one checkpoint.")
    p.add_argument("--ckpt", default="ckpt/awada.awck", help="checkpoint to evaluate")
    p.add_argument("--label", default=None, help="report name (defaults to the checkpoint stem)")
    p.add_argument("--det-seeds", default=None, help="comma-separated detector seeds (defaults to eval_det_seeds)")

    p = command("ablate", "Run a named ablation grid.")
    p.add_argument("--grid", required=True, choices=GRIDS, help="preset to run")
    p.add_argument("--det-seeds", default=None, help="comma-separated detector seeds (defaults to eval_det_seeds)")

    p = command("export-plots", "Render PR curves, per-seed scatter and L1 bars from report files.")
    p.add_argument("reports", nargs="*", default=[], help="report .txt files")
    p.add_argument("--out", default="plots", help="output directory")
    return parser


# ------------------------------------------------------------------ helpers

def _resolve(wd: Path, path: Optional[str]) -> Optional[Path]:
    if path is None:
        return None
    p = Path(path)
    return p if p.is_absolute() else wd / p


def _config_from_args(args) -> AwadaConfig:
    overrides: Dict[str, object] = {}
    for key, value in vars(args).items():
        if key.startswith("cfg_") and value is not None:
            overrides[key[4:]] = value
    seed_key = SEED_KEY[args.command]
    file_keys = set()
    if args.config:
        path = _resolve(Path(args.workdir), args.config)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        file_keys = set(parse_config_text(path.read_text(), str(path)))
    if seed_key:
        if args.seed is not None:
            overrides[seed_key] = args.seed
        elif seed_key not in overrides and seed_key not in file_keys and os.environ.get("AWADA_SEED"):
            overrides[seed_key] = os.environ["AWADA_SEED"]
    if args.command == "gen-data" and args.n is not None:
        overrides["n_source"] = overrides["n_target"] = args.n
    cfg_path = _resolve(Path(args.workdir), args.config)
    return load_config(cfg_path, {k: str(v) for k, v in overrides.items()})


def _blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def content_hash(paths: Sequence[Path], base: Path) -> str:
    """Git-style hash over the files under ``paths`` (missing paths are skipped)."""
    entries = []
    for p in paths:
        p = Path(p)
        files = sorted(f for f in p.rglob("*") if f.is_file()) if p.is_dir() else ([p] if p.is_file() else [])
        for f in files:
            try:
                rel = f.relative_to(base).as_posix()
            except ValueError:
                rel = f.as_posix()
            entries.append(f"{_blob_hash(f.read_bytes())} {rel}\n")
    return hashlib.sha1("".join(entries).encode()).hexdigest()


def _inputs(args, wd: Workdir) -> List[Path]:
    data = [wd.data(n) for n in ("source", "target")]
    cmd = args.command
    if cmd == "train-detectors":
        return data + [wd.ckpt("baseline")]
    if cmd == "build-attn":
        return data + [wd.data("target_gt"), wd.ckpt("detector_src"), wd.ckpt("detector_stylized")]
    if cmd == "train-awada":
        root = _resolve(wd.root, args.attn) or wd.root
        return data + [root / "attn", wd.ckpt("baseline")]
    if cmd in ("stylize", "eval"):
        return [_resolve(wd.root, args.ckpt), wd.data(getattr(args, "split", "source_val"))]
    if cmd == "ablate":
        return data + [wd.ckpt("baseline"), wd.ckpt("detector_src"), wd.ckpt("detector_stylized")]
    if cmd == "export-plots":
        return [_resolve(wd.root, r) for r in args.reports]
    return data if cmd == "train-baseline" else []


def _provenance(wd: Path, argv: Sequence[str], cfg_hash: str, seed, inputs: str, status: int) -> None:
    wd.mkdir(parents=True, exist_ok=True)
    line = (f"{time.strftime('%Y-%m-%dT%H:%M:%S')} command={' '.join(argv)!r} config={cfg_hash} "
            f"seed={seed} inputs={inputs} exit={status}\n")
    with open(wd / "runs.log", "a") as fh:
        fh.write(line)


# ------------------------------------------------------------------ commands

def _cmd_gen_data(args, cfg, wd):
    target = Workdir(_resolve(wd.root, args.out)) if args.out else wd
    sets = gen_data(cfg, target)
    print(f"wrote {', '.join(f'{k} ({len(v)})' for k, v in sets.items())} under {target.data_root / 'data'}")


def _cmd_train_baseline(args, cfg, wd):
    print(f"baseline checkpoint: {stage1_train_baseline(cfg, wd)}")


def _cmd_train_detectors(args, cfg, wd):
    stage2_train_detectors(cfg, wd)
    print(f"detectors: {wd.ckpt('detector_src')}, {wd.ckpt('detector_stylized')}")


def _cmd_build_attn(args, cfg, wd):
    a, b = stage3_build_caches(cfg, wd, root=_resolve(wd.root, args.out), resume=args.resume)
    print(f"attention caches: {a}, {b}")


def _cmd_train_awada(args, cfg, wd):
    out = _resolve(wd.root, args.out)
    if args.resume_from:
        source, target = load_data(wd, "source"), load_data(wd, "target")
        a_s, a_t = load_caches(_resolve(wd.root, args.attn) or wd.root, source, target)
        trainer = GanTrainer(cfg, source, target, load_segmenter(wd), cfg.placement(), a_s, a_t)
        trainer.load(_resolve(wd.root, args.resume_from))
        trainer.train(cfg.total_steps())
        trainer.save(out, stage="awada")
    else:
        stage4_train_awada(cfg, wd, attn_root=_resolve(wd.root, args.attn), out=out)
    print(f"awada checkpoint: {out}")


def _cmd_stylize(args, cfg, wd):
    from PIL import Image
    ckpt = _resolve(wd.root, args.ckpt)
    if not ckpt.exists():
        raise PrerequisiteError(f"checkpoint {ckpt}", "train-awada")
    g_st, _ = load_generator(ckpt, cfg)
    ds = load_data(wd, args.split)
    images = quantize(stylize(g_st, ds.images))
    out = _resolve(wd.root, args.out)
    out.mkdir(parents=True, exist_ok=True)
    for image_id, img in zip(ds.ids, images):
        Image.fromarray(img).save(out / f"{image_id}.png", optimize=False)
    print(f"wrote {len(images)} stylized images to {out}")


def _cmd_eval(args, cfg, wd):
    ckpt = _resolve(wd.root, args.ckpt)
    seeds = [int(s) for s in args.det_seeds.split(",")] if args.det_seeds else cfg.seed_list("eval_det_seeds")
    label = args.label or ckpt.stem
    report = evaluate_checkpoint(cfg, wd, ckpt, seeds, label)
    txt, _ = write_report(report, wd.reports, label)
    print(report.to_text(), end="")
    print(f"report: {txt}")


def _cmd_ablate(args, cfg, wd):
    seeds = [int(s) for s in args.det_seeds.split(",")] if args.det_seeds else None
    result = run_ablation(cfg, wd, args.grid, det_seeds=seeds)
    for name, report in result.reports.items():
        agg = report.aggregate()
        print(f"{args.grid}/{name}: fg_l1={agg['fg_l1_mean']:.4f} bg_l1={agg['bg_l1_mean']:.4f} "
              f"ap={agg['ap_mean']:.4f}")


def _cmd_export_plots(args, cfg, wd):
    paths = [_resolve(wd.root, r) for r in args.reports]
    if not paths:
        log.warning("no report files given; nothing to export")
        print("warning: no report files given; nothing to export", file=sys.stderr)
        return
    reports = []
    for p in paths:
        if not p.exists():
            raise ReportError(f"{p}: report file does not exist")
        reports.append(parse_report(p.read_text(), str(p)))
    export_plots(reports, _resolve(wd.root, args.out))


HANDLERS = {"gen-data": _cmd_gen_data, "train-baseline": _cmd_train_baseline,
            "train-detectors": _cmd_train_detectors, "build-attn": _cmd_build_attn,
            "train-awada": _cmd_train_awada, "stylize": _cmd_stylize, "eval": _cmd_eval,
            "ablate": _cmd_ablate, "export-plots": _cmd_export_plots}


# ------------------------------------------------------------------ plots

def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.write_text(buf.getvalue())


def export_plots(reports: Sequence[EvalReport], out: Path) -> List[Path]:
    """PR curves, per-seed fidelity/AP scatter and fg/bg L1 bars, each with its CSV.

    Output bytes depend only on the reports, so re-exporting is idempotent.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    png_meta = {"Software": None}
    written = []

    summary = [(r.label, row.seed, repr(row.fg_l1), repr(row.bg_l1), repr(row.ap)) for r in reports for row in r.rows]
    _write_csv(out / "per_seed.csv", ("label", "seed", "fg_l1", "bg_l1", "ap"), summary)
    curves = [(r.label, row.seed, repr(rc), repr(pc)) for r in reports for row in r.rows for rc, pc in row.pr]
    _write_csv(out / "pr_curves.csv", ("label", "seed", "recall", "precision"), curves)
    bars = []
    for r in reports:
        agg = r.aggregate()
        bars.append((r.label, repr(agg["fg_l1_mean"]), repr(agg["fg_l1_std"]),
                     repr(agg["bg_l1_mean"]), repr(agg["bg_l1_std"])))
    _write_csv(out / "l1_bars.csv", ("label", "fg_l1_mean", "fg_l1_std", "bg_l1_mean", "bg_l1_std"), bars)
    written += [out / "per_seed.csv", out / "pr_curves.csv", out / "l1_bars.csv"]

    fig, ax = plt.subplots(figsize=(5, 4))
    for r in reports:
        for row in r.rows:
            if row.pr:
                rec, prec = zip(*row.pr)
                ax.plot(rec, prec, drawstyle="steps-post", label=f"{r.label} {row.seed}")
    ax.set(xlabel="recall", ylabel="precision", xlim=(0, 1), ylim=(0, 1.05), title="Precision-recall")
    if ax.lines:
        ax.legend(fontsize=6)
    fig.savefig(out / "pr_curves.png", dpi=100, metadata=png_meta)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 4))
    for r in reports:
        ax.scatter([row.fg_l1 for row in r.rows], [row.ap for row in r.rows], label=r.label)
    ax.set(xlabel="foreground L1 to oracle", ylabel="AP@0.5", title="Per-seed results")
    if reports:
        ax.legend(fontsize=6)
    fig.savefig(out / "seed_scatter.png", dpi=100, metadata=png_meta)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 4))
    x = np.arange(len(reports))
    fg = [float(b[1]) for b in bars]
    bg = [float(b[3]) for b in bars]
    ax.bar(x - 0.2, fg, 0.4, yerr=[float(b[2]) for b in bars], label="foreground")
    ax.bar(x + 0.2, bg, 0.4, yerr=[float(b[4]) for b in bars], label="background")
    ax.set_xticks(x, [r.label for r in reports], rotation=30, ha="right", fontsize=6)
    ax.set(ylabel="L1 to oracle", title="Fidelity")
    ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(out / "l1_bars.png", dpi=100, metadata=png_meta)
    plt.close(fig)
    written += [out / "pr_curves.png", out / "seed_scatter.png", out / "l1_bars.png"]
    return written


# ------------------------------------------------------------------ entry

def run(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config_from_args(args)
    except (ConfigError, ValueError) as exc:
        print(f"awada {args.command}: error: {exc}", file=sys.stderr)
        return 1

    wd = Workdir(Path(args.workdir))
    seed_key = SEED_KEY[args.command]
    status = 0
    try:
        HANDLERS[args.command](args, cfg, wd)
    except PrerequisiteError as exc:
        print(f"awada {args.command}: {exc}", file=sys.stderr)
        status = 2
    except RUNTIME_ERRORS as exc:
        print(f"awada {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        status = 2
    inputs = content_hash(_inputs(args, wd), wd.root)
    _provenance(wd.root, argv, cfg.config_hash(),
                getattr(cfg, seed_key) if seed_key else "-", inputs, status)
    return status


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
