"""Command-line entry point: ``wsirisk {synth,train,infer,eval,cam}``.

Configuration precedence: built-in defaults < ``--config`` JSON < flags.
Exit codes: 0 success, 1 partial or per-item errors, 2 config/schema errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .config import ConfigError, RunConfig, load_config, write_run_json
from .explain import DEFAULT_OPACITY, grad_cam, predicted_class, ref_key, render_overlay, write_index
from .labeling import FoldSplit, cancer_fraction, label_patch
from .metrics_report import SlideRecord, cancer_area_fraction, emit_report, verify_paper_tables
from .nn_core import CheckpointError, load_checkpoint
from .slide_core import PatchRef, SlideError, load_mask, load_slide, read_manifest
from .synthgen import SynthSpec, generate_corpus
from .train_infer import (
    CVResult, TrainingError, infer_cv, load_fold, prepare_corpus, read_patch_predictions,
    read_slide_predictions, train_cv, write_predictions,
)

logger = logging.getLogger("wsirisk")

EXIT_OK, EXIT_ITEMS, EXIT_CONFIG = 0, 1, 2


class UsageError(Exception):
    """Bad input that should end the run with exit code 2."""


# ---------------------------------------------------------------------------
# config resolution

_OVERRIDES = ("manifest", "out_dir", "epochs", "cancer_epochs", "seed", "k_folds", "workers", "batch_size",
              "lr", "lam", "infer_lam", "reject_mode", "input_size", "patch_size", "stride", "cancer_cutoff")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of RunConfig keys")
    p.add_argument("--manifest")
    p.add_argument("--out", dest="out_dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--lam", type=float, help="training rejection threshold")
    p.add_argument("--infer-lam", type=float, help="inference confidence threshold (defaults to --lam)")
    p.add_argument("--reject-mode", choices=("literal", "inverted"))
    p.add_argument("--input-size", type=int)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--cancer-cutoff", type=float)


def resolve_config(args: argparse.Namespace, base: RunConfig | None = None) -> RunConfig:
    raw = (load_config(args.config) if getattr(args, "config", None) else base or RunConfig()).to_dict()
    for key in _OVERRIDES:
        val = getattr(args, key, None)
        if val is not None:
            raw[key] = val
    return RunConfig.from_dict(raw)


def _config_from_run(run_dir: Path) -> RunConfig | None:
    path = run_dir / "run.json"
    if not path.exists():
        return None
    return RunConfig.from_dict(json.loads(path.read_text())["config"])


def _require(value, flag: str):
    if not value:
        raise UsageError(f"{flag} is required")
    return value


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    spec = SynthSpec()
    if args.spec:
        spec_path = Path(args.spec)
        try:
            raw = json.loads(spec_path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{spec_path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
        if isinstance(raw, dict) and "spec" in raw and "seed" in raw:
            raw = raw["spec"]  # accept a corpus's own synth_spec.json
        try:
            spec = SynthSpec.from_dict(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{spec_path}: {exc}") from exc
    if args.hard_boundaries:
        spec.hard_boundaries = True
    mix = tuple(int(v) for v in args.class_mix.split(":"))
    if len(mix) != 3 or min(mix) < 0 or sum(mix) == 0:
        raise ConfigError("--class-mix must look like 5:3:2")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = generate_corpus(out, args.n_patients, args.slides_per_patient, mix, spec, args.seed, args.workers)
    write_run_json(out, "synth", {"seed": args.seed, "n_patients": args.n_patients,
                                  "slides_per_patient": args.slides_per_patient, "class_mix": list(mix),
                                  "workers": args.workers, "spec": spec.to_dict()})
    logger.info("wrote %d slides to %s", len(entries), out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    manifest_path = _require(cfg.manifest, "--manifest")
    out = Path(_require(cfg.out_dir, "--out"))
    if (out / "folds.json").exists() and not args.force:
        raise UsageError(f"{out} already holds a trained run; pass --force to overwrite")
    manifest = read_manifest(manifest_path)
    logger.info("train seed=%d folds=%d epochs=%d", cfg.seed, cfg.k_folds, cfg.epochs)
    out.mkdir(parents=True, exist_ok=True)
    write_run_json(out, "train", cfg.to_dict())
    corpus = prepare_corpus(manifest, cfg)
    train_cv(manifest, cfg, corpus, out)
    return EXIT_OK


def _load_models(run_dir: Path, folds: FoldSplit | None, fold: int | None):
    if fold is not None:
        return {fold: load_fold(run_dir / f"fold_{fold}")}
    if folds is None:
        return {0: load_fold(run_dir)}
    return {f: load_fold(run_dir / f"fold_{f}") for f in range(folds.k)}


def cmd_infer(args) -> int:
    run_dir = Path(args.run)
    base = _config_from_run(run_dir)
    if base is not None:
        base.out_dir = ""  # never write into the training directory by default
    cfg = resolve_config(args, base)
    out = Path(_require(cfg.out_dir, "--out"))
    manifest = read_manifest(_require(cfg.manifest, "--manifest"))
    folds = FoldSplit.load(run_dir / "folds.json") if (run_dir / "folds.json").exists() else None
    models = _load_models(run_dir, folds, args.fold)
    if args.fold is not None or folds is None:
        only = next(iter(models))
        folds = FoldSplit(1, {e.patient_id: only for e in manifest})
    else:
        missing = sorted({e.patient_id for e in manifest} - set(folds.assignment))
        if missing:
            raise UsageError(f"patients {missing[:5]} are not in {run_dir}/folds.json; pass --fold")
    out.mkdir(parents=True, exist_ok=True)
    write_run_json(out, "infer", cfg.to_dict(), run=str(run_dir), fold=args.fold)
    corpus = prepare_corpus(manifest, cfg)
    result: CVResult = infer_cv(manifest, folds, models, corpus, cfg)
    write_predictions(result, out)
    return EXIT_OK


def _patch_pairs(manifest, patch_rows, patch_size: int):
    """True vs predicted patch labels, recomputed from each slide's mask."""
    pairs = []
    for entry in manifest:
        rows = patch_rows.get(entry.slide_id, [])
        if not rows:
            continue
        mask = load_mask(entry.mask_path)
        for row in rows:
            x, y = int(row["x"]), int(row["y"])
            truth = label_patch(cancer_fraction(mask[y:y + patch_size, x:x + patch_size]), entry.rs_score)
            pairs.append((truth.label, row["predicted"]))
    return pairs


def cmd_eval(args) -> int:
    out = Path(_require(args.out, "--out"))
    out.mkdir(parents=True, exist_ok=True)
    verification = verify_paper_tables() if args.verify_paper_tables else None
    records, pairs, heatmaps = [], None, {}
    if args.predictions:
        pred_dir = Path(args.predictions)
        try:
            wsi = read_slide_predictions(pred_dir / "slide_predictions.json")
        except (KeyError, TypeError, AttributeError, ValueError) as exc:
            raise UsageError(f"{pred_dir}/slide_predictions.json: bad record schema ({exc})") from exc
        by_id = {w.slide_id: w for w in wsi}
        folds = {r["slide_id"]: r.get("fold") for r in json.loads((pred_dir / "slide_predictions.json").read_text())}
        manifest = [e for e in read_manifest(_require(args.manifest, "--manifest")) if e.slide_id in by_id]
        unknown = sorted(set(by_id) - {e.slide_id for e in manifest})
        if unknown:
            raise UsageError(f"predicted slides missing from the manifest: {unknown[:5]}")
        for e in manifest:
            w = by_id[e.slide_id]
            records.append(SlideRecord(e.slide_id, e.patient_id, e.rs_score, e.grade, w.category, w.status,
                                       cancer_area_fraction(load_mask(e.mask_path)), w.accepted, w.rejected,
                                       folds.get(e.slide_id)))
        patch_csv = pred_dir / "patch_predictions.csv"
        if patch_csv.exists():
            cfg = _config_from_run(pred_dir) or RunConfig()
            pairs = _patch_pairs(manifest, read_patch_predictions(patch_csv), cfg.patch_size)
    if args.heatmaps:
        index_path = Path(args.heatmaps) / "index.json"
        heatmaps = {k: str(Path(args.heatmaps) / v) for k, v in json.loads(index_path.read_text()).items()
                    if isinstance(v, str)}
    write_run_json(out, "eval", {"predictions": args.predictions, "manifest": args.manifest,
                                 "heatmaps": args.heatmaps, "verify_paper_tables": args.verify_paper_tables})
    report = emit_report(records, out, pairs, heatmaps, verification)
    if verification is not None:
        for check in verification.checks:
            if check.status in ("flag", "fail"):
                logger.warning("%s: %s %s", check.status, check.name, check.note)
            elif check.status == "info":
                logger.info("%s = %.4f (published %.2f): %s", check.name, check.computed, check.expected, check.note)
        if not verification.ok:
            return EXIT_ITEMS
    logger.info("report for %d slides written to %s", report["n_slides"], out)
    return EXIT_OK


def _parse_refs(args) -> list[PatchRef]:
    refs = []
    for text in args.ref or []:
        try:
            sid, x, y = text.rsplit(":", 2)
            refs.append(PatchRef(sid, int(x), int(y), args.patch_size))
        except ValueError as exc:
            raise UsageError(f"bad --ref {text!r}; expected slide_id:x:y") from exc
    if args.refs:
        path = Path(args.refs)
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
        try:
            refs.extend(PatchRef(r["slide_id"], int(r["x"]), int(r["y"]), int(r.get("size", args.patch_size)))
                        for r in raw)
        except (KeyError, TypeError) as exc:
            raise UsageError(f"{path}: each ref needs slide_id, x, y ({exc})") from exc
    if not refs:
        raise UsageError("no patch refs given (use --ref or --refs)")
    return refs


def cmd_cam(args) -> int:
    try:
        net, meta = load_checkpoint(args.checkpoint)
    except (OSError, CheckpointError) as exc:
        raise UsageError(str(exc)) from exc
    slides = {e.slide_id: e for e in read_manifest(_require(args.manifest, "--manifest"))}
    refs = _parse_refs(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    size = net.config.input_size
    index: dict[str, object] = {}
    errors = 0
    cache: dict[str, np.ndarray] = {}
    for ref in refs:
        key = ref_key(ref)
        entry = slides.get(ref.slide_id)
        if entry is None:
            index[key] = {"error": f"unknown slide {ref.slide_id!r}"}
            errors += 1
            continue
        if ref.slide_id not in cache:
            cache[ref.slide_id] = load_slide(entry.image_path)
        slide = cache[ref.slide_id]
        h, w = slide.shape[:2]
        if ref.x < 0 or ref.y < 0 or ref.x + ref.size > w or ref.y + ref.size > h:
            index[key] = {"error": f"patch {key} (size {ref.size}) outside slide of {w}x{h}"}
            errors += 1
            continue
        patch = ref.window(slide)
        x = patch if patch.shape[0] == size else np.asarray(Image.fromarray(patch).resize((size, size), Image.BILINEAR))
        try:
            cls = predicted_class(net, x) if args.target_class is None else args.target_class
            hm = grad_cam(net, x, cls, ref)
        except ValueError as exc:
            index[key] = {"error": str(exc)}
            errors += 1
            continue
        name = f"{ref.slide_id}_{ref.x}_{ref.y}_c{cls}.png"
        render_overlay(patch, hm, out / name, args.opacity)
        index[key] = name
    write_index(out, index)
    write_run_json(out, "cam", {"checkpoint": str(args.checkpoint), "role": meta.get("role"),
                                "manifest": args.manifest, "target_class": args.target_class,
                                "opacity": args.opacity, "refs": [ref_key(r) for r in refs]})
    return EXIT_ITEMS if errors else EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wsirisk", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic slide corpus")
    p.add_argument("--spec", help="SynthSpec JSON (defaults when omitted)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--n-patients", type=int, default=50)
    p.add_argument("--slides-per-patient", type=int, default=1)
    p.add_argument("--class-mix", default="5:3:2", help="Low:Intermediate:High patient ratio")
    p.add_argument("--hard-boundaries", action="store_true", help="sample RS near the bin edges")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="patient-level k-fold training")
    _add_config_flags(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--cancer-epochs", type=int)
    p.add_argument("--k-folds", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="score slides with trained checkpoints")
    _add_config_flags(p)
    p.add_argument("--run", required=True, help="train output dir (or a single fold dir)")
    p.add_argument("--fold", type=int, help="use this fold's models for every slide")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="metrics report from predictions")
    p.add_argument("--predictions", help="infer output dir")
    p.add_argument("--manifest")
    p.add_argument("--heatmaps", help="cam output dir to reference in the report")
    p.add_argument("--out", required=True)
    p.add_argument("--verify-paper-tables", action="store_true",
                   help="recompute the published tables from their embedded counts")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cam", help="Grad-CAM overlays for patch refs")
    p.add_argument("--checkpoint", required=True, help="risk.ckpt (or cancer.ckpt for the gate)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ref", action="append", help="slide_id:x:y (repeatable)")
    p.add_argument("--refs", help="JSON list of {slide_id, x, y[, size]}")
    p.add_argument("--patch-size", type=int, default=512)
    p.add_argument("--target-class", type=int, help="defaults to the predicted class")
    p.add_argument("--opacity", type=float, default=DEFAULT_OPACITY)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cam)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, SlideError, TrainingError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except json.JSONDecodeError as exc:
        print(f"error: line {exc.lineno} column {exc.colno}: {exc.msg}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
