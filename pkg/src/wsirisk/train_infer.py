"""Cascade training, confidence-filtered patch selection and slide voting.

A binary cancer gate is trained first on Benign-vs-cancer patches. A
three-class risk network is then trained on cancer patches only with the
reject loss plus the ramped slide-aware contrastive term. At inference each
tissue patch passes the gate; cancer patches whose risk confidence exceeds
``lam`` vote for the slide's category.
"""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from . import losses
from .augment import AugmentSpec, augment, to_model_input
from .config import RunConfig
from .labeling import (
    RISK_CLASSES, FoldSplit, RiskCategory, bin_rs, cancer_fraction, fold_roles, label_patch, make_folds,
)
from .nn_core import Adam, Network, load_checkpoint, save_checkpoint, softmax_backward
from .slide_core import PatchRef, SlideManifestEntry, load_mask, load_slide, tissue_patches

logger = logging.getLogger(__name__)

STATUS_OK = "ok"
STATUS_NO_CANCER = "no-cancer-patches"
_INFER_BATCH = 64


class TrainingError(ValueError):
    pass


@dataclass
class SlidePatches:
    """Tissue patches of one slide, downscaled to the network input size."""

    entry: SlideManifestEntry
    refs: list[PatchRef]
    images: np.ndarray  # (n, s, s, 3) uint8
    cancer_fractions: np.ndarray
    labels: np.ndarray  # RiskCategory values
    threshold: int
    n_tiles: int

    @property
    def slide_id(self) -> str:
        return self.entry.slide_id


def prepare_slide(entry: SlideManifestEntry, cfg: RunConfig) -> SlidePatches:
    slide = load_slide(entry.image_path)
    mask = load_mask(entry.mask_path, slide.shape[:2])
    refs, threshold = tissue_patches(slide, entry.slide_id, cfg.patch_size, cfg.stride, cfg.min_tissue_fraction)
    n_tiles = ((slide.shape[0] - cfg.patch_size) // cfg.stride + 1) * ((slide.shape[1] - cfg.patch_size) // cfg.stride + 1) \
        if min(slide.shape[:2]) >= cfg.patch_size else 0
    size = cfg.input_size
    images = np.zeros((len(refs), size, size, 3), dtype=np.uint8)
    fractions = np.zeros(len(refs))
    for i, ref in enumerate(refs):
        patch = ref.window(slide)
        if patch.shape[0] != size:
            patch = np.asarray(Image.fromarray(patch).resize((size, size), Image.BILINEAR))
        images[i] = patch
        fractions[i] = cancer_fraction(ref.window(mask))
    labels = np.array([label_patch(f, entry.rs_score) for f in fractions], dtype=int)
    return SlidePatches(entry, refs, images, fractions, labels, threshold, n_tiles)


def prepare_corpus(manifest: Sequence[SlideManifestEntry], cfg: RunConfig) -> dict[str, SlidePatches]:
    return {e.slide_id: prepare_slide(e, cfg) for e in manifest}


@dataclass
class PatchPrediction:
    ref: PatchRef
    p_cancer: float
    p_risk: tuple[float, float, float] | None
    cf: float
    predicted: RiskCategory
    accepted: bool = False


@dataclass
class WsiPrediction:
    slide_id: str
    tallies: dict[str, int]
    accepted: int
    rejected: int
    benign: int
    category: RiskCategory | None
    status: str

    def to_dict(self) -> dict:
        return {
            "slide_id": self.slide_id,
            "tallies": self.tallies,
            "accepted": self.accepted,
            "rejected": self.rejected,
            "benign": self.benign,
            "category": None if self.category is None else self.category.label,
            "status": self.status,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> WsiPrediction:
        cat = raw.get("category")
        return cls(
            raw["slide_id"], {k: int(v) for k, v in raw["tallies"].items()}, int(raw["accepted"]),
            int(raw["rejected"]), int(raw.get("benign", 0)),
            None if cat is None else RiskCategory[cat.upper()], raw["status"],
        )


def risk_argmax(p_risk: np.ndarray) -> np.ndarray:
    """Argmax over (Low, Intermediate, High); ties resolve to the higher risk."""
    p_risk = np.atleast_2d(p_risk)
    k = p_risk.shape[1]
    return k - 1 - np.argmax(p_risk[:, ::-1], axis=1)


def _forward_probs(net: Network, images: np.ndarray) -> np.ndarray:
    out = []
    for start in range(0, len(images), _INFER_BATCH):
        x = to_model_input(images[start:start + _INFER_BATCH], net.dtype)
        out.append(net.forward(x, keep_cache=False).probs)
    return np.concatenate(out) if out else np.zeros((0, net.config.num_classes))


def predict_patches(
    cancer_net: Network,
    risk_net: Network,
    images: np.ndarray,
    refs: Sequence[PatchRef],
    cancer_cutoff: float = 0.5,
) -> list[PatchPrediction]:
    """Cancer gate, then the risk head for patches at or above ``cancer_cutoff``."""
    if len(images) == 0:
        return []
    p_gate = _forward_probs(cancer_net, images).astype(np.float64)
    p_cancer = p_gate[:, 1]
    is_cancer = p_cancer >= cancer_cutoff
    p_risk = np.full((len(images), 3), np.nan)
    if is_cancer.any():
        p_risk[is_cancer] = _forward_probs(risk_net, images[is_cancer])
    preds = []
    risk_idx = risk_argmax(np.nan_to_num(p_risk))
    for i, ref in enumerate(refs):
        if is_cancer[i]:
            pr = tuple(float(v) for v in p_risk[i])
            preds.append(PatchPrediction(ref, float(p_cancer[i]), pr, float(max(pr)), RISK_CLASSES[risk_idx[i]]))
        else:
            preds.append(PatchPrediction(ref, float(p_cancer[i]), None, float(p_gate[i].max()), RiskCategory.BENIGN))
    return preds


def predict_patch(cancer_net: Network, risk_net: Network, patch: np.ndarray, ref: PatchRef | None = None,
                  cancer_cutoff: float = 0.5) -> PatchPrediction:
    """Single-patch convenience wrapper; ``patch`` is already at network input size."""
    ref = ref or PatchRef("", 0, 0)
    return predict_patches(cancer_net, risk_net, patch[None], [ref], cancer_cutoff)[0]


def select_patches(predictions: Iterable[PatchPrediction], lam: float) -> list[PatchPrediction]:
    """Cancer-predicted patches with confidence strictly above ``lam``."""
    return [p for p in predictions if p.predicted != RiskCategory.BENIGN and p.cf > lam]


def aggregate_wsi(slide_id: str, accepted: Iterable[PatchPrediction], rejected: int = 0,
                  benign: int = 0) -> WsiPrediction:
    """Plurality vote over accepted patches; ties go to the higher-risk class."""
    counts = Counter(p.predicted for p in accepted)
    tallies = {c.label: counts.get(c, 0) for c in RISK_CLASSES}
    n = sum(counts.values())
    if n == 0:
        return WsiPrediction(slide_id, tallies, 0, rejected, benign, None, STATUS_NO_CANCER)
    winner = max(RISK_CLASSES, key=lambda c: (counts.get(c, 0), int(c)))
    return WsiPrediction(slide_id, tallies, n, rejected, benign, winner, STATUS_OK)


def predict_slide(cancer_net: Network, risk_net: Network, sp: SlidePatches, lam: float,
                  cancer_cutoff: float = 0.5) -> tuple[list[PatchPrediction], WsiPrediction]:
    preds = predict_patches(cancer_net, risk_net, sp.images, sp.refs, cancer_cutoff)
    accepted = select_patches(preds, lam)
    for p in accepted:
        p.accepted = True
    benign = sum(p.predicted == RiskCategory.BENIGN for p in preds)
    wsi = aggregate_wsi(sp.slide_id, accepted, len(preds) - benign - len(accepted), benign)
    return preds, wsi


# ---------------------------------------------------------------------------
# training


@dataclass
class _PatchSet:
    images: np.ndarray
    labels: np.ndarray  # class index for the head being trained
    slide_idx: np.ndarray


def _collect(slides: Sequence[SlidePatches], risk: bool) -> _PatchSet:
    imgs, labs, sidx = [], [], []
    for i, sp in enumerate(slides):
        keep = sp.labels > 0 if risk else np.ones(len(sp.labels), dtype=bool)
        imgs.append(sp.images[keep])
        labs.append(sp.labels[keep] - 1 if risk else (sp.labels[keep] > 0).astype(int))
        sidx.append(np.full(int(keep.sum()), i))
    if not imgs:
        return _PatchSet(np.zeros((0, 1, 1, 3), np.uint8), np.zeros(0, int), np.zeros(0, int))
    return _PatchSet(np.concatenate(imgs), np.concatenate(labs).astype(int), np.concatenate(sidx))


def _augmented(images: np.ndarray, spec: AugmentSpec, keys: np.ndarray, view: int) -> np.ndarray:
    return np.stack([augment(img, spec, int(k), view) for img, k in zip(images, keys)])


def _copy_params(net: Network) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in net.params.items()}


def _wsi_accuracy(cancer_net, risk_net, slides, cfg) -> tuple[float, float]:
    """Validation slide accuracy and risk-patch accuracy on true cancer patches."""
    correct, hit, total = 0, 0, 0
    for sp in slides:
        _, wsi = predict_slide(cancer_net, risk_net, sp, cfg.inference_lam, cfg.cancer_cutoff)
        correct += wsi.category is not None and wsi.category == _slide_category(sp.entry)
        cancer = sp.labels > 0
        if cancer.any():
            probs = _forward_probs(risk_net, sp.images[cancer])
            hit += int((np.array(RISK_CLASSES)[risk_argmax(probs)] == sp.labels[cancer]).sum())
            total += int(cancer.sum())
    return correct / max(len(slides), 1), hit / max(total, 1)


def _slide_category(entry: SlideManifestEntry) -> RiskCategory:
    return bin_rs(entry.rs_score)


def _train_gate(train: _PatchSet, val: _PatchSet, cfg: RunConfig, spec: AugmentSpec, seed: int, log: list):
    net = Network.init(cfg.network_config(2, embed=False), seed)
    opt = Adam(net.params, cfg.lr)
    best = (_gate_accuracy(net, val), -1)
    best_params = _copy_params(net)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    n = len(train.labels)
    for epoch in range(cfg.cancer_epochs):
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            x = to_model_input(_augmented(train.images[idx], spec, epoch * n + idx, 0), net.dtype)
            fp = net.forward(x)
            p = fp.probs.astype(np.float64)
            y = train.labels[idx]
            total += losses.cross_entropy(y, p)
            batches += 1
            dlogits = softmax_backward(p, losses.cross_entropy_grad(y, p))
            opt.step(net.params, net.backward(fp, dlogits.astype(net.dtype)))
        acc = _gate_accuracy(net, val)
        log.append({"stage": "cancer", "epoch": epoch, "loss": total / max(batches, 1), "val_patch_acc": acc})
        if acc > best[0]:
            best, best_params = (acc, epoch), _copy_params(net)
    net.params = best_params
    return net, best[1]


def _gate_accuracy(net: Network, data: _PatchSet) -> float:
    if len(data.labels) == 0:
        return 0.0
    probs = _forward_probs(net, data.images)
    return float((np.argmax(probs, axis=1) == data.labels).mean())


def _train_risk(train: _PatchSet, cancer_net: Network, val_slides, cfg: RunConfig, spec: AugmentSpec,
                seed: int, log: list):
    hp = cfg.loss_hyperparams()
    use_con = cfg.contrastive and cfg.embed_dim > 0
    net = Network.init(cfg.network_config(3, embed=use_con), seed)
    opt = Adam(net.params, cfg.lr)
    best = (*_wsi_accuracy(cancer_net, net, val_slides, cfg), -1)
    best_params = _copy_params(net)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    n = len(train.labels)
    for epoch in range(cfg.epochs):
        psi = losses.psi_schedule(epoch, hp.warmup_epochs) if use_con else 0.0
        order = rng.permutation(n)
        sums = {"reject": 0.0, "contrastive": 0.0, "total": 0.0}
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            keys = epoch * n + idx
            if use_con:
                views = np.concatenate([_augmented(train.images[idx], spec, keys, 0),
                                        _augmented(train.images[idx], spec, keys, 1)])
                y = np.tile(train.labels[idx], 2)
                wsi = np.tile(train.slide_idx[idx], 2)
            else:
                views = _augmented(train.images[idx], spec, keys, 0)
                y = train.labels[idx]
            fp = net.forward(to_model_input(views, net.dtype))
            p = fp.probs.astype(np.float64)
            cf = losses.confidence_score(p)
            rej = losses.reject_loss(y, p, cf, hp.alpha, hp.lam, hp.reject_mode)
            dlogits = softmax_backward(p, losses.reject_loss_grad(y, p, cf, hp.alpha, hp.lam, hp.reject_mode))
            dz = None
            con = 0.0
            if use_con:
                con, gz = losses.wsi_contrastive_grad(fp.embedding, y, wsi, hp.tau, hp.alpha_pos, hp.alpha_neg)
                dz = (psi * gz).astype(net.dtype)
            sums["reject"] += rej
            sums["contrastive"] += con
            sums["total"] += losses.total_loss(rej, con, psi)
            batches += 1
            grads = net.backward(fp, dlogits.astype(net.dtype), dz)
            opt.step(net.params, grads)
        wsi_acc, patch_acc = _wsi_accuracy(cancer_net, net, val_slides, cfg)
        entry = {"stage": "risk", "epoch": epoch, "psi": psi}
        entry.update({k: v / max(batches, 1) for k, v in sums.items()})
        entry.update({"val_wsi_acc": wsi_acc, "val_patch_acc": patch_acc})
        log.append(entry)
        if (wsi_acc, patch_acc) > best[:2]:
            best, best_params = (wsi_acc, patch_acc, epoch), _copy_params(net)
    net.params = best_params
    return net, best[2]


@dataclass
class FoldModels:
    cancer: Network
    risk: Network
    log: list[dict] = field(default_factory=list)
    best_epochs: dict[str, int] = field(default_factory=dict)


def train_fold(train_slides: Sequence[SlidePatches], val_slides: Sequence[SlidePatches], cfg: RunConfig,
               seed: int | None = None) -> FoldModels:
    """Train the cancer gate then the risk head; keep the best validation epoch.

    The gate is selected by validation patch accuracy, the risk head by
    validation slide accuracy (patch accuracy breaks ties). Zero epochs leave
    both networks at their initialisation.
    """
    seed = cfg.seed if seed is None else seed
    gate_train, gate_val = _collect(train_slides, risk=False), _collect(val_slides, risk=False)
    risk_train = _collect(train_slides, risk=True)
    for name, data, k in (("cancer gate", gate_train, 2), ("risk head", risk_train, 3)):
        present = set(np.unique(data.labels).tolist())
        missing = sorted(set(range(k)) - present)
        if missing:
            raise TrainingError(f"{name}: training fold has no patches for class indices {missing}")
    spec = cfg.augment_spec()
    log: list[dict] = []
    cancer_net, gate_epoch = _train_gate(gate_train, gate_val, cfg, spec, seed, log)
    risk_net, risk_epoch = _train_risk(risk_train, cancer_net, val_slides, cfg, spec, seed + 1, log)
    return FoldModels(cancer_net, risk_net, log, {"cancer": gate_epoch, "risk": risk_epoch})


def save_fold(models: FoldModels, fold_dir: str | Path, cfg: RunConfig, fold: int) -> None:
    fold_dir = Path(fold_dir)
    fold_dir.mkdir(parents=True, exist_ok=True)
    hp = cfg.loss_hyperparams().to_dict()
    for role, net in (("cancer", models.cancer), ("risk", models.risk)):
        meta = {"role": role, "fold": fold, "seed": cfg.seed, "epoch": models.best_epochs.get(role),
                "loss": hp}
        save_checkpoint(fold_dir / f"{role}.ckpt", net, meta)
    header = {"seed": cfg.seed, "fold": fold, "best_epochs": models.best_epochs}
    (fold_dir / "train_log.json").write_text(json.dumps({"header": header, "epochs": models.log}, indent=2) + "\n")


def load_fold(fold_dir: str | Path) -> tuple[Network, Network]:
    cancer, _ = load_checkpoint(Path(fold_dir) / "cancer.ckpt")
    risk, _ = load_checkpoint(Path(fold_dir) / "risk.ckpt")
    return cancer, risk


# ---------------------------------------------------------------------------
# cross-validation


@dataclass
class CVResult:
    folds: FoldSplit
    patch_predictions: dict[str, list[PatchPrediction]]
    wsi_predictions: dict[str, WsiPrediction]
    slide_fold: dict[str, int]
    logs: dict[int, list[dict]]


def split_slides(manifest, folds: FoldSplit, test_fold: int):
    val_fold, train_folds = fold_roles(folds.k, test_fold)
    by_fold = lambda fs: [e for e in manifest if folds.fold_of(e.patient_id) in fs]  # noqa: E731
    return by_fold(set(train_folds)), by_fold({val_fold}), by_fold({test_fold})


def _fold_job(args):
    fold, train, val, cfg = args
    return train_fold(train, val, cfg, seed=cfg.seed + 1000 * fold)


def train_cv(manifest: Sequence[SlideManifestEntry], cfg: RunConfig, corpus: dict[str, SlidePatches] | None = None,
             out_dir: str | Path | None = None) -> tuple[FoldSplit, dict[int, FoldModels]]:
    corpus = corpus or prepare_corpus(manifest, cfg)
    folds = make_folds(manifest, cfg.k_folds, cfg.seed)
    jobs = []
    for f in range(folds.k):
        train, val, _ = split_slides(manifest, folds, f)
        jobs.append((f, [corpus[e.slide_id] for e in train], [corpus[e.slide_id] for e in val], cfg))
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(_fold_job, jobs))
    else:
        results = [_fold_job(j) for j in jobs]
    models = dict(enumerate(results))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        folds.save(out / "folds.json")
        for f, m in models.items():
            save_fold(m, out / f"fold_{f}", cfg, f)
    return folds, models


def infer_cv(manifest, folds: FoldSplit, models: dict[int, tuple[Network, Network]],
             corpus: dict[str, SlidePatches], cfg: RunConfig) -> CVResult:
    """Score every slide with the models of the fold that held it out."""
    patch_preds, wsi_preds, slide_fold = {}, {}, {}
    for entry in manifest:
        f = folds.fold_of(entry.patient_id)
        cancer, risk = models[f]
        preds, wsi = predict_slide(cancer, risk, corpus[entry.slide_id], cfg.inference_lam, cfg.cancer_cutoff)
        patch_preds[entry.slide_id] = preds
        wsi_preds[entry.slide_id] = wsi
        slide_fold[entry.slide_id] = f
    return CVResult(folds, patch_preds, wsi_preds, slide_fold, {})


def run_cv(manifest: Sequence[SlideManifestEntry], cfg: RunConfig, out_dir: str | Path | None = None,
           corpus: dict[str, SlidePatches] | None = None) -> CVResult:
    """Train ``k`` folds, then pool held-out predictions for every slide."""
    corpus = corpus or prepare_corpus(manifest, cfg)
    folds, models = train_cv(manifest, cfg, corpus, out_dir)
    nets = {f: (m.cancer, m.risk) for f, m in models.items()}
    if out_dir is not None:
        # score with the saved float32 checkpoints so in-process and CLI runs agree
        nets = {f: load_fold(Path(out_dir) / f"fold_{f}") for f in models}
    result = infer_cv(manifest, folds, nets, corpus, cfg)
    result.logs = {f: m.log for f, m in models.items()}
    if out_dir is not None:
        write_predictions(result, out_dir)
    return result


PATCH_CSV_FIELDS = ("slide_id", "x", "y", "p_cancer", "p_low", "p_int", "p_high", "CF", "accepted", "predicted")


def _fmt(v: float | None) -> str:
    return "" if v is None else f"{v:.6f}"


def write_predictions(result: CVResult, out_dir: str | Path) -> None:
    out = Path(out_dir)
    with (out / "patch_predictions.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PATCH_CSV_FIELDS)
        for sid, preds in result.patch_predictions.items():
            for p in preds:
                pr = p.p_risk or (None, None, None)
                writer.writerow([sid, p.ref.x, p.ref.y, _fmt(p.p_cancer), *(_fmt(v) for v in pr),
                                 _fmt(p.cf), int(p.accepted), p.predicted.label])
    slides = [dict(w.to_dict(), fold=result.slide_fold.get(sid)) for sid, w in result.wsi_predictions.items()]
    (out / "slide_predictions.json").write_text(json.dumps(slides, indent=2) + "\n")


def read_slide_predictions(path: str | Path) -> list[WsiPrediction]:
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, list):
        raise ValueError(f"{path}: expected a JSON array of slide predictions")
    return [WsiPrediction.from_dict(r) for r in raw]


def read_patch_predictions(path: str | Path) -> dict[str, list[dict]]:
    out: dict[str, list[dict]] = {}
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["slide_id"], []).append(row)
    return out
