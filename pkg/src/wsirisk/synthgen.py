"""Procedural H&E-like slides with exact cancer masks.

Slides are a pale glass background, a pink tissue blob with sparse stromal
nuclei, and one or more cancer regions whose texture depends on the risk
class: nucleus density and size, outline irregularity, mitotic figures and
gland-like tubule rings. The recipes are caricatures meant to be learnable and
controllable, not realistic.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .labeling import RiskCategory, bin_rs
from .slide_core import PATCH_SIZE, SlideManifestEntry, read_manifest, save_png, write_manifest

RS_INTERVALS = {
    RiskCategory.LOW: (0, 17),
    RiskCategory.INTERMEDIATE: (18, 31),
    RiskCategory.HIGH: (32, 100),
}
HARD_RS_INTERVALS = {
    RiskCategory.LOW: [(15, 17)],
    RiskCategory.INTERMEDIATE: [(18, 20), (29, 31)],
    RiskCategory.HIGH: [(32, 34)],
}
_CLASS_KEYS = {"low": RiskCategory.LOW, "intermediate": RiskCategory.INTERMEDIATE, "high": RiskCategory.HIGH}


@dataclass
class ClassTexture:
    density: float  # nuclei per 512x512 of cancer area
    radius: tuple[float, float]
    irregularity: float  # radial jitter of nucleus outlines, 0 = round
    mitosis_rate: float  # fraction of nuclei drawn as mitotic figures
    tubule_rate: float  # tubule rings per 512x512 of cancer area
    color: tuple[int, int, int] = (72, 38, 112)


def default_textures() -> dict[str, ClassTexture]:
    return {
        "low": ClassTexture(70, (5.0, 7.0), 0.05, 0.0, 6.0, (124, 84, 164)),
        "intermediate": ClassTexture(150, (6.0, 9.0), 0.2, 0.03, 1.5, (110, 70, 152)),
        "high": ClassTexture(260, (8.0, 12.0), 0.4, 0.12, 0.0, (98, 58, 142)),
    }


@dataclass
class SynthSpec:
    width: int = 2048
    height: int = 2048
    background: tuple[int, int, int] = (244, 242, 246)
    stroma: tuple[int, int, int] = (226, 156, 192)
    cancer_tint: tuple[int, int, int] = (204, 132, 184)
    stroma_density: float = 25.0
    tissue_coverage: float = 0.6
    cancer_regions: tuple[int, int] = (1, 3)
    cancer_coverage: tuple[float, float] = (0.22, 0.32)
    noise_std: float = 4.0
    hard_boundaries: bool = False
    textures: dict[str, ClassTexture] = field(default_factory=default_textures)

    def __post_init__(self):
        self.textures = {
            k: v if isinstance(v, ClassTexture) else ClassTexture(**v) for k, v in self.textures.items()
        }
        if set(self.textures) != set(_CLASS_KEYS):
            raise ValueError(f"textures must define exactly {sorted(_CLASS_KEYS)}")
        if self.width < PATCH_SIZE or self.height < PATCH_SIZE:
            raise ValueError("slide must hold at least one patch")
        if not 0 < self.tissue_coverage <= math.pi / 4:
            raise ValueError("tissue_coverage must be in (0, pi/4]")
        lo, hi = self.cancer_coverage
        if not 0 <= lo <= hi:
            raise ValueError("cancer_coverage must be an ordered pair")
        if hi > 1.0 or hi >= self.tissue_coverage:
            raise ValueError("requested cancer area exceeds the slide's tissue area")
        if not 1 <= self.cancer_regions[0] <= self.cancer_regions[1]:
            raise ValueError("cancer_regions must be an ordered pair >= 1")

    def texture(self, category: RiskCategory) -> ClassTexture:
        return self.textures[category.name.lower()]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> SynthSpec:
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown SynthSpec keys: {sorted(unknown)}")
        raw = dict(raw)
        for key in ("background", "stroma", "cancer_tint", "cancer_regions", "cancer_coverage"):
            if key in raw:
                raw[key] = tuple(raw[key])
        if "textures" in raw:
            raw["textures"] = {
                k: ClassTexture(**{**v, "radius": tuple(v["radius"]), "color": tuple(v.get("color", (72, 38, 112)))})
                for k, v in raw["textures"].items()
            }
        return cls(**raw)


@dataclass
class RenderedSlide:
    image: np.ndarray
    mask: np.ndarray
    rs_score: int
    cancer_nuclei: np.ndarray  # (n, 2) x, y centres of cancer nuclei
    requested_coverage: float = 0.0  # target cancer share of the slide area


def _blob_polygon(rng, cx, cy, radius, irregularity, n_vertices=24, harmonics=4):
    """Closed polygon with low-frequency radial wobble."""
    theta = np.linspace(0, 2 * np.pi, n_vertices, endpoint=False)
    r = np.ones_like(theta)
    for k in range(2, 2 + harmonics):
        r += irregularity / k * np.sin(k * theta + rng.uniform(0, 2 * np.pi))
    r = np.clip(r, 0.3, None) * radius
    return cx + r * np.cos(theta), cy + r * np.sin(theta)


def _polygon_area(xs, ys) -> float:
    return 0.5 * abs(float(np.dot(xs, np.roll(ys, -1)) - np.dot(ys, np.roll(xs, -1))))


def _poly(xs, ys) -> list[tuple[float, float]]:
    return list(zip(xs.tolist(), ys.tolist()))


def _jitter_color(rng, base, spread=10):
    return tuple(int(np.clip(c + rng.integers(-spread, spread + 1), 0, 255)) for c in base)


def _sample_rs(rng, category: RiskCategory, hard: bool) -> int:
    if hard:
        intervals = HARD_RS_INTERVALS[category]
        lo, hi = intervals[rng.integers(len(intervals))]
    else:
        lo, hi = RS_INTERVALS[category]
    return int(rng.integers(lo, hi + 1))


def _place_regions(rng, spec: SynthSpec, area_total: float, n: int, tissue_axes):
    """Non-overlapping cancer polygons whose total area matches ``area_total``.

    Centres lie inside the tissue ellipse; outlines may bulge past it but stay
    on the slide.
    """
    cx0, cy0 = spec.width / 2, spec.height / 2
    ax, ay = tissue_axes
    target = area_total / n
    radius = math.sqrt(target / math.pi)
    margin = 8.0
    for _layout in range(100):
        regions = []
        for _ in range(n):
            for _attempt in range(200):
                cx = rng.uniform(0, spec.width)
                cy = rng.uniform(0, spec.height)
                if ((cx - cx0) / ax) ** 2 + ((cy - cy0) / ay) ** 2 > 1:
                    continue
                xs, ys = _blob_polygon(rng, cx, cy, radius, 0.18)
                scale = math.sqrt(target / _polygon_area(xs - cx, ys - cy))
                xs, ys = cx + (xs - cx) * scale, cy + (ys - cy) * scale
                if (xs.min() < margin or ys.min() < margin
                        or xs.max() > spec.width - margin or ys.max() > spec.height - margin):
                    continue
                rmax = float(np.hypot(xs - cx, ys - cy).max())
                if all(math.hypot(cx - ox, cy - oy) > rmax + orad + margin for ox, oy, orad, _, _ in regions):
                    regions.append((cx, cy, rmax, xs, ys))
                    break
            else:
                break  # dead end: restart the layout
        if len(regions) == n:
            return regions
    raise ValueError("could not place cancer regions; reduce coverage or region count")


def _draw_nucleus(draw, rng, cx, cy, radius, irregularity, color):
    xs, ys = _blob_polygon(rng, cx, cy, radius, irregularity, n_vertices=10, harmonics=2)
    draw.polygon(_poly(xs, ys), fill=color)


def _draw_mitosis(draw, rng, cx, cy, radius):
    # clumped dark chromatin: a few overlapping small blobs
    for _ in range(4):
        dx, dy = rng.normal(0, radius * 0.35, 2)
        r = radius * rng.uniform(0.3, 0.5)
        draw.ellipse([cx + dx - r, cy + dy - r, cx + dx + r, cy + dy + r], fill=_jitter_color(rng, (52, 28, 74), 6))


def render_slide(category: RiskCategory, spec: SynthSpec | None = None, seed: int = 0) -> RenderedSlide:
    if category == RiskCategory.BENIGN:
        raise ValueError("slides are generated for a risk category, not Benign")
    spec = spec or SynthSpec()
    rng = np.random.default_rng(np.random.SeedSequence([seed, int(category)]))
    w, h = spec.width, spec.height
    tex = spec.texture(category)

    img = Image.new("RGB", (w, h), spec.background)
    draw = ImageDraw.Draw(img)
    tissue_img = Image.new("L", (w, h), 0)
    mask_img = Image.new("L", (w, h), 0)

    r = math.sqrt(4 * spec.tissue_coverage / math.pi)
    ax, ay = r * w / 2, r * h / 2
    theta = np.linspace(0, 2 * np.pi, 96, endpoint=False)
    wobble = 1 + 0.03 * np.sin(3 * theta + rng.uniform(0, 2 * np.pi))
    tx, ty = w / 2 + ax * wobble * np.cos(theta), h / 2 + ay * wobble * np.sin(theta)
    draw.polygon(_poly(tx, ty), fill=spec.stroma)
    ImageDraw.Draw(tissue_img).polygon(_poly(tx, ty), fill=255)

    coverage = rng.uniform(*spec.cancer_coverage)
    n_regions = int(rng.integers(spec.cancer_regions[0], spec.cancer_regions[1] + 1))
    regions = _place_regions(rng, spec, coverage * w * h, n_regions, (ax, ay))
    mdraw = ImageDraw.Draw(mask_img)
    for _, _, _, xs, ys in regions:
        draw.polygon(_poly(xs, ys), fill=spec.cancer_tint)
        mdraw.polygon(_poly(xs, ys), fill=255)

    mask = np.asarray(mask_img)
    tissue = np.asarray(tissue_img)
    unit = PATCH_SIZE * PATCH_SIZE

    # stromal nuclei: small elongated, outside cancer
    stroma_px = np.flatnonzero((tissue > 0) & (mask == 0))
    n_stroma = rng.poisson(spec.stroma_density * stroma_px.size / unit)
    for idx in rng.choice(stroma_px, size=min(n_stroma, stroma_px.size), replace=False):
        y, x = divmod(int(idx), w)
        a, b = rng.uniform(5, 8), rng.uniform(2, 3)
        draw.ellipse([x - a, y - b, x + a, y + b], fill=_jitter_color(rng, (96, 56, 132)))

    cancer_px = np.flatnonzero(mask > 0)
    area = cancer_px.size
    # tubules: pale lumen ringed by small regular nuclei
    for _ in range(rng.poisson(tex.tubule_rate * area / unit)):
        y, x = divmod(int(rng.choice(cancer_px)), w)
        lr = rng.uniform(12, 20)
        draw.ellipse([x - lr, y - lr, x + lr, y + lr], fill=_jitter_color(rng, (238, 226, 236), 4))
        k = int(rng.integers(8, 13))
        for t in np.linspace(0, 2 * np.pi, k, endpoint=False):
            nx, ny = x + (lr + 4) * math.cos(t), y + (lr + 4) * math.sin(t)
            draw.ellipse([nx - 4, ny - 4, nx + 4, ny + 4], fill=_jitter_color(rng, tex.color))

    n_nuclei = rng.poisson(tex.density * area / unit)
    picks = rng.choice(cancer_px, size=n_nuclei, replace=True) if area else np.array([], dtype=int)
    centres = np.zeros((n_nuclei, 2))
    for i, idx in enumerate(picks):
        y, x = divmod(int(idx), w)
        x, y = x + rng.uniform(-0.5, 0.5), y + rng.uniform(-0.5, 0.5)
        centres[i] = (x, y)
        rad = rng.uniform(*tex.radius)
        if rng.random() < tex.mitosis_rate:
            _draw_mitosis(draw, rng, x, y, rad)
        else:
            _draw_nucleus(draw, rng, x, y, rad, tex.irregularity, _jitter_color(rng, tex.color))

    image = np.asarray(img, dtype=np.int16)
    if spec.noise_std > 0:
        image = image + np.rint(rng.normal(0, spec.noise_std, image.shape)).astype(np.int16)
    image = np.clip(image, 0, 255).astype(np.uint8)
    rs = _sample_rs(rng, category, spec.hard_boundaries)
    return RenderedSlide(image, mask.copy(), rs, centres, coverage)


def generate_slide(
    category: RiskCategory,
    spec: SynthSpec | None = None,
    seed: int = 0,
    slide_id: str = "slide",
    patient_id: str | None = None,
    rs_score: int | None = None,
    grade: int | None = None,
) -> tuple[np.ndarray, np.ndarray, SlideManifestEntry]:
    """Render one slide. Returns ``(image, mask, manifest entry)`` with empty paths."""
    rendered = render_slide(category, spec, seed)
    rs = rendered.rs_score if rs_score is None else rs_score
    if bin_rs(rs) != category:
        raise ValueError(f"rs_score {rs} does not fall in category {category.name}")
    entry = SlideManifestEntry(slide_id, patient_id or slide_id, rs, grade, "", "")
    return rendered.image, rendered.mask, entry


def class_counts(n_patients: int, mix=(5, 3, 2)) -> dict[RiskCategory, int]:
    """Largest-remainder split of patients over Low/Intermediate/High."""
    total = sum(mix)
    raw = [n_patients * m / total for m in mix]
    counts = [int(math.floor(r)) for r in raw]
    order = sorted(range(3), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n_patients - sum(counts)]:
        counts[i] += 1
    return dict(zip((RiskCategory.LOW, RiskCategory.INTERMEDIATE, RiskCategory.HIGH), counts))


def _synth_grade(rng, category: RiskCategory) -> int:
    base = int(category)  # Low->1, Intermediate->2, High->3
    if rng.random() < 0.75:
        return base
    return int(np.clip(base + rng.choice([-1, 1]), 1, 3))


def _render_job(args):
    category, spec, seed, out_dir, slide_id = args
    rendered = render_slide(category, spec, seed)
    save_png(rendered.image, out_dir / "slides" / f"{slide_id}.png")
    save_png(rendered.mask, out_dir / "masks" / f"{slide_id}.png")
    return rendered.rs_score


def generate_corpus(
    out_dir: str | Path,
    n_patients: int = 50,
    slides_per_patient: int = 1,
    class_mix=(5, 3, 2),
    spec: SynthSpec | None = None,
    seed: int = 0,
    workers: int = 1,
) -> list[SlideManifestEntry]:
    """Write ``slides/``, ``masks/``, ``manifest.csv`` and ``synth_spec.json``.

    Each patient gets one class; all of a patient's slides share that
    patient's recurrence score.
    """
    spec = spec or SynthSpec()
    out = Path(out_dir)
    (out / "slides").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0]))
    cats = [c for c, n in class_counts(n_patients, class_mix).items() for _ in range(n)]
    cats = [cats[i] for i in rng.permutation(len(cats))]

    jobs, plan = [], []
    for p, cat in enumerate(cats):
        pid = f"P{p:03d}"
        rs = _sample_rs(rng, cat, spec.hard_boundaries)
        grade = _synth_grade(rng, cat)
        for s in range(slides_per_patient):
            sid = f"{pid}_S{s}"
            jobs.append((cat, spec, int(np.random.SeedSequence([seed, p, s]).generate_state(1)[0]), out, sid))
            plan.append((sid, pid, rs, grade))

    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            list(pool.map(_render_job, jobs))
    else:
        for job in jobs:
            _render_job(job)

    entries = [
        SlideManifestEntry(sid, pid, rs, grade, f"slides/{sid}.png", f"masks/{sid}.png")
        for sid, pid, rs, grade in plan
    ]
    write_manifest(entries, out / "manifest.csv")
    (out / "synth_spec.json").write_text(
        json.dumps({"seed": seed, "n_patients": n_patients, "slides_per_patient": slides_per_patient,
                    "class_mix": list(class_mix), "spec": spec.to_dict()}, indent=2, sort_keys=True) + "\n"
    )
    return read_manifest(out / "manifest.csv")
