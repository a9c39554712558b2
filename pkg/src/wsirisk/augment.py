"""Seeded colour augmentation for patches.

Every transform takes and returns an ``(..., 3)`` uint8 array. Randomness is
drawn from counter-based substreams keyed on ``(seed, patch index, view)``, so
outputs do not depend on the order patches are processed in.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .slide_core import luminance


def to_grayscale(patch: np.ndarray) -> np.ndarray:
    lum = luminance(patch)
    return np.repeat(lum[..., None], 3, axis=-1)


def solarize(patch: np.ndarray, threshold: int = 128) -> np.ndarray:
    """Invert every channel value ``v >= threshold``. ``threshold=256`` disables."""
    patch = np.asarray(patch, dtype=np.uint8)
    return np.where(patch >= threshold, 255 - patch, patch).astype(np.uint8)


def posterize(patch: np.ndarray, bits: int = 4) -> np.ndarray:
    if not 1 <= bits <= 8:
        raise ValueError("bits must be in 1..8")
    mask = np.uint8((0xFF << (8 - bits)) & 0xFF)
    return np.asarray(patch, dtype=np.uint8) & mask


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Float RGB in [0, 1] -> HSV with hue in degrees [0, 360), s and v in [0, 1]."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=-1)
    c = v - rgb.min(axis=-1)
    safe_c = np.where(c > 0, c, 1.0)
    h = np.where(
        v == r, ((g - b) / safe_c) % 6.0,
        np.where(v == g, (b - r) / safe_c + 2.0, (r - g) / safe_c + 4.0),
    )
    h = np.where(c > 0, h * 60.0, 0.0)
    s = np.where(v > 0, c / np.where(v > 0, v, 1.0), 0.0)
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0] % 360.0, hsv[..., 1], hsv[..., 2]
    c = v * s
    hp = h / 60.0
    x = c * (1.0 - np.abs(hp % 2.0 - 1.0))
    zero = np.zeros_like(c)
    sector = np.floor(hp).astype(int) % 6
    choices_r = [c, x, zero, zero, x, c]
    choices_g = [x, c, c, x, zero, zero]
    choices_b = [zero, zero, x, c, c, x]
    r = np.choose(sector, choices_r)
    g = np.choose(sector, choices_g)
    b = np.choose(sector, choices_b)
    m = v - c
    return np.stack([r + m, g + m, b + m], axis=-1)


def hue_saturation(patch: np.ndarray, hue_shift: float = 0.0, sat_scale: float = 1.0) -> np.ndarray:
    """Rotate hue by ``hue_shift`` degrees and scale saturation (clamped to [0, 1])."""
    if not -180.0 <= hue_shift <= 180.0:
        raise ValueError("hue_shift must be in [-180, 180]")
    if not 0.0 <= sat_scale <= 2.0:
        raise ValueError("sat_scale must be in [0, 2]")
    hsv = rgb_to_hsv(np.asarray(patch, dtype=np.float64) / 255.0)
    hsv[..., 0] = (hsv[..., 0] + hue_shift) % 360.0
    hsv[..., 1] = np.clip(hsv[..., 1] * sat_scale, 0.0, 1.0)
    out = np.rint(hsv_to_rgb(hsv) * 255.0)
    return np.clip(out, 0, 255).astype(np.uint8)


@dataclass
class TransformSpec:
    """One augmentation step.

    ``params`` holds fixed arguments; ``ranges`` holds ``[low, high]`` intervals
    sampled uniformly per application (``hue_shift``/``sat_scale`` only).
    """

    name: str
    prob: float
    params: dict = field(default_factory=dict)
    ranges: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in TRANSFORMS:
            raise ValueError(f"unknown transform {self.name!r}")
        if not 0.0 <= self.prob <= 1.0:
            raise ValueError(f"{self.name}: probability must be in [0, 1]")


TRANSFORMS = {
    "solarize": solarize,
    "posterize": posterize,
    "hue_saturation": hue_saturation,
    "grayscale": to_grayscale,
}


def default_transforms(prob: float = 0.3) -> list[TransformSpec]:
    return [
        TransformSpec("solarize", prob, {"threshold": 128}),
        TransformSpec("posterize", prob, {"bits": 4}),
        TransformSpec("hue_saturation", prob, ranges={"hue_shift": [-18.0, 18.0], "sat_scale": [0.7, 1.3]}),
        TransformSpec("grayscale", prob),
    ]


@dataclass
class AugmentSpec:
    transforms: list[TransformSpec] = field(default_factory=default_transforms)
    seed: int = 0

    def to_dict(self) -> dict:
        return {"seed": self.seed, "transforms": [asdict(t) for t in self.transforms]}

    @classmethod
    def from_dict(cls, raw: dict) -> AugmentSpec:
        return cls([TransformSpec(**t) for t in raw.get("transforms", [])], int(raw.get("seed", 0)))

    @classmethod
    def identity(cls, seed: int = 0) -> AugmentSpec:
        return cls([TransformSpec(t.name, 0.0, t.params, t.ranges) for t in default_transforms()], seed)


def substream(seed: int, index: int, view: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index, view])))


def augment(patch: np.ndarray, spec: AugmentSpec, index: int = 0, view: int = 0) -> np.ndarray:
    """Apply the pipeline in order; each step fires with its own probability."""
    rng = substream(spec.seed, index, view)
    out = np.asarray(patch, dtype=np.uint8)
    for t in spec.transforms:
        # Always draw both values so the stream layout is independent of which steps fire.
        fire = rng.random() < t.prob
        draws = {k: rng.uniform(lo, hi) for k, (lo, hi) in sorted(t.ranges.items())}
        if fire:
            out = TRANSFORMS[t.name](out, **t.params, **draws)
    return out


def two_views(patch: np.ndarray, spec: AugmentSpec, index: int = 0) -> tuple[np.ndarray, np.ndarray]:
    return augment(patch, spec, index, view=0), augment(patch, spec, index, view=1)


def to_model_input(patches: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 patches -> floats scaled to [0, 1]."""
    dtype = np.dtype(dtype)
    return np.asarray(patches, dtype=dtype) / dtype.type(255.0)
