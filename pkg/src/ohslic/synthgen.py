"""Labeled synthetic forest scenes: leaf spectra, soil, crowns, sun, noise.

Leaf reflectance comes from a parametric surrogate: a structural baseline
curve multiplied by exponential attenuation over fixed per-pigment absorption
shapes (Gaussian mixtures on the wavelength axis).  The shapes live in one
versioned table below; increasing any pigment content strictly lowers
reflectance at that pigment's peak wavelength.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ohslic.hsdata import BandGrid, LabeledCube

GENERATOR_VERSION = "surrogate-1"

SUBSAMPLES = 4  # per-axis subsampling for crown edge area fractions


class SceneError(RuntimeError):
    """Crown placement failed within the retry budget."""


@dataclass(frozen=True)
class LeafParams:
    """Leaf model parameter vector (structure + six contents).

    n      unitless leaf structure, >= 1
    ab     chlorophyll a+b, ug/cm^2
    ar     carotenoid, ug/cm^2
    brown  brown pigment, unitless
    w      equivalent water thickness, cm
    m      dry matter, g/cm^2
    ant    anthocyanin, ug/cm^2
    """

    n: float
    ab: float
    ar: float
    brown: float
    w: float
    m: float
    ant: float

    def __post_init__(self):
        if self.n < 1.0:
            raise ValueError("structure parameter n must be >= 1")
        for name in ("ab", "ar", "brown", "w", "m", "ant"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def to_array(self) -> np.ndarray:
        return np.array(
            [self.n, self.ab, self.ar, self.brown, self.w, self.m, self.ant],
            dtype=np.float64,
        )

    @classmethod
    def from_array(cls, a: Sequence[float]) -> "LeafParams":
        n, ab, ar, brown, w, m, ant = (float(x) for x in a)
        return cls(n=n, ab=ab, ar=ar, brown=brown, w=w, m=m, ant=ant)


# Sampling ranges.  ab and ar are uniform over their documented ranges,
# anthocyanin is log-normal with median 1 (sigma_log 0.5), and the remaining
# parameters use bounded triangular draws (unimodal, mode listed).
PARAM_RANGES = {
    "ab": (10.0, 50.0),
    "ar": (4.0, 14.0),
    "ant_sigma_log": 0.5,
    "n": (1.0, 1.75, 2.5),
    "brown": (0.0, 0.25, 1.0),
    "w": (0.001, 0.0155, 0.03),
    "m": (0.002, 0.011, 0.02),
}

# Specific-absorption shapes k_p(lambda), one entry per pigment:
# (amplitude, center nm, width nm) Gaussian components, plus the wavelength
# where each pigment's absorption peaks within 400-1700 nm.  Amplitudes are
# scaled so typical contents attenuate reflectance by a visible but bounded
# factor.  Version: surrogate-1; change GENERATOR_VERSION when editing.
ABSORPTION_SHAPES = {
    "ab": {"gaussians": [(0.045, 430.0, 18.0), (0.055, 660.0, 22.0)], "peak_nm": 660.0},
    "ar": {"gaussians": [(0.075, 475.0, 22.0)], "peak_nm": 475.0},
    "ant": {"gaussians": [(0.10, 550.0, 25.0)], "peak_nm": 550.0},
    "w": {"gaussians": [(45.0, 1450.0, 45.0), (12.0, 970.0, 30.0)], "peak_nm": 1450.0},
    "brown": {"gaussians": [(0.8, 500.0, 80.0)], "peak_nm": 500.0},
}
# Dry matter absorbs broadly past 1300 nm (sigmoid ramp, not a Gaussian).
DRY_MATTER_SCALE = 30.0
DRY_MATTER_EDGE_NM = 1350.0
DRY_MATTER_WIDTH_NM = 90.0
DRY_MATTER_PEAK_NM = 1700.0

BASELINE_VISIBLE = 0.12
BASELINE_PLATEAU = 0.22
BASELINE_STRUCTURE_GAIN = 0.10
RED_EDGE_NM = 722.0
RED_EDGE_WIDTH_NM = 28.0

SOIL_ARCHETYPES = ("bright_sand", "dark_loam", "gravel")


def _gauss(wl: np.ndarray, center: float, width: float) -> np.ndarray:
    return np.exp(-0.5 * ((wl - center) / width) ** 2)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def absorption_shape(pigment: str, grid: BandGrid) -> np.ndarray:
    """Specific absorption k_p(lambda) for one pigment on a grid."""
    wl = grid.wavelengths
    if pigment == "m":
        return DRY_MATTER_SCALE * _sigmoid((wl - DRY_MATTER_EDGE_NM) / DRY_MATTER_WIDTH_NM)
    spec = ABSORPTION_SHAPES[pigment]
    k = np.zeros_like(wl)
    for amp, center, width in spec["gaussians"]:
        k += amp * _gauss(wl, center, width)
    return k


def pigment_peak_nm(pigment: str) -> float:
    if pigment == "m":
        return DRY_MATTER_PEAK_NM
    return ABSORPTION_SHAPES[pigment]["peak_nm"]


def baseline_reflectance(n: float, grid: BandGrid) -> np.ndarray:
    """Structural baseline: flat visible floor rising through the red edge
    to a NIR plateau whose height grows with leaf structure n."""
    plateau = BASELINE_PLATEAU + BASELINE_STRUCTURE_GAIN * (n - 1.0)
    rise = _sigmoid((grid.wavelengths - RED_EDGE_NM) / RED_EDGE_WIDTH_NM)
    return BASELINE_VISIBLE + plateau * rise


def leaf_reflectance(params: LeafParams, grid: BandGrid) -> np.ndarray:
    """Leaf spectrum in (0, 1): baseline(n) * exp(-sum_p content_p * k_p)."""
    absorb = (
        params.ab * absorption_shape("ab", grid)
        + params.ar * absorption_shape("ar", grid)
        + params.ant * absorption_shape("ant", grid)
        + params.w * absorption_shape("w", grid)
        + params.m * absorption_shape("m", grid)
        + params.brown * absorption_shape("brown", grid)
    )
    return baseline_reflectance(params.n, grid) * np.exp(-absorb)


def soil_reflectance(archetype: str, grid: BandGrid) -> np.ndarray:
    """Smooth background spectrum without pigment dips, values in (0, 1)."""
    wl = grid.wavelengths
    t = (wl - 400.0) / 1300.0
    if archetype == "bright_sand":
        return 0.30 + 0.25 * t
    if archetype == "dark_loam":
        return 0.06 + 0.07 * t
    if archetype == "gravel":
        return 0.15 + 0.10 * _sigmoid((wl - 900.0) / 250.0)
    raise ValueError(f"unknown soil archetype: {archetype!r}")


def solar_envelope(grid: BandGrid) -> np.ndarray:
    """Illumination envelope with deep water-vapor troughs (940/1130/1400 nm)."""
    wl = grid.wavelengths
    env = (
        1.0
        - 0.92 * _gauss(wl, 1400.0, 42.0)
        - 0.35 * _gauss(wl, 1130.0, 28.0)
        - 0.45 * _gauss(wl, 940.0, 22.0)
    )
    return np.clip(env, 0.02, 1.0)


def sample_leaf_params(rng: np.random.Generator) -> LeafParams:
    """Draw one leaf parameter vector; deterministic for a seeded rng."""
    ab = rng.uniform(*PARAM_RANGES["ab"])
    ar = rng.uniform(*PARAM_RANGES["ar"])
    ant = float(np.exp(rng.normal(0.0, PARAM_RANGES["ant_sigma_log"])))
    n = rng.triangular(*PARAM_RANGES["n"])
    brown = rng.triangular(*PARAM_RANGES["brown"])
    w = rng.triangular(*PARAM_RANGES["w"])
    m = rng.triangular(*PARAM_RANGES["m"])
    return LeafParams(n=n, ab=ab, ar=ar, brown=brown, w=w, m=m, ant=ant)


@dataclass
class SceneConfig:
    """Geometry, background, and noise settings for one generated scene."""

    width: int = 1024
    height: int = 1024
    tree_count: tuple[int, int] = (8, 15)
    tree_diameter_mean: float = 50.0
    soil_archetype: str | None = None
    noise_sigma: float = 0.01
    rng_seed: int = 0
    grid: BandGrid = field(default_factory=BandGrid.uniform)

    def __post_init__(self):
        if self.width < 4 or self.height < 1:
            raise ValueError("scene must be at least 4 px wide and 1 px tall")
        lo, hi = self.tree_count
        if not (0 < lo <= hi):
            raise ValueError("tree_count range must satisfy 0 < lo <= hi")
        if self.tree_diameter_mean <= 0:
            raise ValueError("tree_diameter_mean must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.soil_archetype is not None and self.soil_archetype not in SOIL_ARCHETYPES:
            raise ValueError(f"unknown soil archetype: {self.soil_archetype!r}")

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "tree_count": list(self.tree_count),
            "tree_diameter_mean": self.tree_diameter_mean,
            "soil_archetype": self.soil_archetype,
            "noise_sigma": self.noise_sigma,
            "rng_seed": self.rng_seed,
            "wavelengths": [float(x) for x in self.grid.wavelengths],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        wavelengths = d.pop("wavelengths")
        d["tree_count"] = tuple(d["tree_count"])
        return cls(grid=BandGrid(np.asarray(wavelengths)), **d)


def _draw_crown(rng: np.random.Generator, cfg: SceneConfig) -> tuple[float, float]:
    """Semi-axis radii from clipped normal diameters around the configured mean."""
    mean = cfg.tree_diameter_mean
    lo, hi = 0.4 * mean, 1.6 * mean
    dx = float(np.clip(rng.normal(mean, mean / 5.0), lo, hi))
    dy = float(np.clip(rng.normal(mean, mean / 5.0), lo, hi))
    return dx / 2.0, dy / 2.0


def _place_crowns(rng: np.random.Generator, cfg: SceneConfig) -> list[dict]:
    """Rejection-sample non-overlapping (touching allowed) elliptical crowns."""
    lo, hi = cfg.tree_count
    target = int(rng.integers(lo, hi + 1))
    placed: list[dict] = []
    attempts = 0
    max_attempts = 200 * target
    while len(placed) < target and attempts < max_attempts:
        attempts += 1
        rx, ry = _draw_crown(rng, cfg)
        if 2 * rx >= cfg.width - 2 or 2 * ry >= cfg.height - 2:
            continue
        cx = rng.uniform(rx + 1, cfg.width - rx - 1)
        cy = rng.uniform(ry + 1, cfg.height - ry - 1)
        r_out = max(rx, ry)
        ok = True
        for other in placed:
            d = np.hypot(cx - other["cx"], cy - other["cy"])
            if d < r_out + max(other["rx"], other["ry"]):
                ok = False
                break
        if ok:
            placed.append({"cx": cx, "cy": cy, "rx": rx, "ry": ry})
    if len(placed) < lo:
        raise SceneError(
            f"placed only {len(placed)}/{lo} crowns after {attempts} attempts"
        )
    return placed


def _crown_alpha(tree: dict, cfg: SceneConfig) -> tuple[slice, slice, np.ndarray]:
    """Area fraction of each pixel inside the crown ellipse (bounding box only)."""
    cx, cy, rx, ry = tree["cx"], tree["cy"], tree["rx"], tree["ry"]
    x0 = max(0, int(np.floor(cx - rx)) - 1)
    x1 = min(cfg.width, int(np.ceil(cx + rx)) + 2)
    y0 = max(0, int(np.floor(cy - ry)) - 1)
    y1 = min(cfg.height, int(np.ceil(cy + ry)) + 2)
    # Pixel (r, c) covers [c, c+1) x [r, r+1); subsample its area uniformly.
    sub = (np.arange(SUBSAMPLES) + 0.5) / SUBSAMPLES
    xs = (np.arange(x0, x1)[:, None] + sub[None, :]).ravel()
    ys = (np.arange(y0, y1)[:, None] + sub[None, :]).ravel()
    ex = ((xs - cx) / rx) ** 2
    ey = ((ys - cy) / ry) ** 2
    inside = (ey[:, None] + ex[None, :]) <= 1.0
    h, w = y1 - y0, x1 - x0
    alpha = (
        inside.reshape(h, SUBSAMPLES, w, SUBSAMPLES)
        .mean(axis=(1, 3))
        .astype(np.float64)
    )
    return slice(y0, y1), slice(x0, x1), alpha


def generate_scene(config: SceneConfig, rng: np.random.Generator | None = None) -> LabeledCube:
    """Render one labeled scene: soil background, crowns, sun envelope, noise."""
    if rng is None:
        rng = np.random.default_rng(config.rng_seed)
    grid = config.grid
    archetype = config.soil_archetype or str(rng.choice(SOIL_ARCHETYPES))
    soil = soil_reflectance(archetype, grid)

    crowns = _place_crowns(rng, config)
    h, w, b = config.height, config.width, grid.count
    data = np.broadcast_to(soil, (h, w, b)).copy()
    tree_mask = np.zeros((h, w), dtype=bool)
    mixed_mask = np.zeros((h, w), dtype=bool)
    labels = np.zeros((h, w, 7), dtype=np.float64)

    trees_meta = []
    for tree in crowns:
        params = sample_leaf_params(rng)
        leaf = leaf_reflectance(params, grid)
        ys, xs, alpha = _crown_alpha(tree, config)
        a3 = alpha[:, :, None]
        data[ys, xs] = a3 * leaf + (1.0 - a3) * data[ys, xs]
        covered = alpha >= 0.5
        ring = (alpha > 0.0) & (alpha < 1.0)
        tree_mask[ys, xs] |= covered
        mixed_mask[ys, xs] |= ring
        sub_labels = labels[ys, xs]
        sub_labels[covered] = params.to_array()
        labels[ys, xs] = sub_labels
        trees_meta.append({**tree, "params": params.to_array().tolist()})

    data *= solar_envelope(grid)
    if config.noise_sigma > 0:
        data *= 1.0 + config.noise_sigma * rng.standard_normal(size=data.shape)
        np.maximum(data, 0.0, out=data)

    meta = {
        "scene": config.to_dict(),
        "soil_archetype": archetype,
        "trees": trees_meta,
        "generator_version": GENERATOR_VERSION,
        "wavelengths": [float(x) for x in grid.wavelengths],
        "seed": int(config.rng_seed),
    }
    return LabeledCube(
        data=data.astype(np.float32),
        tree_mask=tree_mask,
        mixed_mask=mixed_mask,
        labels=labels.astype(np.float32),
        meta=meta,
    )


def render_fake_rgb(cube: LabeledCube) -> np.ndarray:
    """Nearest-band 660/550/450 nm composite, gamma-scaled to uint8."""
    wl = np.asarray(cube.meta.get("wavelengths", []), dtype=np.float64)
    if wl.size != cube.bands:
        raise ValueError("cube lacks a wavelength grid for RGB rendering")
    if wl.min() > 450.0 or wl.max() < 660.0:
        raise ValueError("grid does not cover the 450-660 nm visible range")
    out = np.empty((cube.height, cube.width, 3), dtype=np.uint8)
    for ch, target in enumerate((660.0, 550.0, 450.0)):
        band = int(np.argmin(np.abs(wl - target)))
        plane = np.clip(cube.data[:, :, band].astype(np.float64), 0.0, 1.0)
        out[:, :, ch] = np.round(255.0 * plane ** (1.0 / 2.2)).astype(np.uint8)
    return out
