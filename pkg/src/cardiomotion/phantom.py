"""Synthetic cardiac phantom: annulus sequences with analytic motion.

A contracting, twisting annulus stands in for a short-axis myocardium.
The twist rotates every material point by the same angle, so the
rendered images are invariant to it while the ground-truth displacement
fields are not: intensity-only registration cannot recover the
tangential component, a supervised decoder can.  Frames are binary
annuli (mirroring segmentation-mask preprocessing) with optional
anti-aliased edges.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .container import read_container, write_container
from .grid import FieldSequence, Grid2, ScalarField, VectorField
from .strain import Mask

_DEFAULT_GRID = Grid2(64, 64, 1.0)


@dataclass(frozen=True)
class PhantomConfig:
    grid: Grid2 = _DEFAULT_GRID
    num_frames: int = 8
    r_inner: float = 10.0
    r_outer: float = 20.0
    contraction_amp: float = 0.1
    twist_amp: float = 0.2
    center_jitter: float = 0.0
    smoothing_std: float = 1.5
    seed: int = 0

    def __post_init__(self):
        half = min(self.grid.height, self.grid.width) / 2.0
        if not 2.0 <= self.r_inner < self.r_outer:
            raise ValueError(f"need 2 <= r_inner < r_outer, got {self.r_inner}, {self.r_outer}")
        if self.r_outer > half - 2.0:
            raise ValueError(f"r_outer {self.r_outer} exceeds {half - 2.0} for grid {self.grid.shape}")
        if not 0.0 <= self.contraction_amp <= 0.3:
            raise ValueError(f"contraction_amp {self.contraction_amp} outside [0, 0.3]")
        if not 0.0 <= self.twist_amp <= 0.5:
            raise ValueError(f"twist_amp {self.twist_amp} outside [0, 0.5]")
        if self.num_frames < 1:
            raise ValueError("num_frames must be at least 1")
        if self.center_jitter < 0 or self.smoothing_std < 0:
            raise ValueError("center_jitter and smoothing_std must be nonnegative")
        # annulus only shrinks over the cycle, so in-grid at tau=0 suffices
        if self.r_outer + self.center_jitter > half - 2.0:
            raise ValueError("center jitter can push the annulus out of the grid")


@dataclass(frozen=True)
class PhantomSample:
    images: FieldSequence
    motions: FieldSequence
    mask: Mask
    insertion_angle: float
    center: tuple[float, float]
    config: PhantomConfig


def time_profile(cfg: PhantomConfig, tau: float) -> float:
    """s(tau) = (1 - cos(2 pi tau / T)) / 2: zero at both ends, peak mid-cycle."""
    if not 0 <= tau <= cfg.num_frames:
        raise ValueError(f"frame index {tau} outside 0..{cfg.num_frames}")
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * tau / cfg.num_frames))


def _grid_center(grid: Grid2) -> tuple[float, float]:
    return (grid.width - 1) / 2.0, (grid.height - 1) / 2.0


def motion_model(cfg: PhantomConfig, tau: float,
                 center: tuple[float, float] | None = None) -> VectorField:
    """Frame-0-to-frame-tau displacement on the whole grid.

    A point at radius r, angle phi about the center moves to radius
    r*(1 - a*s(tau)) and angle phi + twist_amp*s(tau).
    """
    s = time_profile(cfg, tau)
    cx, cy = _grid_center(cfg.grid) if center is None else center
    ys, xs = np.mgrid[0 : cfg.grid.height, 0 : cfg.grid.width].astype(np.float64)
    dx = xs - cx
    dy = ys - cy
    scale = 1.0 - cfg.contraction_amp * s
    ang = cfg.twist_amp * s
    cos_a, sin_a = np.cos(ang), np.sin(ang)
    new_x = scale * (cos_a * dx - sin_a * dy)
    new_y = scale * (sin_a * dx + cos_a * dy)
    return VectorField(cfg.grid, new_x - dx, new_y - dy)


def _radial_profile(r: np.ndarray, r_in: float, r_out: float, std: float) -> np.ndarray:
    """Annulus indicator with raised-cosine edges of half-width std."""
    if std == 0.0:
        return ((r >= r_in) & (r <= r_out)).astype(np.float64)

    def edge(x):
        t = np.clip(x / std, -1.0, 1.0)
        return 0.5 * (1.0 + np.sin(0.5 * np.pi * t))

    return edge(r - r_in) * edge(r_out - r)


def render_frame(cfg: PhantomConfig, tau: float,
                 center: tuple[float, float] | None = None) -> ScalarField:
    """Annulus between the deformed radii at frame tau.

    Rendered through the material radial profile: the frame-0 profile is
    evaluated at r / (1 - a*s), so the anti-aliased edge contracts with
    the tissue and warping frame 0 by the analytic map reproduces frame
    tau up to interpolation error.  The twist never appears (rotational
    symmetry).
    """
    s = time_profile(cfg, tau)
    cx, cy = _grid_center(cfg.grid) if center is None else center
    ys, xs = np.mgrid[0 : cfg.grid.height, 0 : cfg.grid.width].astype(np.float64)
    r = np.hypot(xs - cx, ys - cy)
    material_r = r / (1.0 - cfg.contraction_amp * s)
    values = _radial_profile(material_r, cfg.r_inner, cfg.r_outer, cfg.smoothing_std)
    return ScalarField(cfg.grid, values)


def generate(cfg: PhantomConfig) -> PhantomSample:
    """Assemble images, motions, frame-0 mask, and a drawn insertion angle."""
    rng = np.random.default_rng(cfg.seed)
    cx, cy = _grid_center(cfg.grid)
    if cfg.center_jitter > 0:
        cx += rng.uniform(-cfg.center_jitter, cfg.center_jitter)
        cy += rng.uniform(-cfg.center_jitter, cfg.center_jitter)
    insertion = float(rng.uniform(0.0, 2.0 * np.pi))
    center = (float(cx), float(cy))
    images = FieldSequence([render_frame(cfg, t, center) for t in range(cfg.num_frames + 1)])
    motions = FieldSequence([motion_model(cfg, t, center) for t in range(1, cfg.num_frames + 1)])
    ys, xs = np.mgrid[0 : cfg.grid.height, 0 : cfg.grid.width].astype(np.float64)
    r = np.hypot(xs - center[0], ys - center[1])
    mask = Mask(cfg.grid, (r >= cfg.r_inner) & (r <= cfg.r_outer))
    return PhantomSample(images, motions, mask, insertion, center, cfg)


@dataclass(frozen=True)
class DatasetRanges:
    """Per-sequence parameter draws for make_dataset, all uniform."""

    contraction: tuple[float, float] = (0.05, 0.15)
    twist: tuple[float, float] = (0.1, 0.3)
    r_inner: tuple[float, float] = (8.0, 12.0)
    r_outer: tuple[float, float] = (18.0, 24.0)

    def __post_init__(self):
        for name in ("contraction", "twist", "r_inner", "r_outer"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"range {name} has lo > hi")


@dataclass(frozen=True)
class DatasetSplits:
    train: list
    validation: list
    test: list


def split_sizes(n_sequences: int) -> tuple[int, int, int]:
    """Deterministic (train, validation, test) counts at ~73/14/14%."""
    if n_sequences < 3:
        raise ValueError(f"need at least 3 sequences, got {n_sequences}")
    n_val = max(1, int(n_sequences * 101 / 741))
    n_test = max(1, int(n_sequences * 102 / 741))
    return n_sequences - n_val - n_test, n_val, n_test


def make_dataset(n_sequences: int, base: PhantomConfig = PhantomConfig(),
                 ranges: DatasetRanges = DatasetRanges(), seed: int = 0) -> DatasetSplits:
    """Generate n sequences with randomized geometry and split them.

    Each sequence draws (contraction, twist, radii) from the configured
    ranges using its own derived rng stream, so regenerating any prefix
    of the dataset is stable under n.
    """
    n_train, n_val, n_test = split_sizes(n_sequences)
    samples = []
    for i in range(n_sequences):
        rng = np.random.default_rng([seed, i])
        a = float(rng.uniform(*ranges.contraction))
        tw = float(rng.uniform(*ranges.twist))
        ri = float(rng.uniform(*ranges.r_inner))
        ro = float(rng.uniform(*ranges.r_outer))
        cfg = replace(base, contraction_amp=a, twist_amp=tw, r_inner=ri, r_outer=ro,
                      seed=int(rng.integers(0, 2**31)))
        samples.append(generate(cfg))
    return DatasetSplits(samples[:n_train],
                         samples[n_train : n_train + n_val],
                         samples[n_train + n_val :])


def save_sample(path, sample: PhantomSample) -> None:
    """Persist one sample as a motion-feature container."""
    cfg = sample.config
    meta = {
        "grid": [cfg.grid.height, cfg.grid.width, cfg.grid.spacing],
        "num_frames": cfg.num_frames,
        "r_inner": cfg.r_inner,
        "r_outer": cfg.r_outer,
        "contraction_amp": cfg.contraction_amp,
        "twist_amp": cfg.twist_amp,
        "center_jitter": cfg.center_jitter,
        "smoothing_std": cfg.smoothing_std,
        "seed": cfg.seed,
        "insertion_angle": sample.insertion_angle,
        "center": list(sample.center),
    }
    images = np.stack([f.values for f in sample.images.frames])
    motions = np.stack([np.stack([m.x_component, m.y_component]) for m in sample.motions.frames])
    records = {
        "images": images,
        "motions": motions,
        "mask": sample.mask.labels.astype(np.uint8),
        "meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8),
    }
    write_container(path, records)


def load_sample(path) -> PhantomSample:
    records = read_container(path)
    for need in ("images", "motions", "mask", "meta"):
        if need not in records:
            raise ValueError(f"sample container missing record {need!r}")
    meta = json.loads(records["meta"].tobytes().decode("utf-8"))
    gh, gw, spacing = meta["grid"]
    grid = Grid2(int(gh), int(gw), float(spacing))
    cfg = PhantomConfig(grid=grid, num_frames=int(meta["num_frames"]),
                        r_inner=meta["r_inner"], r_outer=meta["r_outer"],
                        contraction_amp=meta["contraction_amp"], twist_amp=meta["twist_amp"],
                        center_jitter=meta["center_jitter"], smoothing_std=meta["smoothing_std"],
                        seed=int(meta["seed"]))
    images = FieldSequence([ScalarField(grid, v) for v in records["images"]])
    motions = FieldSequence([VectorField(grid, m[0], m[1]) for m in records["motions"]])
    mask = Mask(grid, records["mask"].astype(bool))
    return PhantomSample(images, motions, mask, float(meta["insertion_angle"]),
                         (float(meta["center"][0]), float(meta["center"][1])), cfg)
