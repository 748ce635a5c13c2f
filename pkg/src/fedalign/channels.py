"""Images as per-channel intensity measures, and projection onto a target.

Images are ``uint8`` arrays of shape ``(height, width, 3)``. Intensities
live on the normalised grid ``{0/255, ..., 255/255}``. Each channel is
handled as an independent 1D problem.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional, Sequence, Tuple

import numpy as np

from . import seeding
from .errors import ConvergenceError, ValidationError
from .ot import DiscreteMeasure, SinkhornConfig, TransportPlan, build_cost, sinkhorn

__all__ = [
    "LEVELS",
    "GRID",
    "CHANNEL_NAMES",
    "ChannelTriplet",
    "MeasureMode",
    "check_image",
    "image_to_channel_measures",
    "pooled_channel_measures",
    "on_grid",
    "barycentric_map",
    "intensity_lut",
    "project_image",
]

LEVELS = 256
GRID = np.arange(LEVELS) / (LEVELS - 1)
GRID.setflags(write=False)
CHANNEL_NAMES = ("red", "green", "blue")


@dataclass(frozen=True)
class MeasureMode:
    """How an image (or a pool of images) becomes a channel measure.

    ``histogram`` uses every pixel, binned into ``bins`` intensity bins.
    ``subsample`` draws ``count`` pixel positions uniformly without
    replacement (clamped to the number of pixels); the same positions are
    used for all three channels.
    """

    kind: str = "subsample"
    bins: int = LEVELS
    count: int = 250
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("histogram", "subsample"):
            raise ValidationError(f"unknown measure mode {self.kind!r}")
        if self.bins < 2 or self.bins > LEVELS:
            raise ValidationError(f"bins must be in [2, {LEVELS}], got {self.bins}")
        if self.count < 1:
            raise ValidationError("subsample count must be >= 1")

    @classmethod
    def histogram(cls, bins: int = LEVELS) -> "MeasureMode":
        return cls("histogram", bins=bins)

    @classmethod
    def subsample(cls, count: int = 250, seed: int = 0) -> "MeasureMode":
        return cls("subsample", count=count, seed=seed)

    def grid(self) -> np.ndarray:
        """Support points shared by every measure this mode produces."""
        if self.kind == "subsample" or self.bins == LEVELS:
            return GRID
        return np.array([GRID[self._bin_of_level() == k].mean() for k in range(self.bins)])

    def _bin_of_level(self) -> np.ndarray:
        return np.arange(LEVELS) * self.bins // LEVELS


@dataclass(frozen=True, eq=False)
class ChannelTriplet:
    """Red, green and blue intensity measures.

    Supports are subsets of one shared intensity grid; barycenters carry
    the full grid, image measures only the occupied levels.
    """

    red: DiscreteMeasure
    green: DiscreteMeasure
    blue: DiscreteMeasure

    def __post_init__(self):
        for name, m in zip(CHANNEL_NAMES, self):
            if m.dim != 1:
                raise ValidationError(f"{name} channel measure must be 1D")

    def __iter__(self) -> Iterator[DiscreteMeasure]:
        return iter((self.red, self.green, self.blue))

    def __getitem__(self, c: int) -> DiscreteMeasure:
        return (self.red, self.green, self.blue)[c]

    def equals(self, other: "ChannelTriplet") -> bool:
        return all(x.equals(y) for x, y in zip(self, other))


def check_image(img) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValidationError(f"expected an (H, W, 3) image, got shape {img.shape}")
    if img.dtype != np.uint8:
        if not np.issubdtype(img.dtype, np.integer) or img.min() < 0 or img.max() > 255:
            raise ValidationError("image levels must be integers in [0, 255]")
        img = img.astype(np.uint8)
    return img


def _subsample_rng(mode: MeasureMode, seed):
    if seed is None:
        return seeding.rng(mode.seed, seeding.SUBSAMPLE)
    if isinstance(seed, np.random.Generator):
        return seed
    counters = seed if isinstance(seed, (tuple, list)) else (seed,)
    return seeding.rng(counters[0], seeding.SUBSAMPLE, *counters[1:])


def _levels_to_measure(levels: np.ndarray, mode: MeasureMode) -> DiscreteMeasure:
    if mode.kind == "histogram" and mode.bins != LEVELS:
        counts = np.bincount(mode._bin_of_level()[levels], minlength=mode.bins)
        support = mode.grid()
    else:
        counts = np.bincount(levels, minlength=LEVELS)
        support = GRID
    occupied = counts > 0
    return DiscreteMeasure.from_masses(support[occupied], counts[occupied])


def _channel_measures(pixels: np.ndarray, mode: MeasureMode, seed) -> ChannelTriplet:
    """``pixels`` is an (n, 3) array of uint8 levels."""
    if mode.kind == "subsample" and mode.count < len(pixels):
        rng = _subsample_rng(mode, seed)
        idx = np.sort(rng.choice(len(pixels), size=mode.count, replace=False))
        pixels = pixels[idx]
    return ChannelTriplet(*(_levels_to_measure(pixels[:, c], mode) for c in range(3)))


def image_to_channel_measures(img, mode: Optional[MeasureMode] = None, seed=None) -> ChannelTriplet:
    """Per-channel intensity measures of one image.

    ``seed`` overrides ``mode.seed`` for subsampling; it may be an int, a
    tuple of counters ``(global_seed, agent, image)`` or a Generator.
    """
    mode = mode or MeasureMode()
    img = check_image(img)
    return _channel_measures(img.reshape(-1, 3), mode, seed)


def pooled_channel_measures(images: Sequence, mode: Optional[MeasureMode] = None, seed=None) -> ChannelTriplet:
    """Channel measures over the union of all pixels of ``images``."""
    mode = mode or MeasureMode()
    if len(images) == 0:
        raise ValidationError("cannot pool an empty image list")
    pixels = np.concatenate([check_image(img).reshape(-1, 3) for img in images])
    return _channel_measures(pixels, mode, seed)


def on_grid(measure: DiscreteMeasure, grid=GRID) -> DiscreteMeasure:
    """Re-express a measure supported on grid nodes over the whole grid."""
    grid = np.asarray(grid, dtype=float)
    idx = np.searchsorted(grid, measure.support)
    idx = np.minimum(idx, len(grid) - 1)
    if not np.allclose(grid[idx], measure.support, rtol=0, atol=1e-12):
        raise ValidationError("measure support is not a subset of the grid")
    w = np.zeros(len(grid))
    np.add.at(w, idx, measure.weights)
    return DiscreteMeasure.from_masses(grid, w)


def barycentric_map(plan: TransportPlan, source: DiscreteMeasure, target_support) -> np.ndarray:
    """Image of each source atom under the plan's barycentric projection.

    ``T(x_i) = sum_j P_ij y_j / sum_j P_ij``. The row sums equal the source
    weights once the plan has converged; dividing by the realised row sums
    keeps T inside the hull of the target even for unconverged plans.
    """
    y = np.asarray(target_support, dtype=float).reshape(-1)
    P = plan.entries
    if P.shape != (len(source), len(y)):
        raise ValidationError(
            f"plan has shape {P.shape}, expected {(len(source), len(y))}"
        )
    rows = P.sum(axis=1)
    if np.any(rows <= 0):
        raise ValidationError("plan has empty rows; source weights must be positive")
    T = (P @ y) / rows
    return np.clip(T, y.min(), y.max())


def intensity_lut(support: np.ndarray, mapped: np.ndarray) -> np.ndarray:
    """Extend a map known at ``support`` to all 256 levels.

    Piecewise-linear between support points, unit slope (a pure translation)
    beyond them. Returns the 8-bit lookup table after round-half-to-even
    and clamping.
    """
    order = np.argsort(support, kind="stable")
    xs = np.asarray(support, dtype=float)[order]
    ts = np.maximum.accumulate(np.asarray(mapped, dtype=float)[order])
    vals = np.interp(GRID, xs, ts)
    below = GRID < xs[0]
    above = GRID > xs[-1]
    vals[below] = GRID[below] + (ts[0] - xs[0])
    vals[above] = GRID[above] + (ts[-1] - xs[-1])
    vals = np.maximum.accumulate(vals)
    return np.clip(np.rint(vals * (LEVELS - 1)), 0, LEVELS - 1).astype(np.uint8)


def project_image(
    img,
    target: ChannelTriplet,
    mode: Optional[MeasureMode] = None,
    cfg: Optional[SinkhornConfig] = None,
    seed=None,
    return_luts: bool = False,
    p: float = 2.0,
):
    """Transport the colour channels of ``img`` onto ``target``.

    For each channel: build the image's own channel measure, solve entropic
    OT to the target channel, take the barycentric map, extend it to a
    monotone 256-entry lookup table and apply it to every pixel.

    Returns the projected image, plus the ``(3, 256)`` lookup tables when
    ``return_luts`` is set.

    Raises
    ------
    ConvergenceError
        Naming the channel whose Sinkhorn run failed.
    """
    mode = mode or MeasureMode()
    cfg = cfg or SinkhornConfig()
    img = check_image(img)
    source = image_to_channel_measures(img, mode, seed)
    out = np.empty_like(img)
    luts = np.empty((3, LEVELS), dtype=np.uint8)
    for c, (src, tgt) in enumerate(zip(source, target)):
        plan, _ = sinkhorn(src, tgt, build_cost(src, tgt, p), cfg)
        if not plan.converged:
            raise ConvergenceError(
                "projection sinkhorn did not converge",
                violation=plan.marginal_violation,
                context={"channel": CHANNEL_NAMES[c]},
            )
        T = barycentric_map(plan, src, tgt.support)
        luts[c] = intensity_lut(src.support, T)
        out[..., c] = luts[c][img[..., c]]
    if return_luts:
        return out, luts
    return out


def projection_luts(img, target, mode=None, cfg=None, seed=None) -> np.ndarray:
    return project_image(img, target, mode, cfg, seed, return_luts=True)[1]


def channel_histograms(images: Sequence) -> Tuple[DiscreteMeasure, DiscreteMeasure, DiscreteMeasure]:
    """Pooled 256-bin histograms, the measures used for discrepancy metrics."""
    return tuple(pooled_channel_measures(images, MeasureMode.histogram()))
