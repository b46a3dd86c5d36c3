"""Robust intensity statistics.

RANSAC estimate of the bath (PBS) distribution, per-depth mean/STD tables for
the two tissue classes, and RANSAC-guarded cubic spline profiles along depth.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline

from .energy import sigma_floor
from .volume import IntensityVolume

MIN_DEPTH_VOXELS = 10
SLICES_PER_KNOT = 8
MIN_KNOTS = 4
CLAMP_FRACTION = 0.01
REFIT_ROUNDS = 10
LO_TOLERANCE_STEPS = (8.0, 4.0, 2.0)
SPLINE_PENALTY = 0.1


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class PbsModel:
    mu: float
    sigma: float
    inliers: int = 0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ProfileError("PBS sigma must be positive")

    @property
    def threshold(self) -> float:
        return self.mu + 3.0 * self.sigma

    @property
    def slope(self) -> float:
        return self.sigma / 2.0


def weighted_sample_without_replacement(weights: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``count`` items drawn without replacement, P proportional to weight.

    Uses exponential keys (Efraimidis-Spirakis): the ``count`` smallest
    ``E_i / w_i`` form a sample with the sequential-draw distribution.
    """
    weights = np.asarray(weights, dtype=float)
    keys = rng.standard_exponential(weights.size)
    with np.errstate(divide="ignore"):
        keys = np.where(weights > 0, keys / weights, np.inf)
    if count >= weights.size:
        return np.argsort(keys, kind="stable")
    part = np.argpartition(keys, count - 1)[:count]
    return part[np.argsort(keys[part], kind="stable")]


def estimate_pbs(
    vol: IntensityVolume,
    rng: np.random.Generator,
    samplings: int = 5,
    sample_frac: float = 0.2,
    inlier_tol: float | None = None,
) -> PbsModel:
    """RANSAC estimate of the dark bath distribution.

    Candidates are the voxels below the overall mean, sampled with probability
    growing linearly with their distance below it.  Each sampling proposes the
    sample mean; the proposal with the most inliers among all candidates wins.
    Without an explicit ``inlier_tol`` the tolerance is three sample STDs.
    """
    data = vol.data.ravel()
    if data.size == 0:
        raise ProfileError("empty volume")
    m = float(data.mean())
    cand = data[data < m]
    if cand.size == 0:
        raise ProfileError("no voxel lies below the mean (constant volume)")
    dist = m - cand
    weights = dist / dist.max()
    count = min(cand.size, math.ceil(sample_frac * cand.size))
    best = None
    for _ in range(samplings):
        picked = cand[weighted_sample_without_replacement(weights, count, rng)]
        centre = float(picked.mean())
        tol = 3.0 * float(picked.std()) if inlier_tol is None else float(inlier_tol)
        inl = np.abs(cand - centre) <= tol
        n = int(inl.sum())
        if n and (best is None or n > best[0]):
            best = (n, inl)
    if best is None:
        raise ProfileError("no sampling produced inliers")
    inliers = cand[best[1]]
    floor = sigma_floor(vol)
    return PbsModel(float(inliers.mean()), max(float(inliers.std()), floor), best[0])


@dataclass(frozen=True)
class DepthTable:
    """Raw per-depth statistics of one class; missing depths hold NaN."""

    mean: np.ndarray
    std: np.ndarray
    count: np.ndarray

    @property
    def valid(self) -> np.ndarray:
        return ~np.isnan(self.mean)


def _class_table(data: np.ndarray, mask: np.ndarray, axis: int) -> DepthTable:
    axes = tuple(a for a in range(3) if a != axis)
    m = mask.astype(float)
    count = m.sum(axis=axes)
    s1 = (data * m).sum(axis=axes)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = s1 / count
        dev = np.where(mask, data - np.expand_dims(mean, axes), 0.0)
        std = np.sqrt((dev**2).sum(axis=axes) / count)
    missing = count < MIN_DEPTH_VOXELS
    mean[missing] = np.nan
    std[missing] = np.nan
    return DepthTable(mean, std, count.astype(np.int64))


def depth_stats(vol: IntensityVolume, confident_lnp: np.ndarray, confident_fat: np.ndarray) -> dict[str, DepthTable]:
    """Population mean/STD per depth slice of each class's confident voxels."""
    lnp = np.asarray(confident_lnp, bool)
    fat = np.asarray(confident_fat, bool)
    if np.any(lnp & fat):
        raise ProfileError("confident regions overlap")
    out = {}
    for name, mask in (("lnp", lnp), ("fat", fat)):
        table = _class_table(vol.data, mask, vol.depth_axis)
        if not table.valid.any():
            raise ProfileError(f"{name}: fewer than {MIN_DEPTH_VOXELS} confident voxels at every depth")
        out[name] = table
    return out


def _spline_fit(x: np.ndarray, y: np.ndarray, span: tuple[float, float] | None = None):
    """Penalised cubic B-spline, one knot per 8 slices, at least 4 breakpoints.

    A small third-difference penalty on the coefficients keeps the curve
    smooth across gaps in the data without biasing quadratic trends.  Knots
    cover ``span`` (default: the data range), so a subset of points still
    yields a curve over the whole span.  The returned callable holds the end
    values flat outside the span.
    """
    lo, hi = (float(x[0]), float(x[-1])) if span is None else span
    if hi == lo:
        level = float(np.mean(y))
        return lambda t: np.full(np.shape(t), level)
    breaks = max(MIN_KNOTS, int(math.ceil((hi - lo) / SLICES_PER_KNOT)) + 1)
    # uniform knots continued past both ends keep every basis function the
    # same shape, so quadratics sit in the null space of the penalty
    h = (hi - lo) / (breaks - 1)
    t = lo + h * np.arange(-3, breaks + 3)
    basis = BSpline.design_matrix(x, t, 3).toarray()
    n_coef = basis.shape[1]
    diff = np.diff(np.eye(n_coef), n=3, axis=0)
    lhs = basis.T @ basis + SPLINE_PENALTY * diff.T @ diff
    coef = np.linalg.lstsq(lhs, basis.T @ y, rcond=None)[0]
    spline = BSpline(t, coef, 3, extrapolate=False)
    return lambda q: spline(np.clip(q, lo, hi))


def _consensus(x, y, inl, tol, span):
    """Refit on a consensus set until it is stable.

    The tolerance starts wide and shrinks to ``tol`` so points the sample fit
    extrapolated badly (typically the ends) can rejoin.
    """
    for mult in LO_TOLERANCE_STEPS + (1.0,) * REFIT_ROUNDS:
        model = _spline_fit(x[inl], y[inl], span)
        nxt = np.abs(model(x) - y) <= mult * tol
        if nxt.sum() < 4:
            break
        if mult == 1.0 and np.array_equal(nxt, inl):
            break
        inl = nxt
    resid = np.abs(_spline_fit(x[inl], y[inl], span)(x) - y)
    return inl, float(np.sum(np.minimum(resid, tol) ** 2))


def _ransac_spline(x, y, scale, rng, iters, band):
    """Fit a spline that ignores gross outliers; residual tolerance is ``band * scale``.

    Each random 60% sample proposes a fit whose consensus set is refined
    before scoring; the largest set wins, ties going to the smaller truncated
    squared residual.
    """
    n = x.size
    tol = band * scale + 1e-9 * (np.abs(y).max() + 1.0)
    if n < 5:
        return _spline_fit(x, y)
    span = (float(x[0]), float(x[-1]))
    size = max(4, int(math.ceil(0.6 * n)))
    best = None
    for _ in range(iters):
        pick = np.sort(rng.choice(n, size=size, replace=False))
        model = _spline_fit(x[pick], y[pick], span)
        inl = np.abs(model(x) - y) <= tol
        if inl.sum() < 4:
            continue
        inl, cost = _consensus(x, y, inl, tol, span)
        key = (-int(inl.sum()), cost)
        if best is None or key < best[0]:
            best = (key, inl)
    if best is None:
        return _spline_fit(x, y)
    inl = best[1]
    return _spline_fit(x[inl], y[inl], span)


@dataclass(frozen=True)
class DepthProfile:
    """Smoothed per-depth mean/STD of parenchyma and fat.

    Arrays are indexed by depth slice.  ``valid_lnp``/``valid_fat`` give the
    inclusive depth range that had data; values outside are held flat.
    """

    mu_lnp: np.ndarray
    sd_lnp: np.ndarray
    mu_fat: np.ndarray
    sd_fat: np.ndarray
    valid_lnp: tuple[int, int]
    valid_fat: tuple[int, int]

    @property
    def depth_count(self) -> int:
        return self.mu_lnp.size

    def refinement_threshold(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-depth bath threshold and sigmoid slope for the refinement cut."""
        return self.mu_lnp - self.sd_lnp, self.sd_lnp / 2.0

    def export_text(self) -> str:
        lines = ["# depth class mean std"]
        for d in range(self.depth_count):
            lines.append(f"{d} LNP {self.mu_lnp[d]:.9g} {self.sd_lnp[d]:.9g}")
            lines.append(f"{d} FAT {self.mu_fat[d]:.9g} {self.sd_fat[d]:.9g}")
        return "\n".join(lines) + "\n"


def _smooth_series(values, errors, depth_count, rng, iters, band):
    valid = ~np.isnan(values)
    x = np.flatnonzero(valid).astype(float)
    if x.size < 4:
        raise ProfileError(f"need at least 4 depths with data, got {x.size}")
    model = _ransac_spline(x, values[valid], errors[valid], rng, iters, band)
    d = np.clip(np.arange(depth_count, dtype=float), x[0], x[-1])
    return np.asarray(model(d), dtype=float), (int(x[0]), int(x[-1]))


def fit_profile(
    tables: dict[str, DepthTable],
    rng: np.random.Generator,
    floor: float,
    amplitude_range: float,
    ransac_iters: int = 25,
    inlier_band: float = 2.0,
) -> DepthProfile:
    """Spline profiles for both classes with RANSAC outlier rejection.

    Residuals are judged in units of each depth's standard error
    (sigma / sqrt(n) for means, sigma / sqrt(2n) for STDs).  Where the fat mean
    does not exceed the parenchyma mean by ``CLAMP_FRACTION`` of the amplitude
    range, both are pushed apart symmetrically around their midpoint.
    """
    out = {}
    for name in ("lnp", "fat"):
        tab = tables[name]
        depth_count = tab.mean.size
        n = np.maximum(tab.count, 1).astype(float)
        sd = np.nan_to_num(tab.std, nan=0.0)
        se_mean = np.maximum(sd / np.sqrt(n), floor / np.sqrt(n))
        se_std = np.maximum(sd / np.sqrt(2 * n), floor / np.sqrt(2 * n))
        mu, rng_mu = _smooth_series(tab.mean, se_mean, depth_count, rng, ransac_iters, inlier_band)
        sig, _ = _smooth_series(tab.std, se_std, depth_count, rng, ransac_iters, inlier_band)
        out[name] = (mu, np.maximum(sig, floor), rng_mu)
    mu_lnp, sd_lnp, valid_lnp = out["lnp"]
    mu_fat, sd_fat, valid_fat = out["fat"]
    eps = CLAMP_FRACTION * amplitude_range if amplitude_range > 0 else floor
    eps = max(eps, 1e-12)
    low = mu_fat < mu_lnp + eps
    if low.any():
        mid = (mu_fat[low] + mu_lnp[low]) / 2.0
        mu_lnp = mu_lnp.copy()
        mu_fat = mu_fat.copy()
        mu_lnp[low] = mid - eps / 2.0
        mu_fat[low] = mid + eps / 2.0
    return DepthProfile(mu_lnp, sd_lnp, mu_fat, sd_fat, valid_lnp, valid_fat)


def profile_from_volume(
    vol: IntensityVolume,
    confident_lnp: np.ndarray,
    confident_fat: np.ndarray,
    rng: np.random.Generator,
    ransac_iters: int = 25,
    inlier_band: float = 2.0,
) -> DepthProfile:
    tables = depth_stats(vol, confident_lnp, confident_fat)
    amp_range = float(vol.data.max() - vol.data.min())
    return fit_profile(tables, rng, sigma_floor(vol), amp_range, ransac_iters, inlier_band)
