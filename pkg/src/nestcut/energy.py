"""Graph cut with locally adaptive pairwise energies (GC-LAE).

Each neighbouring pair (p, q) is scored by how well p fits the intensity
statistics of a small region behind q and vice versa.  The regions extend away
from the shared edge, so the two regions of a pair never overlap.  SOURCE is
the brighter class (fat), SINK the darker one (parenchyma).
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np
from scipy.special import expit

from .maxflow import GraphBuilder, solve_min_cut
from .volume import IntensityVolume, neighbor_offsets, shifted_pairs

SIGMA_FLOOR_FRACTION = 1e-3


@dataclass(frozen=True)
class NeighborhoodSpec:
    connectivity: int = 6
    region_length: int = 4
    region_width: int = 0
    distance_weighting: bool = False

    def __post_init__(self):
        if self.connectivity not in (6, 18, 26):
            raise ValueError("connectivity must be 6, 18 or 26")
        if self.region_length < 1:
            raise ValueError("region_length must be >= 1")
        if self.region_width < 0:
            raise ValueError("region_width must be >= 0")


@dataclass(frozen=True)
class LocalStats:
    """Directional region statistics.

    ``mean[i]``/``std[i]`` hold, for every voxel v, the statistics of the
    region starting at v and running along ``directions[i]``.
    """

    directions: tuple[tuple[int, int, int], ...]
    mean: np.ndarray
    std: np.ndarray
    sigma_floor: float

    def index(self, direction) -> int:
        return self.directions.index(tuple(int(d) for d in direction))


@dataclass(frozen=True)
class GlobalTermParams:
    """Depth profiles for the optional global term; arrays are indexed by depth."""

    mu_lnp: np.ndarray
    mu_fat: np.ndarray
    alpha: float

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if np.any(self.slope <= 0):
            raise ValueError("fat profile must lie above the parenchyma profile at every depth")

    @property
    def slope(self) -> np.ndarray:
        return (np.asarray(self.mu_fat, float) - np.asarray(self.mu_lnp, float)) / 8.0


def sigma_floor(vol: IntensityVolume) -> float:
    peak = float(vol.data.max()) if vol.data.size else 0.0
    return SIGMA_FLOOR_FRACTION * peak if peak > 0 else 1e-12


def full_directions(connectivity: int) -> tuple[tuple[int, int, int], ...]:
    half = neighbor_offsets(connectivity)
    return tuple(half) + tuple(tuple(-d for d in off) for off in half)


def _region_offsets(direction, spec: NeighborhoodSpec):
    """(offset, weight) pairs of the local region that starts at a voxel and runs along ``direction``."""
    d = np.asarray(direction)
    w = spec.region_width
    perp = [np.asarray(o) for o in product(range(-w, w + 1), repeat=3) if np.dot(o, d) == 0]
    out = []
    for t in range(spec.region_length):
        weight = float(t + 1) if spec.distance_weighting else 1.0
        for o in perp:
            out.append((tuple(int(x) for x in t * d + o), weight))
    return out


def _shift(arr: np.ndarray, offset) -> np.ndarray:
    """out[v] = arr[v + offset], zero where v + offset leaves the grid."""
    out = np.zeros_like(arr)
    src, dst = [], []
    for s, n in zip(offset, arr.shape):
        if abs(s) >= n:
            return out
        src.append(slice(max(0, s), n + min(0, s)))
        dst.append(slice(max(0, -s), n - max(0, s)))
    out[tuple(dst)] = arr[tuple(src)]
    return out


def local_stats(
    vol: IntensityVolume, mask: np.ndarray, spec: NeighborhoodSpec, floor: float | None = None
) -> LocalStats:
    """Weighted mean/STD over the in-mask voxels of each directional region."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("local statistics need a non-empty mask")
    floor = sigma_floor(vol) if floor is None else float(floor)
    img = vol.data
    member = mask.astype(float)
    masked_img = img * member
    directions = full_directions(spec.connectivity)
    means = np.empty((len(directions),) + img.shape)
    stds = np.empty_like(means)
    for i, direction in enumerate(directions):
        offsets = _region_offsets(direction, spec)
        s0 = np.zeros(img.shape)
        s1 = np.zeros(img.shape)
        for off, weight in offsets:
            s0 += weight * _shift(member, off)
            s1 += weight * _shift(masked_img, off)
        empty = s0 <= 0
        mu = np.where(empty, img, s1 / np.where(empty, 1.0, s0))
        s2 = np.zeros(img.shape)
        for off, weight in offsets:
            s2 += weight * _shift(member, off) * (_shift(img, off) - mu) ** 2
        var = np.where(empty, 0.0, s2 / np.where(empty, 1.0, s0))
        means[i] = mu
        stds[i] = np.maximum(np.sqrt(np.maximum(var, 0.0)), floor)
    return LocalStats(directions, means, stds, floor)


def lae_pair_costs(i_p, i_q, mu_p, sd_p, mu_q, sd_q, k):
    """Locally adaptive costs ``(C_SS, C_ST, C_TS, C_TT)`` of a pair, first index = label of p.

    All arguments broadcast, ``k`` included.
    """
    i_p, i_q, mu_p, sd_p, mu_q, sd_q = (
        np.asarray(x, dtype=float) for x in (i_p, i_q, mu_p, sd_p, mu_q, sd_q)
    )
    k = np.asarray(k, dtype=float)
    if np.any(k <= 0):
        raise ValueError("k must be positive")
    for x in (i_p, i_q, mu_p, sd_p, mu_q, sd_q, k):
        if not np.all(np.isfinite(x)):
            raise ValueError("pair costs need finite inputs")
    vq = 2.0 * sd_q**2
    vp = 2.0 * sd_p**2
    same = (i_p - mu_q) ** 2 / vq + (i_q - mu_p) ** 2 / vp
    c_st = (i_p - (mu_q + k * sd_q)) ** 2 / vq + (i_q - (mu_p - k * sd_p)) ** 2 / vp
    c_ts = (i_p - (mu_q - k * sd_q)) ** 2 / vq + (i_q - (mu_p + k * sd_p)) ** 2 / vp
    return same, c_st, c_ts, same.copy()


def global_term(intensity, depth, params: GlobalTermParams):
    """Sigmoid terminal weights ``(w_to_sink, w_to_source)``.

    ``w_to_sink`` is paid when the voxel ends up fat (SOURCE side), and
    ``w_to_source`` when it ends up parenchyma.
    """
    intensity = np.asarray(intensity, dtype=float)
    depth = np.asarray(depth, dtype=np.intp)
    mu_l = np.asarray(params.mu_lnp, float)[depth]
    mu_f = np.asarray(params.mu_fat, float)[depth]
    slope = params.slope[depth]
    if np.any(slope <= 0):
        raise ValueError("sigmoid slope must be positive")
    w_to_sink = params.alpha * expit(-(intensity - mu_l) / slope)
    w_to_source = params.alpha * expit((intensity - mu_f) / slope)
    return w_to_sink, w_to_source


def count_pairs(mask: np.ndarray, connectivity: int) -> int:
    mask = np.asarray(mask, dtype=bool)
    total = 0
    for off in neighbor_offsets(connectivity):
        a, b = shifted_pairs(mask.shape, off)
        total += int(np.count_nonzero(mask[a] & mask[b]))
    return total


def default_alpha(mask: np.ndarray, connectivity: int, scale: float = 5.0, mode: str = "per_voxel") -> float:
    """Weight of the global term: ``scale`` times the pair count, per voxel or for the whole graph."""
    pairs = count_pairs(mask, connectivity)
    if mode == "per_voxel":
        return scale * pairs / max(int(np.count_nonzero(mask)), 1)
    if mode == "whole_graph":
        return scale * pairs
    raise ValueError(f"unknown alpha mode {mode!r}")


@dataclass(frozen=True)
class GclaeTerms:
    """All energy terms of one GC-LAE problem, over the in-mask voxels in raster order."""

    voxels: np.ndarray  # (n, 3) coordinates
    pair_p: np.ndarray
    pair_q: np.ndarray
    c_ss: np.ndarray
    c_st: np.ndarray
    c_ts: np.ndarray
    c_tt: np.ndarray
    cost_fat: np.ndarray  # unary, paid when labelled fat (SOURCE)
    cost_lnp: np.ndarray  # unary, paid when labelled parenchyma (SINK)

    def energy(self, fat: np.ndarray) -> float:
        """Energy of a labelling given per node (True = fat)."""
        fat = np.asarray(fat, dtype=bool)
        fp, fq = fat[self.pair_p], fat[self.pair_q]
        table = np.where(fp, np.where(fq, self.c_ss, self.c_st), np.where(fq, self.c_ts, self.c_tt))
        return float(table.sum() + self.cost_fat[fat].sum() + self.cost_lnp[~fat].sum())


def gclae_terms(
    vol: IntensityVolume,
    mask: np.ndarray,
    spec: NeighborhoodSpec,
    k: float,
    global_params: GlobalTermParams | None = None,
    stats: LocalStats | None = None,
) -> GclaeTerms:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("GC-LAE needs a non-empty mask")
    if stats is None:
        stats = local_stats(vol, mask, spec)
    img = vol.data
    node = np.full(mask.shape, -1, dtype=np.int64)
    node[mask] = np.arange(int(mask.sum()))
    ps, qs, costs = [], [], [[], [], [], []]
    for off in neighbor_offsets(spec.connectivity):
        a, b = shifted_pairs(mask.shape, off)
        both = mask[a] & mask[b]
        if not both.any():
            continue
        back = stats.index(tuple(-d for d in off))
        fwd = stats.index(off)
        # p's region runs away from q (along -off), q's region along +off
        mu_p = stats.mean[back][a][both]
        sd_p = stats.std[back][a][both]
        mu_q = stats.mean[fwd][b][both]
        sd_q = stats.std[fwd][b][both]
        table = lae_pair_costs(img[a][both], img[b][both], mu_p, sd_p, mu_q, sd_q, k)
        ps.append(node[a][both])
        qs.append(node[b][both])
        for acc, c in zip(costs, table):
            acc.append(c)
    voxels = np.argwhere(mask)
    n = len(voxels)
    if global_params is not None:
        depth = voxels[:, vol.depth_axis]
        cost_fat, cost_lnp = global_term(img[mask], depth, global_params)
    else:
        cost_fat, cost_lnp = np.zeros(n), np.zeros(n)
    return GclaeTerms(
        voxels=voxels,
        pair_p=_cat(ps, np.int64),
        pair_q=_cat(qs, np.int64),
        c_ss=_cat(costs[0]),
        c_st=_cat(costs[1]),
        c_ts=_cat(costs[2]),
        c_tt=_cat(costs[3]),
        cost_fat=cost_fat,
        cost_lnp=cost_lnp,
    )


def _cat(parts, dtype=float):
    return np.concatenate(parts) if parts else np.zeros(0, dtype=dtype)


def solve_terms(terms: GclaeTerms) -> np.ndarray:
    """Global minimiser of ``terms.energy`` per node (True = fat)."""
    builder = GraphBuilder(len(terms.voxels))
    builder.add_unary(np.arange(len(terms.voxels)), cost_source=terms.cost_fat, cost_sink=terms.cost_lnp)
    builder.add_pairwise(terms.pair_p, terms.pair_q, terms.c_ss, terms.c_st, terms.c_ts, terms.c_tt)
    return solve_min_cut(builder.build()).side


def _bbox(mask: np.ndarray):
    idx = np.argwhere(mask)
    lo, hi = idx.min(axis=0), idx.max(axis=0) + 1
    return tuple(slice(int(l), int(h)) for l, h in zip(lo, hi))


def run_gclae(
    vol: IntensityVolume,
    mask: np.ndarray,
    spec: NeighborhoodSpec,
    k: float,
    global_params: GlobalTermParams | None = None,
    stats: LocalStats | None = None,
) -> np.ndarray:
    """Binary GC-LAE inside ``mask``; returns the fat mask (SOURCE side) at full size.

    Passing precomputed ``stats`` lets a k sweep share one statistics pass;
    they must have been computed on the same volume and mask.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("GC-LAE needs a non-empty mask")
    box = _bbox(mask)
    sub_mask = mask[box]
    sub_vol = IntensityVolume(vol.data[box], vol.spacing, vol.depth_axis)
    if stats is None:
        stats = local_stats(sub_vol, sub_mask, spec, floor=sigma_floor(vol))
    else:
        stats = LocalStats(stats.directions, stats.mean[(slice(None),) + box],
                           stats.std[(slice(None),) + box], stats.sigma_floor)
    sub_params = None
    if global_params is not None:
        start = box[vol.depth_axis].start
        stop = box[vol.depth_axis].stop
        sub_params = GlobalTermParams(
            np.asarray(global_params.mu_lnp)[start:stop],
            np.asarray(global_params.mu_fat)[start:stop],
            global_params.alpha,
        )
    terms = gclae_terms(sub_vol, sub_mask, spec, k, sub_params, stats)
    side = solve_terms(terms)
    out = np.zeros(mask.shape, dtype=bool)
    sub_out = np.zeros(sub_mask.shape, dtype=bool)
    sub_out[sub_mask] = side
    out[box] = sub_out
    return out
