"""Nested graph cut over three ordered regions: bath (PBS) outside fat outside parenchyma (LNP).

Two binary layers share one graph.  Layer 1 node ``x1`` says "inside the
LN-mask", layer 2 node ``x2`` says "inside the parenchyma"; SOURCE means 1.
An infinite arc from every layer-2 node to its layer-1 twin makes
``x2 = 1, x1 = 0`` uncuttable, so every cut decodes to a nested labelling
(optional arcs to the twin's neighbours also keep parenchyma off the bath):

    x1 = 0          -> PBS
    x1 = 1, x2 = 0  -> FAT
    x1 = 1, x2 = 1  -> LNP

Data costs are charged per label.  Writing them as
``D_PBS + x1 (D_FAT - D_PBS) + x2 (D_LNP - D_FAT)`` puts the mask/bath
transition cost on layer 1 and the fat/parenchyma transition cost on layer 2;
this differs from charging each layer transition separately only by the
per-voxel constant ``D_PBS``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .maxflow import INF, GraphBuilder, InfeasibleCutError, solve_min_cut
from .volume import (
    FAT,
    LNP,
    PBS,
    IntensityVolume,
    LabelVolume,
    convex_hull_mask,
    fill_holes,
    largest_component,
    neighbor_offsets,
    shifted_pairs,
)

VOTE_STEP_COST = 1.0
VOTE_FLAT_COST = 4.0
# neighbour pairs cut by a unit patch of a lattice plane
PAIRS_PER_UNIT_AREA = {6: 1, 18: 5, 26: 9}


def potts_pair_weight(connectivity: int) -> float:
    """Per-pair Potts weight that makes a region's boundary cost its surface area.

    With 18 neighbours a flat face cuts five pairs per unit area, so each pair
    carries one fifth; the layer weights ``alpha`` then scale area directly.
    """
    return 1.0 / PAIRS_PER_UNIT_AREA[connectivity]


class NgcError(ValueError):
    pass


@dataclass(frozen=True)
class SeedSet:
    lnp_seeds: np.ndarray
    fat_seeds: np.ndarray

    def __post_init__(self):
        if self.lnp_seeds.shape != self.fat_seeds.shape:
            raise NgcError("seed masks differ in shape")
        if np.any(self.lnp_seeds & self.fat_seeds):
            raise NgcError("contradictory seeds: a voxel is seeded as both LNP and FAT")


@dataclass(frozen=True)
class NgcProblem:
    """Inputs of one nested cut.

    ``threshold`` and ``slope`` are scalars or per-depth arrays.  With a
    ``vote_map`` the parenchyma layer uses vote-step costs instead of Potts.
    ``hull_mask`` (if given) is the only place parenchyma may appear.  Without
    one, ``hull_mode="two_pass"`` derives it from a first cut in which
    parenchyma is allowed only on its seeds; ``"none"`` leaves it unconstrained.
    ``strict_nesting`` forbids parenchyma next to bath, so fat always separates
    the two.
    """

    vol: IntensityVolume
    threshold: float | np.ndarray
    slope: float | np.ndarray
    alpha_mask: float = 1.0
    alpha_lnp: float = 1.0
    connectivity: int = 18
    seeds: SeedSet | None = None
    vote_map: np.ndarray | None = None
    ln_mask: np.ndarray | None = None
    hull_mask: np.ndarray | None = None
    hull_mode: str = "two_pass"
    strict_nesting: bool = True

    def __post_init__(self):
        shape = self.vol.dims
        if self.hull_mode not in ("two_pass", "none"):
            raise NgcError("hull_mode must be 'two_pass' or 'none'")
        if np.any(np.asarray(self.slope) <= 0):
            raise NgcError("sigmoid slope must be positive at every depth")
        for name in ("threshold", "slope"):
            val = np.asarray(getattr(self, name), dtype=float)
            if val.ndim not in (0, 1) or (val.ndim == 1 and val.size != shape[self.vol.depth_axis]):
                raise NgcError(f"{name} must be a scalar or one value per depth")
            if not np.all(np.isfinite(val)):
                raise NgcError(f"{name} must be finite")
        if self.alpha_mask < 0 or self.alpha_lnp < 0:
            raise NgcError("smoothness weights must be non-negative")
        for name in ("vote_map", "ln_mask", "hull_mask"):
            arr = getattr(self, name)
            if arr is not None and arr.shape != shape:
                raise NgcError(f"{name} shape {arr.shape} differs from volume {shape}")
        if self.seeds is not None and self.seeds.lnp_seeds.shape != shape:
            raise NgcError("seed shape differs from volume")
        if self.vote_map is not None and self.ln_mask is None:
            raise NgcError("a vote map needs the LN-mask it was counted over")

    def _per_depth(self, value) -> np.ndarray:
        value = np.asarray(value, dtype=float)
        if value.ndim == 0:
            return np.full(self.vol.dims, float(value))
        shape = [1, 1, 1]
        shape[self.vol.depth_axis] = value.size
        return np.broadcast_to(value.reshape(shape), self.vol.dims)


def data_costs(prob: NgcProblem) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-voxel label costs ``(D_PBS, D_FAT, D_LNP)``.

    PBS is cheap below the threshold, FAT above it, and LNP takes whichever is
    cheaper, so parenchyma may be dark or bright.
    """
    z = (prob.vol.data - prob._per_depth(prob.threshold)) / prob._per_depth(prob.slope)
    d_pbs = expit(z)
    d_fat = expit(-z)
    return d_pbs, d_fat, np.minimum(d_pbs, d_fat)


def vote_cost(t_in, t_out):
    """Cost of a parenchyma voxel with vote ``t_in`` next to a non-parenchyma voxel with ``t_out``."""
    t_in = np.asarray(t_in)
    t_out = np.asarray(t_out)
    return np.where(t_out > t_in, VOTE_STEP_COST, np.where(t_out == t_in, VOTE_FLAT_COST, INF))


def pair_votes(vote_map: np.ndarray, ln_mask: np.ndarray, a, b):
    """Vote counts of the pairs ``(a, b)`` with the out-of-mask rule applied.

    A voxel outside the mask next to one inside counts one more vote than its
    partner; pairs with both voxels outside count as equal votes.
    """
    ta = vote_map[a].astype(np.int64)
    tb = vote_map[b].astype(np.int64)
    ia = ln_mask[a]
    ib = ln_mask[b]
    ta = np.where(ia, ta, np.where(ib, tb + 1, 0))
    tb = np.where(ib, tb, np.where(ia, ta + 1, 0))
    return ta, tb


def _build(prob: NgcProblem, allowed: np.ndarray | None):
    shape = prob.vol.dims
    n = int(np.prod(shape))
    node = np.arange(n, dtype=np.int64).reshape(shape)
    gb = GraphBuilder(2 * n)
    d_pbs, d_fat, d_lnp = data_costs(prob)
    layer1 = node.ravel()
    layer2 = layer1 + n
    gb.add_unary(layer1, cost_source=(d_fat - d_pbs).ravel())
    lnp_cost = (d_lnp - d_fat).ravel()
    if allowed is not None:
        lnp_cost = np.where(allowed.ravel(), lnp_cost, INF)
    gb.add_unary(layer2, cost_source=lnp_cost)
    # containment: x2 = 1 with x1 = 0 would cut an infinite arc
    gb.add_edges(layer2, layer1, np.full(n, INF), np.zeros(n))
    if prob.seeds is not None:
        lnp_seed = np.flatnonzero(prob.seeds.lnp_seeds)
        fat_seed = np.flatnonzero(prob.seeds.fat_seeds)
        gb.add_unary(lnp_seed, cost_sink=INF)
        gb.add_unary(lnp_seed + n, cost_sink=INF)
        gb.add_unary(fat_seed, cost_sink=INF)
        gb.add_unary(fat_seed + n, cost_source=INF)
    unit = potts_pair_weight(prob.connectivity)
    for off in neighbor_offsets(prob.connectivity):
        a, b = shifted_pairs(shape, off)
        u = node[a].ravel()
        v = node[b].ravel()
        if prob.alpha_mask > 0:
            gb.add_edges(u, v, prob.alpha_mask * unit, prob.alpha_mask * unit)
        if prob.strict_nesting:
            # x2 = 1 next to x1 = 0 would cut an infinite arc
            inf = np.full(u.size, INF)
            gb.add_edges(u + n, v, inf, np.zeros(u.size))
            gb.add_edges(v + n, u, inf, np.zeros(u.size))
        if prob.vote_map is None:
            if prob.alpha_lnp > 0:
                gb.add_edges(u + n, v + n, prob.alpha_lnp * unit, prob.alpha_lnp * unit)
        else:
            ta, tb = pair_votes(prob.vote_map, prob.ln_mask, a, b)
            ta, tb = ta.ravel(), tb.ravel()
            gb.add_edges(u + n, v + n, vote_cost(ta, tb), vote_cost(tb, ta))
    return gb, n, (d_pbs, d_fat, d_lnp)


def decode(side: np.ndarray, shape) -> np.ndarray:
    n = int(np.prod(shape))
    x1 = side[:n].reshape(shape)
    x2 = side[n:].reshape(shape)
    if np.any(x2 & ~x1):
        raise AssertionError("containment violated by the cut")
    labels = np.full(shape, PBS, dtype=np.uint8)
    labels[x1] = FAT
    labels[x2] = LNP
    return labels


def _solve(prob: NgcProblem, allowed: np.ndarray | None) -> np.ndarray:
    gb, _, _ = _build(prob, allowed)
    try:
        cut = solve_min_cut(gb.build())
    except InfeasibleCutError as exc:
        raise NgcError(f"no labelling satisfies the hard constraints: {exc}") from exc
    return decode(cut.side, prob.vol.dims)


def nested_cut(prob: NgcProblem) -> tuple[LabelVolume, np.ndarray | None]:
    """Optimal nested labelling and the parenchyma support it was constrained to.

    With the two-pass hull, the parenchyma label is otherwise free to take any
    voxel (its data cost never exceeds the other two), so the first pass
    allows it only on seeds; the convex hull of that pass's tissue then bounds
    the parenchyma in the second pass.
    """
    if prob.hull_mask is not None:
        hull = np.asarray(prob.hull_mask, dtype=bool)
    elif prob.hull_mode == "none":
        hull = None
    else:
        seeded = np.zeros(prob.vol.dims, dtype=bool)
        if prob.seeds is not None:
            seeded = prob.seeds.lnp_seeds.astype(bool)
        first = _solve(prob, seeded)
        tissue = first != PBS
        hull = convex_hull_mask(tissue) if tissue.any() else seeded
    labels = _solve(prob, hull)
    return LabelVolume(labels, prob.vol.spacing, prob.vol.depth_axis), hull


def ngc_segment(prob: NgcProblem) -> LabelVolume:
    """Globally optimal nested labelling of ``prob`` (see ``nested_cut``).

    Raises ``NgcError`` when seeds, hull and vote constraints admit no labelling.
    """
    return nested_cut(prob)[0]


def refine_with_votes(prob: NgcProblem) -> LabelVolume:
    """Nested cut whose parenchyma boundary follows the fused vote map."""
    if prob.vote_map is None or prob.seeds is None:
        raise NgcError("refinement needs both a vote map and seeds")
    return ngc_segment(prob)


def ngc_energy(prob: NgcProblem, labels: np.ndarray, hull: np.ndarray | None = None) -> float:
    """Energy of a labelling under ``prob``; ``inf`` if it breaks a hard constraint.

    ``hull`` defaults to ``prob.hull_mask``.
    """
    hull = prob.hull_mask if hull is None else hull
    labels = np.asarray(labels)
    d_pbs, d_fat, d_lnp = data_costs(prob)
    x1 = labels != PBS
    x2 = labels == LNP
    if prob.seeds is not None:
        if np.any(prob.seeds.lnp_seeds & ~x2) or np.any(prob.seeds.fat_seeds & (labels != FAT)):
            return float("inf")
    if hull is not None and np.any(x2 & ~hull):
        return float("inf")
    if prob.strict_nesting and touches_bath(labels, prob.connectivity):
        return float("inf")
    total = float(np.where(labels == PBS, d_pbs, np.where(labels == FAT, d_fat, d_lnp)).sum())
    unit = potts_pair_weight(prob.connectivity)
    for off in neighbor_offsets(prob.connectivity):
        a, b = shifted_pairs(labels.shape, off)
        total += prob.alpha_mask * unit * float(np.count_nonzero(x1[a] != x1[b]))
        if prob.vote_map is None:
            total += prob.alpha_lnp * unit * float(np.count_nonzero(x2[a] != x2[b]))
        else:
            ta, tb = pair_votes(prob.vote_map, prob.ln_mask, a, b)
            total += float(np.sum(np.where(x2[a] & ~x2[b], vote_cost(ta, tb), 0.0)))
            total += float(np.sum(np.where(x2[b] & ~x2[a], vote_cost(tb, ta), 0.0)))
    return total


def touches_bath(labels: np.ndarray, connectivity: int = 18) -> bool:
    """True if any parenchyma voxel neighbours a bath voxel."""
    lnp = labels == LNP
    pbs = labels == PBS
    for off in neighbor_offsets(connectivity):
        a, b = shifted_pairs(labels.shape, off)
        if np.any(lnp[a] & pbs[b]) or np.any(pbs[a] & lnp[b]):
            return True
    return False


def extract_ln_mask(labels: LabelVolume | np.ndarray) -> np.ndarray:
    """Tissue (FAT or LNP) voxels: largest 18-connected component with holes filled."""
    arr = labels.labels if isinstance(labels, LabelVolume) else np.asarray(labels)
    tissue = arr != PBS
    if not tissue.any():
        raise NgcError("no tissue voxels: the labelling is all PBS")
    return fill_holes(largest_component(tissue, 18))
