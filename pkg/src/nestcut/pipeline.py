"""Fully automatic three-region segmentation.

Stages, in order: downsample, bath estimate, initial nested cut (LN-mask),
local-only GC-LAE sweep over k, automatic k selection, fusion and depth
profiles, GC-LAE with the global term on the selected k, fusion and profile
update, seeds and vote map, vote-guided nested cut, nearest-neighbour upsample.
"""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .energy import GlobalTermParams, NeighborhoodSpec, default_alpha, local_stats, run_gclae, sigma_floor
from .ngc import NgcProblem, SeedSet, extract_ln_mask, ngc_segment, refine_with_votes
from .profiles import DepthProfile, PbsModel, estimate_pbs, profile_from_volume
from .volume import (
    IntensityVolume,
    LabelVolume,
    auto_downsample_factor,
    connected_components,
    convex_hull_mask,
    distance_transform,
    downsample,
    morphological_open,
    outer_rim,
    upsample_labels,
)

log = logging.getLogger(__name__)

DEFAULT_K_GRID = (1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0)


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    """A pipeline failure tagged with the stage that raised it."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class PipelineConfig:
    k_grid: tuple[float, ...] = DEFAULT_K_GRID
    max_selected_k: int = 3
    fat_ratio_max: float = 0.32
    inner_mask_frac: float = 0.70
    neighborhood: NeighborhoodSpec = field(default_factory=NeighborhoodSpec)
    alpha_scale: float = 5.0
    alpha_mode: str = "per_voxel"
    rng_seed: int = 0
    downsample_limit: int = 100
    downsample_factor: int | None = None
    opening_radius: int = 2
    pbs_samplings: int = 5
    pbs_sample_frac: float = 0.2
    ngc_alpha_mask: float = 1.0
    ngc_alpha_lnp: float = 1.0
    ngc_connectivity: int = 18
    profile_ransac_iters: int = 25
    profile_inlier_band: float = 2.0
    workers: int = 1

    def __post_init__(self):
        grid = tuple(float(k) for k in self.k_grid)
        object.__setattr__(self, "k_grid", grid)
        if not grid:
            raise ConfigError("k_grid must not be empty")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ConfigError("k_grid must be strictly ascending")
        if any(k <= 0 for k in grid):
            raise ConfigError("k values must be positive")
        if not 0 < self.inner_mask_frac < 1:
            raise ConfigError("inner_mask_frac must lie in (0, 1)")
        if self.max_selected_k < 1:
            raise ConfigError("max_selected_k must be >= 1")
        if self.alpha_mode not in ("per_voxel", "whole_graph"):
            raise ConfigError("alpha_mode must be 'per_voxel' or 'whole_graph'")
        if self.downsample_factor is not None and self.downsample_factor < 1:
            raise ConfigError("downsample_factor must be >= 1")
        if self.opening_radius < 1:
            raise ConfigError("opening_radius must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.ngc_connectivity not in (6, 18, 26):
            raise ConfigError("ngc_connectivity must be 6, 18 or 26")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["k_grid"] = list(self.k_grid)
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        doc = dict(doc)
        if "neighborhood" in doc:
            nb = doc["neighborhood"]
            nb_known = {f.name for f in fields(NeighborhoodSpec)}
            if not isinstance(nb, dict):
                raise ConfigError("neighborhood must be an object")
            bad = sorted(set(nb) - nb_known)
            if bad:
                raise ConfigError(f"unknown neighborhood keys: {bad}")
            try:
                doc["neighborhood"] = NeighborhoodSpec(**nb)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"neighborhood: {exc}") from exc
        if "k_grid" in doc:
            doc["k_grid"] = tuple(doc["k_grid"])
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, text: str) -> "PipelineConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)


@dataclass(frozen=True)
class Fusion:
    confident_lnp: np.ndarray
    confident_fat: np.ndarray
    votes: np.ndarray


@dataclass
class PipelineTrace:
    """Everything the run produced, at working resolution unless noted."""

    downsample_factor: int | None = None
    pbs: PbsModel | None = None
    ngc_initial: np.ndarray | None = None
    ln_mask: np.ndarray | None = None
    hull_mask: np.ndarray | None = None
    round1_masks: dict[float, np.ndarray] | None = None
    fat_ratios: dict[float, float] | None = None
    selected_k: list[float] | None = None
    round1_fusion: Fusion | None = None
    round1_profile: DepthProfile | None = None
    round2_masks: dict[float, np.ndarray] | None = None
    round2_fusion: Fusion | None = None
    round2_profile: DepthProfile | None = None
    seeds: SeedSet | None = None
    seed_fallback: bool = False
    refined: np.ndarray | None = None
    labels: np.ndarray | None = None  # original resolution
    timings: dict[str, float] = field(default_factory=dict)

    def stages(self) -> list[str]:
        return list(self.timings)


def select_k(per_k_fat_masks: dict[float, np.ndarray], ln_mask: np.ndarray, cfg: PipelineConfig):
    """Pick up to ``cfg.max_selected_k`` values of k by the inner-mask fat ratio.

    Returns ``(selected, ratios)``; ``selected`` is ascending.  Qualifying k
    have ratio below ``cfg.fat_ratio_max``; the largest ones are kept.  If none
    qualifies the single k with the smallest ratio is returned.
    """
    ln_mask = np.asarray(ln_mask, dtype=bool)
    if not ln_mask.any():
        raise ValueError("empty LN-mask")
    dist = distance_transform(ln_mask)
    inner = dist > cfg.inner_mask_frac * dist.max()
    size = int(inner.sum())
    if size == 0:
        raise ValueError("inner mask is empty")
    ratios = {float(k): float(np.count_nonzero(m & inner)) / size for k, m in sorted(per_k_fat_masks.items())}
    qualifying = [k for k, r in ratios.items() if r < cfg.fat_ratio_max]
    if qualifying:
        chosen = qualifying[-cfg.max_selected_k :]
    else:
        chosen = [min(ratios, key=lambda k: (ratios[k], k))]
    return sorted(chosen), ratios


def fuse_confident(fat_masks: list[np.ndarray], ln_mask: np.ndarray) -> Fusion:
    """Intersections of each class across runs plus the per-voxel fat vote count."""
    if not fat_masks:
        raise ValueError("nothing to fuse")
    ln_mask = np.asarray(ln_mask, dtype=bool)
    stack = np.stack([np.asarray(m, dtype=bool) & ln_mask for m in fat_masks])
    votes = stack.sum(axis=0).astype(np.uint8)
    confident_fat = stack.all(axis=0)
    confident_lnp = ln_mask & ~stack.any(axis=0)
    return Fusion(confident_lnp, confident_fat, votes)


def build_seeds(confident_lnp, confident_fat, ln_mask, radius: int = 2) -> tuple[SeedSet, bool]:
    """Seeds for the refinement cut; the flag reports the un-opened fallback.

    Parenchyma seeds are the opened confident parenchyma.  Fat seeds keep only
    confident-fat components that reach the outer rim of the LN-mask, so fat
    islands enclosed by parenchyma are dropped.
    """
    confident_lnp = np.asarray(confident_lnp, dtype=bool)
    confident_fat = np.asarray(confident_fat, dtype=bool)
    lnp_seeds = morphological_open(confident_lnp, radius)
    fallback = False
    if not lnp_seeds.any():
        log.warning("opening removed every parenchyma seed; using the un-opened confident region")
        lnp_seeds = confident_lnp.copy()
        fallback = True
    comps, sizes = connected_components(confident_fat, 26)
    touching = np.unique(comps[outer_rim(ln_mask) & (comps > 0)])
    fat_seeds = np.isin(comps, touching) & confident_fat
    fat_seeds &= ~lnp_seeds
    return SeedSet(lnp_seeds, fat_seeds), fallback


def _sweep(vol, mask, spec, ks, global_params, stats, workers) -> dict[float, np.ndarray]:
    def one(k):
        return run_gclae(vol, mask, spec, k, global_params, stats)

    if workers > 1 and len(ks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, ks))
    else:
        results = [one(k) for k in ks]
    return dict(zip(ks, results))


class _Stages:
    def __init__(self, trace: PipelineTrace):
        self.trace = trace

    def run(self, name, fn, *args, **kwargs):
        start = time.perf_counter()
        try:
            out = fn(*args, **kwargs)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, exc) from exc
        self.trace.timings[name] = time.perf_counter() - start
        log.info("stage %s done in %.2f s", name, self.trace.timings[name])
        return out


def segment(vol: IntensityVolume, cfg: PipelineConfig | None = None) -> tuple[LabelVolume, PipelineTrace]:
    cfg = cfg or PipelineConfig()
    trace = PipelineTrace()
    st = _Stages(trace)
    rng = np.random.default_rng(cfg.rng_seed)

    def prepare():
        factor = cfg.downsample_factor or auto_downsample_factor(vol.dims, cfg.downsample_limit)
        return factor, downsample(vol, factor)

    factor, work = st.run("downsample", prepare)
    trace.downsample_factor = factor

    trace.pbs = st.run(
        "pbs_estimate", estimate_pbs, work, rng, samplings=cfg.pbs_samplings, sample_frac=cfg.pbs_sample_frac
    )

    def initial_cut():
        prob = NgcProblem(
            work,
            trace.pbs.threshold,
            trace.pbs.slope,
            cfg.ngc_alpha_mask,
            cfg.ngc_alpha_lnp,
            cfg.ngc_connectivity,
        )
        return ngc_segment(prob).labels

    trace.ngc_initial = st.run("ngc_initial", initial_cut)
    trace.ln_mask = st.run("ln_mask", extract_ln_mask, trace.ngc_initial)
    trace.hull_mask = st.run("hull", convex_hull_mask, trace.ln_mask)
    ln_mask = trace.ln_mask
    spec = cfg.neighborhood

    stats = st.run("local_stats", local_stats, work, ln_mask, spec, sigma_floor(work))
    trace.round1_masks = st.run(
        "gclae_round1", _sweep, work, ln_mask, spec, list(cfg.k_grid), None, stats, cfg.workers
    )
    trace.selected_k, trace.fat_ratios = st.run("select_k", select_k, trace.round1_masks, ln_mask, cfg)
    trace.round1_fusion = st.run(
        "fuse_round1", fuse_confident, [trace.round1_masks[k] for k in trace.selected_k], ln_mask
    )
    trace.round1_profile = st.run(
        "profiles_round1",
        profile_from_volume,
        work,
        trace.round1_fusion.confident_lnp,
        trace.round1_fusion.confident_fat,
        rng,
        cfg.profile_ransac_iters,
        cfg.profile_inlier_band,
    )

    def global_params():
        prof = trace.round1_profile
        alpha = default_alpha(ln_mask, spec.connectivity, cfg.alpha_scale, cfg.alpha_mode)
        return GlobalTermParams(prof.mu_lnp, prof.mu_fat, alpha)

    params = st.run("global_term", global_params)
    trace.round2_masks = st.run(
        "gclae_round2", _sweep, work, ln_mask, spec, trace.selected_k, params, stats, cfg.workers
    )
    trace.round2_fusion = st.run(
        "fuse_round2", fuse_confident, [trace.round2_masks[k] for k in trace.selected_k], ln_mask
    )
    trace.round2_profile = st.run(
        "profiles_round2",
        profile_from_volume,
        work,
        trace.round2_fusion.confident_lnp,
        trace.round2_fusion.confident_fat,
        rng,
        cfg.profile_ransac_iters,
        cfg.profile_inlier_band,
    )
    trace.seeds, trace.seed_fallback = st.run(
        "seeds",
        build_seeds,
        trace.round2_fusion.confident_lnp,
        trace.round2_fusion.confident_fat,
        ln_mask,
        cfg.opening_radius,
    )

    def refine():
        threshold, slope = trace.round2_profile.refinement_threshold()
        prob = NgcProblem(
            work,
            threshold,
            slope,
            cfg.ngc_alpha_mask,
            cfg.ngc_alpha_lnp,
            cfg.ngc_connectivity,
            seeds=trace.seeds,
            vote_map=trace.round2_fusion.votes,
            ln_mask=ln_mask,
            hull_mask=trace.hull_mask,
        )
        return refine_with_votes(prob).labels

    trace.refined = st.run("ngc_refine", refine)
    trace.labels = st.run("upsample", upsample_labels, trace.refined, factor, vol.dims)
    return LabelVolume(trace.labels, vol.spacing, vol.depth_axis), trace


def with_seed(cfg: PipelineConfig, seed: int) -> PipelineConfig:
    return replace(cfg, rng_seed=int(seed))
