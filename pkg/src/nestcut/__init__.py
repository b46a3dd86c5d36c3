"""Nested three-region graph-cut segmentation of 3D ultrasound envelope volumes."""
from .energy import GlobalTermParams, NeighborhoodSpec, local_stats, lae_pair_costs, run_gclae
from .maxflow import FlowGraph, GraphBuilder, solve_min_cut
from .ngc import NgcProblem, SeedSet, extract_ln_mask, ngc_segment, refine_with_votes
from .phantom import PhantomSpec, generate, scenario_suite
from .pipeline import PipelineConfig, PipelineTrace, StageError, segment
from .profiles import DepthProfile, PbsModel, depth_stats, estimate_pbs, fit_profile
from .volume import FAT, LNP, PBS, IntensityVolume, LabelVolume, dice, read_labels, read_volume

__all__ = [
    "FAT",
    "LNP",
    "PBS",
    "DepthProfile",
    "FlowGraph",
    "GlobalTermParams",
    "GraphBuilder",
    "IntensityVolume",
    "LabelVolume",
    "NeighborhoodSpec",
    "NgcProblem",
    "PbsModel",
    "PhantomSpec",
    "PipelineConfig",
    "PipelineTrace",
    "SeedSet",
    "StageError",
    "depth_stats",
    "dice",
    "estimate_pbs",
    "extract_ln_mask",
    "fit_profile",
    "generate",
    "lae_pair_costs",
    "local_stats",
    "ngc_segment",
    "read_labels",
    "read_volume",
    "refine_with_votes",
    "run_gclae",
    "scenario_suite",
    "segment",
    "solve_min_cut",
]
