"""Synthetic lymph-node phantoms with ground truth.

A parenchyma ellipsoid wrapped in a fat shell sits in a dark saline bath.
Amplitudes are attenuated by the amount of tissue above each voxel, tilted
laterally, and multiplied by unit-mean Rayleigh speckle.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np
from scipy import ndimage

from .volume import FAT, LNP, PBS, IntensityVolume, LabelVolume

RAYLEIGH_CV = math.sqrt(4.0 / math.pi - 1.0)


class PhantomSpecError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (25.0, 25.0, 25.0)
    lnp_center: tuple[float, float, float] | None = None
    lnp_semi_axes: tuple[float, float, float] = (18.0, 16.0, 14.0)
    fat_thickness: float = 4.0
    a_pbs: float = 5.0
    a_lnp: float = 40.0
    a_fat: float = 80.0
    attenuation_beta: float = 0.0
    lateral_gradient: float = 0.0
    speckle: bool = True
    boundary_blur: float = 0.0
    depth_axis: int = 2
    rng_seed: int = 0

    @property
    def center(self) -> tuple[float, float, float]:
        if self.lnp_center is not None:
            return tuple(float(c) for c in self.lnp_center)
        return tuple((n - 1) / 2.0 for n in self.dims)

    def validate(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise PhantomSpecError("dims: need three positive sizes")
        if min(self.lnp_semi_axes) <= 0:
            raise PhantomSpecError("lnp_semi_axes: must be positive")
        if self.fat_thickness < 0:
            raise PhantomSpecError("fat_thickness: must be non-negative")
        if not 0 < self.a_pbs < self.a_lnp < self.a_fat:
            raise PhantomSpecError("amplitudes: need 0 < a_pbs < a_lnp < a_fat")
        if self.attenuation_beta < 0:
            raise PhantomSpecError("attenuation_beta: must be non-negative")
        if abs(self.lateral_gradient) >= 2:
            raise PhantomSpecError("lateral_gradient: |g| < 2 keeps amplitudes positive")
        if self.depth_axis not in (0, 1, 2):
            raise PhantomSpecError("depth_axis: must be 0, 1 or 2")
        for c, a, n in zip(self.center, self.lnp_semi_axes, self.dims):
            reach = a + self.fat_thickness
            if c - reach < 2 or c + reach > n - 3:
                raise PhantomSpecError("margin: fat shell must keep a 2-voxel bath margin inside the volume")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "PhantomSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise PhantomSpecError(f"unknown phantom keys: {sorted(unknown)}")
        doc = dict(doc)
        for key in ("dims", "spacing", "lnp_center", "lnp_semi_axes"):
            if doc.get(key) is not None:
                doc[key] = tuple(doc[key])
        return cls(**doc)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def ground_truth(spec: PhantomSpec) -> np.ndarray:
    grid = np.indices(spec.dims, dtype=float)
    r2 = sum(((g - c) / a) ** 2 for g, c, a in zip(grid, spec.center, spec.lnp_semi_axes))
    lnp = r2 <= 1.0
    dist_out = ndimage.distance_transform_edt(~lnp)
    fat = (~lnp) & (dist_out <= spec.fat_thickness)
    labels = np.full(spec.dims, PBS, dtype=np.uint8)
    labels[fat] = FAT
    labels[lnp] = LNP
    return labels


def tissue_path(labels: np.ndarray, depth_axis: int) -> np.ndarray:
    """Number of non-bath voxels strictly above each voxel along the depth axis."""
    tissue = (labels != PBS).astype(np.int64)
    return np.cumsum(tissue, axis=depth_axis) - tissue


def lateral_axis(depth_axis: int) -> int:
    return next(a for a in range(3) if a != depth_axis)


def generate(spec: PhantomSpec) -> tuple[IntensityVolume, LabelVolume]:
    spec.validate()
    labels = ground_truth(spec)
    base = np.array([spec.a_pbs, spec.a_fat, spec.a_lnp])[labels]
    if spec.boundary_blur > 0:
        # blur only the parenchyma/fat interface; the tissue/bath edge stays sharp
        tissue_level = np.where(labels == LNP, spec.a_lnp, spec.a_fat)
        blurred = ndimage.gaussian_filter(tissue_level, spec.boundary_blur, mode="nearest")
        base = np.where(labels == PBS, spec.a_pbs, blurred)
    amp = base * np.exp(-spec.attenuation_beta * tissue_path(labels, spec.depth_axis))
    lat = lateral_axis(spec.depth_axis)
    n_lat = spec.dims[lat]
    shape = [1, 1, 1]
    shape[lat] = n_lat
    amp = amp * (1.0 + spec.lateral_gradient * (np.arange(n_lat) / n_lat - 0.5)).reshape(shape)
    if spec.speckle:
        rng = np.random.default_rng(spec.rng_seed)
        amp = amp * rng.rayleigh(scale=math.sqrt(2.0 / math.pi), size=spec.dims)
    amp = np.clip(amp, 0.0, None)
    return (
        IntensityVolume(amp, spec.spacing, spec.depth_axis),
        LabelVolume(labels, spec.spacing, spec.depth_axis),
    )


def halving_beta(spec: PhantomSpec) -> float:
    """Attenuation rate at which the fat amplitude halves across the full node height."""
    height = 2.0 * (spec.lnp_semi_axes[spec.depth_axis] + spec.fat_thickness)
    return math.log(2.0) / height


SCENARIOS = (
    "clear_consistent",
    "nonhomogeneous_attenuation",
    "blurry_low_contrast",
    "blurry_high_contrast",
)


def scenario_suite(seed: int, dims=(64, 64, 64), per_class: int = 1) -> list[tuple[str, PhantomSpec]]:
    """Randomised specs, ``per_class`` for each of the four boundary/attenuation scenario classes."""
    rng = np.random.default_rng(seed)
    suite = []
    for rep in range(per_class):
        for name in SCENARIOS:
            semi = tuple(float(rng.uniform(0.2, 0.28) * n) for n in dims)
            thickness = float(rng.uniform(3.5, 5.0))
            jitter = rng.uniform(-2.0, 2.0, size=3)
            center = tuple(float((n - 1) / 2.0 + j) for n, j in zip(dims, jitter))
            spec = PhantomSpec(
                dims=tuple(dims),
                lnp_center=center,
                lnp_semi_axes=semi,
                fat_thickness=thickness,
                rng_seed=int(rng.integers(2**31)),
            )
            beta_max = halving_beta(spec)
            if name == "clear_consistent":
                spec = replace(spec, a_fat=float(rng.uniform(80, 90)))
            elif name == "nonhomogeneous_attenuation":
                spec = replace(
                    spec,
                    a_fat=float(rng.uniform(80, 90)),
                    attenuation_beta=float(rng.uniform(0.5, 1.0) * beta_max),
                    lateral_gradient=float(rng.choice([-1, 1]) * rng.uniform(0.4, 0.6)),
                )
            elif name == "blurry_low_contrast":
                spec = replace(
                    spec,
                    a_fat=float(rng.uniform(65, 75)),
                    boundary_blur=2.0,
                    attenuation_beta=float(rng.uniform(0.0, 0.5) * beta_max),
                )
            else:
                spec = replace(
                    spec,
                    a_fat=float(rng.uniform(100, 120)),
                    boundary_blur=2.0,
                    attenuation_beta=float(rng.uniform(0.0, 0.5) * beta_max),
                    lateral_gradient=float(rng.choice([-1, 1]) * rng.uniform(0.2, 0.6)),
                )
            spec.validate()
            suite.append((f"{name}_{rep}" if per_class > 1 else name, spec))
    return suite
