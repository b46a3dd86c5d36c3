import json
import math

import numpy as np
import pytest
from scipy.cluster.vq import kmeans2

from nestcut.phantom import (
    RAYLEIGH_CV,
    SCENARIOS,
    PhantomSpec,
    PhantomSpecError,
    generate,
    halving_beta,
    scenario_suite,
    tissue_path,
)
from nestcut.volume import FAT, LNP, PBS


def plain(**kw):
    base = dict(dims=(32, 32, 32), lnp_semi_axes=(9.0, 8.0, 7.0), fat_thickness=3.0, speckle=False)
    base.update(kw)
    return PhantomSpec(**base)


def test_piecewise_constant_without_modifiers():
    vol, truth = generate(plain())
    for label, amp in ((PBS, 5.0), (FAT, 80.0), (LNP, 40.0)):
        assert np.all(vol.data[truth.labels == label] == amp)


def test_three_means_recovers_truth():
    vol, truth = generate(plain())
    centres, assign = kmeans2(vol.data.reshape(-1, 1), np.array([[1.0], [50.0], [100.0]]), minit="matrix")
    order = np.argsort(centres.ravel())
    mapping = np.empty(3, np.uint8)
    mapping[order] = [PBS, LNP, FAT]
    np.testing.assert_array_equal(mapping[assign].reshape(truth.dims), truth.labels)


def test_truth_is_nested():
    _, truth = generate(plain())
    lab = truth.labels
    lnp, pbs = lab == LNP, lab == PBS
    for axis in range(3):
        assert not np.any(np.roll(lnp, 1, axis) & pbs)
        assert not np.any(np.roll(lnp, -1, axis) & pbs)


def test_attenuation_decreases_fat_with_depth():
    spec = plain(attenuation_beta=0.03)
    vol, truth = generate(spec)
    fat = truth.labels == FAT
    depths = [d for d in range(32) if fat[:, :, d].any()]
    means = [vol.data[:, :, d][fat[:, :, d]].mean() for d in depths]
    assert all(b < a for a, b in zip(means, means[1:]))


def test_tissue_path_counts_tissue_above():
    lab = np.array([PBS, FAT, LNP, PBS, FAT], np.uint8).reshape(1, 1, 5)
    assert tissue_path(lab, 2).ravel().tolist() == [0, 0, 1, 2, 2]


def test_lateral_gradient_tilts_amplitude():
    vol, truth = generate(plain(lateral_gradient=0.3))
    bath = vol.data[:, :, 0]
    np.testing.assert_allclose(bath[0, :] / bath[-1, :], (1 - 0.15) / (1 + 0.3 * (31 / 32 - 0.5)))


def test_speckle_cv_matches_rayleigh():
    vol, truth = generate(PhantomSpec(rng_seed=3))
    for label in (PBS, FAT, LNP):
        vals = vol.data[truth.labels == label]
        assert vals.size >= 10_000
        cv = vals.std() / vals.mean()
        assert abs(cv - RAYLEIGH_CV) <= 0.1 * RAYLEIGH_CV
    assert RAYLEIGH_CV == pytest.approx(0.5227, abs=1e-4)


def test_blur_softens_only_the_interface():
    vol, truth = generate(plain(boundary_blur=2.0))
    assert np.all(vol.data[truth.labels == PBS] == 5.0)
    tissue = vol.data[truth.labels != PBS]
    assert tissue.min() > 40.0 - 1e-9 and tissue.max() < 80.0 + 1e-9
    assert np.any((tissue > 41) & (tissue < 79))


def test_halving_beta():
    spec = plain()
    beta = halving_beta(spec)
    assert math.exp(-beta * 2 * (7.0 + 3.0)) == pytest.approx(0.5)


def test_invalid_specs():
    for kw in (
        dict(lnp_semi_axes=(14.0, 8.0, 7.0)),
        dict(a_lnp=90.0),
        dict(attenuation_beta=-1.0),
        dict(fat_thickness=-1.0),
    ):
        with pytest.raises(PhantomSpecError):
            generate(plain(**kw))
    with pytest.raises(PhantomSpecError):
        PhantomSpec.from_dict({"size": 3})


def test_spec_json_round_trip():
    spec = plain(lnp_center=(15.0, 16.0, 15.5), rng_seed=9)
    assert PhantomSpec.from_dict(json.loads(spec.to_json())) == spec


def test_scenario_suite_contract():
    suite = scenario_suite(4)
    assert [name for name, _ in suite] == list(SCENARIOS)
    for _, spec in suite:
        spec.validate()
    assert scenario_suite(4) == suite
    assert scenario_suite(5) != suite
    assert len(scenario_suite(1, per_class=2)) == 8
    specs = dict(suite)
    assert specs["nonhomogeneous_attenuation"].attenuation_beta <= halving_beta(specs["nonhomogeneous_attenuation"])
    assert abs(specs["nonhomogeneous_attenuation"].lateral_gradient) <= 0.6
    assert specs["blurry_low_contrast"].boundary_blur == 2.0


def test_generation_is_deterministic():
    a, _ = generate(PhantomSpec(dims=(28, 28, 28), lnp_semi_axes=(6.0, 6.0, 6.0), rng_seed=1))
    b, _ = generate(PhantomSpec(dims=(28, 28, 28), lnp_semi_axes=(6.0, 6.0, 6.0), rng_seed=1))
    np.testing.assert_array_equal(a.data, b.data)
