import json

import numpy as np
import pytest

from nvorient.errors import ConfigError, SamplingError
from nvorient.experiments import (
    SweepConfig,
    TrialRecord,
    bulk_bias_pool,
    cell_statistics,
    degeneracy_demo,
    nanodiamond_bias_pool,
    run_bias_scaling_sweep,
    run_noise_sweep,
    run_saturation_study,
    sample_subsets,
    subset_is_valid,
    trial_seed,
)
from nvorient.geometry import is_noncoplanar, reflect_across_plane
from nvorient.io import dumps_json


def small(**kw):
    kw.setdefault("noise_levels", (0.3,))
    kw.setdefault("field_counts", (4,))
    kw.setdefault("trials_per_cell", 4)
    kw.setdefault("rng_seed", 17)
    return SweepConfig.bulk(**kw)


def test_pools():
    bulk = bulk_bias_pool()
    assert bulk.shape == (28, 3)
    assert np.all(np.abs(np.linalg.norm(bulk, axis=1) - 1) <= 0.05 + 1e-12)
    nano = nanodiamond_bias_pool()
    mags = np.linalg.norm(nano, axis=1)
    assert nano.shape == (34, 3) and mags.min() >= 5 - 1e-12 and mags.max() <= 10 + 1e-12


def test_sample_subsets_examples():
    pool = bulk_bias_pool()
    subsets, rejections = sample_subsets(pool, 4, 50, seed=1)
    assert len(subsets) == 50 and rejections >= 0
    for s in subsets:
        assert len(set(s.tolist())) == 4
        assert is_noncoplanar(*pool[s])
    full, _ = sample_subsets(pool, 28, 3, seed=1)
    assert all(s.tolist() == list(range(28)) for s in full)


def test_sample_subsets_errors():
    flat = np.array([[1, 0, 0], [0, 1, 0], [-1, 0, 0], [0, -1, 0], [1, 1, 0.0]])
    with pytest.raises(SamplingError):
        sample_subsets(flat, 4, 5, seed=0)
    with pytest.raises(SamplingError):
        sample_subsets(flat, 6, 1, seed=0)


def test_sample_subsets_reports_rejections():
    # half the pool in one plane: many 4-subsets are coplanar
    rng = np.random.default_rng(0)
    flat = np.c_[rng.normal(size=(10, 2)), np.zeros(10)]
    pool = np.vstack([flat, rng.normal(size=(3, 3))])
    subsets, rejections = sample_subsets(pool, 4, 30, seed=2)
    assert rejections > 0
    assert all(subset_is_valid(pool[s]) for s in subsets)


def test_trial_seed_depends_on_cell_values():
    a = trial_seed(1, 0.3, 4, 1.0, 0).generate_state(2)
    assert np.array_equal(a, trial_seed(1, 0.3, 4, 1.0, 0).generate_state(2))
    assert not np.array_equal(a, trial_seed(1, 0.3, 4, 1.0, 1).generate_state(2))
    assert not np.array_equal(a, trial_seed(1, 0.4, 4, 1.0, 0).generate_state(2))


def test_config_validation():
    with pytest.raises(ConfigError):
        SweepConfig(noise_levels=())
    with pytest.raises(ConfigError):
        SweepConfig(trials_per_cell=1)
    with pytest.raises(ConfigError):
        SweepConfig(bias_scaling=(0.0,))
    with pytest.raises(ConfigError):
        SweepConfig(field_counts=(29,))
    with pytest.raises(ConfigError):
        SweepConfig(scenario="lab")
    cfg = SweepConfig.nanodiamond(trials_per_cell=3)
    assert SweepConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_preset_grids():
    assert len(SweepConfig.bulk().noise_levels) == 5
    assert SweepConfig.nanodiamond().noise_levels == (1.0, 2.0, 3.0, 4.0, 5.0)


def test_noise_sweep_is_deterministic():
    a = dumps_json(run_noise_sweep(small()).to_dict())
    b = dumps_json(run_noise_sweep(small()).to_dict())
    assert a == b


def test_noise_sweep_parallel_matches_serial():
    cfg = small(noise_levels=(0.1, 0.3))
    assert dumps_json(run_noise_sweep(cfg, threads=2).to_dict()) == dumps_json(run_noise_sweep(cfg).to_dict())


def test_cells_cover_product():
    cfg = small(noise_levels=(0.1, 0.2), field_counts=(4, 5), trials_per_cell=2)
    res = run_noise_sweep(cfg)
    assert {(c.noise, c.count) for c in res.cells} == {(n, k) for n in (0.1, 0.2) for k in (4, 5)}
    for c in res.cells:
        for t in c.trials:
            assert len(t.subset) == c.count
            assert subset_is_valid(np.array(cfg.bias_pool)[list(t.subset)])


def test_stats_recompute_from_persisted_records():
    res = run_noise_sweep(small(trials_per_cell=6))
    data = json.loads(dumps_json(res.to_dict()))
    for cell, stored in zip(res.cells, data["cells"]):
        trials = [TrialRecord.from_dict(t) for t in stored["trials"]]
        again = json.loads(dumps_json(cell_statistics(trials, res.config.truth_axes)))
        assert again == stored["stats"]


def test_scaling_one_equals_noise_cell():
    cfg = small(bias_scaling=(1.0, 2.0))
    noise = run_noise_sweep(cfg).cell(noise=0.3, count=4)
    scaled = run_bias_scaling_sweep(cfg).cell(noise=0.3, scaling=1.0)
    assert dumps_json(noise.to_dict()) == dumps_json(scaled.to_dict())


def test_zero_noise_cell():
    res = run_noise_sweep(small(noise_levels=(0.0,), trials_per_cell=5))
    st = res.cells[0].stats
    assert st["n_ok"] == 5
    assert np.max(st["delta_b_mt"]) < 1e-5
    assert np.degrees(st["mean_d_gc_rad"]) < 0.01


def test_full_pool_subset_is_fixed():
    cfg = small(field_counts=(28,), trials_per_cell=3)
    res = run_noise_sweep(cfg)
    assert {t.subset for t in res.cells[0].trials} == {tuple(range(28))}


def test_saturation_relative_numbers():
    cfg = small(field_counts=(4, 6), trials_per_cell=4)
    res = run_saturation_study(cfg)
    base = res.cells[0].stats["delta_b_norm_mt"]
    assert res.cells[0].stats["relative_to_min_count"] == 1.0
    assert res.cells[1].stats["relative_to_min_count"] == pytest.approx(res.cells[1].stats["delta_b_norm_mt"] / base)
    with pytest.raises(ConfigError):
        run_saturation_study(small())


def test_spectrum_noise_mode_runs():
    cfg = SweepConfig.nanodiamond(noise_levels=(0.0005,), field_counts=(4,), trials_per_cell=2, noise_mode="spectrum", rng_seed=3)
    res = run_noise_sweep(cfg)
    assert res.cells[0].stats["n_trials"] == 2


def test_csv_rows_one_per_trial():
    res = run_noise_sweep(small(trials_per_cell=3))
    rows = res.csv_rows()
    assert len(rows) == 1 + 3 and rows[0][0] == "kind"


# --- degeneracy ---------------------------------------------------------------


def test_degeneracy_one_field_sphere():
    demo = degeneracy_demo(1)
    assert demo.geometry.kind == "sphere"


def test_degeneracy_two_fields_ring():
    demo = degeneracy_demo(2)
    assert demo.geometry.kind == "ring"
    pts = demo.tied_b_loc()
    distinct = {tuple(np.round(p, 6)) for p in pts}
    assert len(distinct) >= 5
    for p in pts:
        assert demo.geometry.ring.distance(p) < 1e-4


def test_degeneracy_three_fields_mirror():
    demo = degeneracy_demo(3)
    assert demo.geometry.kind == "point-pair"
    pts = demo.tied_b_loc()
    assert len(pts) == 2
    n, off = demo.geometry.plane
    np.testing.assert_allclose(reflect_across_plane(pts[0], n, off), pts[1], atol=1e-6)
    assert abs((pts[0] + pts[1]) / 2 @ n - off) < 1e-6
    geo = sorted((s.as_array() for s in demo.geometry.solutions), key=tuple)
    for g, p in zip(geo, sorted(pts, key=tuple)):
        np.testing.assert_allclose(g, p, atol=1e-4)


def test_degeneracy_four_fields_unique():
    demo = degeneracy_demo(4)
    assert demo.geometry.kind == "unique"
    assert not demo.reconstruction.degenerate
    np.testing.assert_allclose(demo.reconstruction.best.b_loc.as_array(), [0.009, -0.017, -0.050], atol=1e-6)
    np.testing.assert_allclose(demo.geometry.solutions[0].as_array(), [0.009, -0.017, -0.050], atol=1e-6)


def test_degeneracy_rejects_bad_count():
    with pytest.raises(ConfigError):
        degeneracy_demo(5)
