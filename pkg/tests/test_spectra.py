import logging

import numpy as np
import pytest
from scipy.stats import spearmanr

from nvorient.errors import FitError, GridError, UnresolvedPeaksError
from nvorient.geometry import KNOWN_100_AXES, OrientationParams, axes_from_params
from nvorient.physics import splittings_for, transitions_for
from nvorient.spectra import (
    FrequencyGrid,
    NoiseSpec,
    OdmrSpectrum,
    Peak,
    PeakSet,
    SplittingTable,
    fit_peaks,
    merge_hyperfine,
    resonance_lines,
    splittings_from_lines,
    splittings_from_peaks,
    synthesize,
)

AXES = axes_from_params(OrientationParams(0.3, 1.1, 0.7))
FIELD = np.array([2.0, -7.0, 4.0])  # lines at least 28 MHz apart on AXES


def test_zero_field_single_dip():
    sp = synthesize(KNOWN_100_AXES, (0, 0, 0), linewidth_fwhm=0.6)
    lines = resonance_lines(KNOWN_100_AXES, (0, 0, 0))
    np.testing.assert_allclose(lines, 2870.0, atol=1e-9)
    assert sp.frequencies[np.argmin(sp.contrast)] == pytest.approx(2870.0, abs=0.06)


def test_axial_field_outer_dips():
    b = KNOWN_100_AXES.n1 * 1.0
    lines = resonance_lines(KNOWN_100_AXES, b)
    assert lines[0] == pytest.approx(2870 - 28.0, abs=1e-9)
    assert lines[-1] == pytest.approx(2870 + 28.0, abs=1e-9)
    np.testing.assert_allclose(lines, np.sort(transitions_for(KNOWN_100_AXES, b).ravel()), atol=1e-9)


def test_hyperfine_pairs_are_split_about_center():
    base = resonance_lines(AXES, FIELD)
    hf = resonance_lines(AXES, FIELD, hyperfine=True)
    assert hf.size == 16
    for c in base:
        lo = hf[np.argmin(np.abs(hf - (c - 1.515)))]
        hi = hf[np.argmin(np.abs(hf - (c + 1.515)))]
        assert hi - lo == pytest.approx(3.03, abs=1e-9)
        assert (hi + lo) / 2 == pytest.approx(c, abs=1e-9)


def test_synthesize_errors():
    with pytest.raises(ValueError):
        synthesize(AXES, FIELD, linewidth_fwhm=0)
    with pytest.raises(GridError):
        synthesize(AXES, FIELD, grid=FrequencyGrid(2800, 2900, 0.1))


def test_noise_free_round_trip_8_peaks():
    sp = synthesize(AXES, FIELD, linewidth_fwhm=10.0)
    pk = fit_peaks(sp, 8)
    np.testing.assert_allclose(pk.positions, resonance_lines(AXES, FIELD), atol=1e-3)
    row = splittings_from_peaks(pk)
    np.testing.assert_allclose(row.s, np.sort(splittings_for(AXES, FIELD))[::-1], atol=1e-3)
    assert not row.ambiguous


def test_noise_free_round_trip_16_peaks():
    sp = synthesize(AXES, FIELD, linewidth_fwhm=0.6, hyperfine=True)
    merged = merge_hyperfine(fit_peaks(sp, 16))
    assert len(merged) == 8 and not merged.unpaired
    np.testing.assert_allclose(merged.positions, resonance_lines(AXES, FIELD), atol=1e-6)
    row = splittings_from_peaks(merged)
    np.testing.assert_allclose(row.s, np.sort(splittings_for(AXES, FIELD))[::-1], atol=1e-3)


def test_amplitude_noise_fit_accuracy():
    fwhm, depth = 10.0, 0.02
    truth = resonance_lines(AXES, FIELD)
    rng = np.random.default_rng(7)
    good = total = 0
    for _ in range(1000):
        sp = synthesize(AXES, FIELD, linewidth_fwhm=fwhm, peak_contrast=depth, noise=NoiseSpec(0.1 * depth, "amplitude"), rng=rng)
        pk = fit_peaks(sp, 8)
        err = np.abs(pk.positions - truth)
        good += int(np.sum(err < fwhm / 10))
        total += err.size
    assert good / total >= 0.95


def test_uncertainty_tracks_amplitude_noise():
    levels = np.geomspace(1e-4, 1e-3, 10)
    rng = np.random.default_rng(3)
    mean_unc = []
    for lvl in levels:
        u = [fit_peaks(synthesize(AXES, FIELD, linewidth_fwhm=10.0, noise=NoiseSpec(lvl, "amplitude"), rng=rng), 8).uncertainties.mean() for _ in range(5)]
        mean_unc.append(np.mean(u))
    assert spearmanr(levels, mean_unc)[0] > 0.95


def test_frequency_jitter_passes_through_fitter():
    sigma = 1.0
    truth = resonance_lines(AXES, FIELD)
    rng = np.random.default_rng(11)
    dev = []
    for _ in range(1000):
        sp = synthesize(AXES, FIELD, linewidth_fwhm=10.0, noise=NoiseSpec(sigma, "frequency"), rng=rng)
        dev.append(fit_peaks(sp, 8).positions - truth)
    scatter = np.std(np.concatenate(dev))
    assert 0.8 * sigma <= scatter <= 1.2 * sigma


def test_unresolved_peaks_flagged():
    f = np.linspace(2800, 2940, 1401)
    contrast = 1 - 0.02 / (1 + ((f - 2870) / 5) ** 2) - 0.02 / (1 + ((f - 2872) / 5) ** 2)
    with pytest.raises(UnresolvedPeaksError):
        fit_peaks(OdmrSpectrum(f, contrast, {"linewidth_mhz": 10.0}), 2)


def test_fit_peaks_reports_found_count():
    sp = synthesize(AXES, FIELD, linewidth_fwhm=10.0)
    with pytest.raises(UnresolvedPeaksError) as info:
        fit_peaks(sp, 9)
    assert len(info.value.found) == 8


def test_merge_examples():
    pk = PeakSet.from_positions([2840.0, 2843.03, 2900.0, 2903.03])
    np.testing.assert_allclose(merge_hyperfine(pk).positions, [2841.515, 2901.515], atol=1e-12)
    eight = PeakSet.from_positions(resonance_lines(AXES, FIELD))
    assert merge_hyperfine(eight).positions.tolist() == eight.positions.tolist()


def test_merge_interleaved_doublets():
    pk = PeakSet.from_positions([2840.0, 2841.0, 2843.03, 2844.03])
    np.testing.assert_allclose(merge_hyperfine(pk).positions, [2841.515, 2842.515], atol=1e-12)


def test_merge_unpaired_warns_or_raises(caplog):
    pk = PeakSet.from_positions([2840.0, 2843.03, 2870.0])
    with caplog.at_level(logging.WARNING):
        out = merge_hyperfine(pk)
    assert out.unpaired == (2870.0,)
    assert "partner" in caplog.text
    with pytest.raises(FitError):
        merge_hyperfine(pk, strict=True)


def test_splittings_from_peaks_example():
    c = 2870 + np.array([-20, -15, -10, -5, 5, 10, 15, 20.0])
    row = splittings_from_peaks(c)
    np.testing.assert_allclose(row.s, [40, 30, 20, 10])
    with pytest.raises(ValueError):
        splittings_from_peaks(c[:7])


def test_splittings_match_forward_model(rng):
    for _ in range(20):
        b = rng.normal(size=3) * 3
        row = splittings_from_peaks(resonance_lines(AXES, b))
        np.testing.assert_allclose(row.s, np.sort(splittings_for(AXES, b))[::-1], atol=1e-6)


def test_crossing_pairs_flagged():
    rng = np.random.default_rng(0)
    found = 0
    for _ in range(5000):
        b = rng.normal(size=3)
        b *= rng.uniform(5, 80) / np.linalg.norm(b)
        row = splittings_from_peaks(resonance_lines(AXES, b))
        true = np.sort(splittings_for(AXES, b))[::-1]
        if np.max(np.abs(row.s - true)) > 1e-6:
            found += 1
            assert row.ambiguous
    assert found > 0


def test_splittings_from_lines_handles_crossed_pairs():
    lines = np.array([[2860, 2880], [2875, 2865], [2850, 2890], [2869, 2871.0]])
    np.testing.assert_allclose(splittings_from_lines(lines)[0], [40, 20, 10, 2])


def test_table_validation():
    with pytest.raises(ValueError):
        SplittingTable(np.ones((2, 3)))
    with pytest.raises(ValueError):
        SplittingTable(-np.ones((1, 4)))
    t = SplittingTable(np.ones((3, 4)))
    assert SplittingTable.from_dict(t.to_dict()) == t
    assert t.subset([0, 2]).n_fields == 2


def test_peakset_invariants():
    unsorted = PeakSet((Peak(2.0, 0.0, 0.0, 0.0), Peak(1.0, 0.0, 0.0, 0.0)))
    assert unsorted.positions.tolist() == [1.0, 2.0]
    with pytest.raises(ValueError):
        PeakSet((Peak(1.0, -1.0, 0.0, 0.0),))
    pk = PeakSet.from_positions([1.0, 2.0])
    assert PeakSet.from_dict(pk.to_dict()) == pk


def test_spectrum_validation():
    with pytest.raises(ValueError):
        OdmrSpectrum(np.array([1.0, 1.0]), np.array([1.0, 1.0]))
    with pytest.raises(ValueError):
        OdmrSpectrum(np.array([1.0, 2.0]), np.array([1.0, np.nan]))
    with pytest.raises(ValueError):
        NoiseSpec(1.0, "shot")
