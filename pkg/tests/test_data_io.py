"""Loading, validation, standardization, and the synthetic generators."""

import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from aqdyn.config import ModelSpec
from aqdyn.data_io import (
    DETECTION_FLOOR,
    PANEL_D0,
    Dataset,
    Region,
    Standardization,
    SyntheticTruth,
    WellRecord,
    load_panel,
    load_survey1,
    load_survey2,
    mean_depth,
    shared_standardization,
    simulate_blanket,
    simulate_panel,
    standardize,
    write_panel,
    write_survey1,
    write_survey2,
)
from aqdyn.measurement import kit_category_probability_matrix

REGION = Region(0.0, 3000.0, 0.0, 2400.0, holes=((1000.0, 1800.0, 800.0, 1600.0),))
MINI = ModelSpec(model="blanket", n_east_inner=5, laplacian_scale=1.0 / 36.0,
                 grid_bounds=REGION.bounds)
PANEL_SPEC = ModelSpec(model="resampled", ar_interior_knots=5, grid_bounds=REGION.bounds)


# ---------------------------------------------------------------------------
# CSV loading


def test_survey1_row_parses(tmp_path):
    path = tmp_path / "s1.csv"
    path.write_text(
        "well_id,east_m,north_m,depth_m,as_ugL\n23456,1200.5,345.2,14.0,112\n"
    )
    result = load_survey1(path)
    (rec,) = result.records
    assert rec.well_id == "23456"
    assert rec.east == 1200.5 and rec.north == 345.2
    assert rec.depth == 14.0
    assert rec.lab_value == 112.0
    assert rec.epoch == "survey1_2000"
    assert result.notes == ()


def test_kit_label_maps_to_third_category(tmp_path):
    path = tmp_path / "s2.csv"
    path.write_text("well_id,east_m,north_m,depth_m,kit_level\nw1,10,20,12,25\n")
    (rec,) = load_survey2(path).records
    assert rec.kit_category == 3
    assert rec.lab_value is None


def test_empty_file_is_an_error(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("")
    with pytest.raises(ValueError, match="empty"):
        load_survey1(path)


def test_header_mismatch_is_an_error(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("id,x,y,z,v\nw1,0,0,10,5\n")
    with pytest.raises(ValueError, match="header"):
        load_survey1(path)


def test_wrong_field_count_names_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("well_id,east_m,north_m,depth_m,as_ugL\nw1,0,0,10\n")
    with pytest.raises(ValueError, match="line 2"):
        load_survey1(path)


def test_duplicate_well_id_names_line(tmp_path):
    path = tmp_path / "dup.csv"
    path.write_text(
        "well_id,east_m,north_m,depth_m,as_ugL\nw1,0,0,10,5\nw1,1,1,10,6\n"
    )
    with pytest.raises(ValueError, match="line 3"):
        load_survey1(path)


def test_negative_lab_value_rejected(tmp_path):
    path = tmp_path / "neg.csv"
    path.write_text("well_id,east_m,north_m,depth_m,as_ugL\nw1,0,0,10,-3\n")
    with pytest.raises(ValueError, match="negative"):
        load_survey1(path)


def test_zero_lab_value_floored_with_note(tmp_path):
    path = tmp_path / "zero.csv"
    path.write_text("well_id,east_m,north_m,depth_m,as_ugL\nw1,0,0,10,0\n")
    result = load_survey1(path)
    assert result.records[0].lab_value == DETECTION_FLOOR
    assert any("line 2" in note for note in result.notes)


def test_unknown_kit_label_lists_valid_labels(tmp_path):
    path = tmp_path / "s2.csv"
    path.write_text("well_id,east_m,north_m,depth_m,kit_level\nw1,0,0,10,37\n")
    with pytest.raises(ValueError, match="1000"):
        load_survey2(path)


def test_panel_wide_rows_become_three_records(tmp_path):
    path = tmp_path / "panel.csv"
    path.write_text(
        "well_id,east_m,north_m,depth_m,as2000_ugL,as2014_ugL,as2015_ugL\n"
        "p1,100,200,15,80,40,40.5\n"
    )
    records = load_panel(path).records
    assert [r.epoch for r in records] == ["panel_2000", "panel_2014", "panel_2015"]
    assert [r.lab_value for r in records] == [80.0, 40.0, 40.5]
    assert all(r.well_id == "p1" for r in records)


def _roundtrip(records, writer, loader, path):
    writer(records, path)
    first = path.read_bytes()
    loaded = loader(path).records
    writer(loaded, path)
    assert path.read_bytes() == first
    return loaded


def test_write_load_cycles_are_lossless(tmp_path):
    sim = simulate_blanket(MINI, truth_seed=3, n1=15, n2=15, region=REGION)
    s1 = _roundtrip(sim.survey1, write_survey1, load_survey1, tmp_path / "s1.csv")
    assert s1 == sim.survey1
    s2 = _roundtrip(sim.survey2, write_survey2, load_survey2, tmp_path / "s2.csv")
    assert s2 == sim.survey2
    psim = simulate_panel(PANEL_SPEC, truth_seed=3, n_wells=12, region=REGION)
    panel = _roundtrip(psim.records, write_panel, load_panel, tmp_path / "p.csv")
    assert set(panel) == set(psim.records)


def test_write_panel_requires_all_three_epochs(tmp_path):
    psim = simulate_panel(PANEL_SPEC, truth_seed=3, n_wells=12, region=REGION)
    with pytest.raises(ValueError, match="p_0000"):
        write_panel(psim.records[1:], tmp_path / "p.csv")


# ---------------------------------------------------------------------------
# Standardization


def test_full_extent_maps_to_unit_interval():
    records = [
        WellRecord("a", 500.0, 100.0, 10.0, "survey1_2000", lab_value=5.0),
        WellRecord("b", 9600.0, 100.0, 10.0, "survey1_2000", lab_value=5.0),
    ]
    ds = standardize(records)
    east = ds.locations[:, 0]
    assert east[0] == pytest.approx(0.0, abs=1e-12)
    assert east[1] == pytest.approx(1.0, abs=1e-12)


def test_translation_invariance():
    base = [
        WellRecord(f"w{i}", 100.0 * i, 70.0 * i, 10.0, "survey1_2000", lab_value=5.0)
        for i in range(1, 8)
    ]
    shifted = [
        WellRecord(r.well_id, r.east + 2.5e5, r.north + 1.1e5, r.depth, r.epoch,
                   lab_value=r.lab_value)
        for r in base
    ]
    a = standardize(base).locations
    b = standardize(shifted).locations
    assert np.allclose(a, b, atol=1e-9)


def test_unstandardize_round_trip():
    transform = Standardization.from_bounds((120.0, 9220.0, 40.0, 6040.0))
    east = np.array([120.0, 5000.0, 9220.0])
    north = np.array([40.0, 333.3, 6040.0])
    unit = transform.to_unit(east, north)
    back_e, back_n = transform.from_unit(unit)
    assert np.allclose(back_e, east, atol=1e-9)
    assert np.allclose(back_n, north, atol=1e-9)


@given(
    points=st.lists(
        st.tuples(st.floats(min_value=-1e5, max_value=1e5),
                  st.floats(min_value=-1e5, max_value=1e5)),
        min_size=2, max_size=12,
    ),
)
@settings(max_examples=60, deadline=None)
def test_round_trip_property(points):
    arr = np.asarray(points)
    east, north = arr[:, 0], arr[:, 1]
    assume(np.ptp(east) > 1e-3)
    transform = Standardization(
        east_offset=float(east.min()), north_offset=float(north.min()),
        east_extent=float(np.ptp(east)),
    )
    unit = transform.to_unit(east, north)
    back_e, back_n = transform.from_unit(unit)
    assert np.allclose(back_e, east, atol=1e-6)
    assert np.allclose(back_n, north, atol=1e-6)


def test_shared_standardization_covers_all_groups():
    g1 = [WellRecord("a", 0.0, 0.0, 10.0, "survey1_2000", lab_value=5.0)]
    g2 = [WellRecord("b", 1000.0, 500.0, 10.0, "survey2_2012", kit_category=1)]
    transform = shared_standardization(g1, g2)
    assert transform.east_extent == 1000.0
    ds1 = standardize(g1, transform, 10.0)
    ds2 = standardize(g2, transform, 10.0)
    assert ds1.standardization == ds2.standardization


def test_dataset_rejects_duplicate_well_epoch():
    rec = WellRecord("a", 0.0, 0.0, 10.0, "survey1_2000", lab_value=5.0)
    other = WellRecord("a", 10.0, 0.0, 12.0, "survey1_2000", lab_value=6.0)
    transform = Standardization(0.0, 0.0, 100.0)
    with pytest.raises(ValueError, match="duplicate"):
        Dataset((rec, other), transform, 10.0, ())


def test_mean_depth_pools_groups():
    g1 = [WellRecord("a", 0.0, 0.0, 10.0, "survey1_2000", lab_value=5.0)]
    g2 = [WellRecord("b", 1.0, 0.0, 20.0, "survey1_2000", lab_value=5.0)]
    assert mean_depth(g1, g2) == 15.0


# ---------------------------------------------------------------------------
# Region sampling


def test_region_contains_respects_holes():
    assert REGION.contains(500.0, 500.0)
    assert not REGION.contains(1400.0, 1200.0)  # inside the hole
    assert not REGION.contains(-1.0, 500.0)


def test_sampled_locations_lie_in_region():
    rng = np.random.default_rng(5)
    pts = REGION.sample_locations(200, rng)
    assert pts.shape == (200, 2)
    assert all(REGION.contains(e, n) for e, n in pts)


def test_min_separation_enforced():
    rng = np.random.default_rng(5)
    pts = REGION.sample_locations(50, rng, min_separation=100.0)
    d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2)
    np.fill_diagonal(d, np.inf)
    assert d.min() >= 100.0


def test_impossible_separation_is_an_error():
    rng = np.random.default_rng(5)
    small = Region(0.0, 10.0, 0.0, 10.0)
    with pytest.raises(ValueError, match="too small"):
        small.sample_locations(500, rng, min_separation=5.0)


# ---------------------------------------------------------------------------
# Synthetic generators


def test_simulation_is_deterministic():
    a = simulate_blanket(MINI, truth_seed=9, n1=20, n2=20, region=REGION)
    b = simulate_blanket(MINI, truth_seed=9, n1=20, n2=20, region=REGION)
    assert a.survey1 == b.survey1
    assert a.survey2 == b.survey2
    assert a.truth.scalars == b.truth.scalars


def test_truth_and_noise_streams_are_separate():
    a = simulate_blanket(MINI, truth_seed=9, n1=20, n2=20, region=REGION, noise_seed=1)
    b = simulate_blanket(MINI, truth_seed=9, n1=20, n2=20, region=REGION, noise_seed=2)
    assert np.array_equal(a.truth.vectors["beta"], b.truth.vectors["beta"])
    assert a.truth.scalars["beta0"] == b.truth.scalars["beta0"]
    assert a.survey1 != b.survey1  # different wells and noise


def test_noise_free_limit_reproduces_latents():
    quiet = simulate_blanket(
        MINI, truth_seed=9, n1=25, n2=25, region=REGION,
        truth_overrides={"sigma_obs": 1e-6, "tau": 1e-6, "beta_depth": 0.0},
    )
    log_y1 = np.log([r.lab_value for r in quiet.survey1])
    theta1_at_s1 = quiet.truth.vectors["log_y1"]
    assert np.allclose(log_y1, theta1_at_s1, atol=1e-4)
    assert np.allclose(
        quiet.truth.vectors["theta2"], quiet.truth.vectors["eta2"], atol=1e-4
    )
    assert np.allclose(
        quiet.truth.vectors["theta2"],
        quiet.truth.vectors["theta1"]
        + quiet.truth.scalars["alpha_delta"]
        + (quiet.truth.scalars["beta_delta"]
           + quiet.truth.scalars["alpha_y"]
           * np.exp(quiet.truth.vectors["theta1"] / 2.0)
           + quiet.truth.scalars["alpha_theta"] * quiet.truth.vectors["theta1"])
        * quiet.truth.vectors["delta"],
        atol=1e-4,
    )


def test_unknown_truth_override_rejected():
    with pytest.raises(ValueError, match="unknown truth overrides"):
        simulate_blanket(MINI, truth_seed=1, n1=5, n2=5, region=REGION,
                         truth_overrides={"sigma": 1.0})


def test_kit_frequencies_match_probabilities():
    # many wells at a fixed truth: empirical category frequencies should sit
    # within 3 binomial standard errors of the averaged model probabilities
    sim = simulate_blanket(
        MINI, truth_seed=21, n1=5, n2=4000, region=REGION,
        truth_overrides={"sigma_obs": 0.4, "tau": 0.3},
    )
    eta2 = sim.truth.vectors["eta2"]
    prob = kit_category_probability_matrix(sim.calibration, eta2).mean(axis=0)
    counts = np.bincount(
        [r.kit_category for r in sim.survey2], minlength=10
    )[1:]
    freq = counts / counts.sum()
    se = np.sqrt(prob * (1 - prob) / counts.sum())
    assert np.all(np.abs(freq - prob) <= 3 * se + 1e-12)


def test_simulated_output_passes_loader_validation(tmp_path):
    sim = simulate_blanket(MINI, truth_seed=13, n1=10, n2=10, region=REGION)
    write_survey1(sim.survey1, tmp_path / "s1.csv")
    write_survey2(sim.survey2, tmp_path / "s2.csv")
    assert len(load_survey1(tmp_path / "s1.csv").records) == 10
    assert len(load_survey2(tmp_path / "s2.csv").records) == 10
    psim = simulate_panel(PANEL_SPEC, truth_seed=13, n_wells=10, region=REGION)
    write_panel(psim.records, tmp_path / "p.csv")
    assert len(load_panel(tmp_path / "p.csv").records) == 30


def test_panel_simulation_shape_and_default_reference_depth():
    psim = simulate_panel(PANEL_SPEC, truth_seed=4, n_wells=18, region=REGION)
    assert len(psim.records) == 54
    assert psim.truth.scalars["d0"] == PANEL_D0
    assert psim.truth.vectors["ar_beta"].shape == (1 + PANEL_SPEC.ar_interior_knots + 3,)


def test_panel_latents_obey_generative_equations():
    psim = simulate_panel(
        PANEL_SPEC, truth_seed=4, n_wells=18, region=REGION,
        truth_overrides={"sigma_s": 1e-6, "beta_depth": 0.0},
    )
    by_epoch = {}
    for r in psim.records:
        by_epoch.setdefault(r.epoch, []).append(r)
    log2000 = np.log([r.lab_value for r in by_epoch["panel_2000"]])
    log2014 = np.log([r.lab_value for r in by_epoch["panel_2014"]])
    log2015 = np.log([r.lab_value for r in by_epoch["panel_2015"]])
    assert np.allclose(log2000, psim.truth.vectors["theta_2000"], atol=1e-4)
    assert np.allclose(log2014, psim.truth.vectors["theta_2014"], atol=1e-4)
    assert np.allclose(log2015, psim.truth.vectors["theta_2014"], atol=1e-4)


def test_truth_save_load_round_trip(tmp_path):
    sim = simulate_blanket(MINI, truth_seed=2, n1=6, n2=6, region=REGION)
    path = tmp_path / "truth.json"
    sim.truth.save(path)
    loaded = SyntheticTruth.load(path)
    assert loaded.kind == sim.truth.kind
    assert loaded.scalars == pytest.approx(sim.truth.scalars)
    for key, vec in sim.truth.vectors.items():
        assert np.allclose(loaded.vectors[key], vec)


def test_dataset_accessors():
    sim = simulate_blanket(MINI, truth_seed=2, n1=6, n2=7, region=REGION)
    transform = shared_standardization(sim.survey1, sim.survey2)
    d0 = mean_depth(sim.survey1, sim.survey2)
    ds1 = standardize(sim.survey1, transform, d0)
    ds2 = standardize(sim.survey2, transform, d0)
    assert ds1.n == 6 and ds2.n == 7
    assert np.all(np.isfinite(ds1.log_lab_values))
    assert np.all(ds2.kit_categories >= 1) and np.all(ds2.kit_categories <= 9)
    assert np.all(np.isnan(ds2.lab_values))
    unit = np.vstack([ds1.locations, ds2.locations])
    assert unit[:, 0].min() >= -1e-9 and unit[:, 0].max() <= 1 + 1e-9
    sub = ds2.take([0, 2, 4])
    assert sub.n == 3
    assert sub.well_ids == (ds2.well_ids[0], ds2.well_ids[2], ds2.well_ids[4])
