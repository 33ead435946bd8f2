import hashlib
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gafm.datapipe import (
    METERS_PER_PIXEL,
    ClusterRecord,
    DataError,
    Raster,
    SurveyRow,
    aggregate_household,
    assign_labels,
    build_manifest,
    cluster_wealth,
    read_manifest,
    read_pgm,
    read_ppm,
    read_survey,
    sample_nightlight,
    stats_path,
    write_pgm,
    write_ppm,
)

SURVEY_HEADER = ("household_id,cluster_id,monthly_primary_income,annual_secondary_income,"
                 "annual_rent,annual_pension,annual_remittances\n")


def row(hid="h", cid="c", **kw):
    return SurveyRow(hid, cid, **kw)


# --------------------------------------------------------------------- households / clusters


def test_aggregate_all_missing():
    assert aggregate_household(row()) == 0


def test_aggregate_hand_case():
    assert aggregate_household(row(monthly_primary_income=10000, annual_rent=30000)) == 150000


def test_aggregate_single_field():
    assert aggregate_household(row(annual_pension=215000)) == 215000


def test_aggregate_negative_names_row():
    with pytest.raises(DataError, match="h17"):
        aggregate_household(row("h17", annual_rent=-1))


@settings(max_examples=50, deadline=None)
@given(total=st.integers(0, 10**7), cut=st.floats(0, 1))
def test_aggregate_additive_split(total, cut):
    a = float(int(total * cut))
    whole = aggregate_household(row(annual_secondary_income=float(total)))
    split = aggregate_household(row(annual_secondary_income=a, annual_rent=total - a))
    assert whole == split


def test_cluster_wealth_golden():
    rows = [row("a", monthly_primary_income=10000, annual_rent=30000), row("b", annual_pension=215000)]
    assert cluster_wealth(rows) == 500.0


def test_cluster_wealth_one_per_day():
    assert cluster_wealth([row(annual_rent=365)]) == 1.0


def test_cluster_wealth_duplication_invariant():
    rows = [row("a", annual_rent=1234.5), row("b", monthly_primary_income=77)]
    assert cluster_wealth(rows + rows) == pytest.approx(cluster_wealth(rows), rel=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 10**6), min_size=1, max_size=8), st.randoms())
def test_cluster_wealth_permutation_invariant(values, rnd):
    rows = [row(str(i), annual_rent=float(v)) for i, v in enumerate(values)]
    shuffled = rows[:]
    rnd.shuffle(shuffled)
    assert cluster_wealth(shuffled) == cluster_wealth(rows)


def test_cluster_wealth_empty():
    with pytest.raises(DataError):
        cluster_wealth([])


# --------------------------------------------------------------------- raster sampling


def test_sample_uniform():
    r = Raster(np.full((5, 5), 100))
    for w in (1, 3, 5):
        assert abs(sample_nightlight(r, 2, 2, w) - 100 / 255) < 1e-12
    assert r.meters_per_pixel == METERS_PER_PIXEL == 500


def test_sample_center_spike():
    vals = np.zeros((3, 3))
    vals[1, 1] = 9
    assert sample_nightlight(Raster(vals), 1, 1, 3) == pytest.approx(1 / 255, abs=1e-15)


def test_sample_corner_clips():
    vals = np.array([[10, 20, 99], [30, 40, 99], [99, 99, 99]])
    assert sample_nightlight(Raster(vals), 0, 0, 3) == pytest.approx(25 / 255, abs=1e-15)


def test_sample_outside():
    with pytest.raises(DataError):
        sample_nightlight(Raster(np.zeros((3, 3))), 3, 0, 3)
    with pytest.raises(DataError):
        sample_nightlight(Raster(np.zeros((3, 3))), 1, 1, 2)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), r=st.integers(0, 6), c=st.integers(0, 4), w=st.sampled_from([1, 3, 5, 7]))
def test_sample_range_and_window_one(seed, r, c, w):
    vals = np.random.default_rng(seed).integers(0, 256, size=(7, 5))
    ras = Raster(vals)
    v = sample_nightlight(ras, r, c, w)
    assert 0.0 <= v <= 1.0
    assert sample_nightlight(ras, r, c, 1) == vals[r, c] / 255


# --------------------------------------------------------------------- labels


def _clusters(incomes, lights):
    return [ClusterRecord(f"c{i}", 1, inc, 0, 0, li) for i, (inc, li) in enumerate(zip(incomes, lights))]


def test_labels_monotone_and_reversed():
    inc = [1.0, 5.0, 9.0, 20.0]
    assert assign_labels(_clusters(inc, [0.1, 0.2, 0.3, 0.9])).spearman == pytest.approx(1.0)
    assert assign_labels(_clusters(inc, [0.9, 0.3, 0.2, 0.1])).spearman == pytest.approx(-1.0)


def test_labels_hand_rho():
    rep = assign_labels(_clusters([1, 2, 3], [0.1, 0.3, 0.2]))
    assert rep.spearman == pytest.approx(0.5)


def test_labels_flags_violations_and_keeps_targets():
    cl = _clusters(list(range(10)), [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.05])
    rep = assign_labels(cl, rank_tolerance=2)
    assert "c9" in rep.violations
    assert [c.nightlight_intensity for c in rep.clusters][-1] == 0.05


# --------------------------------------------------------------------- files


def test_pnm_roundtrip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", img)
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), img)
    ras = Raster(np.arange(12).reshape(3, 4))
    write_pgm(tmp_path / "r.pgm", ras)
    assert np.array_equal(read_pgm(tmp_path / "r.pgm").values, ras.values)


def test_pgm_with_comment(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x05\x06")
    assert read_pgm(tmp_path / "c.pgm").values.tolist() == [[5, 6]]


def test_ppm_wrong_magic(tmp_path):
    (tmp_path / "x.ppm").write_bytes(b"P5\n1 1\n255\n\x00")
    with pytest.raises(DataError, match="P6"):
        read_ppm(tmp_path / "x.ppm")


def test_survey_header_checked(tmp_path):
    (tmp_path / "s.csv").write_text("household_id,cluster_id\nh,c\n")
    with pytest.raises(DataError, match="header"):
        read_survey(tmp_path / "s.csv")


def test_survey_empty_cells_missing(tmp_path):
    (tmp_path / "s.csv").write_text(SURVEY_HEADER + "h1,c1,10,,,,\n")
    (r,) = read_survey(tmp_path / "s.csv")
    assert r.monthly_primary_income == 10 and r.annual_rent is None


def make_fixture(root, with_extra_image=False):
    """Two clusters, three images; cluster a has the golden two households."""
    root.mkdir(parents=True, exist_ok=True)
    (root / "survey.csv").write_text(SURVEY_HEADER + "h1,a,10000,,30000,,\nh2,a,,,,215000,\nh3,b,,,365,,\n")
    (root / "clusters.csv").write_text("cluster_id,raster_row,raster_col\na,1,1\nb,0,4\n")
    ras = np.zeros((3, 5), dtype=np.uint8)
    ras[:, :3] = 51
    ras[:, 3:] = 204
    write_pgm(root / "night.pgm", Raster(ras))
    imgs = root / "images"
    imgs.mkdir(exist_ok=True)
    r = np.random.default_rng(1)
    for name in ("a_0", "a_1", "b_0"):
        write_ppm(imgs / f"{name}.ppm", r.integers(0, 256, (4, 4, 3), dtype=np.uint8))
    if with_extra_image:
        write_ppm(imgs / "zz_0.ppm", np.zeros((4, 4, 3), dtype=np.uint8))
    return root


def _build(root, seed=0):
    return build_manifest(root / "survey.csv", root / "clusters.csv", root / "night.pgm", root / "images", seed)


def test_build_manifest_hand_fixture(tmp_path):
    m = _build(make_fixture(tmp_path / "d"))
    assert len(m) == 3
    by = {(e.cluster_id, e.image_path.name): e for e in m.entries}
    a = by[("a", "a_0.ppm")]
    assert a.daily_income == 500.0
    assert a.nightlight_target == pytest.approx(51 / 255, abs=1e-15)
    b = by[("b", "b_0.ppm")]
    assert b.daily_income == 1.0
    assert b.nightlight_target == pytest.approx(204 / 255, abs=1e-15)
    assert m.cluster_ids == ["a", "b"]
    assert m.group_index().tolist() == [0, 0, 1]


def test_manifest_write_read_and_determinism(tmp_path):
    root = make_fixture(tmp_path / "d")
    out1, out2 = tmp_path / "m1" / "manifest.csv", tmp_path / "m2" / "manifest.csv"
    _build(root, 3).write(out1)
    _build(root, 3).write(out2)
    assert out1.read_text().splitlines()[0] == "image_path,cluster_id,nightlight_target,daily_income"
    assert hashlib.sha256(out1.read_bytes()).digest() == hashlib.sha256(out2.read_bytes()).digest()
    assert stats_path(out1).read_bytes() == stats_path(out2).read_bytes()
    back = read_manifest(out1)
    assert back.seed == 3 and len(back) == 3
    assert np.array_equal(back.incomes(), _build(root).incomes())


def test_manifest_channel_stats_standardize(tmp_path):
    m = _build(make_fixture(tmp_path / "d"))
    x = m.load_images(np.float64)
    assert x.shape == (3, 3, 4, 4)
    np.testing.assert_allclose(x.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(x.std(axis=(0, 2, 3)), 1, atol=1e-12)


def test_dangling_cluster_lists_ids(tmp_path):
    root = make_fixture(tmp_path / "d", with_extra_image=True)
    with pytest.raises(DataError, match="zz"):
        _build(root)


def test_cluster_without_images(tmp_path):
    root = make_fixture(tmp_path / "d")
    (root / "images" / "b_0.ppm").unlink()
    with pytest.raises(DataError, match="without images: b"):
        _build(root)


def test_missing_image_named_on_read(tmp_path):
    root = make_fixture(tmp_path / "d")
    out = tmp_path / "m" / "manifest.csv"
    _build(root).write(out)
    (root / "images" / "a_1.ppm").unlink()
    with pytest.raises(DataError, match="a_1.ppm"):
        read_manifest(out)


def test_unreadable_image(tmp_path):
    root = make_fixture(tmp_path / "d")
    (root / "images" / "a_1.ppm").write_bytes(b"garbage")
    with pytest.raises(DataError, match="a_1.ppm"):
        _build(root)


def test_golden_two_household_fixture_daily_income_exact(tmp_path):
    m = _build(make_fixture(tmp_path / "d"))
    assert m.clusters[0].daily_income_per_house == 500.0
    assert math.isclose(m.clusters[0].household_count, 2)
