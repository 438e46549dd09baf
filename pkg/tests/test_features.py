import json

import numpy as np
import pandas as pd
import pytest

from ct_triage.constants import FEATURE_GROUPS, FEATURE_SCHEMA
from ct_triage.errors import ConfigError, ExtractionRejected, MissingFile, NonFiniteFeature, SchemaMismatch
from ct_triage.features import (
    CaseGeometry,
    ExtractConfig,
    FeatureTable,
    FeatureVector,
    extract_features,
    extract_many,
    lung_statistics,
    opacity_statistics,
    read_feature_table,
    shape_location_features,
    texture_features,
    write_feature_table,
)
from ct_triage.volume_io import reorient_case

from conftest import build_bundle


def two_lungs(shape=(10, 10, 10)):
    """Left lung (label 1) on x < half, right lung (label 2) on the rest."""
    lungs = np.zeros(shape, dtype=np.uint8)
    half = shape[0] // 2
    lungs[:half] = 1
    lungs[half:] = 2
    return lungs


class TestSchema:
    def test_size_and_groups(self):
        assert len(FEATURE_SCHEMA) == 114
        assert FEATURE_SCHEMA.groups == FEATURE_GROUPS
        counts = {g: len(FEATURE_SCHEMA.indices_for_groups([g])) for g in FEATURE_GROUPS}
        assert counts == {"LungsStats": 56, "OpacityStats": 19, "OpacityTexture": 34, "ShapeLocation": 5}

    def test_landmark_ids(self):
        ids = FEATURE_SCHEMA.feature_ids
        assert ids[0] == "lungs_volume"
        assert ids[-1] == "peripheral_ratio"
        for fid in ("pos_ratio", "GGO_total_ratio", "consolidation_dominance", "lobe5_high_hu_ratio"):
            assert fid in ids

    def test_active_indices(self):
        active = FEATURE_SCHEMA.active_indices(["OpacityTexture"])
        assert len(active) == 114 - 34
        with pytest.raises(KeyError):
            FEATURE_SCHEMA.active_indices(["Nope"])


class TestLungStatistics:
    def test_hu_window_edges(self):
        lungs = np.ones((6, 1, 1), dtype=np.uint8)
        hu = np.array([-1001, -1000, -950, -600, -250, -249]).reshape(6, 1, 1)
        values = lung_statistics(build_bundle(lungs, hu=hu))
        mm3 = 1e-3
        assert values["lungs_volume"] == pytest.approx(6 * mm3)
        assert values["lungs_low_hu_volume"] == pytest.approx(2 * mm3)
        assert values["lungs_functional_hu_volume"] == pytest.approx(1 * mm3)
        assert values["lungs_high_hu_volume"] == pytest.approx(1 * mm3)
        assert values["lungs_low_hu_ratio"] == pytest.approx(100 * 2 / 6)

    def test_structures_and_empty_lobes(self):
        lungs = two_lungs()
        lobes = np.where(lungs == 1, 1, 3)
        values = lung_statistics(build_bundle(lungs, lobes=lobes, spacing=(2.0, 2.0, 2.0)))
        voxel = 8e-3
        assert values["left_lung_volume"] == pytest.approx(500 * voxel)
        assert values["right_lung_volume"] == pytest.approx(500 * voxel)
        assert values["lobe1_volume"] == pytest.approx(500 * voxel)
        assert values["lobe2_volume"] == 0.0
        assert values["lobe2_low_hu_ratio"] == 0.0

    def test_lobes_outside_lungs_ignored(self):
        lungs = np.zeros((4, 4, 4), dtype=np.uint8)
        lungs[:2] = 1
        lobes = np.ones((4, 4, 4), dtype=np.uint8)
        values = lung_statistics(build_bundle(lungs, lobes=lobes))
        assert values["lobe1_volume"] == pytest.approx(values["lungs_volume"])


class TestOpacityStatistics:
    @pytest.fixture
    def case(self):
        lungs = two_lungs()
        abnormality = np.zeros(lungs.shape, dtype=np.uint8)
        abnormality[1:3, 1:3, 2:5] = 1
        abnormality[7:9, 7:9, 6] = 1
        activation = np.zeros(lungs.shape)
        activation[1:3, 1:3, 2:5] = 0.5
        activation[7, 7, 6] = 2.0
        activation[0, 0, 0] = 0.25
        return build_bundle(lungs, abnormality=abnormality, activation=activation)

    def test_pos_ratio_counts_axial_slices(self, case):
        assert opacity_statistics(case)["pos_ratio"] == pytest.approx(0.4)

    def test_opacity_volumes(self, case):
        values = opacity_statistics(case)
        assert values["lungs_opacity_volume"] == pytest.approx(16e-3)
        assert values["left_lung_opacity_volume"] == pytest.approx(12e-3)
        assert values["right_lung_opacity_ratio"] == pytest.approx(100 * 4 / 500)

    def test_activation_sums(self, case):
        values = opacity_statistics(case)
        activation = case.activation.voxels.astype(np.float64)
        assert values["activation_sum"] == pytest.approx(activation.sum())
        inside = activation[case.abnormality.voxels > 0].sum()
        assert values["activation_volume_weighted"] == pytest.approx(1e-3 * inside)

    def test_no_abnormality(self):
        values = opacity_statistics(build_bundle(two_lungs()))
        assert values["pos_ratio"] == 0.0
        assert values["activation_volume_weighted"] == 0.0
        assert values["lungs_opacity_ratio"] == 0.0


class TestTexture:
    def test_dominance_and_ratios(self):
        lungs = two_lungs()
        abnormality = np.zeros(lungs.shape, dtype=np.uint8)
        abnormality[:, :, 0] = 1
        texture = np.zeros(lungs.shape, dtype=np.uint8)
        texture[:3, :, 0] = 1
        texture[8:, :, 0] = 2
        values = texture_features(build_bundle(lungs, abnormality=abnormality, texture=texture))
        assert values["GGO_dominance"] == pytest.approx(0.3)
        assert values["consolidation_dominance"] == pytest.approx(0.2)
        assert values["GGO_left_lung_volume"] == pytest.approx(30e-3)
        assert values["consolidation_right_lung_ratio"] == pytest.approx(100 * 20 / 500)
        assert values["GGO_total_ratio"] == pytest.approx(100 * 30 / 1000)

    def test_no_abnormality_dominance_zero(self):
        values = texture_features(build_bundle(two_lungs()))
        assert values["GGO_dominance"] == 0.0
        assert values["consolidation_dominance"] == 0.0


class TestShapeLocation:
    def coarse_case(self, left_voxels, right_voxels):
        lungs = two_lungs((4, 4, 4))
        abnormality = np.zeros(lungs.shape, dtype=np.uint8)
        left = np.argwhere(lungs == 1)[:left_voxels]
        right = np.argwhere(lungs == 2)[:right_voxels]
        for v in list(left) + list(right):
            abnormality[tuple(v)] = 1
        return build_bundle(lungs, abnormality=abnormality, spacing=(10.0, 10.0, 10.0))

    @pytest.mark.parametrize(
        "left_voxels, right_voxels, expected",
        [
            (0, 0, (0, 0, 0)),
            (1, 1, (0, 0, 0)),
            (2, 1, (1, 0, 0)),
            (1, 3, (0, 1, 0)),
            (2, 2, (0, 0, 1)),
        ],
    )
    def test_laterality_threshold_is_strict(self, left_voxels, right_voxels, expected):
        values = shape_location_features(self.coarse_case(left_voxels, right_voxels))
        assert (values["unilateral_left"], values["unilateral_right"], values["bilateral"]) == expected

    def test_peripheral_ratio_zero_without_abnormality(self):
        assert shape_location_features(build_bundle(two_lungs()))["peripheral_ratio"] == 0.0

    def test_peripheral_ratio_with_bronchial_mask(self):
        lungs = two_lungs((20, 20, 20))
        abnormality = np.zeros(lungs.shape, dtype=np.uint8)
        abnormality[0, 5:8, 5:8] = 1
        abnormality[9, 9:11, 9:11] = 1
        bronchial = np.zeros(lungs.shape, dtype=np.uint8)
        cfg = ExtractConfig(shell_depth_mm=2.0)
        values = shape_location_features(build_bundle(lungs, abnormality=abnormality, bronchial=bronchial), cfg)
        assert values["peripheral_ratio"] == pytest.approx(100 * 9 / 13)

    def test_focal_ggo_on_phantoms(self, covid_case, other_case):
        assert extract_features(covid_case[0])["focal_GGO"] == 1.0
        assert extract_features(other_case[0])["focal_GGO"] == 0.0

    def test_large_ggo_is_not_focal(self):
        lungs = np.ones((20, 20, 4), dtype=np.uint8)
        abnormality = np.zeros(lungs.shape, dtype=np.uint8)
        abnormality[:, :, 1:3] = 1
        values = shape_location_features(
            build_bundle(lungs, abnormality=abnormality, texture=abnormality, spacing=(2.0, 2.0, 2.0))
        )
        assert values["focal_GGO"] == 0.0


class TestExtractFeatures:
    def test_phantoms_match_ground_truth(self, covid_case, other_case):
        for bundle, truth in (covid_case, other_case):
            vector = extract_features(bundle)
            assert truth.mismatches(vector) == []

    def test_orientation_does_not_change_features(self, other_case):
        bundle, _ = other_case
        expected = extract_features(bundle)
        flipped = extract_features(reorient_case(bundle, "LPS"))
        assert np.allclose(flipped.values, expected.values, rtol=1e-12, atol=1e-12)

    def test_invalid_bundle_rejected(self):
        lungs = two_lungs()
        texture = np.zeros(lungs.shape, dtype=np.uint8)
        texture[0, 0, 0] = 1
        with pytest.raises(ExtractionRejected) as info:
            extract_features(build_bundle(lungs, texture=texture))
        assert "TextureOutsideAbnormality" in info.value.report.kinds()

    def test_shared_geometry_gives_the_same_groups(self, covid_case):
        bundle, _ = covid_case
        cfg = ExtractConfig()
        geometry = CaseGeometry(bundle)
        assert geometry.abnormal_count > 0
        assert lung_statistics(bundle, geometry) == lung_statistics(bundle)
        assert opacity_statistics(bundle, cfg, geometry) == opacity_statistics(bundle, cfg)
        assert texture_features(bundle, geometry) == texture_features(bundle)
        assert shape_location_features(bundle, cfg, geometry) == shape_location_features(bundle, cfg)

    def test_extract_many_keeps_order_across_workers(self, covid_case, other_case):
        bundles = [covid_case[0], other_case[0], covid_case[0]]
        sequential = extract_many(bundles, max_workers=1)
        threaded = extract_many(bundles, max_workers=3)
        assert [v.case_id for v in threaded] == [b.case_id for b in bundles]
        for a, b in zip(sequential, threaded):
            assert np.array_equal(a.values, b.values)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            ExtractConfig(connectivity=18)
        with pytest.raises(ConfigError):
            ExtractConfig.from_dict({"shell_depth": 3})
        assert ExtractConfig.from_dict({"shell_depth_mm": 5}).shell_depth_mm == 5


class TestFeatureTable:
    @pytest.fixture
    def table(self):
        rng = np.random.default_rng(0)
        vectors = [
            FeatureVector(FEATURE_SCHEMA, rng.random(114) * 100, f"case_{i}", ("covid", "other")[i % 2])
            for i in range(6)
        ]
        return FeatureTable.from_vectors(vectors)

    def test_round_trip(self, tmp_path, table):
        path = tmp_path / "features.csv"
        write_feature_table(table, path, {"schema_version": "1"})
        loaded = read_feature_table(path)
        assert loaded.case_ids == table.case_ids
        assert loaded.labels == table.labels
        assert np.allclose(loaded.X, table.X, rtol=1e-12, atol=0)
        assert loaded.y.tolist() == [1, 0, 1, 0, 1, 0]
        header = path.read_text().splitlines()[0].split(",")
        assert header[:3] == ["case_id", "label", "lungs_volume"]

    def test_missing_column(self, tmp_path, table):
        path = tmp_path / "features.csv"
        table.to_frame().drop(columns=["pos_ratio"]).to_csv(path, index=False)
        with pytest.raises(SchemaMismatch):
            read_feature_table(path)

    def test_extra_column_ignored(self, tmp_path, table):
        path = tmp_path / "features.csv"
        frame = table.to_frame()
        frame["note"] = "x"
        frame.to_csv(path, index=False)
        assert read_feature_table(path).X.shape == (6, 114)

    def test_non_finite_and_non_numeric(self, tmp_path, table):
        path = tmp_path / "features.csv"
        frame = table.to_frame()
        frame.loc[2, "pos_ratio"] = np.inf
        frame.to_csv(path, index=False)
        with pytest.raises(NonFiniteFeature):
            read_feature_table(path)
        frame = table.to_frame()
        frame["pos_ratio"] = frame["pos_ratio"].astype(object)
        frame.loc[1, "pos_ratio"] = "abc"
        frame.to_csv(path, index=False)
        with pytest.raises(SchemaMismatch):
            read_feature_table(path)

    def test_schema_version_checked(self, tmp_path, table):
        path = tmp_path / "features.csv"
        write_feature_table(table, path)
        (tmp_path / "features.meta.json").write_text(json.dumps({"provenance": {"schema_version": "0"}}))
        with pytest.raises(SchemaMismatch):
            read_feature_table(path)

    def test_unlabeled_rows(self, tmp_path, table):
        path = tmp_path / "features.csv"
        frame = table.to_frame()
        frame.loc[0, "label"] = ""
        frame.to_csv(path, index=False)
        loaded = read_feature_table(path)
        assert loaded.labels[0] == ""
        with pytest.raises(SchemaMismatch):
            loaded.y

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingFile):
            read_feature_table(tmp_path / "absent.csv")

    def test_subset_and_column(self, table):
        sub = table.subset([4, 1])
        assert sub.case_ids == ["case_4", "case_1"]
        assert np.array_equal(sub.column("pos_ratio"), table.X[[4, 1], FEATURE_SCHEMA.index("pos_ratio")])
        assert isinstance(table.to_frame(), pd.DataFrame)
