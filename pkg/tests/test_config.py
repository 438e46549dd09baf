import json

import pytest

from ct_triage.config import DEFAULT_GRID, RunConfig, env_overrides, resolve_config, with_params
from ct_triage.errors import ConfigError
from ct_triage.learn import ModelParams


class TestResolveConfig:
    def test_defaults(self):
        config = resolve_config({}, environ={})
        assert config.seed == 1234
        assert config.folds == 5
        assert config.jobs == 1
        assert config.params == ModelParams()
        assert config.grid == DEFAULT_GRID

    def test_precedence(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"seed": 2, "folds": 4, "n_estimators": 20}))
        environ = {"TRIAGE_SEED": "1", "TRIAGE_FOLDS": "3", "TRIAGE_JOBS": "2", "TRIAGE_MAX_DEPTH": "3"}
        config = resolve_config({"seed": 3}, path, environ)
        assert config.seed == 3
        assert config.folds == 4
        assert config.jobs == 2
        assert config.params.n_estimators == 20
        assert config.params.max_depth == 3

    def test_nested_sections_merge(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"extract": {"shell_depth_mm": 10.0}, "grid": {"n_estimators": [5]}}))
        config = resolve_config({}, path, {})
        assert config.extract.shell_depth_mm == 10.0
        assert config.extract.bronchial_margin_mm == 10.0
        assert config.grid == {"n_estimators": [5]}

    def test_mask_group_aliases(self):
        config = resolve_config({"mask_group": ["texture", "OpacityTexture", "shape"]}, environ={})
        assert config.mask_groups == ("OpacityTexture", "ShapeLocation")

    @pytest.mark.parametrize(
        "flags",
        [
            {"colour": "blue"},
            {"mask_group": ["Nope"]},
            {"folds": 1},
            {"jobs": 0},
            {"model": "svm"},
            {"learning_rate": -1.0},
        ],
    )
    def test_rejections(self, flags):
        with pytest.raises(ConfigError):
            resolve_config(flags, environ={})

    def test_bad_environment_value(self):
        with pytest.raises(ConfigError):
            env_overrides({"TRIAGE_SEED": "many"})

    def test_config_file_must_be_an_object(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text("[1, 2]")
        with pytest.raises(ConfigError):
            resolve_config({}, path, {})


class TestProvenance:
    def test_execution_settings_left_out(self):
        a = resolve_config({"jobs": 1, "verbose": False}, environ={}).provenance()
        b = resolve_config({"jobs": 8, "verbose": True}, environ={}).provenance()
        assert a == b
        assert "jobs" not in a["config"]
        assert a["schema_version"] == "1"
        assert a["config"]["params"]["model"] == "adaboost-dt"

    def test_with_params(self):
        config = RunConfig()
        changed = with_params(config, ModelParams(model="rf"))
        assert changed.params.model == "rf"
        assert config.params.model == "adaboost-dt"
