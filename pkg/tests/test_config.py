import json

import pytest

from continual_merge.config import ConfigLoader, RunConfig, create_run_config
from continual_merge.errors import ConfigurationError


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in RunConfig.model_fields:
        monkeypatch.delenv("CMERGE_" + name.upper(), raising=False)


class TestRunConfig:
    def test_desk_scale_defaults(self):
        config = RunConfig()
        assert (config.num_tasks, config.classes_per_task, config.input_dim) == (4, 3, 16)
        assert (config.train_per_class, config.test_per_class) == (100, 200)
        assert (config.subspace_k, config.gamma, config.beta) == (3, 1.0, 0.99)
        assert config.seeds_per_class == 5
        assert config.base_seed == 42
        assert config.layer_sizes == [16, 32, 32, 32]
        assert (config.tta_steps, config.tta_lr) == (50, 5e-3)

    def test_rank_bounded_by_layers(self):
        with pytest.raises(ValueError):
            RunConfig(input_dim=4, rank=5)

    def test_gated_layers_bounded_by_backbone_depth(self):
        config = RunConfig(gated_layers=[0, 2])
        assert len(config.layer_sizes) - 1 == 3
        with pytest.raises(ValueError, match="outside the 3 backbone layers"):
            RunConfig(gated_layers=[3])
        with pytest.raises(ValueError):
            config.with_overrides(gated_layers=[-1])

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            RunConfig(methods=["mingle", "fisher"])

    def test_unknown_field(self):
        with pytest.raises(ValueError):
            RunConfig(learning_rate=0.1)

    def test_provenance_leaves_out_execution_details(self):
        provenance = RunConfig(jobs=8, output_dir="elsewhere").provenance()
        assert provenance == RunConfig().provenance()
        assert "jobs" not in provenance
        assert provenance["gamma"] == 1.0

    def test_with_overrides_validates(self):
        config = RunConfig()
        assert config.with_overrides(gamma=0.25).gamma == 0.25
        assert config.gamma == 1.0
        with pytest.raises(ValueError):
            config.with_overrides(beta=1.0)


class TestConfigLoader:
    def test_json_file(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"rank": 2, "methods": ["ta", "mingle"]}))
        config = ConfigLoader().load_file(path).build()
        assert config.rank == 2
        assert config.methods == ["ta", "mingle"]

    def test_yaml_file_relative_to_config_dir(self, tmp_path):
        (tmp_path / "run.yaml").write_text("gamma: 0.5\nprojection: hard\n")
        config = ConfigLoader(str(tmp_path)).load_file("run.yaml").build()
        assert config.gamma == 0.5
        assert config.projection == "hard"

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError):
            ConfigLoader().load_file(tmp_path / "absent.json")

    def test_unsupported_format(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text("rank = 2\n")
        with pytest.raises(ConfigurationError):
            ConfigLoader().load_file(path)

    def test_non_mapping_file(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text("[1, 2]")
        with pytest.raises(ConfigurationError):
            ConfigLoader().load_file(path)

    def test_environment_overrides(self, monkeypatch):
        monkeypatch.setenv("CMERGE_RANK", "3")
        monkeypatch.setenv("CMERGE_GAMMA", "0.25")
        monkeypatch.setenv("CMERGE_FIXED_GATES", "true")
        monkeypatch.setenv("CMERGE_METHODS", "ta")
        monkeypatch.setenv("CMERGE_NOISE_SIGMAS", "0.1,0.5")
        config = ConfigLoader().build()
        assert config.rank == 3
        assert config.gamma == 0.25
        assert config.fixed_gates is True
        assert config.methods == ["ta"]
        assert config.noise_sigmas == [0.1, 0.5]

    def test_precedence(self, tmp_path, monkeypatch):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"rank": 2, "gamma": 2.0, "tta_steps": 7}))
        monkeypatch.setenv("CMERGE_GAMMA", "3.0")
        monkeypatch.setenv("CMERGE_TTA_STEPS", "9")
        config = ConfigLoader().load_file(path).build({"tta_steps": 11, "rank": None})
        assert config.rank == 2
        assert config.gamma == 3.0
        assert config.tta_steps == 11

    def test_dotenv_file(self, tmp_path, monkeypatch):
        (tmp_path / ".env").write_text("CMERGE_SUBSPACE_K=2\n")
        loader = ConfigLoader(str(tmp_path)).load_env()
        assert loader.env_loaded
        assert loader.build().subspace_k == 2

    def test_invalid_value_names_key(self):
        with pytest.raises(ConfigurationError) as info:
            ConfigLoader().build({"beta": 1.5})
        assert info.value.details["config_key"] == "beta"

    def test_get_falls_back_to_environment(self, monkeypatch):
        monkeypatch.setenv("CMERGE_ORDERS", "5")
        loader = ConfigLoader().set("rank", 2)
        assert loader.get("rank") == 2
        assert loader.get("orders") == 5
        assert loader.get("missing", "x") == "x"

    def test_factory(self):
        assert create_run_config(orders=3).orders == 3
