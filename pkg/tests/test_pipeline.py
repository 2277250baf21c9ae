import pytest

from drivlab.config import PipelineConfig, parse_budgets, parse_kv_file
from drivlab.errors import MissingArtifactError, ValidationError
from drivlab.pipeline import derived_seed, run_stage


class TestKvFile:
    def test_parses_comments_and_blanks(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("# header\n\nepisodes = 20  # inline\nseed=3\n")
        assert parse_kv_file(path) == {"episodes": "20", "seed": "3"}

    def test_duplicate_key(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("seed = 1\nseed = 2\n")
        with pytest.raises(ValidationError, match="duplicate"):
            parse_kv_file(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            parse_kv_file(tmp_path / "absent.txt")

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("just a line\n")
        with pytest.raises(ValidationError, match="key = value"):
            parse_kv_file(path)


class TestBudgets:
    def test_grid(self):
        grid = parse_budgets("0.01:1.0:0.01")
        assert len(grid) == 100
        assert grid[0] == 0.01 and grid[-1] == 1.0
        assert 0.25 in grid

    def test_comma_list(self):
        assert parse_budgets("0.25, 0.5") == [0.25, 0.5]

    def test_rejects_out_of_range(self):
        for bad in ("0:1:0.1", "0.5:2.0:0.1", "1.5", "abc"):
            with pytest.raises(ValidationError):
                parse_budgets(bad)


class TestPipelineConfig:
    def test_defaults_valid(self):
        cfg = PipelineConfig()
        assert cfg.episodes == 1000 and cfg.episode_length == 300
        assert cfg.threshold_names() == ["middle"]

    def test_all_thresholds(self):
        cfg = PipelineConfig(thresholds="all")
        assert cfg.threshold_names() == ["tight", "middle", "loose"]

    def test_episode_length_floor(self):
        with pytest.raises(ValidationError, match="k \\+ m \\+ 1"):
            PipelineConfig(episode_length=10)

    def test_unknown_key(self):
        with pytest.raises(ValidationError, match="unknown config keys"):
            PipelineConfig.from_mapping({"velocity": "1"})


class TestStages:
    def test_unknown_stage(self, tmp_path):
        with pytest.raises(ValidationError, match="unknown stage"):
            run_stage("polish", PipelineConfig(), tmp_path)

    def test_stage_requires_upstream(self, tmp_path):
        with pytest.raises(MissingArtifactError, match="episodes.txt"):
            run_stage("split", PipelineConfig(), tmp_path)


class TestDerivedSeed:
    def test_deterministic_and_distinct(self):
        assert derived_seed(0, "gen") == derived_seed(0, "gen")
        assert derived_seed(0, "gen") != derived_seed(0, "split")
        assert derived_seed(0, "gen") != derived_seed(1, "gen")
        assert 0 <= derived_seed(123, "driver") < 2**63
