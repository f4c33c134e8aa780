import pytest

from duetsynth.config import (
    MetricOptions,
    RunConfig,
    format_scale_range,
    load_config,
    parse_scale_range,
    save_config,
)
from duetsynth.data import DatasetSpec, SplitProtocol
from duetsynth.errors import ConfigError
from duetsynth.mesh import MeshWeights, SolverConfig
from duetsynth.train import TrainConfig


class TestScaleRange:
    def test_parse(self):
        kw = parse_scale_range("0.75:1.25:0.05")
        assert kw == {"scale_min": 0.75, "scale_max": 1.25, "scale_step": 0.05}

    def test_round_trip_through_spec(self):
        spec = DatasetSpec(**parse_scale_range("0.9:1.1:0.1"))
        assert format_scale_range(spec) == "0.9:1.1:0.1"

    @pytest.mark.parametrize("bad", ["0.75:1.25", "1:2:3:4", "a:b:c", ""])
    def test_malformed(self, bad):
        with pytest.raises(ConfigError):
            parse_scale_range(bad)


class TestRunConfig:
    def test_defaults(self):
        cfg = RunConfig()
        assert cfg.train.batch_size == 32
        assert cfg.train.learning_rate == 0.001
        assert cfg.train.epochs == 50
        assert cfg.split.kind == "random"
        assert cfg.net == {}
        assert cfg.metrics.n_generate == 10

    def test_unknown_net_key_rejected(self):
        with pytest.raises(ConfigError):
            RunConfig(net={"n_layers": 4})

    def test_metric_options_validated(self):
        with pytest.raises(ConfigError):
            MetricOptions(n_generate=-1)
        with pytest.raises(ConfigError):
            MetricOptions(window=2)


def full_config():
    return RunConfig(
        dataset=DatasetSpec(
            base_kinds=("hold", "lift"),
            scale_min=0.8,
            scale_max=1.2,
            scale_step=0.1,
            scaling_modes=("uniform-full-body", "single-upper-body-bone"),
            n_frames=32,
            seed=9,
            single_bones=(2, 4),
            mesh_weights=MeshWeights(laplacian=2.0, bone=5.0, temporal=0.2),
            solver=SolverConfig(max_iters=700, step_init=0.01, tol=1e-5),
        ),
        train=TrainConfig(
            batch_size=8,
            learning_rate=3e-4,
            epochs=12,
            seed=3,
            teacher_forcing=True,
            kl_warmup_epochs=4,
            val_fraction=0.25,
        ),
        split=SplitProtocol("cross-scale", test_fraction=0.3),
        net={"latent_dim": 16, "stgcn_channels": (8, 8, 8, 16, 16), "dropout": 0.0},
        metrics=MetricOptions(n_generate=5, z_samples=2, window=16, extractor_epochs=20),
        seed=42,
        out_dir="out/run7",
    )


class TestRoundTrip:
    def test_save_load_identity(self, tmp_path):
        cfg = full_config()
        path = save_config(cfg, tmp_path / "run.ini")
        loaded = load_config(path)
        assert loaded.dataset == cfg.dataset
        assert loaded.train == cfg.train
        assert loaded.split == cfg.split
        assert loaded.net == cfg.net
        assert loaded.metrics == cfg.metrics
        assert loaded.seed == cfg.seed
        assert loaded.out_dir == cfg.out_dir

    def test_defaults_round_trip(self, tmp_path):
        path = save_config(RunConfig(), tmp_path / "d.ini")
        assert load_config(path) == RunConfig()

    def test_sections_mirror_modules(self, tmp_path):
        text = save_config(full_config(), tmp_path / "r.ini").read_text()
        for section in ("[dataset]", "[mesh-retarget]", "[net]", "[train]", "[metrics]", "[cli]"):
            assert section in text

    def test_extra_lands_in_cli_section(self, tmp_path):
        path = save_config(RunConfig(), tmp_path / "e.ini", extra={"command": "train"})
        assert "command = train" in path.read_text()
        # extras are informational; loading still works
        load_config(path)


class TestLoadErrors:
    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.ini")

    def test_malformed_ini(self, tmp_path):
        p = tmp_path / "bad.ini"
        p.write_text("not an ini file\n")
        with pytest.raises(ConfigError):
            load_config(p)

    def test_unknown_net_key(self, tmp_path):
        p = tmp_path / "bad.ini"
        p.write_text("[net]\nwidth = 4\n")
        with pytest.raises(ConfigError):
            load_config(p)

    def test_non_numeric_value(self, tmp_path):
        p = tmp_path / "bad.ini"
        p.write_text("[train]\nepochs = many\n")
        with pytest.raises(ConfigError):
            load_config(p)

    def test_empty_file_gives_defaults(self, tmp_path):
        p = tmp_path / "empty.ini"
        p.write_text("")
        assert load_config(p) == RunConfig()

    def test_partial_sections_keep_other_defaults(self, tmp_path):
        p = tmp_path / "partial.ini"
        p.write_text("[train]\nepochs = 7\n")
        cfg = load_config(p)
        assert cfg.train.epochs == 7
        assert cfg.train.batch_size == 32
        assert cfg.dataset == DatasetSpec()
