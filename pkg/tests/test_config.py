import pytest

from aptad.config import ConfigError, RunConfig, format_config, load_config, parse_config


class TestParse:
    def test_defaults(self):
        cfg = RunConfig()
        assert (cfg.image_size, cfg.shots, cfg.n_test, cfg.t, cfg.tau) == (64, 1, 50, 8, 0.07)
        assert (cfg.epochs, cfg.meta_rounds, cfg.lam, cfg.k_radius) == (100, 5, 1.0, 1.5)
        assert cfg.normal_template == "this is an object without defect"
        assert cfg.abnormal_template == "this is an object with defect"

    def test_values_and_comments(self):
        cfg = parse_config("# run\nseed = 7\nenable_so = false  # ablation\ntap_layers = 1, 3\nsigma_value=0.5\n")
        assert cfg.seed == 7 and cfg.enable_so is False
        assert cfg.tap_layers == (1, 3) and cfg.sigma_value == 0.5

    def test_lambda_alias(self):
        assert parse_config("lambda = 0.25").lam == 0.25

    def test_round_trip(self):
        cfg = RunConfig(seed=3, enable_la=False, lam=0.5, tap_layers=(0, 3), normal_template="object good")
        assert parse_config(format_config(cfg)) == cfg
        assert "lambda = 0.5" in format_config(cfg)

    def test_load(self, tmp_path):
        (tmp_path / "c.cfg").write_text("epochs = 10\nmeta_rounds = 2\n")
        assert load_config(tmp_path / "c.cfg").epochs_per_meta_round == 5


class TestRejects:
    @pytest.mark.parametrize("text,line", [
        ("seed = 1\nwidth = 3\n", 2),
        ("seed = one\n", 1),
        ("\n\nenable_so = maybe\n", 3),
        ("seed = 1\njust words\n", 2),
        ("tau = nan\n", 1),
    ])
    def test_line_numbers(self, text, line):
        with pytest.raises(ConfigError, match=f"line {line}"):
            parse_config(text)

    @pytest.mark.parametrize("text,line", [
        ("seed = 1\nlambda = -1\n", 2),
        ("t = 17\n", 1),
        ("seed = 2\n\nepochs = 7\n", 3),
        ("anomaly_fraction_cap = 0\n", 1),
    ])
    def test_out_of_range(self, text, line):
        with pytest.raises(ConfigError, match=f"line {line}"):
            parse_config(text)

    def test_direct_construction(self):
        with pytest.raises(ConfigError):
            RunConfig(image_size=60)
        with pytest.raises(ConfigError):
            RunConfig(tap_layers=(1, 1))
        with pytest.raises(ConfigError):
            RunConfig(calibration="global")
