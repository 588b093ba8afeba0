"""Unit tests for the experiment harness and CLI."""

import numpy as np
import pytest

from nfdlab import cli
from nfdlab.errors import ConfigError, DomainError, NfdlabError
from nfdlab.harness import (
    CSV_COLUMNS,
    EXPERIMENTS,
    SCHEMA_VERSION,
    _DEFAULTS,
    _RUNNERS,
    ExperimentSpec,
    ResultRecord,
    config_hash,
    parse_config,
    run,
    serialize_config,
    slope_fit,
    write_records,
)
from nfdlab.numerics import Rng


CHEAP_GAP_OPTIONS = {
    "particles": 400,
    "steps_grid": [4, 8, 16],
    "k_max": 1,
    "eta_c": 0.5,
}


class TestExperimentRegistry:
    def test_registry_consistency(self):
        assert set(EXPERIMENTS) == set(_RUNNERS) == set(_DEFAULTS)

    def test_every_claim_nonempty(self):
        assert all(claim.strip() for claim in EXPERIMENTS.values())


class TestExperimentSpec:
    def test_unknown_experiment(self):
        with pytest.raises(ConfigError) as exc:
            ExperimentSpec(experiment="warp_drive")
        assert "warp_drive" in str(exc.value)

    def test_empty_seeds(self):
        with pytest.raises(ConfigError):
            ExperimentSpec(experiment="gradcheck", seeds=[])

    def test_unknown_option_names_key(self):
        with pytest.raises(ConfigError) as exc:
            ExperimentSpec(experiment="gradcheck", options={"epz": 1e-6})
        assert "epz" in str(exc.value)

    def test_defaults_merged(self):
        spec = ExperimentSpec(experiment="gradcheck", options={"n": 4})
        assert spec.options["n"] == 4
        assert spec.options["L"] == _DEFAULTS["gradcheck"]["L"]

    def test_option_type_errors(self):
        with pytest.raises(ConfigError):
            ExperimentSpec(experiment="gia", options={"depth_scaled": 1})
        with pytest.raises(ConfigError):
            ExperimentSpec(experiment="gia", options={"depths": 4})
        with pytest.raises(ConfigError):
            ExperimentSpec(experiment="gia", options={"activation": 3})

    def test_int_to_float_coercion(self):
        spec = ExperimentSpec(experiment="gia", options={"T": 1})
        assert spec.options["T"] == 1.0
        assert isinstance(spec.options["T"], float)


class TestConfigFiles:
    def test_round_trip(self, tmp_path):
        spec = ExperimentSpec(
            experiment="gia",
            seeds=[0, 1],
            options={"depths": [4, 8], "depth_scaled": False, "T": 0.5},
        )
        path = tmp_path / "gia.toml"
        path.write_text(serialize_config(spec))
        back = parse_config(path)
        assert back.experiment == spec.experiment
        assert back.seeds == spec.seeds
        assert back.options == spec.options
        assert config_hash(back) == config_hash(spec)

    def test_comments_and_whitespace(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text(
            '# a comment\nexperiment = "gradcheck"  # trailing\n\nseeds = [3]\n'
        )
        spec = parse_config(path)
        assert spec.experiment == "gradcheck" and spec.seeds == [3]

    def test_duplicate_key(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text('experiment = "gradcheck"\nn = 4\nn = 8\n')
        with pytest.raises(ConfigError) as exc:
            parse_config(path)
        assert "duplicate" in str(exc.value)

    def test_missing_experiment(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text("n = 4\n")
        with pytest.raises(ConfigError):
            parse_config(path)

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text('experiment = "gradcheck"\njust a line\n')
        with pytest.raises(ConfigError):
            parse_config(path)

    def test_bad_schema_version(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text('experiment = "gradcheck"\nschema_version = 99\n')
        with pytest.raises(ConfigError):
            parse_config(path)

    def test_scalar_seed_promoted(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text('experiment = "gradcheck"\nseeds = 7\n')
        assert parse_config(path).seeds == [7]


class TestSlopeFit:
    def test_exact_line(self):
        recs = [{"x": x, "y": 3.0 * x} for x in (1.0, 2.0, 4.0, 8.0)]
        slope, stderr = slope_fit(recs, "x", "y")
        assert slope == pytest.approx(1.0, abs=1e-12)
        assert stderr == pytest.approx(0.0, abs=1e-12)

    def test_inverse_law(self):
        recs = [{"x": x, "y": 5.0 / x} for x in (1.0, 2.0, 4.0, 8.0)]
        slope, _ = slope_fit(recs, "x", "y")
        assert slope == pytest.approx(-1.0, abs=1e-12)

    def test_needs_three_points(self):
        with pytest.raises(DomainError):
            slope_fit([{"x": 1, "y": 1}, {"x": 2, "y": 2}], "x", "y")

    def test_positive_domain(self):
        recs = [{"x": x, "y": x - 2.0} for x in (1.0, 2.0, 4.0)]
        with pytest.raises(DomainError):
            slope_fit(recs, "x", "y")

    def test_noisy_slope_recovery(self):
        rng = Rng(0, 0)
        xs = np.array([2.0**k for k in range(10)])
        ys = 4.0 * xs**-0.5 * np.exp(0.02 * rng.standard_normal(10))
        recs = [{"x": float(x), "y": float(y)} for x, y in zip(xs, ys)]
        slope, stderr = slope_fit(recs, "x", "y")
        assert slope == pytest.approx(-0.5, abs=0.05)
        assert stderr < 0.05

    def test_objects_supported(self):
        recs = [
            ResultRecord("gradcheck", 0, "m", v, L=L)
            for L, v in [(1, 2.0), (2, 4.0), (4, 8.0)]
        ]
        slope, _ = slope_fit(recs, "L", "value")
        assert slope == pytest.approx(1.0, abs=1e-12)


class TestRunAndCsv:
    def test_records_csv_reproducible(self, tmp_path):
        path = tmp_path / "out.csv"
        blobs = []
        for _ in range(2):
            spec = ExperimentSpec(
                experiment="correction_gap",
                seeds=[0],
                out=str(path),
                options=dict(CHEAP_GAP_OPTIONS),
            )
            run(spec)
            blobs.append(path.read_bytes())
        assert blobs[0] == blobs[1]

    def test_csv_layout(self, tmp_path):
        spec = ExperimentSpec(
            experiment="correction_gap",
            seeds=[0],
            options=dict(CHEAP_GAP_OPTIONS),
        )
        records = run(spec)
        path = tmp_path / "out.csv"
        write_records(records, spec, path)
        lines = path.read_text().splitlines()
        assert lines[0] == ",".join(CSV_COLUMNS)
        assert len(lines) == len(records) + 1
        first = lines[1].split(",")
        assert first[0] == str(SCHEMA_VERSION)
        assert first[1] == config_hash(spec)
        assert first[2] == "correction_gap"

    def test_gap_slope_near_inverse(self):
        spec = ExperimentSpec(
            experiment="correction_gap",
            seeds=[0],
            options={**CHEAP_GAP_OPTIONS, "particles": 4000},
        )
        records = run(spec)
        slopes = [r.value for r in records if r.metric == "gap_slope"]
        assert len(slopes) == 1 and -2.0 < slopes[0] < -0.3

    def test_workers_validation(self):
        spec = ExperimentSpec(experiment="gradcheck")
        with pytest.raises(ConfigError):
            run(spec, workers=0)

    def test_figure_scale_whitelist(self):
        spec = ExperimentSpec(experiment="gradcheck")
        with pytest.raises(ConfigError):
            run(spec, figure_scale=True)


class TestCli:
    def test_config_experiment_mismatch(self, tmp_path, capsys):
        path = tmp_path / "c.toml"
        path.write_text('experiment = "gradcheck"\n')
        rc = cli.main(["correction_gap", "--config", str(path)])
        assert rc == 2
        assert "gradcheck" in capsys.readouterr().err

    def test_config_error_exit_code(self, tmp_path, capsys):
        path = tmp_path / "c.toml"
        path.write_text('experiment = "correction_gap"\nbogus = 1\n')
        rc = cli.main(["correction_gap", "--config", str(path)])
        assert rc == 2
        assert "bogus" in capsys.readouterr().err

    def test_successful_run_writes_csv(self, tmp_path, capsys):
        path = tmp_path / "c.toml"
        path.write_text(
            'experiment = "correction_gap"\nseeds = [0]\n'
            "particles = 400\nsteps_grid = [4, 8, 16]\nk_max = 1\neta_c = 0.5\n"
        )
        out = tmp_path / "out.csv"
        rc = cli.main(
            ["correction_gap", "--config", str(path), "--out", str(out)]
        )
        assert rc == 0
        msg = capsys.readouterr().out
        assert "records" in msg and str(out) in msg
        lines = out.read_text().splitlines()
        assert lines[0] == ",".join(CSV_COLUMNS) and len(lines) > 1

    def test_seed_override(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text(
            'experiment = "correction_gap"\nseeds = [0, 1]\n'
            "particles = 400\nsteps_grid = [4, 8, 16]\nk_max = 1\neta_c = 0.5\n"
        )
        out = tmp_path / "out.csv"
        rc = cli.main(
            [
                "correction_gap", "--config", str(path),
                "--seed", "5", "--out", str(out),
            ]
        )
        assert rc == 0
        body = out.read_text().splitlines()[1:]
        assert all(row.split(",")[3] == "5" for row in body)

    def test_unknown_experiment_rejected_by_parser(self):
        with pytest.raises(SystemExit):
            cli.build_parser().parse_args(["warp_drive"])
