from pathlib import Path
from tests.test_data import LoggingSetup
from em_superres import FoldMask, Settings, load_dictionary, load_views, read_volume, save_fold_mask
from em_superres.cli import (
    EXIT_CONFIG,
    EXIT_CONVERGENCE,
    EXIT_DATA,
    PhantomRun,
    build_config,
    build_parser,
    main,
    parse_config,
    rerun,
    run,
)
import numpy as np
import pytest
import json

PHANTOM = {"spec": {"dims": [12, 12, 12], "n_membranes": 4, "background_value": 0.2, "seed": 3}}
PATCH = {"h": 3, "v": 3, "stride": [1, 1, 3]}
GEOMETRY = {"layers_per_section": 3, "h": 3, "v": 3}
RECON = {"recover_stride": [1, 1, 3], "smooth_stride": [1, 1, 3], "lambda_recover": 0.05, "lambda_smooth": 0.05}


def _write_config(path: Path, config: dict) -> str:
    path.write_text(json.dumps(config))
    return str(path)


class TestCli(LoggingSetup):
    @pytest.fixture
    def pipeline(self, tmp_path) -> Path:
        out = tmp_path / "run"
        assert main(["phantom", "--config", _write_config(tmp_path / "phantom.json", PHANTOM), "--out", str(out)]) == 0

        train = {"out": str(out), "volume": str(out / "truth.json"), "patch": PATCH, "learn": {"k": 54, "n_epochs": 2}}
        assert run("train", train).exit_code in (0, 4)

        simulate = {
            "out": str(out),
            "volume": str(out / "truth.json"),
            "geometry": GEOMETRY,
            "noise": {"snr_db": 30.0, "seed": 1},
        }
        assert run("simulate", simulate).exit_code == 0

        reconstruct = {
            "out": str(out),
            "views": str(out / "views"),
            "dictionary": str(out / "dictionary.json"),
            "recon": RECON,
        }
        assert run("reconstruct", reconstruct).exit_code in (0, 4)
        return out

    def test_pipeline_artifacts(self, pipeline):
        truth = read_volume(pipeline / "truth.json")
        assert truth.dims == (12, 12, 12)
        assert (pipeline / "truth.spec.json").exists()

        dictionary = load_dictionary(pipeline / "dictionary.json")
        assert dictionary.k == 54
        assert dictionary.spec.extent == (3, 3, 3)

        views = load_views(pipeline / "views")
        assert views.n_sections == 4
        assert views.snr_db == 30.0

        assert read_volume(pipeline / "recon.json").dims == truth.dims
        report = json.loads((pipeline / "recon.report.json").read_text())
        assert report["patches_total"] == 10 * 10 * 4

        manifest = json.loads((pipeline / "reconstruct.manifest.json").read_text())
        assert manifest["command"] == "reconstruct"
        assert str(pipeline / "recon.raw") in manifest["outputs"]
        assert set(manifest["inputs"]) == {str(pipeline / "views"), str(pipeline / "dictionary.json")}

    def test_evaluate(self, pipeline):
        config = {
            "out": str(pipeline),
            "truth": str(pipeline / "truth.json"),
            "candidates": {"sparse": str(pipeline / "recon.json")},
            "views": str(pipeline / "views"),
            "baselines": ["cubic", "backprojection", "section_replicate"],
        }
        assert run("evaluate", config).exit_code == 0

        metrics = json.loads((pipeline / "metrics.json").read_text())
        assert set(metrics) == {"sparse", "cubic", "backprojection", "section_replicate"}
        for report in metrics.values():
            assert -1.0 <= report["volume_ndp"] <= 1.0
        assert (pipeline / "truth_xz.png").exists()
        assert (pipeline / "cubic_xz.png").exists()

        self_config = {"out": str(pipeline), "truth": str(pipeline / "truth.json"), "render": False, "name": "self"}
        self_config["candidates"] = {"truth": str(pipeline / "truth.json")}
        assert run("evaluate", self_config).exit_code == 0
        assert json.loads((pipeline / "self.json").read_text())["truth"]["volume_ndp"] == pytest.approx(1.0)

    def test_rerun(self, pipeline):
        result = rerun(pipeline / "reconstruct.manifest.json")

        assert result.error is None
        assert result.exit_code in (0, 4)

    def test_detect_folds(self, pipeline):
        assert main(["detect-folds", "--views", str(pipeline / "views"), "--out", str(pipeline)]) == 0
        assert (pipeline / "folds.json").exists()
        assert (pipeline / "folds.raw").exists()

    def test_configuration_errors(self, tmp_path):
        result = run("train", {"out": str(tmp_path), "volume": "missing.json", "bogus": 1})
        assert result.exit_code == EXIT_CONFIG
        assert result.error["type"] == "ConfigurationError"

        assert run("unknown", {}).exit_code == EXIT_CONFIG
        assert main(["train", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_data_errors(self, tmp_path):
        out = tmp_path / "run"
        result = run("simulate", {"out": str(out), "volume": str(tmp_path / "missing.json")})

        assert result.exit_code == EXIT_DATA
        assert result.error["type"] == "MalformedHeaderError"
        assert not (out / "views").exists()
        assert not (out / "simulate.manifest.json").exists()

    def test_config_precedence(self, tmp_path, monkeypatch):
        monkeypatch.setenv("EM_SUPERRES_THREADS", "3")
        settings = Settings.from_env()
        assert settings.threads == 3

        config_path = _write_config(tmp_path / "train.json", {"threads": 2, "learn": {"lambda": 0.1, "k": 10}})
        args = build_parser().parse_args(["train", "--config", config_path, "--lambda", "0.3", "--seed", "5"])
        config = build_config("train", args, settings)

        assert config["threads"] == 2
        assert config["seed"] == 5
        assert config["learn"] == {"lambda": 0.3, "k": 10, "seed": 5}

        args = build_parser().parse_args(["train", "--threads", "4"])
        assert build_config("train", args, settings)["threads"] == 4
        assert build_config("train", build_parser().parse_args(["train"]), settings)["threads"] == 3

    def test_seed_from_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv("EM_SUPERRES_SEED", "7")
        settings = Settings.from_env()

        phantom = parse_config("phantom", build_config("phantom", build_parser().parse_args(["phantom"]), settings))
        assert phantom.seed == 7
        assert phantom.spec.seed == 7

        args = build_parser().parse_args(["simulate", "--volume", "truth.json"])
        assert parse_config("simulate", build_config("simulate", args, settings)).noise.seed == 7

        args = build_parser().parse_args(["train", "--volume", "truth.json"])
        assert parse_config("train", build_config("train", args, settings)).learn.seed == 7

        config_path = _write_config(tmp_path / "phantom.json", {"spec": {"seed": 2}})
        args = build_parser().parse_args(["phantom", "--config", config_path])
        pinned = parse_config("phantom", build_config("phantom", args, settings))
        assert pinned.seed == 7
        assert pinned.spec.seed == 2

    def test_seed_reaches_model_instances(self):
        assert PhantomRun.model_validate({"seed": 4}).spec.seed == 4
        assert PhantomRun.model_validate({"seed": 4, "spec": PhantomRun().spec}).spec.seed == 4
        assert PhantomRun().spec.seed == 0

    def test_views_without_normal_angle(self, tmp_path):
        out = tmp_path / "run"
        assert run("phantom", {"out": str(out), **PHANTOM}).exit_code == 0
        simulate = {
            "out": str(out),
            "volume": str(out / "truth.json"),
            "geometry": {**GEOMETRY, "angles": ["+45x", "-45x"]},
            "name": "tilted",
        }
        assert run("simulate", simulate).exit_code == 0

        result = run("detect-folds", {"out": str(out), "views": str(out / "tilted")})
        assert result.exit_code == EXIT_DATA
        assert result.error["type"] == "MissingAngleError"
        assert not (out / "folds.json").exists()
        assert not (out / "detect-folds.manifest.json").exists()

        evaluate = {
            "out": str(out),
            "truth": str(out / "truth.json"),
            "views": str(out / "tilted"),
            "baselines": ["cubic"],
            "render": False,
        }
        result = run("evaluate", evaluate)
        assert result.exit_code == EXIT_DATA
        assert result.error["type"] == "MissingAngleError"
        assert not (out / "metrics.json").exists()

    def test_uncovered_voxels_exit_code(self, pipeline):
        save_fold_mask(FoldMask(masks=np.ones((4, 12, 12), dtype=bool)), pipeline / "all_folded")
        config = {
            "out": str(pipeline),
            "views": str(pipeline / "views"),
            "dictionary": str(pipeline / "dictionary.json"),
            "folds": str(pipeline / "all_folded.json"),
            "recon": RECON,
            "name": "folded",
        }
        result = run("reconstruct", config)

        assert result.exit_code == EXIT_CONVERGENCE
        assert result.error is None
        assert read_volume(pipeline / "folded.json").dims == (12, 12, 12)
        report = json.loads((pipeline / "folded.report.json").read_text())
        assert report["uncovered_voxels"] == 12 * 12 * 12
        manifest = json.loads((pipeline / "reconstruct.manifest.json").read_text())
        assert manifest["warnings"]
