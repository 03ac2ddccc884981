"""CLI tests: config handling, command round-trips, determinism, viz."""

import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from rockit import cli
from rockit.simscene import load_dataset, manifest_hash


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Tiny end-to-end workspace: datasets, a short training run."""
    root = tmp_path_factory.mktemp("cli")

    def write(name, payload):
        p = root / name
        p.write_text(json.dumps(payload), encoding="utf-8")
        return str(p)

    gen_train = write("gen_train.json", {
        "seed": 4, "out": str(root / "ds_train"),
        "dataset": {"n_scenes": 2, "pairs_per_scene": 2, "n_objects": 2},
    })
    gen_eval = write("gen_eval.json", {
        "seed": 4, "out": str(root / "ds_eval"),
        "dataset": {"n_scenes": 2, "pairs_per_scene": 2, "n_objects": 2, "seed": 777},
    })
    train = write("train.json", {
        "seed": 4, "out": str(root / "run"),
        "train": {"dataset": str(root / "ds_train" / "manifest.json")},
        "model": {"enc_channels": [6, 8], "feat_dim": 8, "c1_intra": 6, "c2_inter": 2},
        "loss": {"queries_per_object": 6, "negs_per_query": 8},
        "optimizer": {"epochs": 2, "lr": 0.001},
    })
    eval_cfg = write("eval.json", {
        "seed": 4, "out": str(root / "evalout"),
        "eval": {"dataset": str(root / "ds_eval" / "manifest.json"),
                 "checkpoint": str(root / "run" / "checkpoint.rocktnsr"),
                 "topk": 128, "r_thr": 0.5},
    })
    pose_cfg = write("pose.json", {
        "seed": 4, "out": str(root / "poseout"),
        "pose": {"dataset": str(root / "ds_eval" / "manifest.json"),
                 "checkpoint": str(root / "run" / "checkpoint.rocktnsr"),
                 "n_templates": 6, "max_pairs_per_scene": 1, "absent_queries": 4,
                 "r_thr": 0.5},
    })
    viz_cfg = write("viz.json", {
        "seed": 4, "out": str(root / "vizout"),
        "eval": {"r_thr": 0.5},
        "viz": {"dataset": str(root / "ds_eval" / "manifest.json"),
                "checkpoint": str(root / "run" / "checkpoint.rocktnsr")},
    })
    assert cli.main(["gen", "--config", gen_train]) == 0
    assert cli.main(["gen", "--config", gen_eval]) == 0
    assert cli.main(["train", "--config", train]) == 0
    return {
        "root": root, "gen_train": gen_train, "gen_eval": gen_eval,
        "train": train, "eval": eval_cfg, "pose": pose_cfg, "viz": viz_cfg,
    }


class TestConfig:
    def test_dump_defaults_schema(self, capsys):
        assert cli.main(["config", "--dump-defaults"]) == 0
        data = json.loads(capsys.readouterr().out)
        for section in ("seed", "out", "dataset", "model", "loss", "optimizer",
                        "eval", "pose", "ablation", "viz", "train", "augment"):
            assert section in data

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{"no_such_section": 1}')
        assert cli.main(["gen", "--config", str(p)]) == 2

    def test_bad_json_rejected(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        assert cli.main(["gen", "--config", str(p)]) == 2

    def test_missing_dataset_is_config_error(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps({"out": str(tmp_path / "o")}))
        assert cli.main(["train", "--config", str(p)]) == 2

    def test_seed_override(self, tmp_path):
        cfg = cli.load_config(None, seed=99)
        assert cfg["seed"] == 99
        assert cfg["dataset"]["seed"] == 99


class TestGen:
    def test_manifest_valid_and_loadable(self, workspace):
        manifest = workspace["root"] / "ds_train" / "manifest.json"
        assert manifest.exists()
        ds = load_dataset(manifest)
        assert len(ds.scenes) == 2
        assert len(ds.all_pairs()) == 4

    def test_rerun_same_hash(self, workspace, tmp_path):
        cfg = json.loads((workspace["root"] / "ds_train" / "config.resolved.json").read_text())
        cfg["out"] = str(tmp_path / "again")
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps(cfg))
        assert cli.main(["gen", "--config", str(p)]) == 0
        h1 = manifest_hash(workspace["root"] / "ds_train" / "manifest.json")
        h2 = manifest_hash(tmp_path / "again" / "manifest.json")
        assert h1 == h2

    def test_resolved_config_written(self, workspace):
        snap = workspace["root"] / "ds_train" / "config.resolved.json"
        data = json.loads(snap.read_text())
        assert data["dataset"]["n_scenes"] == 2


class TestTrain:
    def test_outputs_exist(self, workspace):
        run = workspace["root"] / "run"
        assert (run / "checkpoint.rocktnsr").exists()
        assert (run / "checkpoint.rocktnsr.json").exists()
        assert (run / "metrics.ndjson").exists()


class TestEvalMatch:
    def test_report_written(self, workspace):
        assert cli.main(["eval-match", "--config", workspace["eval"]]) == 0
        report = json.loads((workspace["root"] / "evalout" / "match_report.json").read_text())
        assert "tasks" in report
        assert report["n_pairs"] == 4
        assert (workspace["root"] / "evalout" / "match_report.txt").exists()

    def test_rerun_byte_identical(self, workspace):
        out = workspace["root"] / "evalout" / "match_report.json"
        first = out.read_bytes()
        assert cli.main(["eval-match", "--config", workspace["eval"]]) == 0
        assert out.read_bytes() == first


class TestEvalPose:
    def test_report_written(self, workspace):
        assert cli.main(["eval-pose", "--config", workspace["pose"]]) == 0
        report = json.loads((workspace["root"] / "poseout" / "pose_report.json").read_text())
        assert "overall" in report and "absent" in report

    def test_rerun_byte_identical(self, workspace):
        out = workspace["root"] / "poseout" / "pose_report.json"
        first = out.read_bytes()
        assert cli.main(["eval-pose", "--config", workspace["pose"]]) == 0
        assert out.read_bytes() == first


class TestAblate:
    def test_rthr_suite(self, workspace):
        assert cli.main(["ablate", "--config", workspace["eval"]]) == 0
        table = json.loads((workspace["root"] / "evalout" / "ablation_rthr.json").read_text())
        assert table["suite"] == "rthr"
        assert [row["r_thr"] for row in table["rows"]] == [0.0, 1.5, 3.0, 4.5]
        for row in table["rows"]:
            assert "syn_real_mma5" in row and "real_real_mma5" in row

    def test_matching_suite(self, workspace, tmp_path):
        cfg = json.loads(open(workspace["eval"]).read())
        cfg["out"] = str(tmp_path / "m")
        cfg["ablation"] = {"suite": "matching"}
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps(cfg))
        assert cli.main(["ablate", "--config", str(p)]) == 0
        table = json.loads((tmp_path / "m" / "ablation_matching.json").read_text())
        assert {row["method"] for row in table["rows"]} == {"direct", "objectness_filtered"}


class TestViz:
    def test_outputs(self, workspace):
        assert cli.main(["viz", "--config", workspace["viz"]]) == 0
        out = workspace["root"] / "vizout"
        heat = Image.open(out / "confidence_frame1.png")
        assert heat.size == (64, 64)
        lines = Image.open(out / "matches_object1.png")
        assert lines.size == (128, 64)  # (Wa+Wb, Ha)

    def test_heatmap_max_at_argmax(self, workspace):
        from rockit.model import KeypointNet
        from rockit.viz import confidence_overlay

        net, _, _ = KeypointNet.load(workspace["root"] / "run" / "checkpoint.rocktnsr")
        ds = load_dataset(workspace["root"] / "ds_eval" / "manifest.json")
        pair = ds.all_pairs()[0]
        out = net.forward(pair.frame1.image, norm_mode="per_image")
        conf = out.confidence.value
        img = confidence_overlay(pair.frame1.image, conf, alpha=1.0)
        arr = np.asarray(img).astype(float)
        redness = arr[..., 0] - arr[..., 2]
        r, c = np.unravel_index(np.argmax(conf), conf.shape)
        assert redness[r, c] == redness.max()

    def test_empty_match_lines(self):
        from rockit.match import MatchSet
        from rockit.viz import match_lines

        rng = np.random.default_rng(0)
        img = rng.uniform(0, 1, (3, 32, 48)).astype(np.float32)
        out = match_lines(img, img, np.zeros((0, 2)), np.zeros((0, 2)),
                          MatchSet(pairs=[], method="direct"))
        assert out.size == (96, 32)


class TestConsoleEntryPoint:
    def test_module_invocation(self):
        proc = subprocess.run(
            [sys.executable, "-m", "rockit.cli", "config", "--dump-defaults"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0
        json.loads(proc.stdout)
