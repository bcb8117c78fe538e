import csv
import json

import numpy as np
import pytest

from dbgla import pointcloud
from dbgla.cli import main, part_colors
from dbgla.network import Model, ModelConfig, predict, save_model
from dbgla.partition import PartitionConfig, build_grid
from dbgla.pointcloud import PointCloud, dense_cluster_spec, generate_scene

TINY_MODEL = {"widths": [8, 16], "num_heads": [1, 2], "head_dim": 8, "enc_dim": 8, "area_counts": [8, 2]}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"seed": 4, "model": TINY_MODEL, "train": {"iterations": 3, "eval_every": 2},
                                "scene": {"n_points": 60, "count": 1, "seed": 0}}))
    return path


def read_ply_labels(path):
    lines = path.read_text().splitlines()
    body = lines[lines.index("end_header") + 1:]
    rows = np.array([[float(v) for v in line.split()] for line in body])
    return rows[:, 3:6].astype(int), rows[:, 6].astype(int)


class TestPartition:
    def test_uniform_single_part(self, tmp_path):
        pc = PointCloud(np.random.default_rng(0).uniform(0, 1, size=(300, 3)))
        pointcloud.save(pc, tmp_path / "u.xyz")
        assert main(["partition", str(tmp_path / "u.xyz"), "-o", str(tmp_path / "out"), "--seed", "0",
                     "--parts", "1", "--quiet"]) == 0
        colors, parts = read_ply_labels(tmp_path / "out" / "u_parts.ply")
        assert len({tuple(c) for c in colors}) == 1 and (parts == 0).all()
        summary = json.loads((tmp_path / "out" / "partition.json").read_text())["u"]
        assert summary["num_parts"] == 1
        assert json.loads((tmp_path / "out" / "config.json").read_text())["partition"]["num_parts"] == 1

    def test_dense_cluster_gets_dense_color(self, tmp_path):
        spec, _ = dense_cluster_spec(n_background=2000, n_cluster=600, seed=1)
        pc = generate_scene(spec)
        pointcloud.save(pc, tmp_path / "c.xyzl")
        assert main(["partition", str(tmp_path / "c.xyzl"), "-o", str(tmp_path / "out"), "--seed", "0",
                     "--parts", "2", "--target-areas", "64", "--quiet"]) == 0
        colors, parts = read_ply_labels(tmp_path / "out" / "c_parts.ply")
        # density oracle: the most populated areas are the cluster's and belong to the dense part
        grid = build_grid(pc.positions, 64, PartitionConfig().min_area_edge)
        counts = grid.counts()
        densest = grid.area_of_point == np.argmax(counts)
        assert (parts[densest] == 1).all()
        np.testing.assert_array_equal(colors[densest][0], part_colors(np.array([1]), 2)[0])
        assert (parts[pc.labels == 1] == 1).mean() > 0.9

    def test_rerun_identical(self, tmp_path):
        pc = PointCloud(np.random.default_rng(1).uniform(0, 2, size=(200, 3)))
        pointcloud.save(pc, tmp_path / "r.xyz")
        for out in ("a", "b"):
            assert main(["partition", str(tmp_path / "r.xyz"), "-o", str(tmp_path / out), "--seed", "0",
                         "--quiet"]) == 0
        for name in ("r_parts.ply", "partition.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


class TestTrain:
    def test_smoke_and_determinism(self, tmp_path, tiny_config):
        for out in ("a", "b"):
            assert main(["train", "-c", str(tiny_config), "-o", str(tmp_path / out), "--quiet"]) == 0
        for name in ("checkpoint.npz", "loss_curve.csv", "metrics.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
        configs = [json.loads((tmp_path / out / "config.json").read_text()) for out in ("a", "b")]
        assert configs[0].pop("output_dir") != configs[1].pop("output_dir") and configs[0] == configs[1]
        rows = list(csv.DictReader(open(tmp_path / "a" / "loss_curve.csv")))
        assert len(rows) == 3 and all(np.isfinite(float(r["total"])) for r in rows)
        effective = json.loads((tmp_path / "a" / "config.json").read_text())
        assert effective["resolved_train"]["learning_rate"] == 0.006
        assert effective["resolved_model"]["widths"] == [8, 16]

    def test_flags_override_config(self, tmp_path, tiny_config):
        assert main(["train", "-c", str(tiny_config), "-o", str(tmp_path / "o"), "--iterations", "1",
                     "--lam", "0.25", "--quiet"]) == 0
        effective = json.loads((tmp_path / "o" / "config.json").read_text())
        assert effective["resolved_train"]["iterations"] == 1 and effective["resolved_model"]["lam"] == 0.25

    def test_train_from_files(self, tmp_path, tiny_config):
        pc = generate_scene(pointcloud.imbalanced_scene_spec(60, seed=3))
        pointcloud.save(pc, tmp_path / "s.xyzl")
        assert main(["train", str(tmp_path / "s.xyzl"), "-c", str(tiny_config), "-o", str(tmp_path / "o"),
                     "--iterations", "1", "--quiet"]) == 0
        assert (tmp_path / "o" / "checkpoint.npz").exists()


@pytest.fixture
def checkpoint(tmp_path):
    cfg = ModelConfig(num_classes=2, **{k: tuple(v) if isinstance(v, list) else v for k, v in TINY_MODEL.items()})
    path = tmp_path / "model.npz"
    save_model(path, Model(cfg, seed=0), {"class_names": ["a", "b"]})
    return path


def balanced_cloud(n=400, seed=0):
    rng = np.random.default_rng(seed)
    return PointCloud(rng.uniform(0, 2, size=(n, 3)), labels=rng.permutation(np.arange(n) % 2))


class TestEvalSegment:
    def test_random_model_balanced_data(self, tmp_path, checkpoint):
        pointcloud.save(balanced_cloud(), tmp_path / "b.xyzl")
        args = ["eval", str(tmp_path / "b.xyzl"), "--checkpoint", str(checkpoint), "--seed", "0", "--quiet"]
        assert main(args + ["-o", str(tmp_path / "e1")]) == 0
        report = json.loads((tmp_path / "e1" / "metrics.json").read_text())
        assert abs(report["oa"] - 0.5) <= 0.1
        assert [c["name"] for c in report["per_class"]] == ["a", "b"]
        assert main(args + ["-o", str(tmp_path / "e2")]) == 0
        assert (tmp_path / "e1" / "metrics.json").read_bytes() == (tmp_path / "e2" / "metrics.json").read_bytes()

    def test_segment_then_perfect_eval(self, tmp_path, checkpoint):
        pc = balanced_cloud(100, 1)
        pointcloud.save(PointCloud(pc.positions), tmp_path / "u.xyz")
        assert main(["segment", str(tmp_path / "u.xyz"), "--checkpoint", str(checkpoint), "-o",
                     str(tmp_path / "s"), "--seed", "0", "--quiet"]) == 0
        seg = pointcloud.load(tmp_path / "s" / "u_segmented.xyzl")
        from dbgla.network import load_model
        model, _ = load_model(checkpoint)
        np.testing.assert_array_equal(seg.labels, predict(PointCloud(pc.positions), model, seed=0))
        assert main(["eval", str(tmp_path / "s" / "u_segmented.xyzl"), "--checkpoint", str(checkpoint),
                     "-o", str(tmp_path / "e"), "--seed", "0", "--quiet"]) == 0
        report = json.loads((tmp_path / "e" / "metrics.json").read_text())
        assert report["oa"] == 1.0
        assert all(c["iou"] in (1.0, None) for c in report["per_class"])

    def test_segment_ply(self, tmp_path, checkpoint):
        pointcloud.save(PointCloud(np.random.default_rng(2).uniform(size=(30, 3))), tmp_path / "u.xyz")
        assert main(["segment", str(tmp_path / "u.xyz"), "--checkpoint", str(checkpoint), "--format",
                     "ply_ascii", "-o", str(tmp_path / "s"), "--seed", "0", "--quiet"]) == 0
        back = pointcloud.load(tmp_path / "s" / "u_segmented.ply")
        assert back.labels.shape == (30,) and back.num_features == 3

    def test_class_count_mismatch(self, tmp_path, checkpoint):
        pc = PointCloud(np.random.default_rng(3).uniform(size=(10, 3)), labels=np.arange(10) % 3)
        pointcloud.save(pc, tmp_path / "m.xyzl")
        assert main(["eval", str(tmp_path / "m.xyzl"), "--checkpoint", str(checkpoint), "-o",
                     str(tmp_path / "e"), "--seed", "0", "--quiet"]) == 3


def test_sweep_single_cell(tmp_path, tiny_config):
    assert main(["sweep", "-c", str(tiny_config), "-o", str(tmp_path / "w"), "--lams", "0.5", "--parts-list", "5",
                 "--iterations", "1", "--quiet"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "w" / "sweep.csv")))
    assert len(rows) == 1 and rows[0]["lam"] == "0.5" and rows[0]["num_parts"] == "5" and rows[0]["seed"] == "4"


class TestExitCodes:
    def test_missing_seed(self, tmp_path):
        pointcloud.save(PointCloud(np.zeros((2, 3))), tmp_path / "p.xyz")
        assert main(["partition", str(tmp_path / "p.xyz"), "-o", str(tmp_path / "o"), "--quiet"]) == 2

    def test_bad_json(self, tmp_path):
        (tmp_path / "c.json").write_text("{not json")
        assert main(["train", "-c", str(tmp_path / "c.json"), "-o", str(tmp_path / "o"), "--quiet"]) == 2

    def test_unknown_key(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"seed": 1, "model": {"depth": 3}}))
        assert main(["train", "-c", str(tmp_path / "c.json"), "-o", str(tmp_path / "o"), "--quiet"]) == 2

    def test_missing_input(self, tmp_path):
        assert main(["partition", str(tmp_path / "nope.xyz"), "-o", str(tmp_path / "o"), "--seed", "0"]) == 5

    def test_parse_error(self, tmp_path):
        (tmp_path / "bad.xyz").write_text("0 0 0\n1 2\n")
        assert main(["partition", str(tmp_path / "bad.xyz"), "-o", str(tmp_path / "o"), "--seed", "0"]) == 3

    def test_numeric_error(self, tmp_path, tiny_config, monkeypatch):
        from dbgla import train as tr
        from dbgla.losses import LossReport
        monkeypatch.setattr(tr, "scene_loss", lambda *a, **k: LossReport(float("inf"), float("inf"), 0.0, 0.5))
        assert main(["train", "-c", str(tiny_config), "-o", str(tmp_path / "o"), "--quiet"]) == 4
