import math

import numpy as np
import pytest

from dbgla import tensor as T
from dbgla import train as tr
from dbgla.errors import NumericError, ValidationError
from dbgla.losses import LossReport
from dbgla.network import ModelConfig
from dbgla.pointcloud import PointCloud

TINY = dict(widths=(8, 16), num_heads=(1, 2), head_dim=8, enc_dim=8, area_counts=(8, 2))


def tiny(**kw):
    return ModelConfig(num_classes=4, **{**TINY, **kw})


def test_schedule_steps():
    cfg = tr.TrainConfig()
    assert tr.learning_rate_at(cfg, 0) == 0.006
    assert tr.learning_rate_at(cfg, 59) == 0.006
    assert tr.learning_rate_at(cfg, 60) == pytest.approx(0.0006)
    assert tr.learning_rate_at(cfg, 85) == pytest.approx(0.00006)


def test_adam_first_step_is_signed_lr():
    p = T.parameter([1.0, -2.0, 3.0])
    p.grad = np.array([0.5, -4.0, 0.0])
    tr.Adam([p]).step(0.1)
    np.testing.assert_allclose(p.data, [0.9, -1.9, 3.0], atol=1e-6)


def test_adam_minimises_quadratic():
    p = T.parameter([5.0, -3.0])
    opt = tr.Adam([p])
    for _ in range(500):
        p.grad = 2 * p.data
        opt.step(0.05)
    assert np.abs(p.data).max() < 1e-2


def test_one_iteration_smoke():
    scenes = tr.suite_scenes(0, n_points=60)
    res = tr.train(tiny(), tr.TrainConfig(iterations=1), scenes)
    assert len(res.loss_curve) == 1 and res.best_iteration == 0
    entry = res.loss_curve[0]
    assert all(math.isfinite(entry[k]) for k in ("total", "wce", "cr"))
    assert abs(entry["total"] - (0.5 * entry["wce"] + 0.5 * entry["cr"])) <= 1e-12


def test_loss_decreases():
    scenes = tr.suite_scenes(1, n_points=80)
    res = tr.train(tiny(), tr.TrainConfig(iterations=20, eval_every=5), scenes)
    assert res.loss_curve[-1]["total"] < res.loss_curve[0]["total"]


def test_determinism():
    scenes = tr.suite_scenes(2, n_points=60)
    a = tr.train(tiny(), tr.TrainConfig(iterations=4, seed=3), scenes)
    b = tr.train(tiny(), tr.TrainConfig(iterations=4, seed=3), scenes)
    assert a.loss_curve == b.loss_curve
    for (_, p), (_, q) in zip(a.model.named_parameters(), b.model.named_parameters()):
        assert p.data.tobytes() == q.data.tobytes()


def test_divergence_aborts(monkeypatch):
    def broken(*args, **kwargs):
        return LossReport(float("nan"), float("nan"), 0.0, 0.5)

    monkeypatch.setattr(tr, "scene_loss", broken)
    with pytest.raises(NumericError, match="iteration 0"):
        tr.train(tiny(), tr.TrainConfig(iterations=3), tr.suite_scenes(0, n_points=40))


def test_unlabelled_scene_rejected():
    with pytest.raises(ValidationError):
        tr.train(tiny(), tr.TrainConfig(iterations=1), [PointCloud(np.zeros((3, 3)))])


def test_evaluate_class_mismatch():
    model = tr.Model(tiny())
    pc = PointCloud(np.random.default_rng(0).uniform(size=(10, 3)), labels=np.arange(10) % 6)
    with pytest.raises(ValidationError):
        tr.evaluate(model, [pc])


def test_sweep_single_cell(tmp_path):
    rows = tr.run_sweep(tiny(), tr.TrainConfig(iterations=2), [0.5], [5],
                        lambda seed: (tr.suite_scenes(seed, n_points=50),) * 2, base_seed=7)
    assert len(rows) == 1 and rows[0].seed == 7 and rows[0].error == ""
    assert 0 <= rows[0].oa <= 1
    tr.write_sweep_csv(rows, tmp_path / "s.csv")
    header = (tmp_path / "s.csv").read_text().splitlines()[0]
    assert header == "seed,lam,num_parts,oa,macc,miou,small_iou,error"


def test_sweep_records_failures():
    def scenes(seed):
        if seed == 1:
            raise ValidationError("broken cell")
        return (tr.suite_scenes(seed, n_points=50),) * 2

    rows = tr.run_sweep(tiny(), tr.TrainConfig(iterations=1), [0.5], [1, 3, 5], scenes)
    assert [r.seed for r in rows] == [0, 1, 2]
    assert "broken cell" in rows[1].error and rows[0].error == rows[2].error == ""
    assert math.isnan(rows[1].miou)
