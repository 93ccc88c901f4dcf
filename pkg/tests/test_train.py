import copy
import json

import numpy as np
import pytest

from hcseg.backbone import BackboneConfig
from hcseg.data.synthetic import SyntheticSpec
from hcseg.model import HeadConfig, init_model
from hcseg.optim import AdamWState
from hcseg.train import (DataConfig, OptimConfig, RunConfig, config_from_dict, evaluate, gt_segments,
                         load_checkpoint, load_data, run_training, save_checkpoint, train)


def tiny_config(head="per-pixel", steps=10, **kw):
    cfg = RunConfig(
        backbone=BackboneConfig(stem_stride=1, num_stages=3, channels=[4, 6, 8], hierarchical_level=2, c_f=4),
        head=HeadConfig(kind=head, num_queries=4, c_q=8, c_m=8, num_layers=1, pos_dim=8),
        optim=OptimConfig(lr=3e-3, steps=steps, batch_size=4),
        data=DataConfig(synthetic=SyntheticSpec(size=(32, 32), size_range=(4, 8), count=8, val_count=4)),
        log_every=2,
    )
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


class TestConfig:
    def test_round_trip(self):
        cfg = tiny_config()
        back = config_from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert back.hash() == cfg.hash()
        assert back.to_dict() == cfg.to_dict()

    def test_hash_ignores_out_dir(self):
        a, b = tiny_config(), tiny_config()
        b.out_dir = "elsewhere"
        assert a.hash() == b.hash()
        b.seed = 1
        assert a.hash() != b.hash()

    def test_unknown_field(self):
        with pytest.raises(ValueError, match="config.optim.learning_rate"):
            config_from_dict({"optim": {"learning_rate": 1.0}})

    def test_schema_version(self):
        with pytest.raises(ValueError, match="schema_version"):
            config_from_dict({"schema_version": 2})

    @pytest.mark.parametrize("mutate", [
        lambda c: setattr(c.backbone, "hierarchical_level", 3),
        lambda c: setattr(c.loss, "dice", -1.0),
        lambda c: setattr(c.optim, "batch_size", 0),
        lambda c: setattr(c.data, "manifest", "/nonexistent/manifest.json"),
        lambda c: setattr(c, "seed", -1),
        lambda c: setattr(c.head, "kind", "linear"),
    ])
    def test_invalid(self, mutate):
        cfg = tiny_config()
        mutate(cfg)
        with pytest.raises((ValueError, FileNotFoundError)):
            cfg.validate()


class TestGtSegments:
    def test_background_and_instances(self):
        sem = np.array([[0, 1, 1], [0, 3, 3]])
        inst = np.array([[0, 1, 1], [0, 2, 2]])
        masks, classes = gt_segments(sem, inst)
        assert classes.tolist() == [0, 1, 3]
        assert masks.sum(0).tolist() == [2, 2, 2]
        np.testing.assert_array_equal(masks.sum(1), 1)

    def test_no_background(self):
        masks, classes = gt_segments(np.ones((2, 2), int), np.ones((2, 2), int))
        assert classes.tolist() == [1] and masks.shape == (4, 1)


@pytest.fixture(scope="module")
def data():
    return load_data(tiny_config())


class TestTraining:
    def test_zero_steps_checkpoint_equals_init(self, tmp_path):
        cfg = tiny_config(steps=0)
        res, report = run_training(cfg, tmp_path)
        params, state, _ = load_checkpoint(tmp_path / "checkpoint.npz")
        init = init_model(cfg.backbone, cfg.head, cfg.seed)
        for (k, a), (_, b) in zip(sorted(params.named().items()), sorted(init.named().items())):
            np.testing.assert_array_equal(a.data, b.data, err_msg=k)
        assert state.step == 0 and report["final_loss"] is None

    @pytest.mark.parametrize("head", ["per-pixel", "mask-query"])
    def test_ten_steps_deterministic(self, data, head):
        runs = [train(tiny_config(head), *data).history for _ in range(2)]
        assert [r["loss"] for r in runs[0]] == [r["loss"] for r in runs[1]]
        assert len(runs[0]) == 10

    def test_seed_changes_trajectory(self, data):
        a = train(tiny_config(), *data).history
        b = train(tiny_config(seed=1), *data).history
        assert [r["loss"] for r in a] != [r["loss"] for r in b]

    def test_loss_decreases(self, data):
        h = train(tiny_config(steps=60), *data).history
        first = np.mean([r["loss"] for r in h[:5]])
        last = np.mean([r["loss"] for r in h[-5:]])
        assert last < first

    def test_log_records(self, data, tmp_path):
        log = tmp_path / "m.jsonl"
        train(tiny_config(steps=5), *data, log_path=log)
        recs = [json.loads(line) for line in log.read_text().splitlines()]
        assert [r["step"] for r in recs] == [0, 2, 4]
        for r in recs:
            assert {"loss", "lr", "pixel_ce", "reg", "scales", "entropy"} <= set(r)
            assert len(r["scales"]) == 2 and len(r["entropy"]) == 2

    def test_resume_from_checkpoint_matches_continuous(self, data, tmp_path):
        full = train(tiny_config(steps=6, log_every=100), *data)
        cfg = tiny_config(steps=3, log_every=100)
        first = train(cfg, *data)
        save_checkpoint(tmp_path / "c.npz", first.params, first.state, cfg)
        params, state, _ = load_checkpoint(tmp_path / "c.npz")
        assert state.step == 3
        assert params.named().keys() == first.params.named().keys()
        for k, v in params.named().items():
            np.testing.assert_array_equal(v.data, first.params.named()[k].data)
        assert len(full.history) == 6

    def test_empty_training_set(self, data):
        empty = data[0].subset(np.zeros(0, dtype=int))
        with pytest.raises(ValueError, match="empty"):
            train(tiny_config(), empty)


class TestCheckpoint:
    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "nope.npz")

    def test_shape_mismatch(self, tmp_path):
        cfg = tiny_config()
        save_checkpoint(tmp_path / "c.npz", init_model(cfg.backbone, cfg.head), AdamWState(), cfg)
        other = copy.deepcopy(cfg)
        other.backbone.channels = [4, 6, 10]
        with pytest.raises(ValueError, match="shape"):
            load_checkpoint(tmp_path / "c.npz", other)


class TestEvaluate:
    @pytest.mark.parametrize("head", ["per-pixel", "mask-query"])
    def test_fields(self, data, head):
        cfg = tiny_config(head)
        ev = evaluate(init_model(cfg.backbone, cfg.head, 0), cfg, data[1])
        for key in ("miou", "per_class_iou", "pixel_accuracy", "pq", "sq", "rq", "tp", "fp", "fn",
                    "ue", "ue_variant", "entropy", "num_images", "decode", "hard_decode"):
            assert key in ev
        assert len(ev["ue"]) == 2 and len(ev["entropy"]) == 2 and ev["num_images"] == 4
        assert 0 <= ev["miou"] <= 1 and 0 <= ev["pq"] <= 1
        json.dumps(ev)

    def test_level_zero(self, data):
        cfg = tiny_config()
        cfg.backbone.hierarchical_level = 0
        ev = evaluate(init_model(cfg.backbone, cfg.head, 0), cfg, data[1])
        assert ev["ue"] == [] and ev["hard_decode"]["miou"] == ev["miou"]
