import numpy as np
import pytest

from hieracoustic.network import build_network, forward, load_model
from hieracoustic.taxonomy import default_taxonomy
from hieracoustic.training import (
    Stage,
    TrainingError,
    TrainingPlan,
    attach_high_head,
    fit,
    hierarchical_transfer,
    initial_network,
    run_curriculum,
    train_stage,
)

SMALL = (32, 32)


def plan(stage, **kw):
    kw.setdefault("hidden_sizes", SMALL)
    kw.setdefault("epochs", 3)
    return TrainingPlan(stage=stage, **kw)


def params_equal(a, b):
    return all(x.tobytes() == y.tobytes() for x, y in zip(a, b))


@pytest.fixture(scope="module")
def dnn1(small_frames):
    train, val, _ = small_frames
    net, log = train_stage(plan("dnn1", epochs=5), train, val)
    return net, log


class TestTransfer:
    def test_hidden_copied_exactly(self):
        d1 = build_network(440, 3, (500, 500), seed=1)
        d2 = hierarchical_transfer(d1, 15, seed=2)
        assert params_equal([p for l in d1.hidden for p in (l.W, l.b)], [p for l in d2.hidden for p in (l.W, l.b)])
        assert d2.head.W.shape == (15, 500)
        assert d2.high_head is None
        # fresh head: no row coincides with any row of a DNN1 matrix
        old_rows = {r.tobytes() for m in (d1.hidden[1].W, d1.head.W) for r in m}
        assert not any(r.tobytes() in old_rows for r in d2.head.W)
        # copies, not views
        d2.hidden[0].W[0, 0] += 1
        assert d1.hidden[0].W[0, 0] != d2.hidden[0].W[0, 0]

    def test_hidden_activations_identical(self):
        d1 = build_network(440, 3, (500, 500), seed=1)
        d2 = hierarchical_transfer(d1, 15, seed=2)
        x = np.random.default_rng(0).normal(size=(20, 440))
        a, b = forward(d1, x), forward(d2, x)
        for za, zb in zip(a.pre[:2], b.pre[:2]):
            assert np.array_equal(za, zb)

    def test_attach_high_head(self):
        d2 = build_network(440, 15, (500, 500), seed=4)
        d3 = attach_high_head(d2, 3, seed=5)
        assert d3.high_head.W.shape == (3, 500)
        assert params_equal(d2.parameters(), d3.parameters()[: len(d2.parameters())])
        x = np.random.default_rng(1).normal(size=(100, 440))
        assert np.array_equal(forward(d2, x).p_low, forward(d3, x).p_low)
        with pytest.raises(TrainingError, match="already"):
            attach_high_head(d3)


class TestPlans:
    def test_stage_requirements(self, small_frames):
        train, _, _ = small_frames
        tax = default_taxonomy()
        with pytest.raises(TrainingError, match="dnn1"):
            initial_network(plan("dnn2"), 440, tax)
        with pytest.raises(TrainingError, match="dnn2"):
            initial_network(plan("dnn3"), 440, tax)
        with pytest.raises(TrainingError, match="random"):
            initial_network(plan("dnn1"), 440, tax, init=build_network(440, 3, SMALL))
        with pytest.raises(TrainingError, match="3-way"):
            initial_network(plan("dnn2"), 440, tax, init=build_network(440, 15, SMALL))
        assert initial_network(plan("dnn1"), 440, tax).num_classes == 3
        assert initial_network(plan("baseline"), 440, tax).num_classes == 15

    def test_problems_listed_together(self):
        p = TrainingPlan(epochs=-1, batch_size=0, alpha=2.0)
        assert len(p.problems()) == 3

    def test_empty_training_set(self, small_frames):
        train, _, _ = small_frames
        from hieracoustic.training import FrameSet

        empty = FrameSet(np.zeros((0, 440), np.float32), np.zeros(0))
        with pytest.raises(TrainingError, match="empty"):
            train_stage(plan("baseline"), empty)


class TestTraining:
    def test_zero_epochs_returns_init(self, small_frames):
        train, val, _ = small_frames
        p = plan("baseline", epochs=0, seed=9)
        net, log = train_stage(p, train, val)
        init = initial_network(p, 440, default_taxonomy())
        assert params_equal(net.parameters(), init.parameters())
        assert log.epochs == []

    def test_seeded_runs_identical(self, small_frames, tmp_path):
        train, val, _ = small_frames
        a, la = train_stage(plan("baseline", seed=4), train, val)
        b, lb = train_stage(plan("baseline", seed=4), train, val)
        assert params_equal(a.parameters(), b.parameters())
        la.write_csv(tmp_path / "a.csv")
        lb.write_csv(tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_dnn1_learns_high_level(self, dnn1):
        _, log = dnn1
        assert log.epochs[-1].val_frame_acc >= 0.95
        assert log.epochs[-1].train_loss < log.epochs[0].train_loss

    @pytest.mark.parametrize("stage", ["dnn2", "dnn3"])
    def test_later_stages_reduce_loss(self, small_frames, dnn1, stage):
        train, val, _ = small_frames
        init = dnn1[0]
        if stage == "dnn3":
            init, _ = train_stage(plan("dnn2"), train, val, init=init)
        _, log = train_stage(plan(stage), train, val, init=init)
        assert len(log.epochs) == 3
        assert log.epochs[-1].train_loss < log.epochs[0].train_loss

    def test_alpha_one_matches_continued_dnn2(self, small_frames):
        train, _, _ = small_frames
        dnn2 = build_network(440, 15, SMALL, seed=2)
        sub = type(train)(train.x[:300], train.low[:300])
        cont = dnn2.copy()
        fit(cont, plan("dnn2", epochs=1, batch_size=100, seed=6), sub)
        dnn3 = attach_high_head(dnn2, 3, seed=7)
        high_before = dnn3.high_head.W.copy()
        fit(dnn3, plan("dnn3", epochs=1, batch_size=100, seed=6, alpha=1.0), sub)
        shared = len(cont.parameters())
        assert params_equal(cont.parameters(), dnn3.parameters()[:shared])
        assert np.array_equal(high_before, dnn3.high_head.W)

    def test_early_stopping_restores_best(self, small_frames):
        train, val, _ = small_frames
        net, log = train_stage(plan("baseline", epochs=6, patience=1, learning_rate=0.5, momentum=0.0), train, val)
        best = max(r.val_frame_acc for r in log.epochs)
        from hieracoustic.training import frame_accuracy

        assert frame_accuracy(net, val, val.low) == best


def test_curriculum_end_to_end(small_frames, tmp_path):
    train, val, _ = small_frames
    res = run_curriculum(plan("dnn1", epochs=2, seed=1), train, val, out_dir=tmp_path)
    assert res.dnn1.num_classes == 3 and res.dnn2.num_classes == 15
    assert res.dnn3.is_multi_level and res.dnn3.high_head.out_dim == 3
    for name, net in (("dnn1", res.dnn1), ("dnn2", res.dnn2), ("dnn3", res.dnn3)):
        assert params_equal(load_model(tmp_path / f"{name}.hacm").parameters(), net.parameters())
        assert (tmp_path / f"{name}_log.csv").read_text().startswith("epoch,train_loss,val_frame_acc\n")
        assert res.logs[name].stage.value in (name, "dnn2")


def test_curriculum_baseline_mode(small_frames):
    train, val, _ = small_frames
    res = run_curriculum(plan("baseline", epochs=1), train, val, pretrain=False)
    assert res.dnn1 is None
    assert res.logs["dnn2"].stage is Stage.BASELINE
