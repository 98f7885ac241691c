import csv
import io
import math

import numpy as np
import pytest

from sparse_bottleneck.data import SynthGroundTruth, standardize, synth_generate
from sparse_bottleneck.errors import ArgumentError
from sparse_bottleneck.numerics import kmeans
from sparse_bottleneck.sbnn import CLASSIFICATION, REGRESSION, SbnnConfig, build_network, forward, swap_head
from sparse_bottleneck.schedule import (
    TrainHistory,
    TrainSchedule,
    full_pipeline,
    pretrain,
    stratified_split,
    train_main,
)

SMALL = SbnnConfig(encoder_sizes=(32, 16), decoder_sizes=(16, 32), seed=0)


@pytest.fixture(scope="module")
def small_data():
    ds, truth = synth_generate(120, 30, 4, SynthGroundTruth(support=tuple(range(5))), seed=5)
    return standardize(ds), truth


@pytest.fixture(scope="module")
def default_run(small_data):
    ds, _ = small_data
    return full_pipeline(ds, SMALL, TrainSchedule(), seed=3)


class TestScheduleConfig:
    def test_defaults(self):
        s = TrainSchedule()
        assert (s.pretrain_epochs, s.frozen_epochs, s.unfrozen_epochs, s.postprune_epochs) == (50, 50, 50, 100)
        assert (s.lr_initial, s.lr_reduced, s.batch_size, s.prune_to) == (1e-4, 5e-5, 32, 25)
        assert s.pretrain_val_fraction == 0.4 and s.prune_epoch == 100

    def test_json_round_trip(self):
        s = TrainSchedule(prune_to=10, frozen_epochs=3)
        import json

        assert TrainSchedule.from_json(json.dumps(s.to_dict())) == s

    @pytest.mark.parametrize("bad", [{"frozen_epochs": -1}, {"pretrain_val_fraction": 1.0}, {"prune_to": 0},
                                     {"lr_reduced": 0.0}])
    def test_invalid(self, bad):
        with pytest.raises(ArgumentError):
            TrainSchedule(**bad)

    def test_unknown_key(self):
        with pytest.raises(ArgumentError):
            TrainSchedule.from_dict({"epochs": 3})


class TestSplit:
    def test_stratified(self):
        labels = np.repeat([0, 1, 2], 10)
        tr, va = stratified_split(labels, 0.4, seed=0)
        assert sorted(np.concatenate([tr, va]).tolist()) == list(range(30))
        assert [int(np.sum(labels[va] == c)) for c in range(3)] == [4, 4, 4]

    def test_singleton_class_falls_back(self):
        labels = np.array([0, 0, 0, 0, 1])
        tr, va = stratified_split(labels, 0.4, seed=0)
        assert len(va) == 2 and len(set(tr) | set(va)) == 5


class TestPretrain:
    def test_separable_beats_uniform(self):
        rng = np.random.default_rng(0)
        y = np.vstack([rng.normal(-5, 0.3, (40, 2)), rng.normal(5, 0.3, (40, 2))])
        x = np.column_stack([y[:, :1] + rng.normal(0, 0.1, (80, 1)), rng.normal(size=(80, 3))])
        model = build_network(SMALL, 4, 2)
        swap_head(model, CLASSIFICATION, n_classes=2)
        sched = TrainSchedule(pretrain_epochs=30, k_clusters=2, lr_initial=1e-3)
        _, hist = pretrain(model, x, y, sched, seed=0)
        assert np.min(hist.column("val_cross_entropy")) < math.log(2)

    def test_zero_epochs(self, small_data):
        ds, _ = small_data
        model = build_network(SMALL, ds.p, ds.q)
        swap_head(model, CLASSIFICATION, n_classes=4)
        snap = model.snapshot()
        _, hist = pretrain(model, ds.x, ds.y, TrainSchedule(pretrain_epochs=0), seed=0)
        assert hist.records == []
        for (w, b), layer in zip(snap, model.layers):
            np.testing.assert_array_equal(layer.w, w)

    def test_restored_snapshot_is_minimum(self, small_data):
        ds, _ = small_data
        sched = TrainSchedule(pretrain_epochs=12, k_clusters=4)
        model = build_network(SMALL, ds.p, ds.q)
        swap_head(model, CLASSIFICATION, n_classes=4)
        _, hist = pretrain(model, ds.x, ds.y, sched, seed=2)
        labels, _, _ = kmeans(ds.y, 4, seed=2)
        _, val = stratified_split(labels, 0.4, seed=2)
        prob = forward(model, ds.x[val])[1]
        ce = -np.mean(np.log(prob[np.arange(val.size), labels[val]]))
        vals = hist.column("val_cross_entropy")
        assert ce == pytest.approx(vals.min(), rel=1e-12)
        assert ce <= vals[-1]

    def test_too_many_clusters(self):
        model = build_network(SMALL, 3, 2)
        swap_head(model, CLASSIFICATION, n_classes=10)
        with pytest.raises(ArgumentError):
            pretrain(model, np.zeros((5, 3)), np.zeros((5, 2)), TrainSchedule(), seed=0)

    def test_needs_classification_head(self):
        model = build_network(SMALL, 3, 2)
        with pytest.raises(ArgumentError):
            pretrain(model, np.zeros((5, 3)), np.zeros((5, 2)), TrainSchedule(), seed=0)


class TestTrainMain:
    def test_zero_epochs_keep_all(self, small_data):
        ds, _ = small_data
        model = build_network(SMALL, ds.p, ds.q)
        snap = model.snapshot()
        sched = TrainSchedule(frozen_epochs=0, unfrozen_epochs=0, postprune_epochs=0, prune_to=ds.p)
        _, hist = train_main(model, ds.x, ds.y, sched, seed=0)
        assert hist.records == []
        assert model.n_inputs == ds.p
        for (w, b), layer in zip(snap, model.layers):
            np.testing.assert_array_equal(layer.w, w)
            np.testing.assert_array_equal(layer.b, b)

    def test_requires_regression_heads(self, small_data):
        ds, _ = small_data
        model = build_network(SMALL, ds.p, ds.q)
        swap_head(model, CLASSIFICATION, n_classes=3)
        with pytest.raises(ArgumentError):
            train_main(model, ds.x, ds.y, TrainSchedule(), seed=0)

    def test_monitor_improves_on_nonlinear_data(self):
        ds, _ = synth_generate(400, 20, 5, SynthGroundTruth(support=tuple(range(4)), link="nonlinear"), seed=8)
        ds = standardize(ds)
        train, test = np.arange(300), np.arange(300, 400)
        model = build_network(SMALL, ds.p, ds.q)
        sched = TrainSchedule(frozen_epochs=10, unfrozen_epochs=10, postprune_epochs=20, prune_to=10)
        means = ds.y[train].mean(0)
        _, hist = train_main(model, ds.x[train], ds.y[train], sched,
                             monitor=(ds.x[test], ds.y[test], means), seed=0)
        r2 = hist.column("monitor_r2")
        assert r2[-1] > r2[sched.frozen_epochs - 1]


class TestDefaultSchedule:
    def test_epochs_strictly_increasing(self, default_run):
        _, hist, _ = default_run
        epochs = [r.epoch for r in hist.records]
        assert all(b > a for a, b in zip(epochs, epochs[1:]))
        assert epochs[0] == -49 and epochs[-1] == 200

    def test_events_once(self, default_run):
        _, hist, _ = default_run
        for kind, epoch in (("unfreeze", 50), ("prune", 100), ("freeze", 0), ("restore-best", 0)):
            found = hist.events_of(kind)
            assert len(found) == 1 and found[0].epoch == epoch
        assert len(hist.events_of("head-swap")) == 2

    def test_prune_and_group_lasso(self, default_run):
        model, hist, names = default_run
        assert hist.events_of("prune")[0].detail["n_inputs"] == 25
        after = [r for r in hist.records if r.epoch > 100]
        assert len(after) == 100 and all(r.group_lasso == 0.0 and r.n_inputs == 25 for r in after)
        assert all(r.group_lasso > 0 for r in hist.records if r.epoch <= 100)

    def test_learning_rates(self, default_run):
        _, hist, _ = default_run
        lr = {r.epoch: r.lr for r in hist.records}
        assert lr[50] == 1e-4 and lr[51] == 5e-5 and lr[200] == 5e-5 and lr[-10] == 1e-4

    def test_selected_names(self, default_run, small_data):
        ds, _ = small_data
        model, _, names = default_run
        assert len(names) == 25 and len(set(names)) == 25
        assert set(names) <= set(ds.x_names)
        assert set(names) == set(model.selected_names)

    def test_pretrain_best_snapshot(self, default_run):
        _, hist, _ = default_run
        vals = hist.column("val_cross_entropy", phase="pretrain")
        best = hist.events_of("restore-best")[0].detail
        assert best["val_cross_entropy"] == vals.min()
        assert best["best_epoch"] == -49 + int(np.argmin(vals))

    def test_csv_export(self, default_run):
        _, hist, _ = default_run
        rows = list(csv.DictReader(io.StringIO(hist.to_csv())))
        assert len(rows) >= 250
        tagged = {r["epoch"]: r["event"] for r in rows if r["event"]}
        assert "prune" in tagged["100"] and "unfreeze" in tagged["50"]

    def test_deterministic(self, default_run, small_data):
        ds, _ = small_data
        model, hist, names = default_run
        again, hist2, names2 = full_pipeline(ds, SMALL, TrainSchedule(), seed=3)
        assert names == names2
        assert again.to_json() == model.to_json()
        assert hist.to_csv() == hist2.to_csv()
