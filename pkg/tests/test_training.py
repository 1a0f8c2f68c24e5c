import math

import numpy as np
import pytest

from tranet import numcore as nc
from tranet.data import SynthSpec, generate_synthetic, load_dataset
from tranet.network import ConfigError, build_model, forward, freeze, preset
from tranet.region import AU_ORDER, AUGrouping
from tranet.training import (
    SGD,
    EvalReport,
    NumericError,
    ProtocolError,
    TrainConfig,
    binarize,
    build_sampler,
    cross_validate,
    f1_and_accuracy,
    flip_images,
    format_table,
    frame_scores,
    multilabel_bce,
    next_batch,
    run_fold,
    sgd_step,
    split_subjects,
    write_metrics_csv,
)
from tranet.verify import oracles


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    generate_synthetic(SynthSpec(num_subjects=3, frames_per_subject=8, seed=5), root)
    return load_dataset(root / "manifest.csv").data


def quick_cfg(**kw):
    base = dict(batch_size=4, batches_per_epoch=2, epoch_cap=2, precision="float64", eval_batch_size=8)
    base.update(kw)
    return TrainConfig(**base)


class TestBinarize:
    def test_all_zero(self):
        assert not binarize(np.zeros(8, int)).any()

    def test_equal_counts_as_positive(self):
        assert binarize(np.array([2, 1, 3, 0, 2, 5, 0, 1])).tolist() == [True, False, True, False, True, True, False, False]

    def test_threshold_five(self):
        assert binarize(np.arange(6), 5).tolist() == [False] * 5 + [True]

    @pytest.mark.parametrize("thr", [0, 6])
    def test_threshold_range(self, thr):
        with pytest.raises(ValueError):
            binarize(np.zeros(8, int), thr)


class TestSampler:
    def test_uniform_when_balanced(self):
        labels = np.eye(8, dtype=bool).repeat(5, axis=0)
        s = build_sampler(labels)
        np.testing.assert_allclose(s.probs, 1 / 40, rtol=0, atol=1e-15)

    def test_rarity_ratio(self):
        # AU x: 2 frames, AU y: 20 frames, one positive each
        labels = np.zeros((22, 8), dtype=bool)
        labels[:2, 0] = True
        labels[2:, 1] = True
        s = build_sampler(labels)
        assert abs(s.probs[0] / s.probs[2] - 10) < 1e-12
        assert abs(s.probs.sum() - 1) < 1e-12

    def test_negative_frames_get_floor(self):
        labels = np.zeros((5, 8), dtype=bool)
        labels[0, [0, 1]] = True
        labels[1, 0] = True
        # counts: AU1 2, AU2 1 -> scores 1.5, 0.5, floor 0.5
        np.testing.assert_allclose(frame_scores(labels), [1.5, 0.5, 0.5, 0.5, 0.5])
        assert np.all(build_sampler(labels).probs > 0)

    def test_all_negative(self):
        s = build_sampler(np.zeros((4, 8), dtype=bool))
        np.testing.assert_allclose(s.probs, 0.25)

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            build_sampler(np.zeros((0, 8), dtype=bool))

    def test_monte_carlo_matches_closed_form(self):
        rng = np.random.default_rng(3)
        labels = rng.random((50, 8)) < np.linspace(0.05, 0.6, 8)
        s = build_sampler(labels, seed=1)
        n = 200_000
        freq = np.bincount(s.draw(n), minlength=50) / n
        se = np.sqrt(s.probs * (1 - s.probs) / n)
        assert np.all(np.abs(freq - s.probs) <= 4 * se)

    def test_seeded(self):
        labels = np.eye(8, dtype=bool)
        assert build_sampler(labels, 3).draw(20).tolist() == build_sampler(labels, 3).draw(20).tolist()


class TestBatches:
    def test_flip_involution(self, rng):
        img = rng.uniform(size=(2, 3, 8, 8))
        assert flip_images(flip_images(img)).tobytes() == img.tobytes()

    def test_no_flip_is_identity(self, small_data):
        s = build_sampler(binarize(small_data.intensities), 0)
        b = next_batch(s, small_data, 6, flip_prob=0.0)
        assert b.images.tobytes() == small_data.images[b.index].tobytes()
        assert not b.flipped.any()

    def test_flip_keeps_labels_and_rows(self, small_data):
        s = build_sampler(binarize(small_data.intensities), 0)
        b = next_batch(s, small_data, 32, flip_prob=1.0)
        assert b.flipped.all()
        np.testing.assert_array_equal(b.labels, binarize(small_data.intensities[b.index]))
        np.testing.assert_array_equal(b.images, small_data.images[b.index][..., ::-1])
        lm = small_data.landmarks[b.index]
        np.testing.assert_array_equal(b.landmarks[..., 1], lm[..., 1])
        np.testing.assert_allclose(b.landmarks[..., 0], small_data.size - 1 - lm[..., 0])

    def test_batch_size_validated(self, small_data):
        s = build_sampler(binarize(small_data.intensities), 0)
        with pytest.raises(ValueError):
            next_batch(s, small_data, 0)


class TestLoss:
    def test_ln2(self):
        n = 3
        logits = [nc.Tensor(np.zeros((n, k))) for k in (3, 2, 3)]
        loss = multilabel_bce(logits, np.ones((n, 8), dtype=bool))
        assert abs(loss.item() - 3 * math.log(2)) < 1e-15

    def test_saturated(self):
        logits = [nc.Tensor(np.full((2, k), 20.0)) for k in (3, 2, 3)]
        loss = multilabel_bce(logits, np.ones((2, 8), dtype=bool)).item()
        assert 0 <= loss < 1e-8 * 3 and math.isfinite(loss)
        logits = [nc.Tensor(np.full((2, k), -800.0)) for k in (3, 2, 3)]
        assert multilabel_bce(logits, np.zeros((2, 8), dtype=bool)).item() == 0.0

    def test_matches_high_precision(self, rng):
        g = AUGrouping()
        for _ in range(20):
            n = int(rng.integers(1, 6))
            logits = [rng.normal(scale=4, size=(n, k)) for k in (3, 2, 3)]
            labels = rng.integers(0, 2, size=(n, 8))
            got = multilabel_bce([nc.Tensor(x) for x in logits], labels).item()
            want = sum(oracles.bce(x, labels[:, g.columns(b)]) for x, b in zip(logits, ("upper", "middle", "lower")))
            assert abs(got - float(want)) < 1e-10

    def test_bad_label(self):
        logits = [nc.Tensor(np.zeros((1, k))) for k in (3, 2, 3)]
        with pytest.raises(ValueError, match="0 or 1"):
            multilabel_bce(logits, np.full((1, 8), 2))

    def test_shape_checked(self):
        with pytest.raises(nc.ShapeError):
            multilabel_bce([nc.Tensor(np.zeros((1, 2)))] * 3, np.zeros((1, 8)))


class TestSGD:
    def test_zero_everything(self):
        p = np.array([1.0, -2.0])
        sgd_step([p], [np.zeros(2)], [np.zeros(2)], weight_decay=0.0)
        assert p.tolist() == [1.0, -2.0]

    def test_one_step(self):
        p, g, v = np.array([2.0]), np.array([0.5]), np.array([0.0])
        sgd_step([p], [g], [v], lr=0.1, momentum=0.9, weight_decay=0.01)
        assert v[0] == pytest.approx(0.5 + 0.01 * 2.0, abs=1e-15)
        assert p[0] == pytest.approx(2.0 - 0.1 * 0.52, abs=1e-15)

    def test_momentum_accumulates(self):
        p, v = np.array([0.0]), np.array([1.0])
        sgd_step([p], [np.array([1.0])], [v], lr=1.0, momentum=0.5, weight_decay=0.0)
        assert v[0] == 1.5 and p[0] == -1.5

    def test_quadratic_bowl(self, rng):
        a = np.diag([1.0, 3.0, 0.5])
        target = rng.normal(size=3)
        w = nc.Parameter(np.zeros(3))
        opt = SGD([w], lr=0.1, momentum=0.9, weight_decay=0.0)
        for step in range(500):
            opt.zero_grad()
            d = nc.add(w, nc.constant(-target))
            loss = nc.ops.sum(nc.mul(nc.mul(d, nc.constant(np.diag(a))), d))
            if loss.item() < 1e-6:
                break
            nc.backward(loss)
            opt.step()
        assert loss.item() < 1e-6

    def test_frozen_untouched(self):
        model = build_model(preset("toy"), 0)
        freeze(model, ["stem", "stage2"])
        before = {k: v.copy() for k, v in model.state_dict().items()}
        opt = SGD(model.parameters(), lr=0.1)
        x = nc.Tensor(np.random.default_rng(0).uniform(size=(2, 3, 64, 64)))
        loss = multilabel_bce(forward(model, x, [4, 4])[:3], np.ones((2, 8)))
        nc.backward(loss)
        opt.step()
        after = model.state_dict()
        for stage in ("stem", "stage2"):
            for name, _ in model.stage_named_parameters(stage):
                assert after[name].tobytes() == before[name].tobytes()
        assert any(after[k].tobytes() != before[k].tobytes() for k in after)


class TestMetrics:
    def test_perfect(self, rng):
        y = rng.random((30, 8)) < 0.5
        y[0] = True
        r = f1_and_accuracy(y, y)
        assert r.mean_f1 == 100 and r.mean_accuracy == 100

    def test_hand_counts(self):
        pred = np.array([1, 1, 1, 1, 0, 0, 0, 0, 0, 0], dtype=bool)[:, None]
        lab = np.array([1, 1, 1, 0, 1, 1, 0, 0, 0, 0], dtype=bool)[:, None]
        r = f1_and_accuracy(pred, lab, aus=(1,))
        assert round(float(r.f1[0]), 2) == 66.67
        assert float(r.accuracy[0]) == 70.0

    def test_undefined_f1_is_zero(self):
        r = f1_and_accuracy(np.zeros((4, 1), bool), np.zeros((4, 1), bool), aus=(1,))
        assert r.f1[0] == 0 and r.accuracy[0] == 100

    def test_against_counting_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            pred = rng.random((1000, 8)) < rng.random()
            lab = rng.random((1000, 8)) < rng.random()
            r = f1_and_accuracy(pred, lab)
            for a in range(8):
                f1, acc = oracles.f1_accuracy(pred[:, a], lab[:, a])
                assert r.f1[a] == f1 and r.accuracy[a] == acc

    def test_csv_and_table(self, tmp_path):
        reports = [EvalReport(np.full(8, 50.0 + i), np.full(8, 90.0), fold=i + 1) for i in range(3)]
        write_metrics_csv(tmp_path / "m.csv", reports)
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == "fold,au,f1,accuracy" and len(lines) == 1 + 8 * 3
        table = format_table([(f"fold {r.fold}", r) for r in reports])
        header = table.splitlines()[1].split()
        assert header == [f"AU{a}" for a in AU_ORDER] + ["Avg"]
        assert "51.0" in table


class TestSplits:
    def test_twenty_seven_subjects(self):
        subjects = [f"S{i:02d}" for i in range(27)]
        splits = split_subjects(np.repeat(subjects, 3), 3, seed=0)
        assert [len(s) for s in splits] == [9, 9, 9]
        assert sorted(sum(splits, [])) == subjects

    def test_leave_one_out(self):
        splits = split_subjects(["a", "b", "c", "a"], 3, 0)
        assert sorted(len(s) for s in splits) == [1, 1, 1]

    def test_deterministic(self):
        s = [f"S{i}" for i in range(10)]
        assert split_subjects(s, 3, 4) == split_subjects(s, 3, 4)
        assert split_subjects(s, 3, 4) != split_subjects(s, 3, 5)

    def test_too_few_subjects(self):
        with pytest.raises(ProtocolError, match="subject"):
            split_subjects(["a", "b"], 3, 0)


class TestTrainConfig:
    def test_json_round_trip(self, tmp_path):
        cfg = TrainConfig(lr=0.02, ablation={"enable_cbam": False})
        cfg.save(tmp_path / "t.json")
        assert TrainConfig.load(tmp_path / "t.json") == cfg

    @pytest.mark.parametrize(
        "bad", [{"lr": 0}, {"momentum": 1.0}, {"binarize_threshold": 0}, {"freeze": ["stage9"]}, {"ablation": {"x": 1}}]
    )
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict(bad)

    def test_unknown_field(self):
        with pytest.raises(ConfigError, match="unknown"):
            TrainConfig.from_dict({"learning_rate": 0.1})


class TestRunFold:
    def _split(self, data):
        m = data.subjects == data.subjects[0]
        return data.subset(np.flatnonzero(~m)), data.subset(np.flatnonzero(m))

    def test_subject_overlap_rejected(self, small_data):
        with pytest.raises(ProtocolError, match="both"):
            run_fold(preset("toy"), quick_cfg(), small_data, small_data.subset([0]))

    def test_epoch_cap_zero(self, small_data):
        train, test = self._split(small_data)
        r = run_fold(preset("toy"), quick_cfg(epoch_cap=0), train, test)
        assert r.epochs_run == 0 and r.best_epoch == 0
        assert 0 <= r.report.mean_f1 <= 100

    def test_frozen_model_stops_after_exactly_patience(self, small_data):
        train, test = self._split(small_data)
        cfg = quick_cfg(epoch_cap=50, batches_per_epoch=1, freeze=list(preset_stages()))
        r = run_fold(preset("toy"), cfg, train, test)
        scores = [h.mean_f1 for h in r.history]
        assert r.stopped_early and r.best_epoch == 1
        assert len(scores) == 11 and len(set(scores)) == 1

    def test_freeze_all_keeps_loss_fixed(self, small_data):
        model = build_model(preset("toy"), 0)
        freeze(model, preset_stages())
        opt = SGD(model.parameters(), lr=0.5)
        x = nc.Tensor(small_data.images[:4])
        y = np.ones((4, 8))
        rows = small_data.center_rows(8)[:4]
        values = []
        for _ in range(3):
            opt.zero_grad()
            loss = multilabel_bce(forward(model, x, rows)[:3], y)
            values.append(loss.item())
            if loss.requires_grad:
                nc.backward(loss)
            opt.step()
        assert values[0] == values[1] == values[2]

    def test_frozen_stages_identical_across_fold(self, small_data):
        train, test = self._split(small_data)
        r = run_fold(preset("toy"), quick_cfg(), train, test, keep_state=True)
        init = build_model(preset("toy"), 0)
        for stage in ("stem", "stage2"):
            for name, p in init.stage_named_parameters(stage):
                assert r.state[name].tobytes() == p.data.tobytes()

    def test_divergence_is_reported(self, small_data):
        train, test = self._split(small_data)
        # the loss passes through huge finite values for a few steps before it turns NaN
        with pytest.warns(RuntimeWarning), pytest.raises(NumericError, match="non-finite training loss nan"):
            run_fold(preset("toy"), quick_cfg(lr=1e6, batches_per_epoch=10, epoch_cap=3), train, test)

    def test_bit_identical_reruns(self, small_data):
        train, test = self._split(small_data)
        a = run_fold(preset("toy"), quick_cfg(), train, test, keep_state=True)
        b = run_fold(preset("toy"), quick_cfg(), train, test, keep_state=True)
        assert [h.train_loss for h in a.history] == [h.train_loss for h in b.history]
        assert all(a.state[k].tobytes() == b.state[k].tobytes() for k in a.state)
        assert a.report.f1.tobytes() == b.report.f1.tobytes()

    def test_ablation_applied(self, small_data):
        train, test = self._split(small_data)
        r = run_fold(preset("toy"), quick_cfg(epoch_cap=1, ablation={"enable_cbam": False}), train, test, keep_state=True)
        assert not any(".cbams" in k for k in r.state)


def preset_stages():
    from tranet.network import STAGES

    return STAGES


def test_cross_validate_covers_every_subject(small_data):
    res = cross_validate(small_data, preset("toy"), quick_cfg(epoch_cap=1), folds=3)
    tested = sorted(sum(res.splits, []))
    assert tested == sorted(set(small_data.subjects.tolist()))
    assert [r.fold for r in res.reports] == [1, 2, 3]
    assert res.mean.f1.shape == (8,)


def test_overfit_fixed_batch(small_data):
    """300 SGD steps on one batch of 8 drive the summed branch loss below 0.05."""
    model = build_model(preset("toy"), 0)
    opt = SGD(model.parameters(), lr=0.01, momentum=0.9, weight_decay=0.0)
    x = nc.Tensor(small_data.images[:8])
    y = binarize(small_data.intensities[:8])
    rows = small_data.center_rows(8)[:8]
    for _ in range(300):
        opt.zero_grad()
        loss = multilabel_bce(forward(model, x, rows)[:3], y)
        nc.backward(loss)
        opt.step()
    assert loss.item() < 0.05
