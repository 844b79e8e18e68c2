from dataclasses import replace

import numpy as np
import pytest

import numeric as nm
import trainer
from config import ExperimentConfig
from data_loader import ClipDataset
from errors import ContractError, InputError, NumericError
from output_manager import load_checkpoint, read_metrics
from synth_data import SynthConfig, generate_dataset
from trainer import Adam, build_model, evaluate, evaluate_model, predict, top1_summary, train


@pytest.fixture(scope="module")
def dataset():
    clips = generate_dataset(SynthConfig(clip_length=8, train_size=8, test_size=4))
    return ClipDataset.from_clips(clips, splits={"train": [c.clip_id for c in clips[:8]],
                                                 "test": [c.clip_id for c in clips[8:]]},
                                  num_classes=12)


@pytest.fixture
def cfg(tmp_path):
    return ExperimentConfig(epochs=1, batch_size=4, output_dir=str(tmp_path), train_dtype="float32")


class TestAdam:

    def test_first_step_moves_each_weight_by_learning_rate(self):
        p = nm.parameter(np.array([1.0, -2.0]))
        opt = Adam({"p": p}, lr=0.1)
        nm.tsum(nm.mul(p, p)).backward()
        opt.step()
        np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-6)

    def test_parameters_without_gradient_are_skipped(self):
        used, unused = nm.parameter(np.ones(2)), nm.parameter(np.ones(2))
        opt = Adam({"used": used, "unused": unused}, lr=0.1)
        nm.tsum(used).backward()
        opt.step()
        np.testing.assert_array_equal(unused.data, [1.0, 1.0])
        assert not np.array_equal(used.data, [1.0, 1.0])

    def test_frozen_tensors_are_not_tracked(self):
        frozen = nm.Tensor(np.ones(2))
        assert Adam({"f": frozen}).params == {}


class TestScoring:

    def test_ties_go_to_lowest_class(self):
        assert predict([[0.5, 0.5, 0.0], [0.2, 0.4, 0.4]]).tolist() == [0, 1]

    def test_perfect_and_constant_predictors(self):
        labels = list(range(12))
        assert top1_summary(labels, labels, 12).top1 == 100.0
        constant = top1_summary([0] * 12, labels, 12)
        assert constant.top1 == pytest.approx(8.33, abs=0.01)
        assert constant.correct == 1 and constant.per_class[0] == 100.0 and constant.per_class[5] == 0.0

    def test_confusion_rows_are_true_labels(self):
        result = top1_summary([1, 1, 0], [0, 1, 1], 2)
        assert result.confusion.tolist() == [[0, 1], [1, 1]]

    def test_empty_split_rejected(self):
        with pytest.raises(InputError):
            top1_summary([], [], 3)


class TestTraining:

    def test_one_epoch_writes_metrics_and_checkpoint(self, cfg, dataset, tmp_path):
        result = train(cfg, dataset, out_dir=tmp_path, verbose=False)
        frame = read_metrics(result.metrics)
        assert frame["split"].tolist() == ["train", "val"] and frame["epoch"].tolist() == [1, 1]
        train_row, val_row = frame.iloc[0], frame.iloc[1]
        assert train_row["loss"] == pytest.approx(result.history[0]["train_loss"], abs=1e-5)
        assert val_row["loss"] == pytest.approx(result.history[0]["val_loss"], abs=1e-5) and val_row["loss"] > 0
        assert 0.0 <= train_row["top1"] <= 100.0
        assert result.steps == 2 and result.best_epoch == 1
        model, header = load_checkpoint(result.checkpoint)
        assert header["extra"]["epoch"] == 1
        assert model.num_classes == 12
        assert 0.0 <= evaluate(result.checkpoint, dataset, "test").top1 <= 100.0

    def test_frozen_weights_stay_bit_identical(self, cfg, dataset, tmp_path):
        result = train(cfg, dataset, out_dir=tmp_path, verbose=False)
        with nm.precision(cfg.train_dtype):
            fresh = build_model(cfg, dataset.num_classes)
        trained = result.model.named_parameters()
        for name, p in fresh.frozen_parameters().items():
            np.testing.assert_array_equal(trained[name].data, p.data, err_msg=name)
        name = "head.fc2.weight"
        assert not np.array_equal(trained[name].data, fresh.named_parameters()[name].data)

    def test_same_seed_reproduces_run(self, cfg, dataset, tmp_path):
        a = train(cfg, dataset, out_dir=tmp_path / "a", verbose=False)
        b = train(cfg, dataset, out_dir=tmp_path / "b", verbose=False)
        assert a.history == b.history
        assert a.metrics.read_bytes() == b.metrics.read_bytes()
        for name, p in a.model.named_parameters().items():
            np.testing.assert_array_equal(b.model.named_parameters()[name].data, p.data)

    def test_max_steps_and_subset(self, cfg, dataset, tmp_path):
        result = train(replace(cfg, epochs=3, max_steps=1, subset=4), dataset, out_dir=tmp_path, verbose=False)
        assert result.steps == 1 and len(result.history) == 1

    def test_nonfinite_batch_is_dumped(self, cfg, dataset, tmp_path, monkeypatch):
        def broken_loss(probs, labels):
            raise NumericError("non-finite value in log")

        monkeypatch.setattr(trainer, "loss", broken_loss)
        with pytest.raises(NumericError, match="epoch 1, step 0"):
            train(cfg, dataset, out_dir=tmp_path, verbose=False)
        assert (tmp_path / "nonfinite_batch.json").exists()

    def test_class_count_mismatch(self, dataset):
        model = build_model(ExperimentConfig(), num_classes=4)
        with pytest.raises(ContractError):
            evaluate_model(model, dataset, dataset.split("test"))

    def test_empty_evaluation_split(self, dataset):
        with pytest.raises(InputError):
            evaluate_model(build_model(ExperimentConfig(), 12), dataset, [])


@pytest.mark.slow
def test_full_model_memorizes_four_clips(tmp_path):
    clips = generate_dataset(SynthConfig(clip_length=8, train_size=4, test_size=0))
    ids = [c.clip_id for c in clips]
    ds = ClipDataset.from_clips(clips, splits={"train": ids, "val": ids}, num_classes=12)
    cfg = ExperimentConfig(epochs=200, max_steps=200, batch_size=4, output_dir=str(tmp_path))
    result = train(cfg, ds, verbose=False)
    assert result.steps <= 200
    assert result.best_val_top1 >= 99.0


def test_evaluation_reports_mean_loss(dataset):
    model = build_model(ExperimentConfig(), 12)
    for p in model.head.values():
        p.data[:] = 0.0
    result = evaluate_model(model, dataset, dataset.split("test"))
    assert result.loss == pytest.approx(np.log(12))
