import math

import numpy as np
import pytest
import torch

from ibattr.adapter import as_batch, linear_adapter
from ibattr.models import (
    TrainConfig,
    ToyCnnSpec,
    build_model,
    detector_labels,
    holdout_split,
    load_checkpoint,
    load_checkpoint_arrays,
    save_checkpoint,
    snapshot_parameters,
    train_classifier,
    train_regressor,
    weighted_bce_loss,
)
from ibattr.synthetic import GeneratorConfig, cumulative_scores, generate_dataset, label_matrix, stack_images


def test_layers_and_spatial_sizes():
    model = build_model(ToyCnnSpec())
    assert model.layers == ["block1", "block2", "block3", "block4"]
    assert [model.layer_shape(l, (64, 64))[1] for l in model.layers] == [32, 16, 8, 4]
    assert model.output_kind == "multilabel_classifier"
    assert build_model(ToyCnnSpec(head="scalar_linear")).output_kind == "scalar_regressor"


def test_spec_validation():
    with pytest.raises(ValueError):
        ToyCnnSpec(input_size=(60, 60))
    with pytest.raises(ValueError):
        ToyCnnSpec(channels_per_block=(8,))
    with pytest.raises(ValueError):
        ToyCnnSpec(head="softmax")


def test_same_seed_same_parameters():
    a = snapshot_parameters(build_model(ToyCnnSpec(seed=5)))
    b = snapshot_parameters(build_model(ToyCnnSpec(seed=5)))
    c = snapshot_parameters(build_model(ToyCnnSpec(seed=6)))
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_split_consistency_every_layer():
    model = build_model(ToyCnnSpec(seed=1))
    x = as_batch(np.random.default_rng(0).random((3, 64, 64)))
    with torch.no_grad():
        full = model(x)
        for layer in model.layers:
            split = model.forward_from(layer, model.features_at(layer, x))
            assert torch.allclose(full, split, atol=1e-5)
            assert torch.equal(model(x), full)


def test_weighted_bce_values():
    assert weighted_bce_loss([[0.5]], [[1.0]], [1.0]).item() == pytest.approx(math.log(2), abs=1e-4)
    assert weighted_bce_loss([[0.5]], [[1.0]], [2.0]).item() == pytest.approx(1.3863, abs=1e-4)
    neg = [weighted_bce_loss([[0.3]], [[0.0]], [w]).item() for w in (0.5, 1.0, 9.0)]
    assert max(neg) - min(neg) == 0.0
    with pytest.raises(ValueError):
        weighted_bce_loss([[1.0]], [[1.0]], [1.0])
    with pytest.raises(ValueError):
        weighted_bce_loss([[float("nan")]], [[1.0]], [1.0])


def test_zero_epochs_leave_model_unchanged():
    model = build_model(ToyCnnSpec(input_size=(16, 16), channels_per_block=(4, 8), n_outputs=2))
    before = snapshot_parameters(model)
    images = np.random.default_rng(0).random((10, 16, 16))
    labels = np.tile([[1.0, 0.0], [0.0, 1.0]], (5, 1))
    train_classifier(model, images, labels, TrainConfig(epochs=0))
    after = snapshot_parameters(model)
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_class_without_positives_is_named():
    model = build_model(ToyCnnSpec(input_size=(16, 16), channels_per_block=(4, 8), n_outputs=2))
    images = np.random.default_rng(0).random((10, 16, 16))
    labels = np.column_stack([np.ones(10), np.zeros(10)])
    with pytest.raises(ValueError, match="class 1"):
        train_classifier(model, images, labels, TrainConfig(epochs=1, weighted_bce=True))


def test_holdout_split_is_seeded_partition():
    a, b = holdout_split(50, 0.2, 3)
    assert len(b) == 10 and len(np.intersect1d(a, b)) == 0 and len(np.union1d(a, b)) == 50
    a2, b2 = holdout_split(50, 0.2, 3)
    assert np.array_equal(b, b2)


def test_detector_labels():
    grids = [np.array([[3, 0], [0, 0], [0, 0]]), np.array([[2, 2], [2, 2], [2, 2]])]
    np.testing.assert_array_equal(detector_labels(grids), [[1, 0, 1], [0, 1, 0]])


def test_checkpoint_roundtrip(tmp_path):
    model = build_model(ToyCnnSpec(n_outputs=3, seed=2))
    arrays = {"stats_images": np.random.default_rng(0).random((4, 64, 64)).astype(np.float32)}
    path = save_checkpoint(tmp_path / "m.ckpt", model, {"note": "x"}, arrays)
    assert path.read_bytes()[:8] == b"IBATTRCK"
    loaded, extra = load_checkpoint(path)
    assert extra == {"note": "x"}
    assert loaded.spec == model.spec
    x = as_batch(np.random.default_rng(1).random((2, 64, 64)))
    with torch.no_grad():
        assert torch.equal(loaded(x), model(x))
    np.testing.assert_array_equal(load_checkpoint_arrays(path)["stats_images"], arrays["stats_images"])
    (tmp_path / "bad").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad")


def test_linear_adapter():
    w = np.arange(4.0).reshape(2, 2)
    model = linear_adapter(w, bias=1.0)
    assert model(torch.ones((1, 1, 2, 2), dtype=torch.float64)).item() == pytest.approx(7.0)


@pytest.mark.slow
def test_classifier_learns_default_generator():
    samples, _ = generate_dataset(GeneratorConfig(samples=600, seed=11))
    model = build_model(ToyCnnSpec(n_outputs=2, seed=0))
    cfg = TrainConfig(epochs=6, seed=0)
    model, report = train_classifier(model, stack_images(samples), label_matrix(samples), cfg)
    assert all(a >= 0.95 for a in report.per_class_auroc)
    assert report.per_class_ap is not None
    # windowed decrease of the training loss
    assert np.mean(report.epoch_losses[-2:]) < np.mean(report.epoch_losses[:2])
    model2, report2 = train_classifier(build_model(ToyCnnSpec(n_outputs=2, seed=0)), stack_images(samples), label_matrix(samples), cfg)
    np.testing.assert_allclose(report2.per_class_auroc, report.per_class_auroc, atol=1e-6)


@pytest.mark.slow
def test_weighted_bce_on_balanced_data_has_unit_weights():
    samples, _ = generate_dataset(GeneratorConfig(samples=400, seed=12))
    model = build_model(ToyCnnSpec(n_outputs=2, seed=0))
    _, report = train_classifier(model, stack_images(samples), label_matrix(samples), TrainConfig(epochs=1, weighted_bce=True))
    np.testing.assert_allclose(report.pos_weights, [1.0, 1.0], atol=0.25)


@pytest.mark.slow
def test_regressor_tracks_severity_and_constant_labels():
    cfg = GeneratorConfig(samples=800, n_classes=0, severity_weights=(0.4, 0.2, 0.2, 0.2), seed=13)
    samples, _ = generate_dataset(cfg)
    model = build_model(ToyCnnSpec(n_outputs=1, head="scalar_linear", seed=0))
    _, report = train_regressor(model, stack_images(samples), cumulative_scores(samples), TrainConfig(epochs=6))
    assert report.holdout_pcc >= 0.8
    assert report.holdout_mse is not None

    images = stack_images(samples[:200])
    model = build_model(ToyCnnSpec(n_outputs=1, head="scalar_linear", seed=0))
    model, _ = train_regressor(model, images, np.full(200, 4.0), TrainConfig(epochs=3))
    with torch.no_grad():
        pred = model(as_batch(images)).numpy()
    assert np.abs(pred - 4.0).max() <= 0.1
    with pytest.raises(TypeError):
        train_regressor(build_model(ToyCnnSpec(n_outputs=2)), images, np.zeros(200))
