import numpy as np
import pytest

from hydra_dqm import ReferenceClassifier, Severity
from hydra_dqm.classifier import (
    evaluate_accuracy,
    load_training_images,
    softmax,
    train_reference,
)
from hydra_dqm.errors import EmptyTrainingSet, ShapeMismatch

from conftest import label_id, register_frame


def fresh(seed=0, n_labels=2, channels=1, k=4):
    return ReferenceClassifier.seeded(1, tuple(range(1, n_labels + 1)), channels,
                                      n_kernels=k, seed=seed)


# -- softmax ----------------------------------------------------------------

def test_softmax_scalar_example():
    # oracle: scalar evaluation of e^2/(e^2+1)
    w = softmax(np.array([2.0, 0.0]))
    np.testing.assert_allclose(w, [0.8807970779778823, 0.11920292202211755],
                               atol=1e-15)
    assert abs(w.sum() - 1.0) < 1e-9


def test_softmax_uniform_on_equal_logits():
    w = softmax(np.array([3.3, 3.3, 3.3]))
    np.testing.assert_allclose(w, [1 / 3] * 3, atol=1e-12)
    assert int(np.argmax(w)) == 0  # tie-break smallest index


def test_softmax_shift_invariance():
    rng = np.random.default_rng(0)
    for _ in range(100):
        logits = rng.normal(0, 5, 4)
        np.testing.assert_allclose(softmax(logits), softmax(logits + 123.456),
                                   atol=1e-9)


def test_softmax_handles_large_logits():
    w = softmax(np.array([1000.0, 0.0]))
    assert np.isfinite(w).all() and abs(w.sum() - 1.0) < 1e-9


# -- forward / gradients ----------------------------------------------------------

def test_feature_map_gradients_match_finite_differences():
    # score_c is linear in the post-ReLU maps, so central differences on
    # the pooled score reproduce the analytic per-pixel gradient exactly
    clf = fresh(seed=3)
    rng = np.random.default_rng(4)
    x = rng.uniform(0, 1, (8, 8, 1))
    result = clf.infer(x)
    c = 1
    grads = clf.class_gradients(result, c)
    step = 1e-4
    k, h, w = result.feature_maps.shape

    def score(maps):
        return float(clf.linear_w[c] @ maps.mean(axis=(1, 2)) + clf.linear_b[c])

    for idx in [(0, 0, 0), (1, 2, 3), (k - 1, h - 1, w - 1)]:
        bumped = result.feature_maps.copy()
        bumped[idx] += step
        dipped = result.feature_maps.copy()
        dipped[idx] -= step
        fd = (score(bumped) - score(dipped)) / (2 * step)
        assert abs(fd - grads[idx]) <= 1e-3 * max(1.0, abs(fd))


def relative_error(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def numeric_param_gradient(clf, x_col, targets, param_name, index, step=1e-4):
    param = getattr(clf, param_name)
    original = param[index]
    param[index] = original + step
    up, _ = clf.loss_and_gradients(x_col, targets)
    param[index] = original - step
    down, _ = clf.loss_and_gradients(x_col, targets)
    param[index] = original
    return (up - down) / (2 * step)


def test_parameter_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    clf = fresh(seed=6, k=3)
    images = rng.uniform(0, 1, (4, 8, 8, 1))
    targets = np.array([0, 1, 0, 1])
    x_col = ReferenceClassifier.to_columns(images)
    _, grads = clf.loss_and_gradients(x_col, targets)
    checks = 0
    for name in ("kernels", "conv_bias", "linear_w", "linear_b"):
        arr = getattr(clf, name)
        flats = rng.choice(arr.size, size=min(6, arr.size), replace=False)
        for flat in flats:
            index = np.unravel_index(flat, arr.shape)
            fd = numeric_param_gradient(clf, x_col, targets, name, index)
            an = grads[name][index]
            assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an), 1e-3), (name, index)
            checks += 1
    assert checks >= 15


# -- training ------------------------------------------------------------------------

@pytest.fixture
def labeled_training_set(store, plot_type, tmp_path):
    """Linearly separable synthetic set: dark Good frames, bright Bad."""
    good, bad = label_id(plot_type, "Good"), label_id(plot_type, "Bad")
    members = []
    rng = np.random.default_rng(11)
    for i in range(16):
        is_bad = i % 2 == 1
        base = 0.8 if is_bad else 0.2
        pixels = np.clip(base + rng.normal(0, 0.02, (16, 16)), 0, 1)
        rec = register_frame(store, plot_type, tmp_path, i, pixels=pixels)
        lid = bad if is_bad else good
        store.assign_label(rec.image_id, lid, "alice")
        members.append((rec.image_id, lid))
    return store.create_training_set(plot_type.plot_type_id, members)


def test_training_reaches_full_accuracy(store, plot_type, labeled_training_set,
                                        tmp_path):
    artifact = tmp_path / "trained.bin"
    model = train_reference(store, tmp_path, labeled_training_set, epochs=500,
                            learning_rate=0.5, seed=1, artifact_path=artifact)
    clf = ReferenceClassifier.load(artifact)
    images, targets, order = load_training_images(store, tmp_path,
                                                  labeled_training_set)
    assert order == model.label_order
    assert evaluate_accuracy(clf, images, targets) == 1.0


def test_zero_epochs_returns_seeded_model(store, plot_type, labeled_training_set,
                                          tmp_path):
    artifact = tmp_path / "zero.bin"
    train_reference(store, tmp_path, labeled_training_set, epochs=0,
                    learning_rate=0.5, seed=9, artifact_path=artifact)
    trained = ReferenceClassifier.load(artifact)
    pt = store.get_plot_type(labeled_training_set.plot_type_id)
    seeded = ReferenceClassifier.seeded(pt.plot_type_id, trained.label_order,
                                        pt.channels, seed=9)
    np.testing.assert_array_equal(trained.kernels, seeded.kernels)
    np.testing.assert_array_equal(trained.linear_w, seeded.linear_w)


def test_training_determinism_byte_identical(store, plot_type,
                                             labeled_training_set, tmp_path):
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    train_reference(store, tmp_path, labeled_training_set, epochs=50,
                    learning_rate=0.5, seed=4, artifact_path=a)
    train_reference(store, tmp_path, labeled_training_set, epochs=50,
                    learning_rate=0.5, seed=4, artifact_path=b)
    assert a.read_bytes() == b.read_bytes()


def test_training_loss_non_increasing_small_lr(store, plot_type,
                                               labeled_training_set, tmp_path):
    images, targets, order = load_training_images(store, tmp_path,
                                                  labeled_training_set)
    pt = store.get_plot_type(plot_type.plot_type_id)
    clf = ReferenceClassifier.seeded(pt.plot_type_id, order, pt.channels, seed=2)
    x_col = ReferenceClassifier.to_columns(images)
    losses = []
    for _ in range(40):
        loss, grads = clf.loss_and_gradients(x_col, targets)
        losses.append(loss)
        clf.apply_gradients(grads, 1e-3)
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_empty_training_set_rejected(store, plot_type, tmp_path):
    ts = store.create_training_set(plot_type.plot_type_id, [])
    with pytest.raises(EmptyTrainingSet):
        train_reference(store, tmp_path, ts, epochs=1, learning_rate=0.1, seed=0,
                        artifact_path=tmp_path / "x.bin")


# -- artifact format ----------------------------------------------------------------------

def test_artifact_round_trip(tmp_path):
    clf = fresh(seed=12, n_labels=3, channels=3, k=5)
    clf.label_order = (7, 9, 8)
    path = tmp_path / "m.bin"
    clf.save(path)
    assert path.read_bytes()[:4] == b"HYDM"
    back = ReferenceClassifier.load(path)
    assert back.label_order == (7, 9, 8)
    assert back.plot_type_id == clf.plot_type_id
    np.testing.assert_array_equal(back.kernels, clf.kernels)
    np.testing.assert_array_equal(back.conv_bias, clf.conv_bias)
    np.testing.assert_array_equal(back.linear_w, clf.linear_w)
    np.testing.assert_array_equal(back.linear_b, clf.linear_b)


def test_save_is_deterministic(tmp_path):
    clf = fresh(seed=13)
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    clf.save(a)
    clf.save(b)
    assert a.read_bytes() == b.read_bytes()


def test_infer_rejects_wrong_channels():
    clf = fresh(channels=1)
    with pytest.raises(ShapeMismatch):
        clf.infer(np.zeros((8, 8, 3)))


def test_batch_forward_matches_single_inference():
    rng = np.random.default_rng(20)
    clf = fresh(seed=21, k=6)
    images = rng.uniform(0, 1, (5, 9, 9, 1))
    x_col = ReferenceClassifier.to_columns(images)
    _, _, batch_logits = clf._batch_forward(x_col)
    for i in range(5):
        single = clf.infer(images[i]).logits
        np.testing.assert_allclose(batch_logits[i], single, atol=1e-12)
