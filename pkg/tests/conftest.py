import numpy as np
import pytest

from hydra_dqm import MemoryStore, ReferenceClassifier, Severity, SqliteStore
from hydra_dqm.imaging import write_pnm


@pytest.fixture(params=["memory", "sqlite"])
def store(request, tmp_path):
    if request.param == "memory":
        yield MemoryStore()
    else:
        s = SqliteStore(str(tmp_path / "test.db"))
        yield s
        s.close()


STANDARD_LABELS = [("Good", (0, 200, 0), Severity.GOOD),
                   ("Bad", (220, 0, 0), Severity.BAD)]


@pytest.fixture
def plot_type(store):
    return store.register_plot_type("occupancy", 16, 16, 1, STANDARD_LABELS,
                                    allowed_labelers=["alice"])


def label_id(pt, name):
    return next(l.label_id for l in pt.labels if l.name == name)


def register_frame(store, pt, image_root, sequence, pixels=None, run=1,
                   capture_time=None):
    """Write a PGM under the image root and register it."""
    rng = np.random.default_rng(sequence)
    img = pixels if pixels is not None else rng.uniform(0, 1, (pt.input_height,
                                                               pt.input_width))
    name = f"{pt.name}_r{run}_s{sequence}_t{1_700_000_000_000 + sequence * 1000}.pgm"
    dest = image_root / pt.name
    dest.mkdir(parents=True, exist_ok=True)
    write_pnm(dest / name, img)
    return store.register_image(
        pt.plot_type_id, run, sequence,
        capture_time if capture_time is not None else 1_700_000_000_000 + sequence * 1000,
        f"{pt.name}/{name}", pt.input_width, pt.input_height)


def make_brightness_model(store, pt, tmp_path, activate=True):
    """Hand-built model: bright frames classify Good, dark frames Bad."""
    order = tuple(sorted(l.label_id for l in pt.labels))  # (Good, Bad)
    clf = ReferenceClassifier(np.full((1, 3, 3, 1), 1.0 / 9.0), np.zeros(1),
                              np.array([[1.0], [-1.0]]), np.array([0.0, 0.5]),
                              pt.plot_type_id, order)
    path = tmp_path / "brightness.bin"
    clf.save(path)
    model = store.register_model(pt.plot_type_id, str(path), order)
    if activate:
        store.set_active_model(model.model_id)
    return model


@pytest.fixture
def seeded_model(store, plot_type, tmp_path):
    """A seeded (untrained) reference model registered and activated."""
    order = tuple(sorted(l.label_id for l in plot_type.labels))
    clf = ReferenceClassifier.seeded(plot_type.plot_type_id, order, 1, seed=42)
    path = tmp_path / "model.bin"
    clf.save(path)
    model = store.register_model(plot_type.plot_type_id, str(path), order,
                                 collect_percentage=0.1)
    store.set_active_model(model.model_id)
    store.set_thresholds(model.model_id, {lid: 0.0 for lid in order})
    return store.get_model(model.model_id)
