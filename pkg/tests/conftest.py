import numpy as np
import pytest
from PIL import Image

from carid.augment import build_policy
from carid.backbones import BackboneSpec, build_model
from carid.dataset import load_manifest, stratified_split
from carid.synthetic import generate_synthetic_corpus
from carid.trainer import TrainConfig, train


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    generate_synthetic_corpus(root, n_classes=3, per_class=30, seed=0)
    return root


@pytest.fixture(scope="session")
def synth_manifest(synth_root):
    manifest, report = load_manifest(synth_root)
    assert not report.issues
    return stratified_split(manifest, (2 / 3, 1 / 6, 1 / 6), seed=0)


@pytest.fixture(scope="session")
def plain_policy():
    """Resize+normalize only, sized for the synthetic corpus."""
    return build_policy({"output_size": [48, 48], "transforms": []})


@pytest.fixture(scope="session")
def quick_run(synth_manifest, plain_policy):
    """A small trained model for serving/checkpoint tests (not the overfit gate)."""
    model = build_model(BackboneSpec("resnet50"), synth_manifest.num_classes,
                        dropout_rate=0.1, seed=0)
    cfg = TrainConfig(optimizer="sgd", lr=0.01, weight_decay=0.0, batch_size=32,
                      epochs=4, dropout_rate=0.1, seed=0)
    payload, history = train(model, synth_manifest, plain_policy, cfg)
    return model, payload, history


def save_png(path, array):
    Image.fromarray(np.asarray(array, dtype=np.uint8)).save(path)
