import numpy as np
import pytest

from moda import LossWeights, TrainConfig, build_model, make_blobs, train
from moda.nn import mlp_spec

# The shared desk benchmark: 4-class blobs, MLP 2-32-32-4, 60 epochs at the
# default loss weights. Several test modules and most acceptance criteria
# reuse this one trained model.
BLOBS = dict(classes=4, per_class=300, dim=2, spread=0.8, seed=7)
TRAIN = dict(epochs=60, batch_size=64, seed=0, eval_every=20)


@pytest.fixture(scope="session")
def blobs_data():
    return make_blobs(**BLOBS)


@pytest.fixture(scope="session")
def trained_blobs(blobs_data):
    train_ds, test_ds = blobs_data
    model = build_model(mlp_spec(2, [32, 32], 4, seed=TRAIN["seed"]))
    model, log = train(model, train_ds, TrainConfig(**TRAIN), test_set=test_ds)
    return model, log


@pytest.fixture(scope="session")
def small_trained(blobs_data):
    """A cheap 20-epoch model for tests that only need plausible weights."""
    train_ds, _ = blobs_data
    model = build_model(mlp_spec(2, [16, 16], 4, seed=3))
    model, _ = train(model, train_ds,
                     TrainConfig(epochs=20, batch_size=64, seed=3))
    return model


def rand_activations(rng, batch, widths, labels=None):
    """Non-negative activation matrices shaped like recorded layers."""
    from moda.nn import ActivationBatch
    from moda import Tensor
    if labels is None:
        labels = rng.integers(0, 4, size=batch)
    layers = [Tensor(np.abs(rng.standard_normal((batch, w)))) for w in widths]
    return ActivationBatch(layers=layers, labels=np.asarray(labels),
                           layer_indices=list(range(len(widths))))
