import pytest

from crosscal.dataio import write_synth_dataset
from crosscal.dataio.synth import SynthSceneParams
from crosscal.geometry import DeviationRange
from crosscal.losses import LossWeights
from crosscal.network import tiny
from crosscal.trainer import TrainConfig


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Four 64x32 synthetic scenes matching the tiny network resolution."""
    root = tmp_path_factory.mktemp("tinyds")
    manifest = write_synth_dataset(
        root,
        n_scenes=4,
        n_points=800,
        seed=100,
        deviation=DeviationRange(0.1, 2.0),
        params=SynthSceneParams(width=64, height=32, max_box_size=3.0),
    )
    return manifest


def tiny_train_config(manifest, out_dir, **overrides) -> TrainConfig:
    defaults = dict(
        train_manifest=str(manifest),
        checkpoint_dir=str(out_dir),
        lr=1e-3,
        epochs=1,
        batch_size=2,
        seed=7,
        loss_points=128,
        weights=LossWeights(1.0, 1.0, 0.1),
        network=tiny(),
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)
