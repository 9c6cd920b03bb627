import numpy as np
import pytest

from safn.checkpoint import FORMAT_TAG, Checkpoint, checkpoint_from_dict, checkpoint_to_dict, load_checkpoint, save_checkpoint
from safn.core import DataError, Modality
from safn.data import fit_preprocessor
from safn.model import ModelWiring, predict
from safn.synthetic import generate_synthetic
from safn.testing import tiny_synthetic_config
from safn.utils.serialization import JsonSerializer
from tests.utils import random_batch, tiny_params


def test_reloaded_checkpoint_predicts_bit_for_bit(tmp_path):
    params = tiny_params(11)
    batch = random_batch(7, seed=3)
    checkpoint = Checkpoint(params=params, feature_names=dict(batch.feature_names), metadata={"fold": 2, "best_epoch": 5})
    path = save_checkpoint(tmp_path / "nested" / "fold_2.json", checkpoint)

    loaded = load_checkpoint(path)
    np.testing.assert_array_equal(loaded.params.flat, params.flat)
    assert loaded.config == params.layout.config
    assert loaded.feature_names == batch.feature_names
    assert loaded.metadata == {"fold": 2, "best_epoch": 5}

    before, gates_before = predict(params, batch)
    after, gates_after = predict(loaded.params, batch)
    np.testing.assert_array_equal(before, after)
    np.testing.assert_array_equal(gates_before, gates_after)


def test_preprocessor_and_schema_round_trip():
    dataset = generate_synthetic(tiny_synthetic_config())
    prep = fit_preprocessor(dataset.table, dataset.schema)
    checkpoint = Checkpoint(params=tiny_params(0), preprocessor=prep, schema=dataset.schema)
    serializer = JsonSerializer()
    loaded = checkpoint_from_dict(serializer.loads(serializer.dumps(checkpoint_to_dict(checkpoint))))
    assert loaded.preprocessor == prep
    assert loaded.schema.to_manifest() == dataset.schema.to_manifest()


def test_ablated_wiring_round_trips():
    wiring = ModelWiring(modalities=(Modality.CLINICAL, Modality.MRI_VOL), cross_attention=False, gates=False)
    loaded = checkpoint_from_dict(checkpoint_to_dict(Checkpoint(params=tiny_params(1, wiring))))
    assert loaded.wiring == wiring
    assert loaded.params.layout.names == tiny_params(1, wiring).layout.names


def test_rejects_foreign_or_corrupt_documents(tmp_path):
    data = checkpoint_to_dict(Checkpoint(params=tiny_params(2)))
    assert data["format"] == FORMAT_TAG

    with pytest.raises(DataError):
        checkpoint_from_dict({**data, "format": "something-else"})
    with pytest.raises(DataError):
        checkpoint_from_dict({**data, "version": 99})
    with pytest.raises(DataError):
        checkpoint_from_dict({**data, "params": data["params"][:-1]})
    with pytest.raises(DataError):
        checkpoint_from_dict({**data, "param_names": list(reversed(data["param_names"]))})

    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "missing.json")
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(DataError):
        load_checkpoint(broken)
