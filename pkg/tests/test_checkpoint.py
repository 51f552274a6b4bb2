import numpy as np
import pytest

from collabinfer.checkpoint import load_backbone, load_comm, save_backbone, save_comm
from collabinfer.errors import SchemaError
from collabinfer.semgroup import CommModules


def test_backbone_round_trip(backbone, tmp_path, dataset):
    path = save_backbone(backbone, tmp_path / "b.npz")
    loaded = load_backbone(path)
    a, b = backbone.named_arrays(), loaded.named_arrays()
    assert a.keys() == b.keys()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert loaded.frozen and loaded.dims == backbone.dims
    assert (loaded.predict(dataset.X_test) == backbone.predict(dataset.X_test)).all()


def test_backbone_unfrozen_load(backbone, tmp_path):
    path = save_backbone(backbone, tmp_path / "b.npz")
    assert not load_backbone(path, freeze=False).frozen


def test_comm_round_trip(tmp_path):
    comm = CommModules.build(64, hidden=(16, 8), query_size=4, key_size=12, seed=3)
    path = save_comm(comm, tmp_path / "c.npz", split=2, seed=3)
    loaded, header = load_comm(path)
    a, b = comm.named_arrays(), loaded.named_arrays()
    assert a.keys() == b.keys()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert header["split"] == 2 and header["kind"] == "comm"


def test_kind_mismatch(tmp_path):
    path = save_comm(CommModules.build(8, hidden=(4,), query_size=2, key_size=3), tmp_path / "c.npz")
    with pytest.raises(SchemaError):
        load_backbone(path)


def test_plain_npz_is_rejected(tmp_path):
    path = tmp_path / "x.npz"
    np.savez(path, a=np.zeros(3))
    with pytest.raises(SchemaError, match="missing header"):
        load_comm(path)
