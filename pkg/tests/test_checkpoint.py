import os
import zipfile

import numpy as np
import pytest
import torch

from latentbfr.checkpoint import (CheckpointError, file_sha256, load_checkpoint, load_module, module_arrays,
                                  save_checkpoint, tensor_digest)


def test_round_trip_and_stable_hash(tmp_path):
    arrays = {"w": np.arange(6.0).reshape(2, 3), "i": np.array([1, 2], dtype=np.int64)}
    h1 = save_checkpoint(tmp_path / "a.ckpt", arrays, {"stage": "x"})
    h2 = save_checkpoint(tmp_path / "b.ckpt", arrays, {"stage": "x"})
    assert h1 == h2 == file_sha256(tmp_path / "a.ckpt")
    got, manifest = load_checkpoint(tmp_path / "a.ckpt")
    assert manifest["stage"] == "x" and manifest["arrays"] == ["i", "w"]
    assert all(np.array_equal(got[k], arrays[k]) for k in arrays)


def test_no_partial_file_on_failure(tmp_path):
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, {"w": np.zeros(2)}, {})
    before = path.read_bytes()
    with pytest.raises(CheckpointError):
        save_checkpoint(path, {"w": np.array([np.nan])}, {})
    assert path.read_bytes() == before
    assert os.listdir(tmp_path) == ["c.ckpt"]


def test_missing_and_corrupt(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "nope.ckpt")
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a zip")
    with pytest.raises(CheckpointError, match="corrupt"):
        load_checkpoint(bad)
    with zipfile.ZipFile(tmp_path / "nomanifest.ckpt", "w") as zf:
        zf.writestr("w.npy", b"")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nomanifest.ckpt")


def test_module_round_trip(tmp_path):
    a = torch.nn.Linear(3, 2)
    b = torch.nn.Linear(3, 2)
    save_checkpoint(tmp_path / "m.ckpt", module_arrays(a, "lin"), {})
    arrays, _ = load_checkpoint(tmp_path / "m.ckpt")
    load_module(b, arrays, "lin")
    assert tensor_digest(a) == tensor_digest(b)
    with pytest.raises(CheckpointError):
        load_module(b, arrays, "other")
