import numpy as np
import pytest

from loracl import checkpoint
from loracl.errors import (CheckpointFormatError, CheckpointVersionError,
                           ContractError, LoraclError)


def _sample_tensors():
    rng = np.random.default_rng(0)
    return [
        ("backbone.patch_embed", rng.normal(size=(48, 32)).astype(np.float32).astype(np.float64)),
        ("head.b", np.zeros(10)),
        ("scalar.step", np.array(3.0)),
    ]


def test_round_trip_values_and_metadata(tmp_path):
    path = tmp_path / "state.ckpt"
    meta = {"seed": 3, "method": "color"}
    checkpoint.save_checkpoint(_sample_tensors(), path, metadata=meta)
    tensors, loaded_meta = checkpoint.load_checkpoint(path)
    assert loaded_meta == meta
    assert set(tensors) == {"backbone.patch_embed", "head.b", "scalar.step"}
    for name, original in _sample_tensors():
        assert tensors[name].dtype == np.float64
        np.testing.assert_array_equal(tensors[name], original)


def test_save_load_save_is_byte_identical(tmp_path):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    checkpoint.save_checkpoint(_sample_tensors(), a, metadata={"k": 1})
    tensors, meta = checkpoint.load_checkpoint(a)
    checkpoint.save_checkpoint(list(tensors.items()), b, metadata=meta)
    assert a.read_bytes() == b.read_bytes()


def test_non_representable_values_snap_to_single_precision(tmp_path):
    path = tmp_path / "c.ckpt"
    checkpoint.save_checkpoint({"x": np.array([1.0 / 3.0])}, path)
    tensors, _ = checkpoint.load_checkpoint(path)
    assert tensors["x"][0] == float(np.float32(1.0 / 3.0))


def test_manifest_matches_tensor_table(tmp_path):
    path = tmp_path / "d.ckpt"
    checkpoint.save_checkpoint(_sample_tensors(), path)
    info = checkpoint.inspect_checkpoint(path)
    assert info["format_version"] == checkpoint.FORMAT_VERSION
    assert len(info["tensors"]) == len(_sample_tensors())
    names = [t["name"] for t in info["tensors"]]
    assert names == [n for n, _ in _sample_tensors()]
    shapes = {t["name"]: tuple(t["shape"]) for t in info["tensors"]}
    assert shapes["backbone.patch_embed"] == (48, 32)
    assert shapes["scalar.step"] == ()


def test_duplicate_names_rejected(tmp_path):
    with pytest.raises(ContractError):
        checkpoint.save_checkpoint([("x", np.zeros(2)), ("x", np.ones(2))],
                                   tmp_path / "e.ckpt")


def test_bad_magic_reports_offset_zero(tmp_path):
    path = tmp_path / "f.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
    with pytest.raises(CheckpointFormatError, match="offset 0"):
        checkpoint.load_checkpoint(path)


def test_truncated_payload_reports_offset(tmp_path):
    path = tmp_path / "g.ckpt"
    checkpoint.save_checkpoint(_sample_tensors(), path)
    whole = path.read_bytes()
    path.write_bytes(whole[:-40])
    with pytest.raises(CheckpointFormatError, match="byte offset"):
        checkpoint.load_checkpoint(path)


def test_corrupt_manifest_json(tmp_path):
    path = tmp_path / "h.ckpt"
    checkpoint.save_checkpoint({"x": np.zeros(1)}, path)
    raw = bytearray(path.read_bytes())
    raw[13] = ord("!")  # stomp inside the JSON manifest
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointFormatError):
        checkpoint.load_checkpoint(path)


def test_version_mismatch(tmp_path):
    path = tmp_path / "i.ckpt"
    checkpoint.save_checkpoint({"x": np.zeros(1)}, path)
    raw = path.read_bytes()
    tampered = raw.replace(b'"format_version":1', b'"format_version":9')
    path.write_bytes(tampered)
    with pytest.raises(CheckpointVersionError):
        checkpoint.load_checkpoint(path)


def test_missing_file_is_io_error(tmp_path):
    with pytest.raises(LoraclError):
        checkpoint.load_checkpoint(tmp_path / "absent.ckpt")
