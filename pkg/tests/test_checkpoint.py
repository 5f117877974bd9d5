import io
import struct

import numpy as np
import pytest

from svreid.backbone import BackboneConfig, build_model
from svreid.checkpoint import export_checkpoint, import_checkpoint, read_tensors, write_tensors
from svreid.errors import (
    BadMagicError,
    CheckpointError,
    DataError,
    MissingTensorError,
    ShapeMismatchError,
    TruncatedCheckpointError,
    UnknownTensorError,
)
from svreid.head import VerificationHead
from svreid.tensor import Tensor


def test_layout_matches_hand_packed_bytes():
    arr = np.array([[1.0, -2.0, 0.5]], dtype=np.float32)
    expected = (
        b"SVR1"
        + struct.pack("<I", 1)
        + struct.pack("<H", 3) + b"w.x"
        + bytes([0, 2])
        + struct.pack("<II", 1, 3)
        + struct.pack("<3f", 1.0, -2.0, 0.5)
    )
    buf = io.BytesIO()
    write_tensors({"w.x": arr}, buf)
    assert buf.getvalue() == expected
    np.testing.assert_array_equal(read_tensors(io.BytesIO(expected))["w.x"], arr)


def test_entries_sorted_by_name():
    buf = io.BytesIO()
    write_tensors({"b": np.zeros(1), "a": np.ones(1)}, buf)
    data = buf.getvalue()
    assert data.index(b"a") < data.index(b"b", 8)


@pytest.fixture(scope="module")
def model_and_head():
    model = build_model(BackboneConfig(), seed=5)
    rng = np.random.default_rng(0)
    head = VerificationHead(Tensor(rng.standard_normal((2, 64)).astype(np.float32), requires_grad=True),
                            Tensor(np.array([0.1, -0.1], np.float32), requires_grad=True))
    return model, head


def _bytes(model, head):
    buf = io.BytesIO()
    export_checkpoint(model, buf, head)
    return buf.getvalue()


def test_round_trip_is_byte_identical(model_and_head, tmp_path):
    model, head = model_and_head
    path = tmp_path / "a.svr1"
    export_checkpoint(model, path, head)
    loaded, loaded_head = import_checkpoint(build_model(BackboneConfig(), seed=99), path, VerificationHead.zeros(64))
    for name in model:
        assert loaded[name].data.tobytes() == model[name].data.tobytes()
        assert loaded[name].requires_grad == model[name].requires_grad
    assert loaded_head.weight.data.tobytes() == head.weight.data.tobytes()
    assert _bytes(loaded, loaded_head) == path.read_bytes()


def test_head_uses_prefix(model_and_head):
    names = read_tensors(io.BytesIO(_bytes(*model_and_head)))
    assert {"head.weight", "head.bias"} <= set(names)


def test_bad_magic(model_and_head):
    data = b"XXXX" + _bytes(*model_and_head)[4:]
    with pytest.raises(BadMagicError):
        read_tensors(io.BytesIO(data))


@pytest.mark.parametrize("cut", [2, 6, 9, 40, -1])
def test_truncated(model_and_head, cut):
    data = _bytes(*model_and_head)
    with pytest.raises((TruncatedCheckpointError, BadMagicError)):
        read_tensors(io.BytesIO(data[:cut]))


def test_truncated_payload_is_truncation_error(model_and_head):
    data = _bytes(*model_and_head)
    with pytest.raises(TruncatedCheckpointError):
        read_tensors(io.BytesIO(data[:-3]))


def test_trailing_bytes_rejected(model_and_head):
    with pytest.raises(CheckpointError):
        read_tensors(io.BytesIO(_bytes(*model_and_head) + b"\0"))


def test_unknown_missing_and_shape_errors_are_distinct(model_and_head):
    model, head = model_and_head
    tensors = {k: t.data for k, t in model.items()}
    tensors.update({k: t.data for k, t in head.tensors().items()})

    def load(mapping):
        buf = io.BytesIO()
        write_tensors(mapping, buf)
        buf.seek(0)
        return import_checkpoint(model, buf, VerificationHead.zeros(64))

    with pytest.raises(UnknownTensorError, match="extra.weight"):
        load({**tensors, "extra.weight": np.zeros(2)})
    missing = dict(tensors)
    del missing["embed.bias"]
    with pytest.raises(MissingTensorError, match="embed.bias"):
        load(missing)
    with pytest.raises(ShapeMismatchError, match="embed.weight"):
        load({**tensors, "embed.weight": tensors["embed.weight"].T})


def test_checkpoint_errors_are_data_errors():
    for cls in (BadMagicError, TruncatedCheckpointError, UnknownTensorError, MissingTensorError, ShapeMismatchError):
        assert issubclass(cls, DataError) and cls.exit_code == 3
