import os
import struct

import numpy as np
import pytest
import torch

from ildm.container import MAGIC, TensorContainer, load_checkpoint, save_checkpoint
from ildm.errors import ContainerIOError, ContractError


@pytest.fixture()
def container():
    yield TensorContainer({"images": np.arange(24, dtype=np.float32).reshape(2, 3, 4),
                           "ids": np.array([[0, 1], [2, 255]], dtype=np.uint8),
                           "scalar": np.array(1.5, dtype=np.float32)})


def test_save_load(tmp_path, container):
    path = os.path.join(tmp_path, "sub", "c.ildm")
    container.save(path)
    loaded = TensorContainer.load(path)
    assert loaded.names() == ["images", "ids", "scalar"]
    for name in container.names():
        assert loaded[name].dtype == container[name].dtype
        assert np.array_equal(loaded[name], container[name])
    # No temporary files are left behind
    assert os.listdir(os.path.dirname(path)) == ["c.ildm"]


def test_layout_is_little_endian(container):
    data = container.to_bytes()
    assert data[:8] == MAGIC
    assert struct.unpack("<II", data[8:16]) == (1, 3)
    assert struct.unpack("<H", data[16:18]) == (len("images"),)


def test_rejects_unsupported_dtypes():
    with pytest.raises(ContractError):
        TensorContainer({"x": np.zeros(3, dtype=np.float64)})
    with pytest.raises(ContractError):
        TensorContainer()["missing"]


def test_truncation_reports_offset(container):
    data = container.to_bytes()
    with pytest.raises(ContainerIOError) as e:
        TensorContainer.from_bytes(data[:-5], "truncated")
    assert e.value.offset is not None
    assert "byte offset" in e.value.message
    assert e.value.key == "truncated"


def test_bad_magic_and_version(container):
    data = container.to_bytes()
    with pytest.raises(ContainerIOError) as e:
        TensorContainer.from_bytes(b"NOTATNSR" + data[8:])
    assert e.value.offset == 0
    with pytest.raises(ContainerIOError):
        TensorContainer.from_bytes(data[:8] + struct.pack("<II", 99, 3) + data[16:])
    with pytest.raises(ContainerIOError):
        TensorContainer.from_bytes(data + b"\x00")


def test_duplicate_and_unknown_tag():
    one = TensorContainer({"a": np.zeros(2, dtype=np.float32)}).to_bytes()
    entry = one[16:]
    with pytest.raises(ContainerIOError):
        TensorContainer.from_bytes(one[:8] + struct.pack("<II", 1, 2) + entry + entry)
    # dtype tag sits right after the 2-byte name length and the 1-byte name
    bad = bytearray(one)
    bad[16 + 2 + 1] = 7
    with pytest.raises(ContainerIOError):
        TensorContainer.from_bytes(bytes(bad))


def test_missing_file_is_io_error(tmp_path):
    with pytest.raises(ContainerIOError) as e:
        TensorContainer.load(os.path.join(tmp_path, "nope.ildm"))
    assert e.value.category == "io"


def test_checkpoint_header_and_kind(tmp_path):
    module = torch.nn.Linear(3, 2)
    path = os.path.join(tmp_path, "linear.ildm")
    save_checkpoint(path, "vae", module, header={"note": "test"})
    header, state = load_checkpoint(path, kind="vae")
    assert header == {"kind": "vae", "note": "test"}
    assert torch.equal(state["weight"], module.weight.detach())
    with pytest.raises(ContainerIOError):
        load_checkpoint(path, kind="estimator")


def test_envelope_format():
    e = ContainerIOError('bad "thing"\nhere', key="x.ildm", offset=12)
    assert e.envelope() == "error category=io key=x.ildm message=\"bad 'thing' here (at byte offset 12)\""
