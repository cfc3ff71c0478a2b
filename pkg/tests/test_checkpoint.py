import json

import numpy as np
import pytest

from hierbert.checkpoint import FORMAT_VERSION, copy_checkpoint, load_checkpoint, save_checkpoint
from hierbert.exceptions import ChecksumMismatchError, FormatVersionError, MissingCheckpointError
from hierbert.heads import ConcatMode
from hierbert.optimizer import AdamAMSGrad
from hierbert.tensor import GradTape
from hierbert.train import model_metadata, restore_model


@pytest.fixture
def trained(make_model, batch):
    model = make_model(mlm_layer=2, nsp_layer=1, concat=ConcatMode.NSP_OUTPUT)
    optimizer = AdamAMSGrad(model.parameters(), lr=1e-3, weight_decay=1e-4)
    with GradTape() as tape:
        loss = model.pretrain_loss(batch).total
    tape.backward(loss)
    optimizer.step()
    optimizer.freeze(["nsp_head.classifier.bias"])
    return model, optimizer


def _save(path, model, optimizer):
    meta = {**model_metadata(model), "seed": 0, "config_hash": "abc", "vocab_checksum": "def"}
    return save_checkpoint(path, model, optimizer, {"variant": "lower_nsp"}, 1, meta)


def test_round_trip(trained, batch, tmp_path):
    model, optimizer = trained
    checkpoint = load_checkpoint(_save(tmp_path / "ckpt", model, optimizer))
    assert checkpoint.step == 1
    assert checkpoint.concat == "nsp_output"
    assert checkpoint.placement["nsp_layer"] == 1
    assert checkpoint.frozen == ["nsp_head.classifier.bias"]
    assert checkpoint.optimizer_state.t == 1
    for name, value in model.state_dict().items():
        np.testing.assert_array_equal(checkpoint.parameters[name], value)
    for name, value in optimizer.state.m.items():
        np.testing.assert_array_equal(checkpoint.optimizer_state.m[name], value)

    restored = restore_model(checkpoint)
    assert restored.pretrain_loss(batch).total.item() == model.pretrain_loss(batch).total.item()


def test_identical_bytes(trained, tmp_path):
    model, optimizer = trained
    a = _save(tmp_path / "a", model, optimizer)
    b = _save(tmp_path / "b", model, optimizer)
    for name in ("manifest.json", "payload.bin"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_payload_layout(trained, tmp_path):
    model, optimizer = trained
    path = _save(tmp_path / "ckpt", model, optimizer)
    manifest = json.loads((path / "manifest.json").read_text())
    assert manifest["format_version"] == FORMAT_VERSION
    assert manifest["dtype"] == "<f8"
    offset = 0
    for entry in manifest["arrays"]:
        assert entry["offset"] == offset
        assert entry["nbytes"] == 8 * int(np.prod(entry["shape"]))
        offset += entry["nbytes"]
    assert (path / "payload.bin").stat().st_size == offset
    names = [e["name"] for e in manifest["arrays"]]
    assert names.index("optim.m.encoder.embeddings.token") > names.index("mlm_head.decoder.bias")


def test_corrupt_payload(trained, tmp_path):
    model, optimizer = trained
    path = _save(tmp_path / "ckpt", model, optimizer)
    payload = bytearray((path / "payload.bin").read_bytes())
    payload[100] ^= 0xFF
    (path / "payload.bin").write_bytes(bytes(payload))
    with pytest.raises(ChecksumMismatchError) as excinfo:
        load_checkpoint(path)
    assert excinfo.value.exit_code == 2


def test_format_version(trained, tmp_path):
    model, optimizer = trained
    path = _save(tmp_path / "ckpt", model, optimizer)
    manifest = json.loads((path / "manifest.json").read_text())
    manifest["format_version"] = FORMAT_VERSION + 1
    (path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(FormatVersionError):
        load_checkpoint(path)


def test_missing(tmp_path):
    with pytest.raises(MissingCheckpointError):
        load_checkpoint(tmp_path / "nowhere")


def test_copy_is_independent(trained, tmp_path):
    model, optimizer = trained
    source = _save(tmp_path / "ckpt", model, optimizer)
    target = copy_checkpoint(source, tmp_path / "cell" / "pretrained")
    (source / "payload.bin").write_bytes(b"")
    assert load_checkpoint(target).step == 1
