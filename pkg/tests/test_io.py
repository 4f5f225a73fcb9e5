import json
import struct

import numpy as np
import pytest
import torch

from dlespirit.estimator import MapEstimator, NetworkConfig, TrainingConfig
from dlespirit.geometry import Geometry
from dlespirit.io import (ARRAY_SPECS, CHECKPOINT_MAGIC, ArtifactMissing, ConfigError, ContainerError,
                          DatasetContainer, config_hash, load_checkpoint, load_dataset, parse_config,
                          provenance_block, read_config, save_checkpoint, save_dataset)
from dlespirit.kspace import make_uniform_mask
from dlespirit.simulate import SimConfig, simulate_dataset

from .conftest import crandn


def _container(rng, dims=(2, 4, 32, 32)):
    s, c, y, x = dims
    cont = DatasetContainer(dims, Geometry(3.0, -1.5, 2.0, 1.0, -2.0, 0.5), R=4, offset=1, seed=11)
    data = simulate_dataset(SimConfig(dims=dims), seed=3)
    cont.set("kspace.c64", data.kspace)
    cont.set("mask.u8", make_uniform_mask(y, 4, 1).sampled)
    cont.set("maps_ref.c64", crandn(rng, s, c, y, x))
    cont.set("eigval.f32", rng.uniform(0, 1, (s, y, x)))
    cont.provenance.append({"subcommand": "test"})
    return cont


def _files(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


def test_roundtrip_bit_identity(rng, tmp_path):
    cont = _container(rng)
    save_dataset(cont, tmp_path / "a")
    loaded = load_dataset(tmp_path / "a")
    for name, value in cont.arrays.items():
        disk = ARRAY_SPECS[name][0]
        # values survive exactly up to the one rounding to the on-disk precision
        np.testing.assert_array_equal(loaded.get(name), value.astype(disk).astype(ARRAY_SPECS[name][1]))
        assert loaded.get(name).dtype == ARRAY_SPECS[name][1]
    assert loaded.meta() == cont.meta()
    save_dataset(loaded, tmp_path / "b")
    assert _files(tmp_path / "a") == _files(tmp_path / "b")
    again = load_dataset(tmp_path / "b")
    for name in cont.arrays:
        assert again.get(name).tobytes() == loaded.get(name).tobytes()


def test_hand_encoded_kspace_fixture(tmp_path):
    (tmp_path / "kspace.c64").write_bytes(struct.pack("<ff", 1.0, -2.0))
    assert (tmp_path / "kspace.c64").read_bytes() == bytes.fromhex("0000803f000000c0")
    meta = DatasetContainer((1, 1, 1, 1)).meta()
    meta["arrays"] = {"kspace.c64": 8}
    (tmp_path / "meta.json").write_text(json.dumps(meta))
    loaded = load_dataset(tmp_path)
    assert loaded.get("kspace.c64").shape == (1, 1, 1, 1)
    assert loaded.get("kspace.c64")[0, 0, 0, 0] == 1 - 2j


def test_array_element_order(tmp_path):
    cont = DatasetContainer((2, 2, 2, 2))
    values = np.arange(16).reshape(2, 2, 2, 2) * (1 + 1j)
    cont.set("kspace.c64", values)
    save_dataset(cont, tmp_path)
    raw = np.frombuffer((tmp_path / "kspace.c64").read_bytes(), dtype="<f4")
    # slice-major, channel, row, column; real and imaginary interleaved
    np.testing.assert_array_equal(raw[0::2], np.arange(16))
    np.testing.assert_array_equal(raw[1::2], np.arange(16))


def _saved(rng, tmp_path):
    save_dataset(_container(rng), tmp_path)
    return json.loads((tmp_path / "meta.json").read_text())


def _rewrite(tmp_path, meta):
    (tmp_path / "meta.json").write_text(json.dumps(meta))


def test_dims_inconsistent_with_bytes(rng, tmp_path):
    meta = _saved(rng, tmp_path)
    meta["dims"]["nchannels"] = 3
    _rewrite(tmp_path, meta)
    with pytest.raises(ContainerError) as info:
        load_dataset(tmp_path)
    assert info.value.field == "kspace.c64"


def test_truncated_file_rejected(rng, tmp_path):
    _saved(rng, tmp_path)
    data = (tmp_path / "maps_ref.c64").read_bytes()
    (tmp_path / "maps_ref.c64").write_bytes(data[:-8])
    with pytest.raises(ContainerError) as info:
        load_dataset(tmp_path)
    assert info.value.field == "maps_ref.c64" and "bytes" in info.value.message


def test_unknown_version_rejected(rng, tmp_path):
    meta = _saved(rng, tmp_path)
    meta["format_version"] = 99
    _rewrite(tmp_path, meta)
    with pytest.raises(ContainerError) as info:
        load_dataset(tmp_path)
    assert info.value.field == "format_version"
    assert json.loads(info.value.to_json())["field"] == "format_version"


@pytest.mark.parametrize("mutate,field", [
    (lambda m: m.pop("seed"), "seed"),
    (lambda m: m["dims"].update(ny=0), "dims.ny"),
    (lambda m: m["geometry"].pop("alpha_deg"), "geometry"),
    (lambda m: m["arrays"].update({"bogus.c64": 4}), "bogus.c64"),
    (lambda m: m["arrays"].update({"recon.c64": 2 * 16 * 16 * 8}), "recon.c64"),
])
def test_malformed_meta_names_field(rng, tmp_path, mutate, field):
    meta = _saved(rng, tmp_path)
    mutate(meta)
    _rewrite(tmp_path, meta)
    with pytest.raises(ContainerError) as info:
        load_dataset(tmp_path)
    assert info.value.field == field


def test_bad_mask_bytes(rng, tmp_path):
    _saved(rng, tmp_path)
    raw = bytearray((tmp_path / "mask.u8").read_bytes())
    raw[0] = 7
    (tmp_path / "mask.u8").write_bytes(bytes(raw))
    with pytest.raises(ContainerError, match="0 or 1"):
        load_dataset(tmp_path)


def test_missing_meta_and_artifacts(tmp_path):
    with pytest.raises(ArtifactMissing):
        load_dataset(tmp_path)
    cont = DatasetContainer((1, 2, 4, 4))
    with pytest.raises(ArtifactMissing, match="maps_est.c64 missing"):
        cont.get("maps_est.c64")
    with pytest.raises(ContainerError):
        cont.set("kspace.c64", np.zeros((1, 2, 4, 5)))
    with pytest.raises(ContainerError):
        DatasetContainer((1, 2, 4))


def test_stale_arrays_removed(rng, tmp_path):
    cont = _container(rng)
    save_dataset(cont, tmp_path)
    del cont.arrays["maps_ref.c64"]
    save_dataset(cont, tmp_path)
    assert not (tmp_path / "maps_ref.c64").exists()
    assert not load_dataset(tmp_path).has("maps_ref.c64")


@pytest.mark.parametrize("ny", [8, 16, 128])
@pytest.mark.parametrize("R", [1, 2, 3, 4])
@pytest.mark.parametrize("offset", [0, 1])
def test_mask_line_counts_survive_io(tmp_path, ny, R, offset):
    if offset >= R:
        # R=1 has a single line class; offset 1 names no line and is rejected
        with pytest.raises(ValueError):
            make_uniform_mask(ny, R, offset)
        return
    mask = make_uniform_mask(ny, R, offset)
    expected = sum(1 for k in range(ny) if k % R == offset)
    cont = DatasetContainer((1, 1, ny, 4), R=R, offset=offset)
    cont.set("mask.u8", mask.sampled)
    save_dataset(cont, tmp_path)
    assert int(load_dataset(tmp_path).get("mask.u8").sum()) == expected == mask.sampled.sum()


def test_config_hash_and_provenance():
    a = config_hash({"b": 1, "a": [1, 2]})
    assert a == config_hash({"a": [1, 2], "b": 1})
    assert a != config_hash({"a": [1, 2], "b": 2})
    assert config_hash(TrainingConfig()) == config_hash(TrainingConfig())
    block = provenance_block("simulate", {"x": 1}, seed=4)
    assert block["subcommand"] == "simulate" and block["seed"] == 4
    assert {"dlespirit", "numpy", "scipy", "python", "torch"} <= set(block["versions"])


def test_checkpoint_roundtrip(tmp_path):
    model = MapEstimator(NetworkConfig(ncoils=2, levels=2, base_filters=4, seed=9))
    model.reset_parameters(9, zero_head=False)
    save_checkpoint(model, tmp_path / "m.ckpt", extra={"epochs": 3})
    loaded, header = load_checkpoint(tmp_path / "m.ckpt", dtype="float32")
    assert header["extra"] == {"epochs": 3}
    assert loaded.cfg == model.cfg
    for name, value in model.state_dict().items():
        assert torch.equal(loaded.state_dict()[name], value)
    data = (tmp_path / "m.ckpt").read_bytes()
    assert data[:8] == CHECKPOINT_MAGIC
    version, hlen = struct.unpack("<II", data[8:16])
    n_values = sum(p.numel() for p in model.state_dict().values())
    assert version == 1 and len(data) == 16 + hlen + 8 * n_values


def test_checkpoint_errors(tmp_path):
    model = MapEstimator(NetworkConfig(ncoils=2, levels=2, base_filters=4))
    save_checkpoint(model, tmp_path / "m.ckpt")
    data = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(data[:-8])
    with pytest.raises(ContainerError, match="tensors"):
        load_checkpoint(tmp_path / "trunc.ckpt")
    (tmp_path / "bad.ckpt").write_bytes(b"NOTACKPT" + data[8:])
    with pytest.raises(ContainerError, match="magic"):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "v2.ckpt").write_bytes(data[:8] + struct.pack("<I", 2) + data[12:])
    with pytest.raises(ContainerError, match="version"):
        load_checkpoint(tmp_path / "v2.ckpt")


def test_parse_config(tmp_path):
    text = """
    # desk-scale training
    lr = 0.001
    epochs = 5   # short
    lambda_mode = linear_decay
    lambda_lr = none
    """
    cfg = parse_config(text, TrainingConfig)
    assert cfg.lr == 1e-3 and cfg.epochs == 5 and cfg.lambda_mode == "linear_decay"
    assert cfg.lambda_lr is None
    net = parse_config("attention = false\nlevels = 2", NetworkConfig)
    assert net.attention is False and net.levels == 2
    path = tmp_path / "train.cfg"
    path.write_text("batch_size = 3\n")
    assert read_config(path, TrainingConfig).batch_size == 3


@pytest.mark.parametrize("text,key", [
    ("learning_rate = 1", "learning_rate"),
    ("lr = 1\nlr = 2", "lr"),
    ("epochs = many", "epochs"),
    ("just words", "line 1"),
    ("lr = -1", "TrainingConfig"),
])
def test_parse_config_errors(text, key):
    with pytest.raises(ConfigError) as info:
        parse_config(text, TrainingConfig)
    assert info.value.field == key
