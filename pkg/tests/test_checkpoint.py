"""Container round trips, tamper detection, and module state restore."""

import json
import zipfile

import numpy as np
import pytest
import torch
from torch import nn

from lipsynth.checkpoint import (
    ARRAY_DIR,
    FORMAT_VERSION,
    MANIFEST_NAME,
    CheckpointContainer,
    load_container,
    load_module_arrays,
    module_arrays,
    save_container,
)
from lipsynth.errors import CheckpointError, ValidationError


def sample_container():
    rng = np.random.default_rng(3)
    return CheckpointContainer(
        kind="backbone",
        config_text="image_size=16\nseed=0\n",
        fingerprint="abc123",
        arrays={
            "generator.const": rng.normal(size=(1, 4, 4, 4)).astype(np.float32),
            "generator.skip.weight": rng.normal(size=(3, 4)).astype(np.float64),
            "encoder.counts": np.arange(6, dtype=np.int64).reshape(2, 3),
        },
        meta={"person_id": "spk1"},
    )


class TestRoundTrip:
    def test_arrays_and_metadata_survive(self, tmp_path):
        container = sample_container()
        path = save_container(container, tmp_path / "m.ckpt")
        loaded = load_container(path)
        assert loaded.kind == container.kind
        assert loaded.config_text == container.config_text
        assert loaded.fingerprint == container.fingerprint
        assert loaded.meta == container.meta
        assert set(loaded.arrays) == set(container.arrays)
        for name, array in container.arrays.items():
            assert loaded.arrays[name].dtype == array.dtype
            np.testing.assert_array_equal(loaded.arrays[name], array)

    def test_save_is_byte_deterministic(self, tmp_path):
        container = sample_container()
        a = save_container(container, tmp_path / "a.ckpt")
        b = save_container(container, tmp_path / "b.ckpt")
        assert a.read_bytes() == b.read_bytes()

    def test_insertion_order_does_not_change_bytes(self, tmp_path):
        base = sample_container()
        flipped = CheckpointContainer(
            kind=base.kind, config_text=base.config_text,
            fingerprint=base.fingerprint,
            arrays=dict(reversed(list(base.arrays.items()))),
            meta=base.meta)
        a = save_container(base, tmp_path / "a.ckpt")
        b = save_container(flipped, tmp_path / "b.ckpt")
        assert a.read_bytes() == b.read_bytes()

    def test_loaded_arrays_are_writable_copies(self, tmp_path):
        path = save_container(sample_container(), tmp_path / "m.ckpt")
        loaded = load_container(path)
        loaded.arrays["encoder.counts"][0, 0] = 99  # must not raise

    def test_kind_filter_accepts_match(self, tmp_path):
        path = save_container(sample_container(), tmp_path / "m.ckpt")
        assert load_container(path, kind="backbone").kind == "backbone"


class TestValidation:
    def test_empty_kind_rejected(self):
        with pytest.raises(ValidationError):
            CheckpointContainer(kind="", config_text="", fingerprint="",
                                arrays={})

    def test_traversal_array_name_rejected(self):
        with pytest.raises(ValidationError, match="bad array name"):
            CheckpointContainer(kind="x", config_text="", fingerprint="",
                                arrays={"../evil": np.zeros(1)})

    def test_non_string_meta_rejected(self):
        with pytest.raises(ValidationError):
            CheckpointContainer(kind="x", config_text="", fingerprint="",
                                arrays={}, meta={"k": 3})

    def test_select_returns_prefix_subset(self):
        container = sample_container()
        sub = container.select("generator.")
        assert set(sub.arrays) == {"generator.const", "generator.skip.weight"}

    def test_select_unknown_prefix_raises(self):
        with pytest.raises(CheckpointError, match="no arrays match"):
            sample_container().select("nope.")


class TestTamperDetection:
    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            load_container(tmp_path / "absent.ckpt")

    def test_not_a_zip(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"this is not a zip archive")
        with pytest.raises(CheckpointError, match="not a checkpoint"):
            load_container(path)

    def test_wrong_kind(self, tmp_path):
        path = save_container(sample_container(), tmp_path / "m.ckpt")
        with pytest.raises(CheckpointError, match="kind 'backbone'"):
            load_container(path, kind="syncnet")

    def test_unknown_format_version(self, tmp_path):
        path = save_container(sample_container(), tmp_path / "m.ckpt")
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read(MANIFEST_NAME))
            entries = {n: zf.read(n) for n in zf.namelist()}
        manifest["format_version"] = FORMAT_VERSION + 1
        entries[MANIFEST_NAME] = json.dumps(manifest).encode()
        with zipfile.ZipFile(path, "w") as zf:
            for name, raw in entries.items():
                zf.writestr(name, raw)
        with pytest.raises(CheckpointError, match="format version"):
            load_container(path)

    def test_deleted_array_named_in_error(self, tmp_path):
        path = save_container(sample_container(), tmp_path / "m.ckpt")
        with zipfile.ZipFile(path) as zf:
            entries = {n: zf.read(n) for n in zf.namelist()}
        del entries[f"{ARRAY_DIR}/generator.const.bin"]
        with zipfile.ZipFile(path, "w") as zf:
            for name, raw in entries.items():
                zf.writestr(name, raw)
        with pytest.raises(CheckpointError, match="generator.const"):
            load_container(path)

    def test_corrupted_array_fails_checksum(self, tmp_path):
        path = save_container(sample_container(), tmp_path / "m.ckpt")
        target = f"{ARRAY_DIR}/encoder.counts.bin"
        with zipfile.ZipFile(path) as zf:
            entries = {n: zf.read(n) for n in zf.namelist()}
        raw = bytearray(entries[target])
        raw[0] ^= 0xFF
        entries[target] = bytes(raw)
        with zipfile.ZipFile(path, "w") as zf:
            for name, data in entries.items():
                zf.writestr(name, data)
        with pytest.raises(CheckpointError, match="checksum mismatch"):
            load_container(path)

    def test_missing_manifest(self, tmp_path):
        path = tmp_path / "m.ckpt"
        with zipfile.ZipFile(path, "w") as zf:
            zf.writestr("arrays/a.bin", b"\x00" * 4)
        with pytest.raises(CheckpointError, match=MANIFEST_NAME):
            load_container(path)


class BatchNormNet(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv = nn.Conv2d(3, 4, 3, padding=1)
        self.bn = nn.BatchNorm2d(4)


class TestModuleState:
    def make_trained(self):
        torch.manual_seed(0)
        net = BatchNormNet()
        net.train()
        for _ in range(3):  # move BN running stats off their init
            net.bn(net.conv(torch.randn(2, 3, 8, 8)))
        return net

    def test_state_round_trip_includes_buffers(self, tmp_path):
        source = self.make_trained()
        container = CheckpointContainer(
            kind="net", config_text="", fingerprint="",
            arrays=module_arrays(source, "net"))
        path = save_container(container, tmp_path / "n.ckpt")

        torch.manual_seed(99)
        target = BatchNormNet()
        load_module_arrays(target, load_container(path), "net")
        for name, tensor in source.state_dict().items():
            assert torch.equal(target.state_dict()[name], tensor), name

    def test_missing_array_listed(self):
        source = self.make_trained()
        arrays = module_arrays(source, "net")
        del arrays["net.bn.running_mean"]
        container = CheckpointContainer(kind="net", config_text="",
                                        fingerprint="", arrays=arrays)
        with pytest.raises(CheckpointError, match="bn.running_mean"):
            load_module_arrays(BatchNormNet(), container, "net")

    def test_unexpected_array_listed(self):
        arrays = module_arrays(self.make_trained(), "net")
        arrays["net.extra.weight"] = np.zeros(3, dtype=np.float32)
        container = CheckpointContainer(kind="net", config_text="",
                                        fingerprint="", arrays=arrays)
        with pytest.raises(CheckpointError, match="extra.weight"):
            load_module_arrays(BatchNormNet(), container, "net")

    def test_shape_mismatch_rejected(self):
        arrays = module_arrays(self.make_trained(), "net")
        arrays["net.conv.weight"] = np.zeros((4, 3, 5, 5), dtype=np.float32)
        container = CheckpointContainer(kind="net", config_text="",
                                        fingerprint="", arrays=arrays)
        with pytest.raises(CheckpointError, match="shape"):
            load_module_arrays(BatchNormNet(), container, "net")

    def test_dtype_mismatch_rejected(self):
        arrays = module_arrays(self.make_trained(), "net")
        arrays["net.conv.bias"] = arrays["net.conv.bias"].astype(np.float64)
        container = CheckpointContainer(kind="net", config_text="",
                                        fingerprint="", arrays=arrays)
        with pytest.raises(CheckpointError, match="dtype"):
            load_module_arrays(BatchNormNet(), container, "net")
