import struct

import numpy as np
import pytest

from exceptions import CheckpointError
from models import SegNet, load_checkpoint, parameter_digest, read_checkpoint, save_checkpoint
from models.checkpoint import write_checkpoint


def test_round_trip_is_bitwise(tmp_path, tiny_config):
    source = SegNet(tiny_config, seed=1)
    path = tmp_path / "model.ckpt"
    save_checkpoint(source, path)

    target = SegNet(tiny_config, seed=2)
    assert parameter_digest(target) != parameter_digest(source)
    report = load_checkpoint(target, path)
    assert report.clean
    assert parameter_digest(target) == parameter_digest(source)


def test_file_holds_parameters_and_statistics(tmp_path, tiny_config):
    model = SegNet(tiny_config)
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path)
    entries = read_checkpoint(path)
    assert set(entries) == set(model.state_dict())
    assert "rgb.stem.0.bn.running_mean" in entries
    assert entries["head.logits.bias"].shape == (tiny_config.num_classes,)


def test_extras_come_back_in_the_report(tmp_path, tiny_config):
    model = SegNet(tiny_config)
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path, extras={"_state.iter": 12.0, "_velocity.head.logits.bias": np.arange(5.0)})
    report = load_checkpoint(model, path)
    assert report.clean
    assert report.extras["_state.iter"].tolist() == [12.0]
    np.testing.assert_array_equal(report.extras["_velocity.head.logits.bias"], np.arange(5.0))


def test_extras_need_the_state_prefix(tmp_path, tiny_config):
    with pytest.raises(CheckpointError, match="must start with"):
        save_checkpoint(SegNet(tiny_config), tmp_path / "model.ckpt", extras={"iter": 1.0})


def test_rgb_checkpoint_into_rgbd_model(tmp_path, tiny_config):
    rgb_model = SegNet(tiny_config.replace(depth_branch=False))
    path = tmp_path / "rgb.ckpt"
    save_checkpoint(rgb_model, path)

    rgbd = SegNet(tiny_config)
    report = load_checkpoint(rgbd, path, strict=False)
    depth_paths = {name for name in rgbd.state_dict() if name.startswith("depth.")}
    assert depth_paths <= set(report.missing)
    assert {f"rgb.{p}" for p in rgb_model.rgb.state_dict()} <= set(report.restored)
    np.testing.assert_array_equal(rgbd.rgb.stem[0].conv.weight.data, rgb_model.rgb.stem[0].conv.weight.data)


def test_prefix_selection(tmp_path, tiny_config):
    source = SegNet(tiny_config, seed=1)
    path = tmp_path / "model.ckpt"
    save_checkpoint(source, path)

    target = SegNet(tiny_config, seed=2)
    head_before = parameter_digest(target, "head.")
    report = load_checkpoint(target, path, prefixes=("rgb.",))
    assert report.clean
    assert all(name.startswith("rgb.") for name in report.restored)
    assert parameter_digest(target, "rgb.") == parameter_digest(source, "rgb.")
    assert parameter_digest(target, "head.") == head_before


def test_strict_load_names_the_missing_entry(tmp_path, tiny_config):
    model = SegNet(tiny_config)
    entries = {name: t.data for name, t in model.state_dict().items()}
    del entries["fusion.rgb_reduce.conv.weight"]
    path = tmp_path / "partial.ckpt"
    write_checkpoint(path, entries)
    with pytest.raises(CheckpointError, match="fusion.rgb_reduce.conv.weight"):
        load_checkpoint(SegNet(tiny_config), path, strict=True)


def test_strict_load_reports_shape_mismatch(tmp_path, tiny_config):
    path = tmp_path / "other.ckpt"
    save_checkpoint(SegNet(tiny_config), path)
    wider = SegNet(tiny_config.replace(num_classes=7))
    with pytest.raises(CheckpointError, match="shape mismatch head.logits"):
        load_checkpoint(wider, path)


def test_failed_strict_load_leaves_model_untouched(tmp_path, tiny_config):
    path = tmp_path / "other.ckpt"
    save_checkpoint(SegNet(tiny_config, seed=1), path)
    wider = SegNet(tiny_config.replace(num_classes=7), seed=2)
    before = parameter_digest(wider)
    with pytest.raises(CheckpointError):
        load_checkpoint(wider, path)
    assert parameter_digest(wider) == before


def test_missing_file(tmp_path, tiny_config):
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(SegNet(tiny_config), tmp_path / "nope.ckpt")


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + struct.pack("<II", 1, 0))
    with pytest.raises(CheckpointError, match="bad magic"):
        read_checkpoint(path)


def test_other_format_version(tmp_path):
    path = tmp_path / "future.ckpt"
    path.write_bytes(b"SGCK" + struct.pack("<II", 99, 0))
    with pytest.raises(CheckpointError, match="version 99"):
        read_checkpoint(path)


def test_truncated_file(tmp_path):
    path = tmp_path / "whole.ckpt"
    write_checkpoint(path, {"a.weight": np.ones((2, 3), dtype=np.float32)})
    blob = path.read_bytes()
    cut = tmp_path / "cut.ckpt"
    cut.write_bytes(blob[:-5])
    with pytest.raises(CheckpointError, match="truncated"):
        read_checkpoint(cut)


def test_trailing_bytes(tmp_path):
    path = tmp_path / "long.ckpt"
    write_checkpoint(path, {"a.weight": np.ones(3, dtype=np.float32)})
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        read_checkpoint(path)


def test_values_are_little_endian_float32(tmp_path):
    path = tmp_path / "one.ckpt"
    write_checkpoint(path, {"w": np.array([[1.5, -2.0]], dtype=np.float64)})
    blob = path.read_bytes()
    # magic, version, count, name length, name, rank, two extents, then values
    offset = 4 + 4 + 4 + 4 + 1 + 4 + 8
    assert struct.unpack("<ff", blob[offset:]) == (1.5, -2.0)
    np.testing.assert_array_equal(read_checkpoint(path)["w"], [[1.5, -2.0]])
