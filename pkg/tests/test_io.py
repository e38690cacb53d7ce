import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cornerpose import io as cio
from cornerpose.nn import ModelConfig, build_model
from cornerpose.scene import GenConfig, generate_scene, scene_rng

dtypes = st.sampled_from([np.float32, np.float64, np.uint8])


@given(dtypes.flatmap(lambda dt: hnp.arrays(dt, hnp.array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=5))))
@settings(max_examples=100, deadline=None)
def test_tensor_roundtrip(a):
    b = cio.decode_tensor(cio.encode_tensor(a))
    assert b.dtype == a.dtype and b.shape == a.shape
    assert a.tobytes() == b.tobytes()  # bitwise, NaN payloads included


def test_tensor_header_layout():
    data = cio.encode_tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
    assert data[:4] == b"BTNS"
    assert data[4:7] == bytes([1, 0, 2])
    assert struct.unpack("<2Q", data[7:23]) == (2, 3)
    assert len(data) == 23 + 24


def test_big_endian_input_normalized():
    a = np.arange(4, dtype=">f8")
    b = cio.decode_tensor(cio.encode_tensor(a))
    np.testing.assert_array_equal(a, b)


def test_tensor_errors(tmp_path):
    with pytest.raises(cio.FormatError):
        cio.encode_tensor(np.zeros(2, dtype=np.int32))
    data = cio.encode_tensor(np.zeros(3))
    with pytest.raises(cio.FormatError, match="truncated"):
        cio.decode_tensor(data[:-1])
    with pytest.raises(cio.FormatError, match="trailing"):
        cio.decode_tensor(data + b"x")
    with pytest.raises(cio.FormatError, match="magic"):
        cio.decode_tensor(b"XXXX" + data[4:])
    p = tmp_path / "bad.btns"
    p.write_bytes(data[:10])
    with pytest.raises(cio.FormatError, match="bad.btns"):
        cio.read_tensor(p)


def test_checkpoint_roundtrip(tmp_path):
    cfg = ModelConfig(depth=1, width=16, heads=2, image_size=(32, 32))
    model = build_model(cfg, seed=3)
    path = tmp_path / "m.ckpt"
    cio.save_model(path, model, {"note": "x"})
    loaded, meta = cio.load_model(path)
    assert meta["note"] == "x"
    assert loaded.config == cfg
    for k, v in model.state_dict().items():
        assert torch.equal(v, loaded.state_dict()[k])
    raw = path.read_bytes()
    path.write_bytes(raw[:-3])
    with pytest.raises(cio.FormatError):
        cio.load_model(path)


def test_checkpoint_config_mismatch(tmp_path):
    path = tmp_path / "m.ckpt"
    cio.write_checkpoint(path, {"model": ModelConfig().to_dict()}, {"head.bias": np.zeros(3, np.float32)})
    with pytest.raises(cio.FormatError, match="does not match"):
        cio.load_model(path)


@pytest.fixture(scope="module")
def scene():
    return generate_scene(scene_rng(2, 1), GenConfig(n_refs=(3, 3)))


def test_scene_roundtrip_exact(tmp_path, scene):
    cio.write_scene(tmp_path / "s", scene)
    back = cio.read_scene(tmp_path / "s")
    assert back.intrinsics == scene.intrinsics
    assert back.symmetric == scene.symmetric and back.diameter == scene.diameter
    np.testing.assert_array_equal(back.box.corners, scene.box.corners)
    np.testing.assert_array_equal(back.cloud, scene.cloud)
    np.testing.assert_array_equal(back.extents, scene.extents)
    for a, b in zip([back.query, *back.references], [scene.query, *scene.references]):
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.silhouette, b.silhouette)
        np.testing.assert_array_equal(a.pose.matrix, b.pose.matrix)
        assert a.mask.rect == b.mask.rect


def test_meta_roundtrip_text(scene):
    text = cio.format_meta(scene)
    meta = cio.parse_meta(text)
    assert meta["order"] == ["query", "ref_00", "ref_01", "ref_02"]
    with pytest.raises(cio.FormatError, match="unknown key"):
        cio.parse_meta(text + "colour red\n")
    with pytest.raises(cio.FormatError, match="box needs 24"):
        cio.parse_meta(text.replace("box ", "box 1.0 "))
    with pytest.raises(cio.FormatError, match="missing 'intrinsics'"):
        cio.parse_meta("\n".join(l for l in text.splitlines() if not l.startswith("intrinsics")))


def test_read_dataset_missing_manifest(tmp_path):
    with pytest.raises(cio.FormatError, match="manifest"):
        cio.read_dataset(tmp_path)
    cio.write_manifest(tmp_path, {"scenes": []})
    info, scenes = cio.read_dataset(tmp_path)
    assert scenes == []
