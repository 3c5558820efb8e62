import numpy as np
import png
import pytest
from hypothesis import given, strategies as st

from phototransfer import dataset as ds
from phototransfer.photometry import Light, LightRig, angular_error_deg, render_stack, sample_light_rig, sphere_material


def test_png_16bit_quantization_round_trip(tmp_path, rng):
    img = rng.random((3, 9, 7))
    ds.write_png(tmp_path / "a.png", img)
    back = ds.read_png(tmp_path / "a.png")
    assert back.shape == (3, 9, 7) and back.dtype == np.float32
    assert np.abs(back - img).max() <= 0.5 / 65535 + 1e-7
    q, depth = ds.read_png_raw(tmp_path / "a.png")
    assert depth == 16


def test_png_8bit_and_greyscale(tmp_path, rng):
    img = rng.random((1, 5, 6))
    ds.write_png(tmp_path / "g.png", img, bitdepth=8)
    back = ds.read_png(tmp_path / "g.png")
    assert back.shape == (1, 5, 6)
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-7
    with pytest.raises(ValueError):
        ds.write_png(tmp_path / "x.png", rng.random((2, 4, 4)))


def test_alpha_channel_is_dropped(tmp_path):
    rows = [[10, 20, 30, 255] * 2, [40, 50, 60, 128] * 2]
    with open(tmp_path / "rgba.png", "wb") as f:
        png.Writer(2, 2, alpha=True, greyscale=False).write(f, rows)
    q, depth = ds.read_png_raw(tmp_path / "rgba.png")
    assert q.shape == (3, 2, 2) and depth == 8
    assert q[:, 1, 0].tolist() == [40, 50, 60]


@given(st.integers(0, 1000))
def test_normal_encoding_round_trip(seed):
    rng = np.random.default_rng(seed)
    n = rng.normal(size=(3, 4, 4))
    n /= np.linalg.norm(n, axis=0)
    back = ds.decode_normals(ds.encode_normals(n))
    assert angular_error_deg(back, n).max() < 0.01
    np.testing.assert_allclose(np.linalg.norm(back, axis=0), 1, atol=1e-6)


def test_normal_files(tmp_path):
    n = sphere_material(16).normals
    ds.write_normals(tmp_path / "n.png", n)
    assert angular_error_deg(ds.read_normals(tmp_path / "n.png"), n).max() < 0.01
    ds.write_png(tmp_path / "g.png", np.zeros((1, 4, 4)))
    with pytest.raises(ValueError, match="3 channels"):
        ds.read_normals(tmp_path / "g.png")


def test_mask_files(tmp_path):
    m = np.array([[0.0, 0.49, 0.5, 1.0]])[None]
    ds.write_mask(tmp_path / "m.png", m)
    assert ds.read_mask(tmp_path / "m.png")[0].tolist() == [[0, 0, 1, 1]]
    assert ds.read_png_raw(tmp_path / "m.png")[1] == 8


def test_manifest_and_stack_round_trip(tmp_path):
    rig = LightRig(sample_light_rig(4, 0).lights + [Light.diffuse(0.8)])
    stack = render_stack(sphere_material(16), rig)
    files = []
    for i, img in enumerate(stack.images):
        files.append(f"l{i}.png")
        ds.write_png(tmp_path / files[-1], img)
    ds.write_manifest(tmp_path, stack, files, {"material": "sphere"})
    doc = ds.read_manifest(tmp_path)
    assert doc["format"] == 1 and doc["material"] == "sphere" and len(doc["images"]) == 5
    back = ds.load_stack(tmp_path)
    assert [l.kind for l in back.rig] == ["directional"] * 4 + ["diffuse"]
    assert back.rig.lights[4].intensity == 0.8
    np.testing.assert_allclose(back.rig.directions(), rig.directions(), atol=1e-12)
    for a, b in zip(back.images, stack.images):
        assert np.abs(a - b).max() <= 1e-5


def test_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        ds.read_manifest(tmp_path)
