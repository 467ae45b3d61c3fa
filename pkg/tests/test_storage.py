import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from rendersynth import storage
from rendersynth.datasets import generate_samples


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (5, 7), elements=st.floats(-1, 1)))
def test_png_round_trip_within_half_step(tmp_path_factory, x):
    path = tmp_path_factory.mktemp("png") / "a.png"
    storage.write_png(path, x)
    assert np.max(np.abs(storage.read_png(path) - x)) <= 0.5 / 127.5 + 1e-12


def test_png_saturates(tmp_path):
    storage.write_png(tmp_path / "a.png", np.array([[-3.0, 3.0]]))
    assert storage.read_png(tmp_path / "a.png").tolist() == [[-1.0, 1.0]]


def test_f32_exact_and_header(tmp_path, rng):
    x = rng.normal(size=(6, 9)).astype(np.float32).astype(np.float64)
    storage.write_f32(tmp_path / "a.f32", x)
    raw = (tmp_path / "a.f32").read_bytes()
    assert storage.F32_HEADER.unpack_from(raw) == (9, 6) and len(raw) == 8 + 4 * 54
    assert np.array_equal(storage.read_f32(tmp_path / "a.f32"), x)
    (tmp_path / "b.f32").write_bytes(raw[:-4])
    with pytest.raises(ValueError):
        storage.read_f32(tmp_path / "b.f32")
    with pytest.raises(ValueError):
        storage.write_f32(tmp_path / "c.f32", np.zeros(3))


def test_dataset_round_trip(tmp_path):
    samples = generate_samples("hm_3d", 4, 9, 16, threads=1)
    manifest = storage.write_samples(tmp_path, samples, "hm_3d", 9)
    data, records = storage.load_dataset(tmp_path)
    assert [r["index"] for r in records] == [0, 1, 2, 3]
    assert all(r["path"].endswith(".f32") for r in records)
    assert (tmp_path / "images" / "000002.png").exists()
    for s, img, label in zip(samples, data.images, data.labels):
        assert np.array_equal(img, s.image.astype(np.float32))
        assert label == s.label
    assert set(json.loads(manifest.read_text().splitlines()[0])) == {
        "path", "bits", "center_x", "center_y", "yaw", "pitch", "roll", "scale", "provenance", "seed", "index"}


def test_manifest_validation(tmp_path):
    samples = generate_samples("clean", 2, 0, 16, threads=1)
    storage.write_samples(tmp_path, samples, "clean", 0, f32=False)
    lines = (tmp_path / storage.MANIFEST).read_text().splitlines()
    rec = json.loads(lines[0])
    bad = tmp_path / "bad.jsonl"
    bad.write_text(json.dumps({**rec, "bits": "0101"}) + "\n")
    with pytest.raises(ValueError, match="bits"):
        storage.read_manifest(bad)
    bad.write_text(json.dumps({**rec, "path": "images/nope.png"}) + "\n")
    with pytest.raises(ValueError, match="missing"):
        storage.read_manifest(bad)
    bad.write_text(lines[0] + "\n" + json.dumps({**json.loads(lines[1]), "provenance": "hm_3d"}) + "\n")
    with pytest.raises(ValueError, match="mixes"):
        storage.load_dataset(bad)
    with pytest.raises(FileNotFoundError):
        storage.load_dataset(tmp_path / "nowhere")
    with pytest.raises(ValueError):
        storage.write_samples(tmp_path, samples, "clean", 0, png=False, f32=False)


def test_load_config(tmp_path):
    path = tmp_path / "c.toml"
    allowed = {"n": int, "lr": float, "f32": bool, "out": str}
    path.write_text('n = 3\nlr = 1\nf32 = true\nout = "x"\n')
    assert storage.load_config(path, allowed) == {"n": 3, "lr": 1.0, "f32": True, "out": "x"}
    path.write_text("n = 3\nwidth = 4\n")
    with pytest.raises(ValueError, match="unknown"):
        storage.load_config(path, allowed)
    path.write_text("n = true\n")
    with pytest.raises(ValueError, match="must be int"):
        storage.load_config(path, allowed)
