import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from PIL import Image

from dln import io as dio
from dln.energy_models import DbnStack, RbmParams
from dln.errors import DataError, DimensionError
from dln.lambertian import SceneLatents
from dln.posterior import flat_model

arrays = hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
                    elements=st.floats(allow_nan=False, width=64))


@given(st.dictionaries(st.from_regex(r"[a-z][a-z0-9_.]{0,8}", fullmatch=True), arrays,
                       max_size=4))
def test_container_roundtrip_is_bitwise(tmp_path_factory, tensors):
    path = tmp_path_factory.mktemp("c") / "x.dlnc"
    dio.save_container(path, tensors, {"note": "hi", "n": 3})
    back, meta = dio.load_container(path)
    assert meta == {"note": "hi", "n": 3}
    assert list(back) == list(tensors)
    for k, v in tensors.items():
        assert back[k].shape == v.shape and back[k].tobytes() == v.tobytes()


def test_model_roundtrip_is_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    m = flat_model(3, 4, light_precision=np.diag([1.0, 2.0, 3.0]), eta=7.5)
    upper = RbmParams(rng.standard_normal((8, 5)), rng.standard_normal(8), rng.standard_normal(5))
    m = m.__class__(DbnStack(m.albedo_grbm, (upper,)), m.normal_prior, m.lighting, m.noise,
                    3, 4, 7.5)
    dio.save_model(tmp_path / "m.dlnc", m, config={"em_iters": 3}, seed=11)
    back, meta = dio.load_model(tmp_path / "m.dlnc")
    assert meta["config"] == {"em_iters": 3} and meta["seed"] == 11
    assert back.eta == 7.5 and (back.height, back.width) == (3, 4)
    assert back.albedo_prior.upper[0].weights.tobytes() == upper.weights.tobytes()
    for a, b in ((m.normal_grbm.weights, back.normal_grbm.weights),
                 (m.lighting.precision, back.lighting.precision), (m.noise.var, back.noise.var)):
        assert a.tobytes() == b.tobytes()


def test_container_corruption_detected(tmp_path):
    path = tmp_path / "x.dlnc"
    dio.save_container(path, {"a": np.arange(4.0)})
    data = path.read_bytes()
    (tmp_path / "short.dlnc").write_bytes(data[:-8])
    with pytest.raises(DataError):
        dio.load_container(tmp_path / "short.dlnc")
    (tmp_path / "v.dlnc").write_bytes(data.replace(b"DLNC 1", b"DLNC 9"))
    with pytest.raises(DataError):
        dio.load_container(tmp_path / "v.dlnc")
    (tmp_path / "junk.dlnc").write_bytes(b"hello")
    with pytest.raises(DataError):
        dio.load_container(tmp_path / "junk.dlnc")
    with pytest.raises(DataError):
        dio.load_model(path)
    with pytest.raises(ValueError):
        dio.save_container(path, {"bad name": np.zeros(1)})


def test_latents_roundtrip(tmp_path):
    lat = SceneLatents(np.array([0.5, 0.25]), np.eye(3)[:2], np.ones((3, 2)))
    dio.save_latents(tmp_path / "l.dlnc", lat, 1, 2, extra={"images": np.zeros((2, 2))})
    back, meta, t = dio.load_latents(tmp_path / "l.dlnc")
    assert back.normals.tobytes() == lat.normals.tobytes() and "images" in t
    assert meta["width"] == 2


def test_pgm_write_read_roundtrip(tmp_path):
    img = np.random.default_rng(1).uniform(-0.2, 1.2, (5, 7))
    dio.write_pgm(tmp_path / "a.pgm", img)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5") and b"255" in raw[:20]
    back = dio.read_image(tmp_path / "a.pgm")
    np.testing.assert_allclose(back, np.clip(img, 0, 1), atol=0.5 / 255 + 1e-12)


def test_ascii_pgm_and_colour_inputs(tmp_path):
    (tmp_path / "a.pgm").write_text("P2\n3 1\n255\n0 128 255\n")
    np.testing.assert_allclose(dio.read_image(tmp_path / "a.pgm"), [[0, 128 / 255, 1]])
    rgb = np.zeros((2, 2, 3), dtype=np.uint8)
    rgb[..., 0] = 255
    Image.fromarray(rgb).save(tmp_path / "c.ppm")
    with pytest.warns(UserWarning, match="grayscale"):
        g = dio.read_image(tmp_path / "c.ppm")
    np.testing.assert_allclose(g, 0.299)
    dio.write_ppm(tmp_path / "n.ppm", dio.normals_to_rgb(np.tile([0, 0, 1.0], (4, 1)), 2, 2))
    assert (tmp_path / "n.ppm").read_bytes().startswith(b"P6")
    with pytest.raises(DataError):
        dio.read_image(tmp_path / "missing.pgm")


def test_area_resize(tmp_path):
    img = np.zeros((4, 4))
    img[:2, :2] = 1.0
    dio.write_pgm(tmp_path / "a.pgm", img)
    np.testing.assert_allclose(dio.read_image(tmp_path / "a.pgm", (2, 2)), [[1, 0], [0, 0]])


def test_yale_names_and_subsets():
    assert dio.light_subset(dio.yale_light("yaleB01_P00A+000E+00.pgm")) == "1"
    assert dio.light_subset(dio.yale_light("yaleB01_P00A+020E-10.pgm")) == "2"
    assert dio.light_subset(dio.yale_light("yaleB01_P00A-035E+15.pgm")) == "3"
    assert dio.light_subset(dio.yale_light("yaleB01_P00A+070E+00.pgm")) == "4"
    assert dio.light_subset(dio.yale_light("yaleB01_P00A+110E+15.pgm")) == "5"
    assert dio.yale_light("face.pgm") is None


def test_manifest_loading(tmp_path):
    for sid in ("b", "a"):
        (tmp_path / sid).mkdir()
        for j in range(2):
            dio.write_pgm(tmp_path / sid / f"{j}.pgm", np.full((4, 6), 0.5))
    dio.write_lights_csv(tmp_path / "a" / "lights.csv", ["0.pgm", "1.pgm"],
                         np.array([[0, 0.7], [0, 0], [1, 0.7]]))
    man = dio.load_manifest(tmp_path)
    assert list(man.subjects) == ["a", "b"]
    assert man.subset_of(tmp_path / "a" / "0.pgm") == "1"
    assert man.subset_of(tmp_path / "a" / "1.pgm") == "3"
    assert man.subset_of(tmp_path / "b" / "0.pgm") == "all"
    assert man.load_subject("a").shape == (4, 6)
    (tmp_path / "manifest.txt").write_text("resolution=2x3\nsubject=b\n")
    man2 = dio.load_manifest(tmp_path)
    assert list(man2.subjects) == ["b"] and man2.load_subject("b").shape == (2, 3)


def test_manifest_errors(tmp_path):
    with pytest.raises(DataError):
        dio.load_manifest(tmp_path / "nope")
    with pytest.raises(DataError):
        dio.load_manifest(tmp_path)
    (tmp_path / "s").mkdir()
    dio.write_pgm(tmp_path / "s" / "0.pgm", np.zeros((3, 3)))
    dio.write_pgm(tmp_path / "s" / "1.pgm", np.zeros((4, 3)))
    with pytest.raises(DimensionError):
        dio.load_manifest(tmp_path).load_subject("s")
