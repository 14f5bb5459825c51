import numpy as np
import pytest

from conftest import random_scene_2d, random_scene_3d, ring_camera
from splatfit.core import Camera
from splatfit.io import (
    SNAPSHOT_MAGIC,
    camera_from_dict,
    camera_to_dict,
    dataset_from_spec,
    load_image,
    load_snapshot,
    make_synthetic,
    save_image,
    save_snapshot,
)


class TestSnapshot:
    @pytest.mark.parametrize("mode", ["2d", "3d"])
    def test_roundtrip_is_float32_exact(self, rng, tmp_path, mode):
        scene = (
            random_scene_2d(rng, 7, 16, 16) if mode == "2d" else random_scene_3d(rng, 7)
        )
        path = tmp_path / "scene.splt"
        save_snapshot(scene, path)
        loaded = load_snapshot(path).scene
        assert loaded.mode == mode
        assert len(loaded) == 7
        for name in ("positions", "log_scales", "rotations", "opacity_logits", "features"):
            np.testing.assert_array_equal(
                getattr(loaded, name), getattr(scene, name).astype(np.float32)
            )

    def test_error_scalars_not_persisted(self, rng, tmp_path):
        scene = random_scene_2d(rng, 3, 8, 8)
        scene.err_scalars[:] = 5.0
        path = tmp_path / "scene.splt"
        save_snapshot(scene, path)
        np.testing.assert_array_equal(load_snapshot(path).scene.err_scalars, 0.0)

    def test_empty_scene_roundtrip(self, tmp_path):
        from splatfit.core import Scene

        scene = Scene(
            positions=np.zeros((0, 2)),
            log_scales=np.zeros((0, 2)),
            rotations=np.zeros(0),
            opacity_logits=np.zeros(0),
            features=np.zeros((0, 3)),
        )
        path = tmp_path / "empty.splt"
        save_snapshot(scene, path)
        assert len(load_snapshot(path).scene) == 0

    def test_truncated_header_rejected(self, tmp_path):
        path = tmp_path / "bad.splt"
        path.write_bytes(b"SPL")
        with pytest.raises(ValueError, match="truncated"):
            load_snapshot(path)

    def test_bad_magic_rejected(self, rng, tmp_path):
        path = tmp_path / "bad.splt"
        save_snapshot(random_scene_2d(rng, 2, 8, 8), path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="magic"):
            load_snapshot(path)

    def test_unsupported_version_rejected(self, rng, tmp_path):
        path = tmp_path / "bad.splt"
        save_snapshot(random_scene_2d(rng, 2, 8, 8), path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="version"):
            load_snapshot(path)

    def test_truncated_body_rejected(self, rng, tmp_path):
        path = tmp_path / "bad.splt"
        save_snapshot(random_scene_2d(rng, 4, 8, 8), path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(ValueError, match="expected"):
            load_snapshot(path)

    def test_magic_constant(self):
        assert SNAPSHOT_MAGIC == b"SPLT"


class TestImages:
    def test_roundtrip_is_8bit_quantized(self, rng, tmp_path):
        image = rng.uniform(0.0, 1.0, size=(9, 7, 3))
        path = tmp_path / "img.png"
        save_image(image, path)
        loaded = load_image(path)
        np.testing.assert_array_equal(loaded, np.round(image * 255.0) / 255.0)

    def test_out_of_range_values_clip(self, tmp_path):
        image = np.array([[[1.7, -0.3, 0.5]]])
        path = tmp_path / "img.png"
        save_image(image, path)
        expected = [1.0, 0.0, np.round(0.5 * 255.0) / 255.0]
        np.testing.assert_array_equal(load_image(path)[0, 0], expected)


class TestChecker2d:
    def test_clean_checker_is_binary(self):
        ds = make_synthetic("checker2d", {"resolution": 16, "cell": 4}, seed=0)
        image = ds.views[0].image
        assert image.shape == (16, 16, 3)
        assert set(np.unique(image)) == {0.0, 1.0}
        # Top-left cell is dark; the next cell to the right is light.
        assert image[0, 0, 0] == 0.0
        assert image[0, 4, 0] == 1.0
        assert ds.views[0].camera.mode == "2d"
        assert ds.extent == pytest.approx(np.hypot(16, 16))

    def test_rectangular_resolution(self):
        ds = make_synthetic("checker2d", {"resolution": (6, 10), "cell": 2}, seed=0)
        assert ds.views[0].image.shape == (6, 10, 3)
        assert ds.views[0].camera.width == 10
        assert ds.views[0].camera.height == 6

    def test_noise_modulates_light_cells_only(self):
        ds = make_synthetic(
            "checker2d",
            {"resolution": 16, "cell": 4, "noise": 0.5, "dark_noise": 0.0},
            seed=2,
        )
        clean = make_synthetic("checker2d", {"resolution": 16, "cell": 4}, seed=2)
        image = ds.views[0].image
        light = clean.views[0].image > 0.5
        assert np.all(image[light] >= 0.5) and np.all(image[light] <= 1.0)
        assert np.var(image[light]) > 0.0
        np.testing.assert_array_equal(image[~light], 0.0)

    def test_dark_noise_defaults_to_noise(self):
        ds = make_synthetic("checker2d", {"resolution": 16, "cell": 4, "noise": 0.5}, seed=2)
        image = ds.views[0].image
        dark = make_synthetic("checker2d", {"resolution": 16, "cell": 4}, seed=2).views[0].image < 0.5
        assert np.var(image[dark]) > 0.0
        assert np.all(image[dark] <= 0.5)

    def test_noise_cell_sets_texture_pitch(self):
        ds = make_synthetic(
            "checker2d", {"resolution": 16, "cell": 8, "noise": 0.9, "noise_cell": 4}, seed=3
        )
        image = ds.views[0].image
        # Texture is constant within each 4x4 noise cell.
        blocks = image.reshape(4, 4, 4, 4, 3)
        assert np.allclose(blocks, blocks[:, :1, :, :1, :])

    def test_noise_spread_varies_amplitude_per_cell(self):
        flat = make_synthetic(
            "checker2d", {"resolution": 24, "cell": 8, "noise": 0.9, "noise_spread": 0.0}, seed=4
        )
        spread = make_synthetic(
            "checker2d", {"resolution": 24, "cell": 8, "noise": 0.9, "noise_spread": 0.9}, seed=4
        )
        f, s = flat.views[0].image, spread.views[0].image
        light = make_synthetic("checker2d", {"resolution": 24, "cell": 8}, seed=4).views[0].image > 0.5
        # Same underlying texture, but the spread image deviates less from the
        # clean checker in damped cells.
        assert np.all(s[light] >= f[light] - 1e-12)
        assert np.any(s[light] > f[light])

    def test_same_seed_reproduces_bitwise(self):
        params = {"resolution": 16, "cell": 4, "noise": 0.7, "noise_spread": 0.5}
        a = make_synthetic("checker2d", params, seed=9).views[0].image
        b = make_synthetic("checker2d", params, seed=9).views[0].image
        np.testing.assert_array_equal(a, b)
        c = make_synthetic("checker2d", params, seed=10).views[0].image
        assert np.any(c != a)


class TestBlobs3d:
    def test_views_are_consistent_renders(self):
        ds = make_synthetic("blobs3d", {"resolution": 8, "count": 4, "views": 3}, seed=5)
        assert len(ds.views) == 3
        assert ds.extent > 0
        for view in ds.views:
            assert view.camera.mode == "3d"
            assert view.image.shape == (8, 8, 3)
            assert np.all(view.image >= 0.0) and np.all(view.image <= 1.0)
        # Distinct camera angles give distinct images.
        assert np.any(ds.views[0].image != ds.views[1].image)


class TestSpecRoundtrip:
    def test_make_synthetic_records_recipe(self):
        ds = make_synthetic("checker2d", {"resolution": 12, "cell": 3}, seed=7)
        assert ds.spec == {"kind": "checker2d", "seed": 7, "resolution": 12, "cell": 3}

    def test_dataset_from_spec_regenerates_bitwise(self):
        ds = make_synthetic(
            "checker2d", {"resolution": 16, "cell": 4, "noise": 0.6, "noise_cell": 2}, seed=8
        )
        again = dataset_from_spec(ds.spec)
        np.testing.assert_array_equal(again.views[0].image, ds.views[0].image)
        assert again.spec == ds.spec

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="unknown dataset kind"):
            make_synthetic("fractal", {}, seed=0)
        with pytest.raises(ValueError, match="kind"):
            dataset_from_spec({"seed": 0})


class TestCameraDict:
    def test_2d_roundtrip(self):
        camera = Camera.identity2d(12, 8)
        data = camera_to_dict(camera)
        back = camera_from_dict(data)
        assert (back.mode, back.width, back.height) == ("2d", 12, 8)

    def test_3d_roundtrip(self):
        camera = ring_camera(width=10, height=6, angle=1.1)
        back = camera_from_dict(camera_to_dict(camera))
        np.testing.assert_array_equal(back.rotation, camera.rotation)
        np.testing.assert_array_equal(back.translation, camera.translation)
        assert (back.fx, back.fy, back.cx, back.cy) == (
            camera.fx,
            camera.fy,
            camera.cx,
            camera.cy,
        )
