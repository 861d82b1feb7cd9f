import json
import logging
import math

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from PIL import Image

from dynvox.datasets import (
    FrameRecord,
    Primitive,
    SceneSpec,
    Trajectory,
    load_dnerf,
    look_at,
    moving_sphere_spec,
    oracle_render,
    synth_scene,
)
from dynvox.errors import DatasetError, SpecError
from dynvox.renderer import Camera


def write_scene(root, frames, angle=math.pi / 2, size=(100, 4), mode="RGB", extra=None):
    W, H = size
    root.mkdir(parents=True, exist_ok=True)
    for fr in frames:
        if isinstance(fr, dict) and isinstance(fr.get("file_path"), str):
            path = root / (fr["file_path"] + ".png")
            path.parent.mkdir(parents=True, exist_ok=True)
            Image.new(mode, (W, H), (255, 0, 0, 128) if mode == "RGBA" else (10, 20, 30)).save(path)
    meta = {"camera_angle_x": angle, "frames": frames, **(extra or {})}
    (root / "transforms_train.json").write_text(json.dumps(meta))


def frame(name="img0", **kw):
    return {"file_path": name, "transform_matrix": np.eye(4).tolist(), "time": 0.5, **kw}


def test_focal_from_angle(tmp_path):
    write_scene(tmp_path, [frame()])
    ds = load_dnerf(tmp_path, splits=("train",))
    assert ds["train"][0].focal == pytest.approx(50.0, abs=1e-12)
    assert ds["train"][0].image.shape == (4, 100, 3)


def test_missing_time_defaults_to_zero(tmp_path, caplog):
    fr = frame()
    del fr["time"]
    write_scene(tmp_path, [fr])
    with caplog.at_level(logging.WARNING):
        ds = load_dnerf(tmp_path, splits=("train",))
    assert ds["train"][0].time == 0.0
    assert "no time" in caplog.text


def test_alpha_composited_by_background(tmp_path):
    write_scene(tmp_path, [frame()], mode="RGBA")
    a = 128 / 255
    black = load_dnerf(tmp_path, splits=("train",))["train"][0].image[0, 0]
    white = load_dnerf(tmp_path, "white", splits=("train",))["train"][0].image[0, 0]
    assert black.tolist() == pytest.approx([a, 0, 0], abs=1e-6)
    assert white.tolist() == pytest.approx([a + 1 - a, 1 - a, 1 - a], abs=1e-6)


def test_missing_optional_splits_are_empty(tmp_path):
    write_scene(tmp_path, [frame()])
    ds = load_dnerf(tmp_path)
    assert ds["val"] == [] and ds["test"] == []
    with pytest.raises(DatasetError):
        load_dnerf(tmp_path / "nowhere")


@pytest.mark.parametrize("mutate, needle", [
    (lambda f: f.pop("transform_matrix"), "transform_matrix"),
    (lambda f: f.pop("file_path"), "file_path"),
    (lambda f: f.update(transform_matrix=[[1, 0, 0], [0, 1, 0], [0, 0, 1]]), "4x4"),
    (lambda f: f.update(transform_matrix="eye"), "transform_matrix"),
    (lambda f: f.update(transform_matrix=(2 * np.eye(4)).tolist()), "orthonormal"),
    (lambda f: f.update(time="noon"), "time"),
    (lambda f: f.update(file_path="ghost"), "unreadable"),
])
def test_malformed_frames_name_the_frame(tmp_path, mutate, needle):
    good, bad = frame("a"), frame("b")
    write_scene(tmp_path, [good, bad])
    mutate(bad)
    meta = json.loads((tmp_path / "transforms_train.json").read_text())
    meta["frames"][1] = bad
    (tmp_path / "transforms_train.json").write_text(json.dumps(meta))
    with pytest.raises(DatasetError, match=needle) as exc:
        load_dnerf(tmp_path, splits=("train",))
    assert exc.value.frame is not None and ("[1]" in exc.value.frame or ":b" in exc.value.frame)


@pytest.mark.parametrize("text", ["{", "[]", '{"frames": []}', '{"camera_angle_x": 0.5}',
                                  '{"camera_angle_x": "wide", "frames": []}',
                                  '{"camera_angle_x": 0.5, "frames": [], "scene_bbox": [1, 2]}'])
def test_malformed_top_level(tmp_path, text):
    (tmp_path / "transforms_train.json").write_text(text)
    with pytest.raises(DatasetError):
        load_dnerf(tmp_path, splits=("train",))


_json = st.recursive(st.none() | st.booleans() | st.floats(allow_nan=True) | st.integers() | st.text(max_size=5),
                     lambda ch: st.lists(ch, max_size=4) | st.dictionaries(st.text(max_size=5), ch, max_size=4),
                     max_leaves=12)


@settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(key=st.sampled_from(["camera_angle_x", "frames", "file_path", "transform_matrix", "time", "scene_bbox"]),
       value=_json)
def test_loader_is_total(tmp_path, key, value):
    root = tmp_path / "fuzz"
    write_scene(root, [frame()])
    meta = json.loads((root / "transforms_train.json").read_text())
    if key in ("file_path", "transform_matrix", "time"):
        meta["frames"][0][key] = value
    else:
        meta[key] = value
    (root / "transforms_train.json").write_text(json.dumps(meta))
    try:
        load_dnerf(root, splits=("train",))
    except DatasetError:
        pass


def test_frame_record_checks():
    img = np.zeros((2, 2, 3), np.float32)
    assert FrameRecord(img, np.eye(4), 1.0, 1.7).time == 1.0
    assert FrameRecord(img, np.eye(4), 1.0, -0.2).time == 0.0
    with pytest.raises(DatasetError):
        FrameRecord(img, np.eye(3), 1.0, 0.0)


# -- synthetic scenes --------------------------------------------------------
def test_roundtrip_poses_and_times_bit_equal(tmp_path):
    spec = moving_sphere_spec()
    synth_scene(spec, tmp_path, cameras=3, resolution=(8, 8))
    meta = json.loads((tmp_path / "transforms_train.json").read_text())
    ds = load_dnerf(tmp_path)
    for fr, rec in zip(meta["frames"], ds["train"]):
        assert np.array_equal(np.asarray(fr["transform_matrix"]), rec.pose)
        assert fr["time"] == rec.time
    assert [f.time for f in ds["train"]] == [0.0, 0.5, 1.0]
    assert ds.bbox == spec.bbox
    assert len(ds["val"]) == 2 and 0 < ds["val"][0].time < 1


def test_synthesis_is_deterministic(tmp_path):
    spec = moving_sphere_spec()
    a = synth_scene(spec, tmp_path / "a", cameras=2, resolution=(6, 6))
    b = synth_scene(spec, tmp_path / "b", cameras=2, resolution=(6, 6))
    for name in ("transforms_train.json", "train/r_000.png", "test/r_001.png"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_empty_spec_renders_background(tmp_path):
    for bg, want in (("black", 0), ("white", 255)):
        root = synth_scene(SceneSpec([], background=bg), tmp_path / bg, cameras=2, resolution=(5, 5))
        arr = np.asarray(Image.open(root / "train/r_001.png"))
        assert (arr == want).all()


def static_sphere(albedo=(0.2, 0.6, 1.0)):
    return SceneSpec([Primitive("sphere", 200.0, albedo, Trajectory("poly", [[0.0, 0.0, 0.0]]), radius=0.5)])


@pytest.mark.parametrize("pos", [(4, 0, 0), (0, -4, 1), (-2, 2, -2.5), (0.5, 0.3, -3.9)])
def test_static_sphere_center_pixel(pos):
    cam = Camera(look_at(pos), 20.0, 9, 9)
    img = oracle_render(static_sphere(), cam, 0.0)
    assert img[4, 4].tolist() == pytest.approx([0.2, 0.6, 1.0], abs=1e-3)
    assert img[0, 0].tolist() == [0.0, 0.0, 0.0]


def test_static_sphere_disk_is_centered(tmp_path):
    # 0.2, 0.6 and 1.0 are exact 8-bit levels, so the PNG keeps the albedo
    root = synth_scene(static_sphere(), tmp_path, cameras=4, resolution=(33, 33))
    ds = load_dnerf(root)
    for rec in ds["train"]:
        img = rec.image
        assert img[16, 16].tolist() == pytest.approx([0.2, 0.6, 1.0], abs=1e-3)
        mask = img.sum(-1) > 0.9
        ys, xs = np.nonzero(mask)
        assert abs(ys.mean() - 16) < 0.5 and abs(xs.mean() - 16) < 0.5


def test_moving_sphere_displacement_matches_projection():
    spec = SceneSpec([Primitive("sphere", 200.0, (1.0, 1.0, 1.0),
                                Trajectory("poly", [[-0.5, 0.0, 0.0], [1.0, 0.0, 0.0]]), radius=0.15)])
    pose = look_at((0.3, -4.0, 0.6))
    W = H = 64
    focal = 60.0
    cam = Camera(pose, focal, H, W)

    def project(p):
        rel = pose[:3, :3].T @ (np.asarray(p) - pose[:3, 3])
        return np.array([-rel[1] / -rel[2] * focal + H / 2, rel[0] / -rel[2] * focal + W / 2])

    def centroid(img):
        ys, xs = np.nonzero(img.sum(-1) > 1.5)
        return np.array([ys.mean(), xs.mean()]) + 0.5  # pixel centers

    c0, c1 = centroid(oracle_render(spec, cam, 0.0)), centroid(oracle_render(spec, cam, 1.0))
    p0, p1 = project([-0.5, 0, 0]), project([0.5, 0, 0])
    assert np.abs(c0 - p0).max() < 0.6 and np.abs(c1 - p1).max() < 0.6
    assert np.abs((c1 - c0) - (p1 - p0)).max() < 0.6
    assert (c1 - c0)[1] > 10


def test_oracle_two_slab_closed_form():
    # two boxes of known optical depth along the camera axis
    spec = SceneSpec([
        Primitive("box", 2.0, (1.0, 0.0, 0.0), Trajectory("poly", [[0.0, 0.0, 0.5]]), half_size=(0.9, 0.9, 0.25)),
        Primitive("box", 4.0, (0.0, 1.0, 0.0), Trajectory("poly", [[0.0, 0.0, -0.5]]), half_size=(0.9, 0.9, 0.25)),
    ])
    pose = look_at((0.0, 0.0, 4.0), up=(0.0, 1.0, 0.0))
    img = oracle_render(spec, Camera(pose, 10.0, 3, 3), 0.0, step=1e-4)
    a1, a2 = 1 - math.exp(-2.0 * 0.5), 1 - math.exp(-4.0 * 0.5)
    assert img[1, 1].tolist() == pytest.approx([a1, (1 - a1) * a2, 0.0], abs=1e-3)


@pytest.mark.parametrize("obj, needle", [
    ({"primitives": [{"type": "sphere", "density": 1, "albedo": [1, 1, 1], "center": [0.9, 0, 0],
                      "radius": 0.3}]}, "leaves"),
    ({"primitives": [{"type": "cone", "density": 1, "albedo": [1, 1, 1], "center": [0, 0, 0]}]}, "unknown"),
    ({"primitives": [{"type": "sphere", "density": -1, "albedo": [1, 1, 1], "center": [0, 0, 0],
                      "radius": 0.1}]}, "negative"),
    ({"primitives": [{"type": "sphere"}]}, "malformed"),
    ({"bbox": [0, 0, 0, 0, 1, 1]}, "bbox"),
    ({"background": "grey"}, "background"),
])
def test_spec_errors(obj, needle):
    with pytest.raises(SpecError, match=needle):
        SceneSpec.from_json(obj)


def test_spec_json_roundtrip():
    spec = moving_sphere_spec()
    again = SceneSpec.from_json(json.loads(json.dumps(spec.to_json())))
    assert again.to_json() == spec.to_json()
    sin = Trajectory.parse({"kind": "sin", "base": [0, 0, 0], "amp": [0.1, 0, 0], "freq": 2, "phase": 0.5})
    assert sin(0.0).tolist() == pytest.approx([0.1 * math.sin(0.5), 0, 0])
