import json
import struct

import numpy as np
import pytest

from crosscal.dataio import (
    CalibrationDataset,
    DatasetManifest,
    PreprocessSpec,
    RawFrame,
    make_sample,
    preprocess_camera,
    render_lidar_image,
    subsample_points,
    synth_scene,
    write_synth_dataset,
)
from crosscal.dataio.kitti import load_kitti_calib, load_kitti_cloud
from crosscal.dataio.synth import SynthSceneParams
from crosscal.geometry import (
    CameraIntrinsics,
    DeviationRange,
    PointCloud,
    SE3Transform,
    project_point,
)
from oracles import brute_force_lidar_raster


def write_cloud(path, records):
    with open(path, "wb") as fh:
        for rec in records:
            fh.write(struct.pack("<4f", *rec))


# ------------------------------------------------------------ KITTI loaders


def test_load_cloud_single_record(tmp_path):
    path = tmp_path / "scan.bin"
    write_cloud(path, [(1.0, 2.0, 3.0, 0.5)])
    pc = load_kitti_cloud(path)
    assert len(pc) == 1
    assert np.allclose(pc.points[0], [1, 2, 3])
    assert pc.intensity[0] == 0.5


def test_load_cloud_empty_file(tmp_path):
    path = tmp_path / "empty.bin"
    path.write_bytes(b"")
    assert len(load_kitti_cloud(path)) == 0


def test_load_cloud_matches_byte_decoder_oracle(tmp_path):
    rng = np.random.default_rng(11)
    records = [tuple(rng.uniform(-50, 50, 3)) + (float(rng.uniform(0, 1)),) for _ in range(10)]
    records = [tuple(np.float32(v) for v in r) for r in records]
    path = tmp_path / "scan.bin"
    write_cloud(path, records)
    pc = load_kitti_cloud(path)
    assert len(pc) == 10
    # byte-level struct decoding as the independent oracle
    blob = path.read_bytes()
    for i in range(10):
        x, y, z, r = struct.unpack_from("<4f", blob, i * 16)
        assert np.allclose(pc.points[i], [x, y, z])
        assert pc.intensity[i] == pytest.approx(r)


def test_load_cloud_rejects_bad_size(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"\x00" * 20)
    with pytest.raises(ValueError, match="malformed"):
        load_kitti_cloud(path)


CALIB_TEMPLATE = (
    "P0: 1 0 0 0 0 1 0 0 0 0 1 0\n"
    "P2: {p2}\n"
    "Tr: {tr}\n"
)


def test_load_calib_simple(tmp_path):
    path = tmp_path / "calib.txt"
    path.write_text(
        CALIB_TEMPLATE.format(
            p2="100 0 50 0 0 100 50 0 0 0 1 0",
            tr="1 0 0 0 0 1 0 0 0 0 1 0",
        )
    )
    intr, t_lc = load_kitti_calib(path)
    assert (intr.fx, intr.fy, intr.cx, intr.cy) == (100, 100, 50, 50)
    assert np.allclose(t_lc.as_matrix(), np.eye(4))


def test_load_calib_tr_translation(tmp_path):
    path = tmp_path / "calib.txt"
    path.write_text(
        CALIB_TEMPLATE.format(
            p2="100 0 50 0 0 100 50 0 0 0 1 0",
            tr="1 0 0 0 0 1 0 0 0 0 1 0.1",
        )
    )
    _, t_lc = load_kitti_calib(path)
    assert np.allclose(t_lc.translation, [0, 0, 0.1])


def test_load_calib_folds_p2_baseline(tmp_path):
    # P2[:, 3] = K @ b must fold b into the composed transform
    path = tmp_path / "calib.txt"
    path.write_text(
        CALIB_TEMPLATE.format(
            p2="100 0 50 -20 0 100 50 0 0 0 1 0",
            tr="1 0 0 0 0 1 0 0 0 0 1 0",
        )
    )
    _, t_lc = load_kitti_calib(path)
    assert np.allclose(t_lc.translation, [-0.2, 0, 0])


def test_load_calib_missing_key(tmp_path):
    path = tmp_path / "calib.txt"
    path.write_text("P2: 100 0 50 0 0 100 50 0 0 0 1 0\n")
    with pytest.raises(ValueError, match="Tr"):
        load_kitti_calib(path)


def test_calib_reprojection_spot_check(tmp_path):
    # KITTI-like numbers; overlay oracle = independent homogeneous product
    p2 = "718.856 0 607.1928 45.38225 0 718.856 185.2157 -0.1130887 0 0 1 0.003779761"
    tr = (
        "4.276802385584e-04 -9.999672484946e-01 -8.084491683471e-03 -1.198459927713e-02 "
        "-7.210626507497e-03 8.081198471645e-03 -9.999413164504e-01 -5.403984729748e-02 "
        "9.999738645903e-01 4.859485810390e-04 -7.206933692422e-03 -2.921968648686e-01"
    )
    path = tmp_path / "calib.txt"
    path.write_text(CALIB_TEMPLATE.format(p2=p2, tr=tr))
    intr, t_lc = load_kitti_calib(path)
    p2_mat = np.array([float(v) for v in p2.split()]).reshape(3, 4)
    tr_mat = np.vstack([np.array([float(v) for v in tr.split()]).reshape(3, 4), [0, 0, 0, 1]])
    rng = np.random.default_rng(7)
    for _ in range(20):
        p = rng.uniform([5, -10, -2], [60, 10, 2])  # velodyne frame, forward x
        hom = p2_mat @ tr_mat @ np.append(p, 1.0)
        if hom[2] <= 0:
            continue
        u_ref, v_ref = hom[0] / hom[2], hom[1] / hom[2]
        u, v, d = project_point(p, intr, t_lc)
        assert abs(u - u_ref) < 2.0 and abs(v - v_ref) < 2.0


# ------------------------------------------------------------- preprocess


def test_preprocess_scale_factors():
    raw = np.full((384, 1280, 3), 128, dtype=np.uint8)
    K = CameraIntrinsics(100, 200, 640, 192)
    image, K2 = preprocess_camera(raw, (512, 256), (1280, 384), K)
    assert image.data.shape == (3, 256, 512)
    assert K2.fx == pytest.approx(100 * 0.4)
    assert K2.fy == pytest.approx(200 * 2 / 3)
    assert K2.cx == pytest.approx(640 * 0.4)
    assert K2.cy == pytest.approx(192 * 2 / 3)


def test_preprocess_pads_with_zeros():
    raw = np.full((376, 1241, 3), 255, dtype=np.uint8)
    K = CameraIntrinsics(700, 700, 620, 188)
    image, _ = preprocess_camera(raw, (1280, 384), (1280, 384), K)
    # no resize here: padded region must be exactly zero
    assert np.all(image.data[:, 380:, :] == 0)
    assert np.all(image.data[:, :, 1245:] == 0)
    assert np.all(image.data[:, :370, :1235] == 1.0)


def test_preprocess_rejects_oversize():
    raw = np.zeros((400, 1281, 3), dtype=np.uint8)
    with pytest.raises(ValueError, match="larger"):
        preprocess_camera(raw, (512, 256), (1280, 384), CameraIntrinsics(1, 1, 0, 0))


def test_preprocess_projection_commutes_with_rescale():
    K = CameraIntrinsics(718.0, 718.0, 607.0, 185.0)
    _, K2 = preprocess_camera(
        np.zeros((376, 1241, 3), np.uint8), (512, 256), (1280, 384), K
    )
    rng = np.random.default_rng(3)
    T = SE3Transform.identity()
    for _ in range(50):
        p = rng.uniform([-10, -5, 4], [10, 5, 60])
        u1, v1, _ = project_point(p, K, T)
        u2, v2, _ = project_point(p, K2, T)
        assert u2 == pytest.approx(u1 * 0.4, abs=1e-6)
        assert v2 == pytest.approx(v1 * 2 / 3, abs=1e-6)


# --------------------------------------------------------------- rendering


def test_render_single_point_on_axis():
    K = CameraIntrinsics(100, 100, 16, 12)
    pc = PointCloud(np.array([[0.0, 0.0, 2.0]]), np.array([0.7]))
    img = render_lidar_image(pc, K, SE3Transform.identity(), 32, 24)
    assert img.mask.sum() == 1
    assert img.mask[12, 16]
    assert img.depth[12, 16] == 2.0 / 80.0
    assert img.intensity[12, 16] == 0.7


def test_render_zbuffer_keeps_nearest():
    K = CameraIntrinsics(100, 100, 16, 12)
    pc = PointCloud(
        np.array([[0.0, 0.0, 5.0], [0.0, 0.0, 2.0]]), np.array([0.9, 0.3])
    )
    img = render_lidar_image(pc, K, SE3Transform.identity(), 32, 24)
    assert img.mask.sum() == 1
    assert img.depth[12, 16] == 2.0 / 80.0
    assert img.intensity[12, 16] == 0.3


def test_render_discards_behind_camera_and_out_of_bounds():
    K = CameraIntrinsics(100, 100, 16, 12)
    pc = PointCloud(
        np.array([[0.0, 0.0, -2.0], [50.0, 0.0, 2.0]]), np.array([0.5, 0.5])
    )
    img = render_lidar_image(pc, K, SE3Transform.identity(), 32, 24)
    assert img.mask.sum() == 0


def test_render_matches_brute_force_oracle_bitwise():
    rng = np.random.default_rng(21)
    K = CameraIntrinsics(120.0, 110.0, 32.0, 24.0)
    for trial in range(20):
        pts = rng.uniform([-3, -3, 0.5], [3, 3, 12], size=(100, 3))
        pc = PointCloud(pts, rng.uniform(0, 1, 100))
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        from crosscal.geometry import Quaternion, quat_to_rotmat

        T = SE3Transform(quat_to_rotmat(Quaternion.from_array(q)), rng.normal(size=3) * 0.2)
        img = render_lidar_image(pc, K, T, 64, 48)
        depth, inten, mask = brute_force_lidar_raster(pc, K, T, 64, 48)
        assert np.array_equal(img.mask, mask)
        assert np.array_equal(img.depth, depth)
        assert np.array_equal(img.intensity, inten)


def test_render_deterministic():
    rng = np.random.default_rng(22)
    pts = rng.uniform([-3, -3, 1], [3, 3, 12], size=(200, 3))
    pc = PointCloud(pts, rng.uniform(0, 1, 200))
    K = CameraIntrinsics(100, 100, 32, 24)
    a = render_lidar_image(pc, K, SE3Transform.identity(), 64, 48)
    b = render_lidar_image(pc, K, SE3Transform.identity(), 64, 48)
    assert np.array_equal(a.depth, b.depth)
    assert np.array_equal(a.intensity, b.intensity)
    assert np.array_equal(a.mask, b.mask)


# ------------------------------------------------------------ sample build


def make_test_frame(seed=0, n_points=400):
    image, cloud, intr, t_lc = synth_scene(seed, n_points, SynthSceneParams(width=128, height=64))
    return RawFrame("t", image, cloud, intr, t_lc)


def test_make_sample_zero_range():
    frame = make_test_frame()
    prep = PreprocessSpec((128, 64), (128, 64))
    sample = make_sample(frame, DeviationRange(0, 0), seed=5, prep=prep)
    assert np.allclose(sample.t_init.as_matrix(), frame.t_lc.as_matrix())
    assert np.allclose(sample.t_gt.as_matrix(), np.eye(4))


def test_make_sample_deterministic_and_rerenderable():
    frame = make_test_frame()
    prep = PreprocessSpec((128, 64), (128, 64))
    rng_range = DeviationRange(0.1, 2.0)
    a = make_sample(frame, rng_range, seed=9, prep=prep)
    b = make_sample(frame, rng_range, seed=9, prep=prep)
    assert np.array_equal(a.camera.data, b.camera.data)
    assert np.array_equal(a.lidar.depth, b.lidar.depth)
    assert np.array_equal(a.t_init.as_matrix(), b.t_init.as_matrix())
    # stored lidar image reproducible from stored inputs (type invariant)
    rerendered = render_lidar_image(
        a.cloud, a.intrinsics, a.t_init, a.lidar.width, a.lidar.height
    )
    assert np.array_equal(rerendered.depth, a.lidar.depth)
    assert np.array_equal(rerendered.intensity, a.lidar.intensity)
    assert np.array_equal(rerendered.mask, a.lidar.mask)


def test_subsample_points_fixed_size_and_seeded():
    rng = np.random.default_rng(1)
    pc = PointCloud(rng.normal(size=(100, 3)), rng.uniform(0, 1, 100))
    a = subsample_points(pc, 32, seed=4)
    b = subsample_points(pc, 32, seed=4)
    assert a.shape == (32, 3)
    assert np.array_equal(a, b)
    small = PointCloud(rng.normal(size=(5, 3)), rng.uniform(0, 1, 5))
    assert subsample_points(small, 32, seed=4).shape == (32, 3)


# ---------------------------------------------------------------- synthetic


def test_synth_scene_deterministic():
    a_img, a_cloud, _, _ = synth_scene(33, 500)
    b_img, b_cloud, _, _ = synth_scene(33, 500)
    assert np.array_equal(a_img, b_img)
    assert np.array_equal(a_cloud.points, b_cloud.points)
    assert np.array_equal(a_cloud.intensity, b_cloud.intensity)


def test_synth_scene_single_point():
    _, cloud, _, _ = synth_scene(1, 1)
    assert len(cloud) == 1


def test_synth_scene_modalities_overlap():
    image, cloud, intr, t_lc = synth_scene(12, 2000)
    lidar = render_lidar_image(cloud, intr, t_lc, image.shape[1], image.shape[0])
    nonbackground = image.sum(axis=2) > 0
    valid = lidar.mask
    overlap = (nonbackground & valid).sum() / valid.sum()
    assert overlap >= 0.6, f"overlap {overlap:.2%}"


def test_write_synth_dataset_and_manifest(tmp_path):
    manifest_path = write_synth_dataset(
        tmp_path / "ds",
        n_scenes=2,
        n_points=300,
        seed=3,
        deviation=DeviationRange(0.1, 2.0),
        params=SynthSceneParams(width=128, height=64),
    )
    manifest = DatasetManifest.from_file(manifest_path)
    assert manifest.kind == "synthetic"
    assert len(manifest.entries) == 2
    ds = CalibrationDataset(manifest)
    assert len(ds) == 2
    s0 = ds.sample(0, epoch=0)
    s0_again = ds.sample(0, epoch=0)
    assert np.array_equal(s0.lidar.depth, s0_again.lidar.depth)
    s0_e1 = ds.sample(0, epoch=1)
    assert not np.allclose(s0.t_gt.as_matrix(), s0_e1.t_gt.as_matrix())


def test_manifest_missing_files_rejected(tmp_path):
    manifest_path = write_synth_dataset(
        tmp_path / "ds",
        n_scenes=1,
        n_points=50,
        seed=3,
        deviation=DeviationRange(0.1, 2.0),
        params=SynthSceneParams(width=64, height=32),
    )
    (tmp_path / "ds" / "scene_0000" / "cloud.bin").unlink()
    with pytest.raises(FileNotFoundError):
        DatasetManifest.from_file(manifest_path)


def test_dataset_rerun_writes_identical_scenes(tmp_path):
    kwargs = dict(
        n_scenes=2,
        n_points=200,
        seed=7,
        deviation=DeviationRange(0.1, 2.0),
        params=SynthSceneParams(width=64, height=32),
    )
    write_synth_dataset(tmp_path / "a", **kwargs)
    write_synth_dataset(tmp_path / "b", **kwargs)
    for scene in ("scene_0000", "scene_0001"):
        for name in ("image.png", "cloud.bin"):
            a = (tmp_path / "a" / scene / name).read_bytes()
            b = (tmp_path / "b" / scene / name).read_bytes()
            assert a == b, f"{scene}/{name} differs"


# ------------------------------------------------------------- KITTI layout


def make_fake_kitti(root, sequences=("04",), frames_per_seq=2):
    import cv2

    from crosscal.dataio.synth import SynthSceneParams, synth_scene

    for seq in sequences:
        seq_dir = root / "sequences" / seq
        (seq_dir / "velodyne").mkdir(parents=True)
        (seq_dir / "image_2").mkdir(parents=True)
        params = SynthSceneParams(width=192, height=64)
        intr = params.intrinsics()
        for i in range(frames_per_seq):
            image, cloud, _, t_lc = synth_scene(1000 + i, 500, params)
            cv2.imwrite(str(seq_dir / "image_2" / f"{i:06d}.png"), image[:, :, ::-1])
            rec = np.column_stack([cloud.points, cloud.intensity]).astype("<f4")
            rec.tofile(seq_dir / "velodyne" / f"{i:06d}.bin")
        p2 = (
            f"P2: {intr.fx} 0 {intr.cx} 0 0 {intr.fy} {intr.cy} 0 0 0 1 0\n"
        )
        tr_mat = t_lc.as_matrix()[:3, :]
        tr = "Tr: " + " ".join(str(v) for v in tr_mat.ravel()) + "\n"
        (seq_dir / "calib.txt").write_text(p2 + tr)
    return root


def test_kitti_manifest_end_to_end(tmp_path):
    from crosscal.dataio.samples import kitti_manifest_dict

    kitti_root = make_fake_kitti(tmp_path / "kitti")
    manifest_dict = kitti_manifest_dict(
        kitti_root=kitti_root,
        stored_root="kitti",
        sequences=["04"],
        deviation=DeviationRange(0.1, 2.0),
        seed=5,
        split="train",
        target_wh=(96, 32),
        padded_wh=(192, 64),
    )
    # manifest references are relative to its own directory
    manifest_path = tmp_path / "manifest.json"
    manifest_path.write_text(json.dumps(manifest_dict))
    ds = CalibrationDataset.from_file(manifest_path)
    assert len(ds) == 2
    sample = ds.sample(0, epoch=0)
    assert sample.camera.data.shape == (3, 32, 96)
    assert sample.lidar.depth.shape == (32, 96)
    assert sample.lidar.mask.any()
    again = ds.sample(0, epoch=0)
    assert np.array_equal(sample.lidar.depth, again.lidar.depth)


def test_kitti_manifest_missing_frame_rejected(tmp_path):
    from crosscal.dataio.samples import kitti_manifest_dict

    kitti_root = make_fake_kitti(tmp_path / "kitti")
    manifest_dict = kitti_manifest_dict(
        kitti_root=kitti_root,
        stored_root="kitti",
        sequences=["04"],
        deviation=DeviationRange(0.1, 2.0),
        seed=5,
        split="train",
    )
    manifest_dict["frames"].append(["04", "000099"])
    manifest_path = tmp_path / "manifest.json"
    manifest_path.write_text(json.dumps(manifest_dict))
    with pytest.raises(FileNotFoundError):
        CalibrationDataset.from_file(manifest_path)
