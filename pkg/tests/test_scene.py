import numpy as np
import pytest

from dynfield.scene import (CameraModel, DatasetError, Mover, SceneSpec,
                            analytic_flow, camera_rig, look_at_camera,
                            preset_scene, read_dataset, synthesize_sequence,
                            trace_frame, write_dataset)


def _camera(width=64, height=64, focal=57.6, eye=(0, 0, -5)):
    return look_at_camera(eye, (0, 0, 0), width, height, focal)


def test_rotation_is_proper():
    cam = _camera(eye=(1.0, 2.0, -4.0))
    R = cam.rotation
    assert np.abs(R @ R.T - np.eye(3)).max() < 1e-9
    assert abs(np.linalg.det(R) - 1.0) < 1e-9


def test_bad_rotation_rejected():
    with pytest.raises(ValueError):
        CameraModel(np.eye(3), np.eye(3) * 1.1, np.zeros(3), 8, 8)


def test_project_optical_axis_hits_principal_point():
    cam = _camera()
    pix, z = cam.project(np.array([[0.0, 0.0, 0.0]]))
    np.testing.assert_allclose(pix[0], [31.5, 31.5], atol=1e-9)
    assert z[0] == pytest.approx(5.0)


def test_project_pinhole_offset():
    cam = CameraModel(np.array([[50.0, 0, 31.5], [0, 50.0, 31.5], [0, 0, 1]]),
                      np.eye(3), np.zeros(3), 64, 64)
    pix, _ = cam.project(np.array([[0.4, 0.0, 2.0]]))
    assert pix[0, 0] - 31.5 == pytest.approx(50.0 * 0.4 / 2.0)
    assert pix[0, 1] == pytest.approx(31.5)


def test_project_unproject_roundtrip():
    rng = np.random.default_rng(0)
    cam = _camera(eye=(0.7, -0.9, -4.5))
    pts = rng.uniform(-1.0, 1.0, size=(50, 3))
    pix, z = cam.project(pts)
    back = cam.unproject(pix, z)
    assert np.abs(back - pts).max() < 1e-9


def test_project_behind_camera_raises():
    cam = _camera()
    with pytest.raises(ValueError):
        cam.project(np.array([[0.0, 0.0, -10.0]]))


def test_trace_no_movers_mask_empty():
    scene = SceneSpec([])
    tr = trace_frame(scene, _camera(), 0.0)
    assert not tr.mask.any()
    assert (tr.obj_id >= 0).all()  # infinite plane catches every ray


def test_trace_sphere_disc_radius_matches_pinhole():
    r, Z, focal = 0.65, 5.0, 57.6
    scene = SceneSpec([Mover("sphere", np.array([r]),
                             np.array([0.8, 0.2, 0.2]), "poly",
                             np.zeros((3, 3)))])
    cam = _camera(focal=focal)
    tr = trace_frame(scene, cam, 0.0)
    area = tr.mask.sum()
    measured = np.sqrt(area / np.pi)
    expected = focal * r / np.sqrt(Z * Z - r * r)
    assert abs(measured - expected) <= 1.0


def test_trace_deterministic():
    scene = preset_scene("orbit")
    cam = _camera()
    a = trace_frame(scene, cam, 0.3)
    b = trace_frame(scene, cam, 0.3)
    assert np.array_equal(a.rgb, b.rgb)
    assert np.array_equal(a.depth, b.depth)


def test_depths_within_bounds():
    scene = preset_scene("orbit")
    seq = synthesize_sequence(scene, camera_rig(4, 48, 48))
    for fr in seq.frames:
        assert (fr.depth > scene.near).all()
        assert (fr.depth <= scene.far).all()


def test_flow_zero_for_static_scene_same_camera():
    scene = SceneSpec([])
    cam = _camera()
    flow = analytic_flow(scene, cam, cam, 0.0, 0.5)
    assert np.nanmax(np.abs(flow)) < 1e-9


def test_flow_static_scene_matches_reprojection_oracle():
    scene = SceneSpec([])
    cam_i = _camera()
    cam_j = _camera(eye=(0.4, 0.1, -4.9))
    flow = analytic_flow(scene, cam_i, cam_j, 0.0, 0.1)
    # independent oracle: intersect each pixel ray with the plane directly
    rng = np.random.default_rng(4)
    for _ in range(50):
        px = rng.integers(5, 59, size=2)
        pixel = px.astype(np.float64)
        d = cam_i.pixel_rays(pixel[None, :])[0]
        o = cam_i.center
        u = (scene.plane_z - o[2]) / d[2]
        point = o + u * d
        pj, _ = cam_j.project(point[None, :])
        expect = pj[0] - pixel
        got = flow[px[1], px[0]]
        if np.isfinite(got).all():
            np.testing.assert_allclose(got, expect, atol=1e-9)


def test_flow_moving_sphere_center():
    vel = np.array([1.2, 0.0, 0.0])
    scene = SceneSpec([Mover("sphere", np.array([0.6]),
                             np.array([0.8, 0.3, 0.2]), "poly",
                             np.stack([np.zeros(3), vel, np.zeros(3)]))])
    cam = _camera()
    t_i, t_j = 0.0, 1.0 / 11.0
    tr = trace_frame(scene, cam, t_i)
    flow = analytic_flow(scene, cam, cam, t_i, t_j)
    c_pix_i, _ = cam.project(np.zeros((1, 3)))
    c_pix_j, _ = cam.project((vel * (t_j - t_i))[None, :])
    expect = (c_pix_j - c_pix_i)[0]
    cx, cy = int(round(c_pix_i[0, 0])), int(round(c_pix_i[0, 1]))
    assert tr.mask[cy, cx]
    # the front surface point sits nearer than the center, so allow the
    # small perspective magnification difference
    np.testing.assert_allclose(flow[cy, cx], expect, atol=0.25)


def test_flow_forward_backward_cycle():
    scene = preset_scene("orbit")
    seq = synthesize_sequence(scene, camera_rig(6, 48, 48))
    i = 2
    fw = seq.frames[i].flow_fw
    bw = seq.frames[i + 1].flow_bw
    H, W = fw.shape[:2]
    gy, gx = np.mgrid[0:H, 0:W]
    tx = gx + fw[..., 0]
    ty = gy + fw[..., 1]
    ok = (np.isfinite(fw).all(axis=-1)
          & (tx >= 0) & (tx <= W - 1) & (ty >= 0) & (ty <= H - 1))
    err = []
    for y, x in zip(*np.nonzero(ok)):
        jx, jy = int(round(tx[y, x])), int(round(ty[y, x]))
        b = bw[jy, jx]
        if not np.isfinite(b).all():
            continue
        err.append(np.hypot(tx[y, x] + b[0] - x, ty[y, x] + b[1] - y))
    err = np.array(err)
    assert (err <= 0.51).mean() > 0.98


def test_mask_flow_coherence():
    # a mover with nonzero world velocity must not follow background flow
    scene = preset_scene("linear")
    cams = camera_rig(4, 48, 48)
    tr = trace_frame(scene, cams[1], 1.0 / 3.0)
    flow = analytic_flow(scene, cams[1], cams[2], 1.0 / 3.0, 2.0 / 3.0)
    bg_scene = SceneSpec([], texture_phase=scene.texture_phase)
    bg_flow = analytic_flow(bg_scene, cams[1], cams[2], 1.0 / 3.0, 2.0 / 3.0)
    sel = tr.mask & np.isfinite(flow).all(axis=-1)
    diff = np.linalg.norm((flow - bg_flow)[sel], axis=-1)
    assert np.median(diff) > 0.5


def test_dataset_roundtrip(tmp_path):
    scene = preset_scene("two-balls")
    seq = synthesize_sequence(scene, camera_rig(3, 32, 32))
    out = str(tmp_path / "ds")
    write_dataset(seq, out)
    back = read_dataset(out)
    assert back.K == seq.K
    np.testing.assert_allclose(back.timestamps, seq.timestamps)
    for fr_a, fr_b in zip(seq.frames, back.frames):
        assert np.abs(fr_a.rgb - fr_b.rgb).max() <= 1.0 / 255.0 + 1e-12
        np.testing.assert_array_equal(fr_a.mask, fr_b.mask)
        np.testing.assert_array_equal(fr_a.depth.astype(np.float32),
                                      fr_b.depth.astype(np.float32))
        if fr_a.flow_fw is not None:
            np.testing.assert_array_equal(fr_a.flow_fw.astype(np.float32),
                                          fr_b.flow_fw)
    for cam_a, cam_b in zip(seq.cameras, back.cameras):
        np.testing.assert_allclose(cam_a.rotation, cam_b.rotation,
                                   atol=1e-15)


def test_dataset_missing_channel_errors(tmp_path):
    scene = preset_scene("orbit")
    seq = synthesize_sequence(scene, camera_rig(3, 16, 16))
    out = str(tmp_path / "ds")
    write_dataset(seq, out)
    (tmp_path / "ds" / "depth" / "0001.f32").unlink()
    with pytest.raises(DatasetError, match="0001"):
        read_dataset(out)


def test_dataset_manifest_mismatch_errors(tmp_path):
    scene = preset_scene("orbit")
    seq = synthesize_sequence(scene, camera_rig(3, 16, 16))
    out = str(tmp_path / "ds")
    write_dataset(seq, out)
    manifest = tmp_path / "ds" / "manifest.txt"
    text = manifest.read_text().replace("K=3", "K=4")
    manifest.write_text(text)
    with pytest.raises(DatasetError):
        read_dataset(out)
