import json
import math

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter
from scipy.stats import chisquare

from gazelab.rng import Rng
from gazelab.synthgen import (
    PHI_MAX,
    GazeAngles,
    GeometryError,
    IdentityParams,
    load_dataset,
    make_dataset,
    manifest_digest,
    perturb_identity,
    read_gaze,
    read_raster,
    region_masks,
    render_face,
    sample_gaze,
    sample_identity,
    write_raster,
)
from gazelab.losses import gaze_angle_error

JITTER0 = (0.0, 0.0, 1.0)


@pytest.fixture(scope="module")
def ident():
    return sample_identity(Rng(3), 0)


def test_zero_gaze_is_left_right_symmetric():
    # symmetric identity, no jitter: image equals its mirror when looking straight ahead
    base = sample_identity(Rng(5), 1)
    img = render_face(base, GazeAngles(0.0, 0.0), 0, jitter=JITTER0).image
    assert np.allclose(img, img[:, :, ::-1], atol=1e-12)


def test_horizontal_gaze_mirrors(ident):
    left = render_face(ident, GazeAngles(0.0, 0.5), 0, jitter=JITTER0).image
    right = render_face(ident, GazeAngles(math.pi, 0.5), 0, jitter=JITTER0).image
    assert np.allclose(left, right[:, :, ::-1], atol=1e-12)
    assert not np.allclose(left, right)


def test_iris_offset_follows_formula(ident):
    # centroid of iris colour moves along (cos mu, sin mu) by k sin(phi)
    g = GazeAngles(0.7, 0.9)
    read = read_gaze(render_face(ident, g, 0, jitter=JITTER0).image, ident, JITTER0)
    assert gaze_angle_error(read, g) < math.radians(0.5)


@pytest.mark.parametrize("seed", range(4))
def test_roundtrip_under_half_degree(seed):
    rng = Rng(100 + seed)
    ident = sample_identity(rng, seed)
    worst = 0.0
    for f in range(25):
        g = sample_gaze(rng)
        s = render_face(ident, g, rng.next_u64(), image_size=64)
        worst = max(worst, gaze_angle_error(read_gaze(s.image, ident, s.jitter), g))
    assert math.degrees(worst) < 0.5



def test_reading_ignores_skin_tone_drift(ident):
    # a swap may carry some of the other identity's skin colour; the eyes alone decide the reading
    rng = Rng(77)
    for skin in [(0.95, 0.6, 0.55), (0.8, 0.75, 0.3), (0.6, 0.45, 0.35)]:
        drifted = IdentityParams(**{**vars(ident), "skin_tone": skin})
        g = sample_gaze(rng)
        s = render_face(drifted, g, rng.next_u64())
        for img in (s.image, gaussian_filter(s.image, (0, 0.8, 0.8))):
            assert math.degrees(gaze_angle_error(read_gaze(img, ident, s.jitter), g)) < 0.5

def test_phi_uniform_chi_square():
    rng = Rng(2024)
    phis = np.array([sample_gaze(rng).phi for _ in range(10_000)])
    assert phis.min() >= 0 and phis.max() <= PHI_MAX
    counts, _ = np.histogram(phis, bins=20, range=(0.0, PHI_MAX))
    assert chisquare(counts).pvalue > 0.01


def test_dataset_counts_and_manifest(tmp_path):
    data = make_dataset(2, 10, 32, seed=4, out_dir=tmp_path)
    assert len(data) == 20
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert len(manifest["samples"]) == 20
    assert len(manifest["identities"]) == 2
    assert all((tmp_path / s["image"]).exists() for s in manifest["samples"])


def test_same_seed_same_manifest_hash(tmp_path):
    make_dataset(2, 5, 32, seed=9, out_dir=tmp_path / "a")
    make_dataset(2, 5, 32, seed=9, out_dir=tmp_path / "b")
    make_dataset(2, 5, 32, seed=10, out_dir=tmp_path / "c")
    assert manifest_digest(tmp_path / "a") == manifest_digest(tmp_path / "b")
    assert manifest_digest(tmp_path / "a") != manifest_digest(tmp_path / "c")


def test_load_dataset_roundtrip(tmp_path):
    data = make_dataset(2, 3, 32, seed=1, out_dir=tmp_path)
    back = load_dataset(tmp_path)
    # rasters are float32 on disk
    assert np.allclose(back.images, data.images, atol=1e-7)
    assert np.array_equal(back.gaze, data.gaze)
    assert back.identities == data.identities


def test_masks_nest_and_stay_in_unit_range(ident):
    for jitter in [JITTER0, (0.7, -0.4, 0.95)]:
        m = region_masks(ident, jitter, 64)
        for v in m.values():
            assert v.min() >= 0 and v.max() <= 1
        assert np.all(m["mask_eyes"] <= m["mask_em"] + 1e-12)
        assert np.all(m["mask_em"] <= m["mask_face"] + 1e-12)
        assert m["mask_eyes"].sum() > 0


def test_raster_roundtrip(tmp_path):
    arr = np.random.default_rng(0).random((3, 5, 7))
    write_raster(tmp_path / "x.gzlb", arr)
    blob = (tmp_path / "x.gzlb").read_bytes()
    assert blob.startswith(b"GZLB-I1")
    assert np.array_equal(read_raster(tmp_path / "x.gzlb"), arr.astype(np.float32))


def test_raster_bad_magic(tmp_path):
    (tmp_path / "x.gzlb").write_bytes(b"NOTARASTER" + bytes(20))
    with pytest.raises(ValueError):
        read_raster(tmp_path / "x.gzlb")


def test_iris_must_fit_inside_eye(ident):
    bad = IdentityParams(**{**ident.to_dict(), "iris_radius": ident.eye_radius + 0.1})
    with pytest.raises(GeometryError):
        bad.validate()


def test_gaze_outside_range_rejected(ident):
    with pytest.raises(GeometryError):
        render_face(ident, GazeAngles(0.0, 2.0), 0)


def test_lookalike_stays_valid_and_close(ident):
    other = perturb_identity(ident, Rng(1), 0.2, 7)
    other.validate()
    assert other.identity_id == 7
    assert abs(other.eye_spacing - ident.eye_spacing) <= 0.2 * 2 + 1e-12


def test_render_is_deterministic(ident):
    a = render_face(ident, GazeAngles(0.3, 0.4), 99).image
    b = render_face(ident, GazeAngles(0.3, 0.4), 99).image
    assert np.array_equal(a, b)


def test_sizes_scale(ident):
    for s in (32, 64, 96):
        img = render_face(ident, GazeAngles(0.1, 0.2), 5, image_size=s).image
        assert img.shape == (3, s, s)
        assert 0.0 <= img.min() and img.max() <= 1.0
