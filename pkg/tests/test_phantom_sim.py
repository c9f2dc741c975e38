import struct

import numpy as np
import pytest
from scipy import ndimage

from cdif.evalkit import psnr
from cdif.phantom_sim import (
    Dataset,
    NoiseModel,
    Sinogram,
    dose_degrade,
    fbp_reconstruct,
    forward_project,
    generate_phantom,
    hu_to_mu,
    make_dataset,
    mu_to_hu,
    read_slice,
    write_slice,
)
from cdif.phantom_sim.cdif_io import FormatError
from cdif.phantom_sim.noise import measured_counts
from cdif.phantom_sim.tomo import MU_WATER, default_n_detectors

PIX = 5.0


def disk(side, radius_px, value):
    # 8x supersampled disk centred on the rotation axis
    n = side * 8
    c = (np.arange(n) + 0.5) / 8 - side / 2
    X, Y = np.meshgrid(c, c)
    img = (X**2 + Y**2 <= radius_px**2).astype(float) * value
    return img.reshape(side, 8, side, 8).mean(axis=(1, 3))


def blobs(side, rot=0.0):
    """Smooth test object rendered analytically, optionally rotated counter-clockwise."""
    c = (np.arange(side) - (side - 1) / 2)
    X, Y = np.meshgrid(c, -c)
    cr, sr = np.cos(-rot), np.sin(-rot)
    Xr, Yr = X * cr - Y * sr, X * sr + Y * cr
    img = np.zeros((side, side))
    for cx, cy, w, a in [(6, 3, 4.0, 0.02), (-8, -5, 3.0, 0.015), (2, -10, 5.0, 0.01)]:
        img += a * np.exp(-((Xr - cx) ** 2 + (Yr - cy) ** 2) / (2 * w**2))
    return img


def interior_rmse(rec, img):
    band = (ndimage.maximum_filter(img, 5) - ndimage.minimum_filter(img, 5)) > 0
    return float(np.sqrt(np.mean((rec - img)[~band] ** 2)))


# -- phantoms ---------------------------------------------------------------

def test_zero_ellipse_phantom_is_water_disk():
    ph = generate_phantom(64, 0, seed=123)
    img = ph.image
    assert img[32, 32] == 0.0 and img[31, 31] == 0.0
    assert img[0, 0] == -1000.0 and img[63, 63] == -1000.0
    assert img.min() >= -1000.0 and img.max() <= 0.0
    assert generate_phantom(64, 0, seed=9).image.tolist() == img.tolist()


def test_phantom_determinism_and_seed_sensitivity():
    a = generate_phantom(64, 5, seed=1).image
    b = generate_phantom(64, 5, seed=1).image
    c = generate_phantom(64, 5, seed=2).image
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


@pytest.mark.parametrize("seed", range(6))
def test_phantom_invariants(seed):
    ph = generate_phantom(48, 7, seed)
    assert ph.image.shape == (48, 48)
    assert ph.image.min() >= -1000 and ph.image.max() <= 3000


def test_adjacent_slices_correlated_not_identical():
    s0 = generate_phantom(64, 6, 5, 0).image
    s1 = generate_phantom(64, 6, 5, 1).image
    far = generate_phantom(64, 6, 99, 0).image
    assert not np.array_equal(s0, s1)
    assert np.abs(s0 - s1).mean() < np.abs(s0 - far).mean()


@pytest.mark.parametrize("side", [8, 15, 33])
def test_phantom_rejects_bad_side(side):
    with pytest.raises(ValueError):
        generate_phantom(side, 2, 0)


# -- HU conversion ----------------------------------------------------------

def test_hu_mu_conversion():
    assert hu_to_mu(0.0) == pytest.approx(MU_WATER)
    assert hu_to_mu(-1000.0) == 0.0
    x = np.random.default_rng(0).uniform(-1000, 3000, 100)
    np.testing.assert_allclose(mu_to_hu(hu_to_mu(x)), x, rtol=0, atol=1e-12)


# -- projector / FBP --------------------------------------------------------

def test_zero_image_zero_sinogram():
    s = forward_project(np.zeros((32, 32)), 60)
    assert s.data.shape == (60, default_n_detectors(32))
    assert not s.data.any()


def test_non_square_rejected():
    with pytest.raises(ValueError):
        forward_project(np.zeros((32, 16)), 10)


def test_disk_central_ray_matches_chord_length():
    mu, r_px = 0.02, 20
    sino = forward_project(disk(64, r_px, mu), 180, pixel_mm=PIX)
    centre = (sino.data.shape[1] - 1) // 2
    expected = 2 * r_px * PIX * mu
    np.testing.assert_allclose(sino.data[:, centre], expected, rtol=0.02)


def test_rotation_permutes_rows():
    n_angles = 90
    step = np.pi / n_angles
    p = forward_project(blobs(64), n_angles).data
    q = forward_project(blobs(64, rot=step), n_angles).data
    # rotating by one angular step shifts rows by one
    err = np.linalg.norm(q[1:] - p[:-1]) / np.linalg.norm(p[:-1])
    assert err < 0.01
    assert np.linalg.norm(q[1:] - p[1:]) / np.linalg.norm(p) > err


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_fbp_roundtrip(seed):
    ph = generate_phantom(64, 6, seed)
    sino = forward_project(hu_to_mu(ph.image), 180)
    rec = mu_to_hu(fbp_reconstruct(sino, 64))
    assert interior_rmse(rec, ph.image) <= 40.0


def test_fbp_linearity():
    sino = forward_project(hu_to_mu(generate_phantom(32, 3, 4).image), 90)
    zero = Sinogram(np.zeros_like(sino.data), sino.geometry)
    assert not fbp_reconstruct(zero, 32).any()
    a = fbp_reconstruct(sino, 32)
    b = fbp_reconstruct(Sinogram(3.5 * sino.data, sino.geometry), 32)
    np.testing.assert_allclose(b, 3.5 * a, rtol=1e-12, atol=1e-15)


def test_fbp_geometry_mismatch():
    sino = forward_project(np.zeros((32, 32)), 10)
    with pytest.raises(ValueError):
        fbp_reconstruct(sino, 64)


# -- noise model ------------------------------------------------------------

def test_count_moments():
    c = measured_counts(np.zeros(100_000), NoiseModel(), np.random.default_rng(11))
    assert abs(c.mean() / 1.5e5 - 1) <= 0.01
    assert abs(c.var() / (1.5e5 + 10) - 1) <= 0.05


def test_high_count_limit_recovers_projection():
    sino = forward_project(hu_to_mu(generate_phantom(32, 4, 2).image), 30)
    ld = dose_degrade(sino, NoiseModel(I0=1e12, sigma_e2=0.0), seed=0)
    assert np.abs(ld.data - sino.data).max() < 1e-3


def test_lower_dose_has_higher_variance():
    g = forward_project(np.zeros((16, 16)), 1).geometry
    p = np.full((1, g.n_detectors), 2.0)
    base = Sinogram(p, g)
    draws = {d: np.stack([dose_degrade(base, NoiseModel(dose_fraction=d), k).data[0] for k in range(10_000)])
             for d in (1.0, 0.05)}
    assert np.all(draws[0.05].var(axis=0) > draws[1.0].var(axis=0))


def test_dose_degrade_validates():
    g = forward_project(np.zeros((16, 16)), 2).geometry
    with pytest.raises(ValueError):
        dose_degrade(Sinogram(-np.ones((2, g.n_detectors)), g), NoiseModel(), 0)
    with pytest.raises(ValueError):
        NoiseModel(dose_fraction=0.0)
    with pytest.raises(ValueError):
        NoiseModel(I0=0)
    with pytest.raises(ValueError):
        NoiseModel(sigma_e2=-1)


def test_dose_degrade_deterministic_per_seed():
    sino = forward_project(hu_to_mu(generate_phantom(32, 2, 0).image), 20)
    a = dose_degrade(sino, NoiseModel(dose_fraction=0.1), 5).data
    b = dose_degrade(sino, NoiseModel(dose_fraction=0.1), 5).data
    c = dose_degrade(sino, NoiseModel(dose_fraction=0.1), 6).data
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_count_floor_handles_photon_starvation():
    g = forward_project(np.zeros((16, 16)), 1).geometry
    ld = dose_degrade(Sinogram(np.full((1, g.n_detectors), 30.0), g), NoiseModel(dose_fraction=0.05), 1)
    assert np.all(np.isfinite(ld.data))
    assert ld.data.max() <= np.log(0.05 * 1.5e5) + 1e-12


# -- file format and dataset --------------------------------------------------

def test_cdif_roundtrip_and_header(tmp_path):
    img = np.arange(12, dtype=np.float64).reshape(3, 4) - 5.5
    write_slice(tmp_path / "a.cdif", img)
    raw = (tmp_path / "a.cdif").read_bytes()
    assert raw[:4] == b"CDIF"
    assert struct.unpack_from("<HHII", raw, 4) == (1, 1, 3, 4)
    assert len(raw) == 16 + 4 * 12
    np.testing.assert_array_equal(read_slice(tmp_path / "a.cdif"), img)


def test_cdif_rejects_garbage(tmp_path):
    (tmp_path / "bad.cdif").write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(FormatError):
        read_slice(tmp_path / "bad.cdif")
    write_slice(tmp_path / "t.cdif", np.zeros((2, 2)))
    (tmp_path / "t2.cdif").write_bytes((tmp_path / "t.cdif").read_bytes()[:-4])
    with pytest.raises(FormatError):
        read_slice(tmp_path / "t2.cdif")


def test_make_dataset_counts_and_determinism(tmp_path):
    a = make_dataset(tmp_path / "a", 4, 32, [0.05], seed=3)
    b = make_dataset(tmp_path / "b", 4, 32, [0.05], seed=3)
    files = sorted(p.name for p in a.glob("*.cdif"))
    assert len(files) == 4 * 3 * 2
    ds = Dataset(a)
    assert len(ds) == 4 and ds.doses == [0.05]
    for name in files + ["manifest.txt"]:
        assert (a / name).read_bytes() == (b / name).read_bytes()
    x0, xT, prev, nxt = ds.arrays()
    assert x0.shape == (4, 32, 32) and x0.dtype == np.float32
    assert not np.array_equal(prev, nxt)


def test_make_dataset_refuses_non_empty(tmp_path):
    (tmp_path / "x").mkdir()
    (tmp_path / "x" / "keep").write_text("1")
    with pytest.raises(FileExistsError):
        make_dataset(tmp_path / "x", 1, 32, [0.1], 0)


def test_ld_quality_increases_with_dose(tmp_path):
    doses = [0.5, 0.25, 0.1, 0.05]
    ds = Dataset(make_dataset(tmp_path / "d", 6, 64, doses, seed=4))
    mean_psnr = []
    for d in doses:
        mean_psnr.append(np.mean([psnr(ds.ld(t.index, 0, d), ds.nd(t.index)) for t in ds.triples]))
    assert all(a > b for a, b in zip(mean_psnr, mean_psnr[1:]))
