import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from clusir.degradations import (LABELS, add_gaussian_noise, dataset_entries, degrade, gaussian_kernel,
                                 load_paired_folder, make_dataset, motion_kernel, procedural_image,
                                 procedural_images, random_crop_flip, regenerate, save_paired_folder,
                                 synth_blur, synth_haze, synth_lowlight, synth_rain)
from clusir.errors import ParameterError, ShapeError


@pytest.fixture(scope="module")
def img():
    return procedural_image(32, rng=7)


def const(v, h=8, w=8):
    return np.full((3, h, w), v, dtype=np.float64)


# ---------------------------------------------------------------- noise


def test_zero_noise_is_identity(img):
    assert np.array_equal(add_gaussian_noise(img, 0, rng=1).degraded, img)


def test_noise_std_on_mid_gray():
    big = add_gaussian_noise(np.full((3, 1000, 334), 0.5), 25, rng=0)
    # 0.5 +- 5 sigma never clips, so the empirical std is the draw std
    assert abs(big.degraded.std() - 25 / 255) / (25 / 255) < 0.02


def test_noise_on_black_is_clipped_draw():
    seed = 123
    s = add_gaussian_noise(np.zeros((3, 1, 1)), 25, rng=seed)
    n = np.random.default_rng(seed).standard_normal((3, 1, 1)) * 25 / 255
    assert np.array_equal(s.degraded, np.clip(n, 0, 1))


def test_noise_on_black_std_matches_rectified_gaussian():
    # clipping at zero keeps max(n, 0): std = sigma * sqrt(1/2 - 1/(2 pi)) ~= 0.584 sigma
    s = add_gaussian_noise(np.zeros((3, 600, 560)), 25, rng=5)
    expect = 25 / 255 * np.sqrt(0.5 - 1 / (2 * np.pi))
    assert abs(s.degraded.std() - expect) / expect < 0.02


def test_negative_sigma_rejected(img):
    with pytest.raises(ParameterError):
        add_gaussian_noise(img, -1)


# ---------------------------------------------------------------- haze


def test_haze_t1_identity(img):
    assert np.array_equal(synth_haze(img, 1.0, 0.9, rng=0).degraded, img)


@pytest.mark.parametrize("t, a, pixel, expect", [(0.5, 1.0, 0.2, 0.6), (0.25, 0.8, 0.4, 0.7)])
def test_haze_blend_values(t, a, pixel, expect):
    out = synth_haze(const(pixel), t, a, rng=0).degraded
    np.testing.assert_allclose(out, expect, atol=1e-12)


@pytest.mark.parametrize("t, a", [(0.0, 0.5), (1.2, 0.5), (0.5, -0.1), (0.5, 1.5)])
def test_haze_bad_params(t, a):
    with pytest.raises(ParameterError):
        synth_haze(const(0.5), t, a)


def test_varying_haze_bounded(img):
    s = synth_haze(img, 0.6, 0.9, rng=3, varying=0.3)
    assert s.degraded.min() >= 0 and s.degraded.max() <= 1
    assert not np.array_equal(s.degraded, synth_haze(img, 0.6, 0.9, rng=3).degraded)


# ---------------------------------------------------------------- rain


def test_rain_null_params(img):
    assert np.array_equal(synth_rain(img, 0, 0.5, 10, rng=1).degraded, img)
    assert np.array_equal(synth_rain(img, 40, 0.0, 10, rng=1).degraded, img)


def test_rain_adds_light_and_is_reproducible():
    base = const(0.3, 32, 32)
    a = synth_rain(base, 50, 0.5, 15, rng=42)
    b = synth_rain(base, 50, 0.5, 15, rng=a.rng_seed)
    assert (a.degraded - base).mean() > 0
    assert np.array_equal(a.degraded, b.degraded)


def test_rain_from_generator_records_seed(img):
    a = synth_rain(img, 30, 0.4, 0, rng=np.random.default_rng(9))
    b = synth_rain(img, 30, 0.4, 0, rng=a.rng_seed)
    assert np.array_equal(a.degraded, b.degraded)


def test_rain_negative_count_rejected(img):
    with pytest.raises(ParameterError):
        synth_rain(img, -1, 0.4, 0)


# ---------------------------------------------------------------- blur


def test_blur_k1_identity(img):
    assert np.array_equal(synth_blur(img, 1).degraded, img)
    assert np.array_equal(synth_blur(img, 1, "linear_motion", rng=0).degraded, img)


@pytest.mark.parametrize("kind", ["gaussian", "linear_motion"])
def test_blur_preserves_constants(kind):
    np.testing.assert_allclose(synth_blur(const(0.37), 5, kind, rng=2).degraded, 0.37, atol=1e-12)


def test_blur_impulse_response_is_kernel():
    x = np.zeros((3, 9, 9))
    x[:, 4, 4] = 1.0
    out = synth_blur(x, 3).degraded
    k = gaussian_kernel(3)
    for ch in out:
        np.testing.assert_allclose(ch[3:6, 3:6], k, atol=1e-12)
        assert abs(ch.sum() - 1) < 1e-12


def test_gaussian_kernel_matches_sampled_formula():
    # OpenCV aperture rule: sigma = 0.3((k-1)/2 - 1) + 0.8 -> 0.8 for k=3
    g = np.exp(-np.array([1.0, 0.0, 1.0]) / (2 * 0.8**2))
    ref = np.outer(g, g) / np.outer(g, g).sum()
    np.testing.assert_allclose(gaussian_kernel(3), ref, atol=1e-15)


@pytest.mark.parametrize("angle", [0, 30, 45, 90, 135])
def test_motion_kernel_unit_sum_and_centered(angle):
    k = motion_kernel(7, angle)
    assert abs(k.sum() - 1) < 1e-12
    assert k[3, 3] > 0


def test_blur_bad_params(img):
    with pytest.raises(ParameterError):
        synth_blur(img, 4)
    with pytest.raises(ParameterError):
        synth_blur(img, 3, "box")


# ---------------------------------------------------------------- low light


def test_lowlight_identity(img):
    assert np.array_equal(synth_lowlight(img, 1.0, 1.0).degraded, img)


def test_lowlight_value():
    np.testing.assert_allclose(synth_lowlight(const(0.5), 2.0, 0.5).degraded, 0.125, atol=1e-15)


def test_lowlight_bad_params():
    with pytest.raises(ParameterError):
        synth_lowlight(const(0.5), 0.5, 0.5)
    with pytest.raises(ParameterError):
        synth_lowlight(const(0.5), 2.0, 0.0)


@settings(max_examples=25, deadline=None)
@given(gamma=st.floats(1, 4), scale=st.floats(0.01, 1), v=st.floats(0, 1))
def test_lowlight_darkens(gamma, scale, v):
    assert synth_lowlight(const(v, 2, 2), gamma, scale).degraded.max() <= v + 1e-12


# ---------------------------------------------------------------- shared contracts


@settings(max_examples=20, deadline=None)
@given(label=st.sampled_from(LABELS), seed=st.integers(0, 2**31))
def test_outputs_in_range_and_shape(label, seed):
    img = procedural_image(16, rng=seed % 97)
    s = degrade(img, label, seed)
    assert s.degraded.shape == img.shape
    assert s.degraded.min() >= 0 and s.degraded.max() <= 1
    assert s.label == label


@pytest.mark.parametrize("label", LABELS)
def test_regenerate_bit_identical(label, img):
    s = degrade(img, label, np.random.default_rng(11))
    assert np.array_equal(regenerate(s).degraded, s.degraded)
    assert regenerate(s).params == s.params


def test_unknown_label(img):
    with pytest.raises(ParameterError):
        degrade(img, "snow")


@pytest.mark.parametrize("shape", [(8, 8), (1, 8, 8), (3, 0, 4)])
def test_bad_image_shape(shape):
    with pytest.raises(ShapeError):
        synth_haze(np.zeros(shape), 0.5, 0.5)


# ---------------------------------------------------------------- dataset stream


def test_empty_stream():
    assert list(make_dataset(procedural_images(2, 32), {"noise": 0, "rain": 0}, patch=16)) == []


def test_expansion_count():
    clean = procedural_images(10, 32)
    out = list(make_dataset(clean, {"noise": 10}, {"noise": 3}, patch=16))
    assert len(out) == 30
    assert all(s.label == "noise" for s in out)
    assert len({s.sample_id for s in out}) == 30


def test_entries_cycle_clean_images():
    e = dataset_entries(2, {"haze": 3})
    assert [i for _, i, _ in e] == [0, 1, 0]


def test_stream_deterministic_and_epoch_dependent():
    clean = procedural_images(3, 32)
    a = [s.degraded for s in make_dataset(clean, {"rain": 3}, patch=16, rng=4)]
    b = [s.degraded for s in make_dataset(clean, {"rain": 3}, patch=16, rng=4)]
    c = [s.degraded for s in make_dataset(clean, {"rain": 3}, patch=16, rng=4, epoch=1)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))


def test_stream_param_errors():
    clean = procedural_images(1, 32)
    with pytest.raises(ParameterError):
        list(make_dataset(clean, {"noise": 1}, patch=20))
    with pytest.raises(ParameterError):
        list(make_dataset(clean, {"noise": -1}, patch=16))
    with pytest.raises(ParameterError):
        list(make_dataset([], {"noise": 1}, patch=16))


def test_crop_flip_is_a_view_of_clean():
    clean = procedural_image(20, rng=0)
    gen = np.random.default_rng(0)
    seen = set()
    for _ in range(40):
        p = random_crop_flip(clean, 8, gen)
        assert p.shape == (3, 8, 8)
        found = False
        for y in range(13):
            for x in range(13):
                win = clean[:, y:y + 8, x:x + 8]
                for fy in (0, 1):
                    for fx in (0, 1):
                        w = win[:, ::-1] if fy else win
                        w = w[:, :, ::-1] if fx else w
                        if np.array_equal(w, p):
                            found = True
                            seen.add((fy, fx))
        assert found
    assert len(seen) == 4


def test_crop_too_large():
    with pytest.raises(ShapeError):
        random_crop_flip(procedural_image(8, rng=0), 16, np.random.default_rng(0))


def test_procedural_images_deterministic():
    a, b = procedural_images(2, 24, seed=3), procedural_images(2, 24, seed=3)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not np.array_equal(a[0], a[1])


def test_paired_folder_roundtrip(tmp_path):
    clean = procedural_images(2, 32)
    samples = list(make_dataset(clean, {"noise": 2, "haze": 1}, patch=16))
    assert save_paired_folder(samples, tmp_path) == 3
    back = load_paired_folder(tmp_path)
    assert sorted(s.label for s in back) == ["haze", "noise", "noise"]
    for s in back:
        orig = next(o for o in samples if o.sample_id == s.sample_id)
        assert np.abs(s.degraded - orig.degraded).max() <= 0.5 / 255 + 1e-12
    assert len(load_paired_folder(tmp_path, ["haze"])) == 1


def test_paired_folder_errors(tmp_path):
    with pytest.raises(ParameterError):
        load_paired_folder(tmp_path / "missing")
    (tmp_path / "snow" / "degraded").mkdir(parents=True)
    with pytest.raises(ParameterError):
        load_paired_folder(tmp_path)
