"""Parametric degradation synthesizers and paired-image datasets.

Images are float arrays of shape ``(3, H, W)`` with values in ``[0, 1]``.
Every generator takes ``rng`` as an integer seed or a ``numpy.random.Generator``;
the concrete integer seed that drove the draw is stored on the returned
sample, so ``regenerate(sample)`` reproduces it bit for bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, Mapping, Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from .errors import ParameterError, ShapeError

LABELS = ("noise", "haze", "rain", "blur", "lowlight")
CANONICAL_NOISE_LEVELS = (15, 25, 50)
# repeats per clean image for each task; haze is left at 1
FULL_SCALE_EXPANSION = {"noise": 3, "rain": 120, "blur": 5, "lowlight": 200, "haze": 1}

RngLike = Union[int, np.random.Generator, None]


@dataclass
class DegradationSample:
    degraded: np.ndarray
    clean: np.ndarray
    label: str
    params: Dict[str, float] = field(default_factory=dict)
    rng_seed: int = 0
    sample_id: str = ""


def _seeded(rng: RngLike):
    if isinstance(rng, np.random.Generator):
        seed = int(rng.integers(0, 2**63 - 1))
    elif rng is None:
        seed = int(np.random.SeedSequence().generate_state(1, np.uint64)[0] >> 1)
    else:
        seed = int(rng)
    return seed, np.random.default_rng(seed)


def check_image(img: np.ndarray, min_size: int = 1) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"expected a (3, H, W) image, got {img.shape}")
    if img.shape[1] < min_size or img.shape[2] < min_size:
        raise ShapeError(f"image {img.shape[1:]} smaller than {min_size}")
    return img


def add_gaussian_noise(img, sigma: float, rng: RngLike = None) -> DegradationSample:
    """Additive white Gaussian noise; ``sigma`` is in 8-bit units."""
    if sigma < 0:
        raise ParameterError(f"sigma must be >= 0, got {sigma}")
    clean = check_image(img)
    seed, gen = _seeded(rng)
    n = gen.standard_normal(clean.shape) * (sigma / 255.0)
    degraded = np.clip(clean + n, 0.0, 1.0)
    return DegradationSample(degraded, clean, "noise", {"sigma": float(sigma)}, seed)


def _smooth_field(shape, gen, smoothness):
    f = ndimage.gaussian_filter(gen.standard_normal(shape), smoothness, mode="reflect")
    f -= f.min()
    peak = f.max()
    return f / peak if peak > 0 else np.zeros(shape)


def synth_haze(
    img,
    transmission: float,
    airlight: float,
    rng: RngLike = None,
    varying: float = 0.0,
) -> DegradationSample:
    """Atmospheric scattering blend ``clean * t + airlight * (1 - t)``.

    ``varying > 0`` lowers the transmission by up to that amount along a
    smooth random field (depth-like variation), clipped to stay in (0, 1].
    """
    if not 0 < transmission <= 1:
        raise ParameterError(f"transmission must be in (0, 1], got {transmission}")
    if not 0 <= airlight <= 1:
        raise ParameterError(f"airlight must be in [0, 1], got {airlight}")
    if varying < 0:
        raise ParameterError(f"varying must be >= 0, got {varying}")
    clean = check_image(img)
    seed, gen = _seeded(rng)
    t = np.full(clean.shape[1:], float(transmission))
    if varying > 0:
        field_ = _smooth_field(clean.shape[1:], gen, max(clean.shape[1:]) / 8)
        t = np.clip(t - varying * field_, 1e-3, 1.0)
    degraded = clean * t + airlight * (1.0 - t)
    params = {"transmission": float(transmission), "airlight": float(airlight), "varying": float(varying)}
    return DegradationSample(np.clip(degraded, 0.0, 1.0), clean, "haze", params, seed)


def motion_kernel(length: int, angle: float) -> np.ndarray:
    """Normalized line kernel of odd size ``length`` oriented at ``angle`` degrees."""
    if length < 1 or length % 2 == 0:
        raise ParameterError(f"kernel length must be odd and >= 1, got {length}")
    k = np.zeros((length, length))
    c = length // 2
    theta = math.radians(angle)
    for t in np.linspace(-c, c, 4 * length + 1):
        x = int(round(c + t * math.cos(theta)))
        y = int(round(c - t * math.sin(theta)))
        k[y, x] = 1.0
    return k / k.sum()


def gaussian_kernel(size: int, sigma: Optional[float] = None) -> np.ndarray:
    if size < 1 or size % 2 == 0:
        raise ParameterError(f"kernel size must be odd and >= 1, got {size}")
    if sigma is None:
        # OpenCV's default sigma for a given aperture
        sigma = 0.3 * ((size - 1) * 0.5 - 1) + 0.8
    r = np.arange(size) - size // 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def _convolve(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    return np.stack([ndimage.convolve(ch, kernel, mode="reflect") for ch in img])


def synth_rain(
    img,
    streak_count: int,
    streak_intensity: float,
    angle: float,
    rng: RngLike = None,
    length: int = 11,
) -> DegradationSample:
    """Additive oriented rain streaks: random drops smeared by a motion kernel."""
    if streak_count < 0:
        raise ParameterError(f"streak_count must be >= 0, got {streak_count}")
    if streak_intensity < 0:
        raise ParameterError(f"streak_intensity must be >= 0, got {streak_intensity}")
    clean = check_image(img)
    seed, gen = _seeded(rng)
    _, h, w = clean.shape
    drops = np.zeros((h, w))
    ys = gen.integers(0, h, size=streak_count)
    xs = gen.integers(0, w, size=streak_count)
    strength = gen.uniform(0.6, 1.0, size=streak_count)
    np.add.at(drops, (ys, xs), strength)
    layer = ndimage.convolve(drops, motion_kernel(length, 90.0 + angle), mode="constant")
    # a full-strength drop spreads over ~length pixels; undo that dilution
    layer *= streak_intensity * np.count_nonzero(motion_kernel(length, 90.0 + angle))
    degraded = np.clip(clean + layer[None], 0.0, 1.0)
    params = {"streak_count": float(streak_count), "streak_intensity": float(streak_intensity),
              "angle": float(angle), "length": float(length)}
    return DegradationSample(degraded, clean, "rain", params, seed)


def synth_blur(img, kernel_size: int, kind: str = "gaussian", rng: RngLike = None) -> DegradationSample:
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ParameterError(f"kernel_size must be odd and >= 1, got {kernel_size}")
    clean = check_image(img)
    seed, gen = _seeded(rng)
    if kind == "gaussian":
        kernel = gaussian_kernel(kernel_size)
        angle = 0.0
    elif kind == "linear_motion":
        angle = float(gen.uniform(0, 180))
        kernel = motion_kernel(kernel_size, angle)
    else:
        raise ParameterError(f"unknown blur kind {kind!r}")
    degraded = np.clip(_convolve(clean, kernel), 0.0, 1.0)
    params = {"kernel_size": float(kernel_size), "angle": angle}
    return DegradationSample(degraded, clean, "blur", params, seed)


def synth_lowlight(
    img, gamma: float, scale: float, rng: RngLike = None, shot_noise: float = 0.0
) -> DegradationSample:
    """``scale * clean ** gamma`` with optional signal-dependent noise of std
    ``shot_noise * sqrt(value)``."""
    if gamma < 1:
        raise ParameterError(f"gamma must be >= 1, got {gamma}")
    if not 0 < scale <= 1:
        raise ParameterError(f"scale must be in (0, 1], got {scale}")
    clean = check_image(img)
    seed, gen = _seeded(rng)
    degraded = scale * clean**gamma
    if shot_noise > 0:
        degraded = degraded + shot_noise * np.sqrt(degraded) * gen.standard_normal(clean.shape)
    params = {"gamma": float(gamma), "scale": float(scale), "shot_noise": float(shot_noise)}
    return DegradationSample(np.clip(degraded, 0.0, 1.0), clean, "lowlight", params, seed)


# ---------------------------------------------------------------- task draws

DEFAULT_TASK_PARAMS = {
    "noise": {"sigma": 25.0},
    "haze": {"transmission": (0.35, 0.75), "airlight": (0.75, 1.0), "varying": 0.2},
    "rain": {"density": 0.012, "streak_intensity": (0.3, 0.6), "angle": (-20.0, 20.0), "length": 9},
    "blur": {"kernel_size": (3, 7), "kind": ("gaussian", "linear_motion")},
    "lowlight": {"gamma": (1.5, 2.5), "scale": (0.2, 0.5), "shot_noise": 0.02},
}


def _draw(gen, spec):
    if isinstance(spec, tuple) and len(spec) == 2 and all(isinstance(v, (int, float)) for v in spec):
        lo, hi = spec
        if isinstance(lo, int) and isinstance(hi, int):
            return int(gen.integers(lo, hi + 1))
        return float(gen.uniform(lo, hi))
    if isinstance(spec, tuple):
        return spec[int(gen.integers(len(spec)))]
    return spec


def degrade(img, label: str, rng: RngLike = None, params: Optional[Mapping] = None) -> DegradationSample:
    """Apply the ``label`` degradation with parameters drawn from ``params``.

    Parameter entries may be scalars, ``(lo, hi)`` ranges, or tuples of choices;
    missing entries fall back to ``DEFAULT_TASK_PARAMS``.
    """
    if label not in LABELS:
        raise ParameterError(f"unknown degradation label {label!r}")
    spec = dict(DEFAULT_TASK_PARAMS[label])
    spec.update(params or {})
    seed, gen = _seeded(rng)
    p = {k: _draw(gen, v) for k, v in spec.items()}
    sub = int(gen.integers(0, 2**63 - 1))
    if label == "noise":
        s = add_gaussian_noise(img, p["sigma"], sub)
    elif label == "haze":
        s = synth_haze(img, p["transmission"], p["airlight"], sub, varying=p["varying"])
    elif label == "rain":
        clean = check_image(img)
        count = int(round(p["density"] * clean.shape[1] * clean.shape[2]))
        length = int(p["length"]) | 1
        s = synth_rain(img, count, p["streak_intensity"], p["angle"], sub, length=length)
    elif label == "blur":
        ks = int(p["kernel_size"]) | 1
        s = synth_blur(img, ks, p["kind"], sub)
    else:
        s = synth_lowlight(img, p["gamma"], p["scale"], sub, shot_noise=p["shot_noise"])
    s.rng_seed = seed
    return s


def regenerate(sample: DegradationSample, params: Optional[Mapping] = None) -> DegradationSample:
    """Rebuild a sample produced by ``degrade`` from its clean image and seed."""
    return degrade(sample.clean, sample.label, sample.rng_seed, params)


# ------------------------------------------------------------ clean sources


def procedural_image(size: int = 128, rng: RngLike = None, width: Optional[int] = None) -> np.ndarray:
    """Piecewise-smooth synthetic scene: colored gradient, shapes, stripes."""
    _, gen = _seeded(rng)
    h, w = size, width or size
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    c0, c1 = gen.uniform(0.1, 0.9, size=(2, 3, 1, 1))
    ang = gen.uniform(0, 2 * np.pi)
    ramp = (np.cos(ang) * xx + np.sin(ang) * yy)[None]
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    img = c0 * (1 - ramp) + c1 * ramp
    for _ in range(int(gen.integers(3, 8))):
        color = gen.uniform(0, 1, size=(3, 1, 1))
        cy, cx = gen.uniform(0, 1, size=2) * [h / max(h, w), w / max(h, w)]
        ry, rx = gen.uniform(0.05, 0.3, size=2)
        if gen.random() < 0.5:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
        else:
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        mask = mask.astype(float)
        if gen.random() < 0.4:
            freq = gen.uniform(10, 40)
            theta = gen.uniform(0, np.pi)
            stripes = 0.5 + 0.5 * np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) * 2 * np.pi)
            color = color * (0.6 + 0.4 * stripes[None])
        img = img * (1 - mask[None]) + color * mask[None]
    img = np.stack([ndimage.gaussian_filter(ch, 0.7, mode="reflect") for ch in img])
    img = img + 0.02 * np.stack([ndimage.gaussian_filter(gen.standard_normal((h, w)), 1.0) for _ in range(3)])
    return np.clip(img, 0.0, 1.0)


def procedural_images(count: int, size: int = 128, seed: int = 0) -> list:
    return [procedural_image(size, np.random.SeedSequence([seed, i]).generate_state(1)[0])
            for i in range(count)]


# ------------------------------------------------------------ dataset stream


def random_crop_flip(clean: np.ndarray, patch: int, gen: np.random.Generator) -> np.ndarray:
    _, h, w = clean.shape
    if h < patch or w < patch:
        raise ShapeError(f"image {h}x{w} smaller than patch {patch}")
    y = int(gen.integers(0, h - patch + 1))
    x = int(gen.integers(0, w - patch + 1))
    out = clean[:, y:y + patch, x:x + patch]
    if gen.random() < 0.5:
        out = out[:, :, ::-1]
    if gen.random() < 0.5:
        out = out[:, ::-1, :]
    return np.ascontiguousarray(out)


def dataset_entries(n_clean: int, task_mix: Mapping[str, int],
                    expansion: Optional[Mapping[str, int]] = None) -> list:
    """``(label, clean_index, repeat)`` triples for one epoch, in canonical order."""
    expansion = dict(expansion or {})
    for label, count in task_mix.items():
        if label not in LABELS:
            raise ParameterError(f"unknown degradation label {label!r}")
        if count < 0:
            raise ParameterError(f"count for {label} must be >= 0")
        if expansion.get(label, 1) < 0:
            raise ParameterError(f"expansion for {label} must be >= 0")
    entries = []
    for label in LABELS:
        count = task_mix.get(label, 0)
        if count and not n_clean:
            raise ParameterError("no clean images supplied")
        for i in range(count):
            for r in range(expansion.get(label, 1)):
                entries.append((label, i % max(n_clean, 1), r))
    return entries


def make_sample(clean_images: Sequence[np.ndarray], entry, patch: int, seed: int, epoch: int,
                index: int, task_params: Optional[Mapping[str, Mapping]] = None) -> DegradationSample:
    """Build sample ``index`` of ``epoch``; depends only on its arguments."""
    label, i, r = entry
    gen = np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), int(index)]))
    crop = random_crop_flip(check_image(clean_images[i]), patch, gen)
    s = degrade(crop, label, gen, (task_params or {}).get(label))
    s.sample_id = f"{label}-{i}-{r}"
    return s


def make_dataset(
    clean_images: Sequence[np.ndarray],
    task_mix: Mapping[str, int],
    expansion: Optional[Mapping[str, int]] = None,
    patch: int = 64,
    rng: int = 0,
    epoch: int = 0,
    task_params: Optional[Mapping[str, Mapping]] = None,
) -> Iterator[DegradationSample]:
    """Yield one epoch of degraded patches.

    ``task_mix[label]`` clean images (cycled from ``clean_images``) are assigned
    to each task and each one is repeated ``expansion[label]`` times. Sample
    seeds derive from ``(rng, epoch, index)`` so workers can generate any slice
    independently.
    """
    if patch % 16:
        raise ParameterError(f"patch must be divisible by 16, got {patch}")
    entries = dataset_entries(len(clean_images), task_mix, expansion)
    for index, entry in enumerate(entries):
        yield make_sample(clean_images, entry, patch, rng, epoch, index, task_params)


# ------------------------------------------------------------------ PNG I/O


def read_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1).copy()


def write_png(path, img: np.ndarray) -> None:
    from PIL import Image

    arr = np.clip(np.asarray(img), 0, 1).transpose(1, 2, 0)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(arr * 255).astype(np.uint8), "RGB").save(path)


def save_paired_folder(samples, root) -> int:
    """Write samples as ``<root>/<task>/{degraded,clean}/<name>.png``."""
    root = Path(root)
    n = 0
    for s in samples:
        name = s.sample_id or f"{s.label}-{n}"
        write_png(root / s.label / "degraded" / f"{name}.png", s.degraded)
        write_png(root / s.label / "clean" / f"{name}.png", s.clean)
        n += 1
    return n


def load_paired_folder(root, labels: Optional[Sequence[str]] = None) -> list:
    """Read a ``<root>/<task>/{degraded,clean}/<name>.png`` tree."""
    root = Path(root)
    if not root.is_dir():
        raise ParameterError(f"{root} is not a directory")
    out = []
    for task_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        label = task_dir.name
        if labels is not None and label not in labels:
            continue
        if label not in LABELS:
            raise ParameterError(f"unknown task folder {label!r}")
        for deg_path in sorted((task_dir / "degraded").glob("*.png")):
            clean_path = task_dir / "clean" / deg_path.name
            if not clean_path.exists():
                raise ParameterError(f"missing clean counterpart for {deg_path}")
            deg, clean = read_png(deg_path), read_png(clean_path)
            if deg.shape != clean.shape:
                raise ShapeError(f"{deg_path.name}: degraded {deg.shape} vs clean {clean.shape}")
            out.append(DegradationSample(deg, clean, label, {}, 0, deg_path.stem))
    return out
