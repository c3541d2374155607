"""Grayscale image I/O, noise, PSNR and feature construction.

Images are (H, W) float64 arrays in [0, 1]. Pixel (row, col) sits at feature
position (x, y) = (col, row).
"""

import math
import os
import re
from dataclasses import dataclass

import numpy as np

from .rng import Xoshiro256pp


class ImageFormatError(ValueError):
    pass


@dataclass
class SampleSet:
    """Feature locations (N, d) with signal values (N, C)."""

    features: np.ndarray
    values: np.ndarray

    @property
    def d(self):
        return self.features.shape[1]

    def __len__(self):
        return len(self.features)


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*([^\s#]+)")


def _header(data, count):
    pos = 0
    tokens = []
    for _ in range(count):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise ImageFormatError("truncated header")
        tokens.append(m.group(1))
        pos = m.end()
    return tokens, pos


def load_image(path) -> np.ndarray:
    """Read PGM (P2/P5, 8 or 16 bit) or PPM (P3/P6, 8 bit) as grayscale in [0, 1].

    Colour images become the mean of their three channels.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    magic = data[:2]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise ImageFormatError(f"{path}: unsupported magic {magic!r}")
    channels = 3 if magic in (b"P3", b"P6") else 1
    (_, w, h, maxval), pos = _header(data, 4)
    try:
        width, height, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise ImageFormatError(f"{path}: malformed header") from None
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise ImageFormatError(f"{path}: bad dimensions or maxval")
    if channels == 3 and maxval > 255:
        raise ImageFormatError(f"{path}: only 8-bit PPM is supported")
    count = width * height * channels

    if magic in (b"P2", b"P3"):
        body = data[pos:].split()
        if len(body) < count:
            raise ImageFormatError(f"{path}: truncated pixel data")
        raw = np.array([int(t) for t in body[:count]], dtype=np.float64)
    else:
        # exactly one whitespace byte separates the header from binary data
        pos += 1
        dtype = ">u2" if maxval > 255 else "u1"
        nbytes = count * np.dtype(dtype).itemsize
        if len(data) - pos < nbytes:
            raise ImageFormatError(f"{path}: truncated pixel data")
        raw = np.frombuffer(data, dtype=dtype, count=count, offset=pos).astype(np.float64)
    if np.any(raw > maxval):
        raise ImageFormatError(f"{path}: sample exceeds maxval")
    img = raw.reshape(height, width, channels) / maxval
    return img.mean(axis=2) if channels == 3 else img[:, :, 0]


def save_image(path, img):
    """Write binary 8-bit PGM, rounding half up after clamping to [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("expected a 2-D grayscale image")
    q = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(q.tobytes())


def list_images(directory):
    names = sorted(
        n for n in os.listdir(directory) if n.lower().endswith((".pgm", ".ppm", ".pnm"))
    )
    return [os.path.join(directory, n) for n in names]


def add_gaussian_noise(img, sigma, seed) -> np.ndarray:
    """Add N(0, sigma^2) noise in row-major order and clamp to [0, 1]."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    img = np.asarray(img, dtype=np.float64)
    if sigma == 0:
        return img.copy()
    noise = Xoshiro256pp(seed).normal(img.size).reshape(img.shape)
    return np.clip(img + sigma * noise, 0.0, 1.0)


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for peak 1.0; ``inf`` for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _grid(img):
    h, w = img.shape
    y, x = np.mgrid[0:h, 0:w]
    return x.ravel().astype(np.float64), y.ravel().astype(np.float64)


def position_features(img, spatial_scale) -> SampleSet:
    if not spatial_scale > 0:
        raise ValueError("spatial_scale must be positive")
    img = np.asarray(img, dtype=np.float64)
    x, y = _grid(img)
    feats = np.stack([x / spatial_scale, y / spatial_scale], axis=1)
    return SampleSet(feats, img.reshape(-1, 1).copy())


def bilateral_features(img, spatial_scale, intensity_scale) -> SampleSet:
    """One sample per pixel at (x, y, gray) divided by the respective scales."""
    if not (spatial_scale > 0 and intensity_scale > 0):
        raise ValueError("scales must be positive")
    img = np.asarray(img, dtype=np.float64)
    x, y = _grid(img)
    g = img.ravel()
    feats = np.stack([x / spatial_scale, y / spatial_scale, g / intensity_scale], axis=1)
    return SampleSet(feats, img.reshape(-1, 1).copy())


def bilinear(img, x, y):
    """Sample ``img`` at continuous positions; positions must lie inside the grid."""
    h, w = img.shape
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x0 = np.clip(np.floor(x).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(y).astype(np.int64), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    tx = x - x0
    ty = y - y0
    top = img[y0, x0] * (1 - tx) + img[y0, x1] * tx
    bottom = img[y1, x0] * (1 - tx) + img[y1, x1] * tx
    return top * (1 - ty) + bottom * ty


def subsample(img, fraction, seed, spatial_scale=1.0, on_grid=False) -> SampleSet:
    """Random position-feature samples covering ``fraction`` of the pixel count.

    With ``on_grid=False`` positions are continuous and uniform over the pixel
    rectangle (x drawn before y for each sample) and values are bilinearly
    interpolated. With ``on_grid=True`` a random subset of whole pixels is
    kept, in raster order.
    """
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    count = math.ceil(fraction * h * w)
    gen = Xoshiro256pp(seed)
    if on_grid:
        order = np.argsort(gen.uniform(h * w), kind="stable")
        keep = np.sort(order[:count])
        x = (keep % w).astype(np.float64)
        y = (keep // w).astype(np.float64)
        values = img.ravel()[keep]
    else:
        u = gen.uniform(2 * count).reshape(count, 2)
        x = u[:, 0] * (w - 1)
        y = u[:, 1] * (h - 1)
        values = bilinear(img, x, y)
    feats = np.stack([x / spatial_scale, y / spatial_scale], axis=1)
    return SampleSet(feats, values.reshape(-1, 1))


def rotation_stack(img, n_angles, spatial_scale, angle_scale) -> SampleSet:
    """Stack copies of the image rotated about its centre at angles 2*pi*t/n.

    Each pixel of each copy becomes a sample at (x'/s, y'/s, theta/a) where
    (x', y') is its rotated, generally non-integer, position.
    """
    if n_angles < 1:
        raise ValueError("n_angles must be at least 1")
    if not (spatial_scale > 0 and angle_scale > 0):
        raise ValueError("scales must be positive")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    x, y = _grid(img)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    feats = []
    for t in range(n_angles):
        theta = 2.0 * math.pi * t / n_angles
        c, s = math.cos(theta), math.sin(theta)
        xr = cx + c * (x - cx) - s * (y - cy)
        yr = cy + s * (x - cx) + c * (y - cy)
        feats.append(
            np.stack(
                [xr / spatial_scale, yr / spatial_scale, np.full_like(x, theta / angle_scale)],
                axis=1,
            )
        )
    values = np.tile(img.ravel(), n_angles).reshape(-1, 1)
    return SampleSet(np.concatenate(feats), values)


# natural photographs bundled with scikit-image, used as a stand-in dataset
SAMPLE_PHOTOS = (
    "astronaut",
    "brick",
    "camera",
    "chelsea",
    "clock",
    "coffee",
    "coins",
    "grass",
    "gravel",
    "moon",
    "rocket",
)


def sample_photos():
    """Grayscale versions of scikit-image's bundled photographs, as {name: image}."""
    from skimage import data

    out = {}
    for name in SAMPLE_PHOTOS:
        raw = np.asarray(getattr(data, name)(), dtype=np.float64)
        if raw.ndim == 3:
            raw = raw[:, :, :3].mean(axis=2)
        out[name] = raw / 255.0
    return out


def write_sample_dataset(root, tile=128, val_every=5, test_every=3):
    """Cut the bundled photographs into tiles and write a train/val/test tree.

    Tiles are dealt round-robin: every ``test_every``-th tile goes to test,
    every ``val_every``-th of the rest to val, the remainder to train.
    Returns the number of tiles per split.
    """
    splits = {"train": 0, "val": 0, "test": 0}
    for name in splits:
        os.makedirs(os.path.join(root, name), exist_ok=True)
    counter = 0
    rest = 0
    for name, img in sample_photos().items():
        h, w = img.shape
        for r in range(0, h - tile + 1, tile):
            for c in range(0, w - tile + 1, tile):
                if counter % test_every == 0:
                    split = "test"
                else:
                    split = "val" if rest % val_every == 0 else "train"
                    rest += 1
                counter += 1
                splits[split] += 1
                path = os.path.join(root, split, f"{name}_{r:04d}_{c:04d}.pgm")
                save_image(path, img[r : r + tile, c : c + tile])
    return splits
