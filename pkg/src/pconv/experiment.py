"""Denoising experiments, demos and benchmarks built on the library layers."""

import hashlib
import math
import os
import time
from dataclasses import dataclass, fields

import numpy as np

from . import filterbank as fb
from .autodiff import SGD, Conv2DLayer, NormalizedPConvLayer, euclidean_loss
from .imaging import (
    bilateral_features,
    list_images,
    load_image,
    position_features,
    psnr,
    rotation_stack,
    subsample,
)
from .rng import Xoshiro256pp

MODEL_KINDS = ("cnn", "pcnn-gauss", "pcnn-trained", "cnn+pcnn")
SPATIAL_SWEEP = (2.0, 4.0, 6.0, 8.0, 10.0)
INTENSITY_SWEEP = (0.05, 0.1, 0.2, 0.3)


class NumericFailure(RuntimeError):
    pass


class DataError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    train_dir: str = ""
    val_dir: str = ""
    test_dir: str = ""
    out: str = "run"
    model: str = "pcnn-trained"
    lr: float = 0.1
    lr_pcnn: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 10
    crop: int = 128
    train_limit: int = 50
    val_limit: int = 0
    seed: int = 0
    sigma: float = 25.0 / 255.0
    clamp_noise: bool = False
    scale_spatial: float = 6.0
    scale_intensity: float = 0.1
    neighborhood: int = 2
    kernel_sigma: float = 1.0
    conv_size: int = 5

    def validate(self):
        if self.model not in MODEL_KINDS:
            raise ValueError(f"unknown model {self.model!r}; choose from {', '.join(MODEL_KINDS)}")
        for name in ("lr", "lr_pcnn", "scale_spatial", "scale_intensity", "kernel_sigma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("momentum", "weight_decay", "sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("epochs", "train_limit", "val_limit", "neighborhood", "seed"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.crop < 0:
            raise ValueError("crop must be non-negative")
        if self.conv_size < 1 or self.conv_size % 2 == 0:
            raise ValueError("conv_size must be odd")
        return self

    def update(self, values):
        """Apply a name -> value mapping, coercing strings to each field's type."""
        types = {f.name: f.type for f in fields(self)}
        for key, value in values.items():
            name = key.replace("-", "_")
            if name not in types:
                raise ValueError(f"unknown config key {key!r}")
            if value is None:
                continue
            kind = types[name]
            if isinstance(value, str):
                if kind is bool:
                    value = value.strip().lower() in ("1", "true", "yes", "on")
                elif kind is not str:
                    value = int(value, 0) if kind is int else kind(value)
            setattr(self, name, value)
        return self


def read_config(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key] = value
    return values


def noise_seed(seed, split, name):
    digest = hashlib.sha256(f"{seed}:{split}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def add_noise(img, cfg, split, name):
    noise = Xoshiro256pp(noise_seed(cfg.seed, split, name)).normal(img.size).reshape(img.shape)
    noisy = img + cfg.sigma * noise
    return np.clip(noisy, 0.0, 1.0) if cfg.clamp_noise else noisy


def center_crop(img, size):
    h, w = img.shape
    if size <= 0 or (h <= size and w <= size):
        return img
    top = max((h - size) // 2, 0)
    left = max((w - size) // 2, 0)
    return img[top : top + size, left : left + size]


class Example:
    """A clean/noisy image pair with its lazily built bilateral frame."""

    def __init__(self, name, clean, noisy, cfg):
        self.name = name
        self.clean = clean
        self.noisy = noisy
        self.cfg = cfg
        self._frame = None

    @property
    def frame(self):
        if self._frame is None:
            feats = bilateral_features(self.noisy, self.cfg.scale_spatial, self.cfg.scale_intensity)
            self._frame = fb.build_frame(feats.features, feats.features, 3, self.cfg.neighborhood)
        return self._frame


def load_split(directory, cfg, split, limit=0, crop=0):
    if not directory or not os.path.isdir(directory):
        raise DataError(f"{split} directory not found: {directory!r}")
    paths = list_images(directory)
    if limit:
        paths = paths[:limit]
    if not paths:
        raise DataError(f"no PGM/PPM images in {directory}")
    out = []
    for path in paths:
        name = os.path.splitext(os.path.basename(path))[0]
        clean = center_crop(load_image(path), crop)
        out.append(Example(name, clean, add_noise(clean, cfg, split, name), cfg))
    return out


class Denoiser:
    """One of the four denoising architectures, all predicting a gray value per pixel."""

    def __init__(self, cfg):
        self.kind = cfg.model
        self.cfg = cfg
        self.conv = None
        self.kernel = None
        k = cfg.conv_size
        if self.kind == "cnn":
            r = 1.0 / math.sqrt(k * k)
            u = Xoshiro256pp(noise_seed(cfg.seed, "init", "conv2d")).uniform(k * k)
            self.conv = Conv2DLayer(((2.0 * u - 1.0) * r).reshape(1, 1, k, k))
        elif self.kind == "cnn+pcnn":
            # starts as the Gaussian PCNN; the spatial branch learns a correction
            self.conv = Conv2DLayer(np.zeros((1, 1, k, k)))
        if self.kind != "cnn":
            self.kernel = fb.gaussian_kernel(3, cfg.neighborhood, cfg.kernel_sigma)
        self._layers = None

    @property
    def trainable(self):
        return self.kind != "pcnn-gauss"

    def params(self):
        out = {}
        if self.conv is not None:
            out["conv2d"] = self.conv.weights
        if self.kernel is not None and self.trainable:
            out["pconv"] = self.kernel.weights
        return out

    def predict(self, example):
        h, w = example.noisy.shape
        pred = np.zeros((h * w, 1))
        conv_layer = pconv_layer = None
        if self.conv is not None:
            conv_layer = self.conv
            pred += conv_layer.forward(example.noisy).reshape(-1, 1)
        if self.kernel is not None:
            pconv_layer = NormalizedPConvLayer(example.frame, self.kernel)
            pred += pconv_layer.forward(example.noisy.reshape(-1, 1))
        self._layers = (conv_layer, pconv_layer, (h, w))
        return pred

    def backward(self, grad):
        conv_layer, pconv_layer, (h, w) = self._layers
        grads = {}
        if conv_layer is not None:
            _, grads["conv2d"] = conv_layer.backward(grad.reshape(h, w, 1))
        if pconv_layer is not None and self.trainable:
            _, grads["pconv"] = pconv_layer.backward(grad)
        return grads

    def denoise(self, example):
        return self.predict(example).reshape(example.noisy.shape)


def make_optimizers(cfg):
    return {
        "conv2d": SGD(cfg.lr, cfg.momentum, cfg.weight_decay),
        "pconv": SGD(cfg.lr_pcnn, cfg.momentum, cfg.weight_decay),
    }


def epoch_order(seed, epoch, n):
    u = Xoshiro256pp(noise_seed(seed, "order", str(epoch))).uniform(n)
    return np.argsort(u, kind="stable")


def mean_psnr(model, examples):
    scores = [psnr(model.denoise(ex), ex.clean) for ex in examples]
    return float(np.mean(scores)) if scores else math.nan


def train(cfg, train_set, val_set, log=None):
    """Train ``cfg.model``; returns (model, optimizers, history).

    ``history`` holds one (epoch, mean train loss, val PSNR) tuple per epoch.
    """
    model = Denoiser(cfg)
    optimizers = make_optimizers(cfg)
    history = []
    if not model.trainable:
        return model, optimizers, history
    params = model.params()
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for idx in epoch_order(cfg.seed, epoch, len(train_set)):
            ex = train_set[idx]
            # divergence surfaces as a NumericFailure below, not as warnings
            with np.errstate(over="ignore", invalid="ignore"):
                pred = model.predict(ex)
                loss, grad = euclidean_loss(pred, ex.clean.reshape(-1, 1))
            if not math.isfinite(loss):
                raise NumericFailure(f"non-finite loss at epoch {epoch}, image {ex.name}")
            grads = model.backward(grad)
            for name, p in params.items():
                if not np.all(np.isfinite(grads[name])):
                    raise NumericFailure(f"non-finite gradient for {name} at epoch {epoch}")
                optimizers[name].step({name: p}, {name: grads[name]})
            losses.append(loss)
        row = (epoch, float(np.mean(losses)), mean_psnr(model, val_set))
        history.append(row)
        if log is not None:
            log(row)
    return model, optimizers, history


CHECKPOINT_TEXT = "checkpoint.txt"
SIDECAR_KEYS = (
    "model",
    "seed",
    "sigma",
    "scale_spatial",
    "scale_intensity",
    "neighborhood",
    "kernel_sigma",
    "conv_size",
    "epochs",
)


# sidecar entries that define the model rather than the data it saw
MODEL_KEYS = tuple(k for k in SIDECAR_KEYS if k not in ("seed", "sigma", "epochs"))


def save_checkpoint(directory, model, optimizers):
    os.makedirs(directory, exist_ok=True)
    lines = [f"{key} {getattr(model.cfg, key)!r}".replace("'", "") for key in SIDECAR_KEYS]
    if model.kernel is not None:
        fb.save_kernel(os.path.join(directory, "pconv.pcnv"), model.kernel)
    if model.conv is not None:
        np.save(os.path.join(directory, "conv2d.npy"), model.conv.weights)
    for name, opt in optimizers.items():
        if name not in model.params():
            continue
        lines.extend(f"{name}.{line}" for line in opt.state_lines())
        velocity = opt.velocity.get(name)
        if velocity is not None:
            np.save(os.path.join(directory, f"{name}.velocity.npy"), velocity)
    with open(os.path.join(directory, CHECKPOINT_TEXT), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_sidecar(directory):
    path = os.path.join(directory, CHECKPOINT_TEXT)
    if not os.path.isfile(path):
        raise DataError(f"no checkpoint at {directory}")
    values = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                name, value = line.split(None, 1)
                values[name] = value.strip()
    return values


def load_checkpoint(directory, cfg=None):
    """Rebuild a Denoiser from a checkpoint directory.

    Model settings stored in the checkpoint override those in ``cfg``; the
    noise sigma and seed recorded there are informational only, so the test
    data is generated from ``cfg``.
    """
    values = read_sidecar(directory)
    cfg = ExperimentConfig() if cfg is None else cfg
    cfg.update({k: v for k, v in values.items() if k in MODEL_KEYS}).validate()
    model = Denoiser(cfg)
    if model.kernel is not None:
        kernel = fb.load_kernel(os.path.join(directory, "pconv.pcnv"))
        if (kernel.d, kernel.s) != (3, cfg.neighborhood) or kernel.weights.shape[:2] != (1, 1):
            raise DataError("checkpoint kernel does not match the bilateral frame (d=3, 1 channel)")
        model.kernel = kernel
    if model.conv is not None:
        weights = np.load(os.path.join(directory, "conv2d.npy"))
        if weights.shape != model.conv.weights.shape:
            raise DataError("checkpoint conv2d weights have the wrong shape")
        model.conv = Conv2DLayer(weights)
    return model


def evaluate(model, examples):
    """Per-image (name, PSNR of the denoised image, PSNR of the noisy input)."""
    return [(ex.name, psnr(model.denoise(ex), ex.clean), psnr(ex.noisy, ex.clean)) for ex in examples]


def format_psnr(value):
    return "inf" if math.isinf(value) else f"{value:.6f}"


def write_results(path, rows):
    mean = float(np.mean([r[1] for r in rows]))
    with open(path, "w") as fh:
        for name, score, _ in rows:
            fh.write(f"{name} {format_psnr(score)}\n")
        fh.write(f"mean {format_psnr(mean)}\n")
    return mean


def crossval(cfg, val_images, spatial=SPATIAL_SWEEP, intensity=INTENSITY_SWEEP):
    """Mean val PSNR of the Gaussian PCNN for every (spatial, intensity) scale pair.

    ``val_images`` is a list of (name, clean) pairs. Returns the result rows
    (spatial, intensity, psnr) and the best pair.
    """
    rows = []
    for ss in spatial:
        for si in intensity:
            trial = ExperimentConfig(**{**vars(cfg), "scale_spatial": ss, "scale_intensity": si})
            trial.model = "pcnn-gauss"
            examples = [Example(n, c, add_noise(c, trial, "val", n), trial) for n, c in val_images]
            rows.append((ss, si, mean_psnr(Denoiser(trial), examples)))
    best = max(rows, key=lambda r: r[2])
    return rows, (best[0], best[1])


def bilateral_filter(img, scale_spatial, scale_intensity, kernel_sigma=1.0, s=2):
    """Gaussian permutohedral filter over (x, y, gray) features."""
    feats = bilateral_features(img, scale_spatial, scale_intensity)
    frame = fb.build_frame(feats.features, feats.features, 3, s)
    out = fb.normalized_filter(frame, feats.values, fb.gaussian_kernel(3, s, kernel_sigma))
    return out.reshape(np.shape(img))


def rotate_demo(img, n_angles, scale_spatial=2.0, angle_scale=1.0, kernel_sigma=1.0, s=1):
    """Filter a stack of rotated copies over (x, y, angle) and read back at angle 0.

    The rotated copies land on continuous positions; the output is sliced at
    the original pixel grid with angle coordinate 0.
    """
    stack = rotation_stack(img, n_angles, scale_spatial, angle_scale)
    grid = position_features(img, scale_spatial).features
    out_feats = np.concatenate([grid, np.zeros((len(grid), 1))], axis=1)
    frame = fb.build_frame(stack.features, out_feats, 3, s)
    out = fb.normalized_filter(frame, stack.values, fb.gaussian_kernel(3, s, kernel_sigma))
    return out.reshape(np.shape(img))


def resample_demo(img, train_fraction, test_fraction, seed, scale_spatial=0.7, kernel_sigma=1.0, s=1):
    """Reconstruct an image from one random pixel subset at another.

    Splats a random ``train_fraction`` of the pixels and slices at a random
    ``test_fraction`` of them (the full pixel grid when 1).
    Returns (PSNR against the true values at the test points, reconstruction).
    """
    img = np.asarray(img, dtype=np.float64)
    train = subsample(img, train_fraction, seed, scale_spatial, on_grid=True)
    if test_fraction == 1:
        test = position_features(img, scale_spatial)
    else:
        test = subsample(img, test_fraction, seed + 1, scale_spatial, on_grid=True)
    frame = fb.build_frame(train.features, test.features, 2, s)
    recon = fb.normalized_filter(frame, train.values, fb.gaussian_kernel(2, s, kernel_sigma))
    return psnr(recon, test.values), recon


def bench(d, s, n_points, repeats=3, seed=0):
    """Best-of-``repeats`` nanoseconds per sample for each pipeline stage."""
    if n_points < 1:
        raise ValueError("n_points must be positive")
    if repeats < 1:
        raise ValueError("repeats must be positive")
    gen = Xoshiro256pp(seed)
    side = max(n_points ** (1.0 / d), 1.0)
    feats = gen.uniform(n_points * d).reshape(n_points, d) * side
    values = gen.uniform(n_points).reshape(-1, 1)
    kernel = fb.gaussian_kernel(d, s, 1.0)
    timings = {"build_frame": [], "splat": [], "convolve": [], "slice": []}
    frame = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        frame = fb.build_frame(feats, feats, d, s)
        t1 = time.perf_counter()
        lat = fb.splat(frame, values)
        t2 = time.perf_counter()
        conv = fb.convolve(frame, lat, kernel)
        t3 = time.perf_counter()
        fb.slice(frame, conv)
        t4 = time.perf_counter()
        for key, dt in zip(timings, (t1 - t0, t2 - t1, t3 - t2, t4 - t3)):
            timings[key].append(dt)
    rows = [(stage, min(ts) * 1e9 / n_points) for stage, ts in timings.items()]
    return rows, frame.node_count
