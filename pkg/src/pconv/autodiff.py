"""Trainable layers with hand-written backward passes.

All layers are bias-free and linear in their input. Each ``forward`` caches
what ``backward`` needs; calling ``backward`` before ``forward`` raises.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .filterbank import (
    Kernel,
    PermutohedralFrame,
    _as_signal,
    _gather_conv,
    convolve,
    slice,
    slice_adjoint,
    splat,
    splat_adjoint,
)


class PConvLayer:
    """splat -> lattice convolution -> slice with a learnable kernel."""

    def __init__(self, frame: PermutohedralFrame, kernel: Kernel):
        if kernel.weights.shape[2] != len(frame.offset_table):
            raise ValueError("kernel offset count does not match the frame")
        self.frame = frame
        self.kernel = kernel
        self._cached = None

    @property
    def weights(self):
        return self.kernel.weights

    def forward(self, values):
        lattice = splat(self.frame, values)
        self._cached = lattice
        return slice(self.frame, convolve(self.frame, lattice, self.kernel))

    def backward(self, grad_out):
        """Return (grad_in, grad_kernel) for upstream gradient ``grad_out``."""
        if self._cached is None:
            raise RuntimeError("backward called before forward")
        frame = self.frame
        grad_out = _as_signal(grad_out, frame.n_out, "grad_out")
        if grad_out.shape[1] != self.kernel.c_out:
            raise ValueError("grad_out channel count does not match the kernel")
        g_lattice = slice_adjoint(frame, grad_out)

        padded = np.concatenate([self._cached, np.zeros((1, self._cached.shape[1]))])
        grad_kernel = np.zeros_like(self.kernel.weights)
        step = 32768
        for lo in range(0, frame.node_count, step):
            gathered = padded[frame.neighbors[lo : lo + step]]
            grad_kernel += np.einsum(
                "mo,mnc->ocn", g_lattice[lo : lo + step], gathered, optimize=True
            )

        adjoint = self.kernel.transposed(frame.offset_table)
        g_lattice_in = _gather_conv(frame.neighbors, g_lattice, adjoint.weights)
        grad_in = splat_adjoint(frame, g_lattice_in)
        return grad_in, grad_kernel


class NormalizedPConvLayer:
    """PConv output divided by the same filter applied to a constant signal.

    This is the usual bilateral-filter normalisation: the result is a weighted
    average of the inputs, independent of the local sample density.
    """

    def __init__(self, frame: PermutohedralFrame, kernel: Kernel, floor=1e-12):
        self.numerator = PConvLayer(frame, kernel)
        self.denominator = PConvLayer(frame, kernel)
        self.floor = floor
        self._cache = None

    @property
    def kernel(self):
        return self.numerator.kernel

    @property
    def frame(self):
        return self.numerator.frame

    @property
    def weights(self):
        return self.numerator.kernel.weights

    def forward(self, values):
        values = _as_signal(values, self.frame.n_in)
        num = self.numerator.forward(values)
        den = self.denominator.forward(np.ones_like(values))
        if np.any(np.abs(den) < self.floor):
            raise FloatingPointError("normalisation weight vanished at an output sample")
        self._cache = (num, den)
        return num / den

    def backward(self, grad_out):
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        num, den = self._cache
        grad_out = _as_signal(grad_out, self.frame.n_out, "grad_out")
        grad_in, gk_num = self.numerator.backward(grad_out / den)
        _, gk_den = self.denominator.backward(-grad_out * num / den**2)
        return grad_in, gk_num + gk_den


class Conv2DLayer:
    """Zero-padded 'same' cross-correlation on (H, W, C) images."""

    def __init__(self, weights):
        weights = np.asarray(weights, dtype=np.float64)
        if weights.ndim != 4 or weights.shape[2] != weights.shape[3] or weights.shape[2] % 2 == 0:
            raise ValueError("weights must have shape (c_out, c_in, k, k) with odd k")
        if not np.all(np.isfinite(weights)):
            raise ValueError("weights must be finite")
        self.weights = weights
        self._padded = None

    @classmethod
    def init_uniform(cls, c_out, c_in, k, rng):
        r = 1.0 / np.sqrt(c_in * k * k)
        return cls(rng.uniform(-r, r, size=(c_out, c_in, k, k)))

    @property
    def k(self):
        return self.weights.shape[2]

    def _check(self, image, channels):
        image = np.asarray(image, dtype=np.float64)
        if image.ndim == 2:
            image = image[:, :, None]
        if image.ndim != 3 or image.shape[2] != channels:
            raise ValueError(f"expected an (H, W, {channels}) image, got {image.shape}")
        return image

    def forward(self, image):
        image = self._check(image, self.weights.shape[1])
        p = self.k // 2
        padded = np.pad(image, ((p, p), (p, p), (0, 0)))
        self._padded = padded
        windows = sliding_window_view(padded, (self.k, self.k), axis=(0, 1))
        return np.einsum("hwcab,ocab->hwo", windows, self.weights, optimize=True)

    def backward(self, grad_out):
        """Return (grad_in, grad_weights)."""
        if self._padded is None:
            raise RuntimeError("backward called before forward")
        grad_out = self._check(grad_out, self.weights.shape[0])
        p = self.k // 2
        h, w = self._padded.shape[0] - 2 * p, self._padded.shape[1] - 2 * p
        if grad_out.shape[:2] != (h, w):
            raise ValueError("grad_out spatial size does not match the forward input")
        windows = sliding_window_view(self._padded, (self.k, self.k), axis=(0, 1))
        grad_w = np.einsum("hwo,hwcab->ocab", grad_out, windows, optimize=True)
        gpad = np.pad(grad_out, ((p, p), (p, p), (0, 0)))
        gwin = sliding_window_view(gpad, (self.k, self.k), axis=(0, 1))
        flipped = self.weights[:, :, ::-1, ::-1]
        grad_in = np.einsum("hwoab,ocab->hwc", gwin, flipped, optimize=True)
        return grad_in, grad_w


def sum_forward(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a + b


def sum_backward(grad_out):
    grad_out = np.asarray(grad_out, dtype=np.float64)
    return grad_out, grad_out.copy()


def euclidean_loss(pred, target):
    """Half mean squared error per row: sum((pred - target)^2) / (2 * rows)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    rows = pred.shape[0] if pred.ndim else 1
    diff = pred - target
    return float(np.sum(diff * diff)) / (2.0 * rows), diff / rows


class SGD:
    """SGD with momentum and L2 weight decay: v <- mu v - lr (g + wd p); p <- p + v."""

    def __init__(self, lr=1e-3, momentum=0.9, weight_decay=5e-4):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {}
        self.steps = 0

    def step(self, params, grads):
        """Update every array in ``params`` (a name -> ndarray dict) in place."""
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {name}")
            v = self.velocity.get(name)
            if v is None:
                v = self.velocity[name] = np.zeros_like(p)
            v *= self.momentum
            v -= self.lr * (g + self.weight_decay * p)
            p += v
        self.steps += 1

    def state_lines(self):
        return [
            f"lr {self.lr!r}",
            f"momentum {self.momentum!r}",
            f"weight_decay {self.weight_decay!r}",
            f"steps {self.steps}",
        ]


def max_relative_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if not len(a):
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom))


def numeric_gradient(fn, x, eps):
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``x`` (mutated in place)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = fn()
        flat[i] = orig - eps
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


def grad_check(layer, x, target, eps=1e-5):
    """Worst relative error between analytic and central-difference gradients.

    The scalar objective is ``euclidean_loss(layer.forward(x), target)``; both
    the input and the layer's weights are perturbed. ``layer.weights`` must be
    the live parameter array.
    """
    x = np.array(x, dtype=np.float64)

    def loss():
        return euclidean_loss(layer.forward(x), target)[0]

    _, g = euclidean_loss(layer.forward(x), target)
    grad_in, grad_w = layer.backward(g)
    err_w = max_relative_error(grad_w, numeric_gradient(loss, layer.weights, eps))
    err_x = max_relative_error(grad_in, numeric_gradient(loss, x, eps))
    return max(err_w, err_x)
