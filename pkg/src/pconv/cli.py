"""Command-line entry point: ``pconv <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

import argparse
import os
import sys

import numpy as np

from . import experiment as ex
from .autodiff import (
    Conv2DLayer,
    NormalizedPConvLayer,
    PConvLayer,
    euclidean_loss,
    grad_check,
    max_relative_error,
    numeric_gradient,
    sum_backward,
    sum_forward,
)
from .filterbank import Kernel, build_frame, gaussian_kernel
from .imaging import ImageFormatError, load_image, psnr, save_image, write_sample_dataset

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_LIMIT = 1e-5


class UsageError(Exception):
    pass


def _err(msg):
    print(f"pconv: {msg}", file=sys.stderr)


def _experiment_flags(p):
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--model", choices=ex.MODEL_KINDS)
    p.add_argument("--sigma", type=float, help="noise standard deviation (default 25/255)")
    p.add_argument("--scale-spatial", type=float)
    p.add_argument("--scale-intensity", type=float)
    p.add_argument("--neighborhood", type=int)
    p.add_argument("--kernel-sigma", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, help="learning rate of the spatial convolution")
    p.add_argument("--lr-pcnn", type=float, help="learning rate of the permutohedral kernel")
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--crop", type=int)
    p.add_argument("--train-limit", type=int)
    p.add_argument("--val-limit", type=int)
    p.add_argument("--data", help="dataset root holding train/, val/ and test/")
    p.add_argument("--train-dir")
    p.add_argument("--val-dir")
    p.add_argument("--test-dir")
    p.add_argument("--out")


def _config(args):
    cfg = ex.ExperimentConfig()
    if args.config:
        cfg.update(ex.read_config(args.config))
    if getattr(args, "data", None):
        cfg.update({split: os.path.join(args.data, split.split("_")[0])
                    for split in ("train_dir", "val_dir", "test_dir")})
    names = [
        "seed", "model", "sigma", "scale_spatial", "scale_intensity", "neighborhood",
        "kernel_sigma", "epochs", "lr", "lr_pcnn", "momentum", "weight_decay", "crop",
        "train_limit", "val_limit", "train_dir", "val_dir", "test_dir", "out",
    ]
    cfg.update({n: getattr(args, n) for n in names if getattr(args, n, None) is not None})
    try:
        return cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_bilateral(args):
    img = load_image(args.input)
    noisy = img
    if args.noise is not None:
        cfg = ex.ExperimentConfig(sigma=args.noise, seed=args.seed or 0, clamp_noise=True)
        noisy = ex.add_noise(img, cfg, "bilateral", os.path.basename(args.input))
    out = ex.bilateral_filter(noisy, args.scale_spatial, args.scale_intensity,
                              args.kernel_sigma, args.neighborhood)
    save_image(args.output, out)
    reference = load_image(args.reference) if args.reference else (img if args.noise else None)
    if reference is not None:
        print(f"input  PSNR {ex.format_psnr(psnr(noisy, reference))}")
        print(f"output PSNR {ex.format_psnr(psnr(out, reference))}")
    return EXIT_OK


def cmd_train(args):
    cfg = _config(args)
    train_set = ex.load_split(cfg.train_dir, cfg, "train", cfg.train_limit, cfg.crop)
    val_set = ex.load_split(cfg.val_dir, cfg, "val", cfg.val_limit)
    os.makedirs(cfg.out, exist_ok=True)
    log_path = os.path.join(cfg.out, "train.log")
    with open(log_path, "w") as log:

        def record(row):
            epoch, loss, val = row
            line = f"{epoch} {loss:.10g} {ex.format_psnr(val)}"
            log.write(line + "\n")
            log.flush()
            print(f"epoch {line}")

        model, optimizers, _ = ex.train(cfg, train_set, val_set, log=record)
    ex.save_checkpoint(cfg.out, model, optimizers)
    print(f"checkpoint written to {cfg.out}")
    return EXIT_OK


def cmd_eval(args):
    cfg = _config(args)
    model = ex.load_checkpoint(args.checkpoint, cfg)
    test_set = ex.load_split(cfg.test_dir, cfg, "test", 0)
    rows = ex.evaluate(model, test_set)
    for name, score, noisy in rows:
        print(f"{name} {ex.format_psnr(score)} (noisy {ex.format_psnr(noisy)})")
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, "results.txt")
    mean = ex.write_results(path, rows)
    print(f"noisy-input mean {ex.format_psnr(float(np.mean([r[2] for r in rows])))}")
    print(f"mean {ex.format_psnr(mean)}")
    return EXIT_OK


def cmd_crossval(args):
    cfg = _config(args)
    val_set = ex.load_split(cfg.val_dir, cfg, "val", cfg.val_limit)
    rows, (ss, si) = ex.crossval(cfg, [(e.name, e.clean) for e in val_set])
    os.makedirs(cfg.out, exist_ok=True)
    with open(os.path.join(cfg.out, "crossval.txt"), "w") as fh:
        for r in rows:
            line = f"{r[0]:g} {r[1]:g} {ex.format_psnr(r[2])}"
            fh.write(line + "\n")
            print(line)
        fh.write(f"best {ss:g} {si:g}\n")
    print(f"best scale_spatial={ss:g} scale_intensity={si:g}")
    return EXIT_OK


def gradcheck_report(seed=0, n=50, d=3, s=1, channels=2, image=6, eps=1e-5):
    """Worst relative gradient error per component, in a fixed order."""
    rng = np.random.Generator(np.random.PCG64(seed))
    feats = rng.uniform(0.0, 3.0, size=(n, d))
    frame = build_frame(feats, feats, d, s)
    results = []

    pconv = PConvLayer(frame, Kernel(d, s, rng.normal(size=(channels, channels, len(frame.offset_table)))))
    results.append(("pconv", grad_check(pconv, rng.normal(size=(n, channels)),
                                        rng.normal(size=(n, channels)), eps)))

    kernel = gaussian_kernel(d, s, 1.0)
    kernel.weights += rng.uniform(0.0, 0.05, size=kernel.weights.shape)
    norm = NormalizedPConvLayer(frame, kernel)
    results.append(("pconv-normalized", grad_check(norm, rng.normal(size=(n, 1)),
                                                   rng.normal(size=(n, 1)), eps)))

    conv = Conv2DLayer(rng.uniform(-0.2, 0.2, size=(channels, channels, 5, 5)))
    results.append(("conv2d", grad_check(conv, rng.normal(size=(image, image, channels)),
                                         rng.normal(size=(image, image, channels)), eps)))

    # probes keep every gradient entry away from zero so roundoff in the
    # finite differences stays far below the relative tolerance
    a, b = (rng.normal(size=(n, channels)) for _ in range(2))
    r = rng.uniform(1.0, 2.0, size=(n, channels))

    def sum_probe():
        return float(np.sum(r * sum_forward(a, b)))

    ga, gb = sum_backward(r)
    results.append(("sum", max(max_relative_error(ga, numeric_gradient(sum_probe, a, eps)),
                               max_relative_error(gb, numeric_gradient(sum_probe, b, eps)))))

    t = rng.normal(size=(n, channels))
    p = t + rng.choice([-1.0, 1.0], size=t.shape) * rng.uniform(0.5, 1.5, size=t.shape)
    _, g = euclidean_loss(p, t)
    results.append(("loss", max_relative_error(
        g, numeric_gradient(lambda: euclidean_loss(p, t)[0], p, eps))))
    return results


def eps_scaling(seed=0, eps=1e-3):
    """Truncation-error ratio err(2*eps)/err(eps) on a smooth objective (about 4).

    The objective is sum(sin(pconv(x))) so the finite differences carry an
    O(eps^2) error term.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    feats = rng.uniform(0.0, 3.0, size=(30, 2))
    frame = build_frame(feats, feats, 2, 1)
    layer = PConvLayer(frame, Kernel(2, 1, rng.normal(size=(1, 1, 7))))
    x = rng.normal(size=(30, 1)) * 3.0

    def objective():
        return float(np.sum(np.sin(layer.forward(x))))

    out = layer.forward(x)
    grad_in, _ = layer.backward(np.cos(out))
    errs = [np.max(np.abs(numeric_gradient(objective, x, e) - grad_in)) for e in (eps, 2 * eps)]
    return errs[1] / errs[0]


def cmd_gradcheck(args):
    eps = args.eps
    results = gradcheck_report(seed=args.seed, n=args.points, d=args.dim, s=args.neighborhood,
                               channels=args.channels, eps=eps)
    for name, err in results:
        print(f"{name:<18} {err:.3e}")
    worst = max(err for _, err in results)
    print(f"worst relative error {worst:.3e}")
    print(f"eps-scaling ratio {eps_scaling(args.seed):.3f}")
    if not worst < GRADCHECK_LIMIT:
        _err(f"gradient check failed: {worst:.3e} >= {GRADCHECK_LIMIT:g}")
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_bench(args):
    if args.points < 1:
        raise UsageError("--points must be positive")
    rows, nodes = ex.bench(args.dim, args.neighborhood, args.points, args.repeats, args.seed)
    print(f"d={args.dim} s={args.neighborhood} n={args.points} nodes={nodes}")
    print(f"{'stage':<12} {'ns/sample':>12}")
    for stage, ns in rows:
        print(f"{stage:<12} {ns:>12.1f}")
    return EXIT_OK


def cmd_rotate_demo(args):
    if args.angles < 1:
        raise UsageError("--angles must be at least 1")
    img = load_image(args.input)
    out = ex.rotate_demo(img, args.angles, args.scale_spatial, args.angle_scale,
                         args.kernel_sigma, args.neighborhood)
    save_image(args.output, out)
    print(f"wrote {args.output} ({args.angles} rotated copies, {img.size * args.angles} samples)")
    return EXIT_OK


def cmd_resample_demo(args):
    for name in ("train_fraction", "test_fraction"):
        if not 0 < getattr(args, name) <= 1:
            raise UsageError(f"--{name.replace('_', '-')} must lie in (0, 1]")
    img = load_image(args.input)
    score, recon = ex.resample_demo(img, args.train_fraction, args.test_fraction, args.seed,
                                    args.scale_spatial, args.kernel_sigma, args.neighborhood)
    print(f"train {args.train_fraction:g} -> test {args.test_fraction:g}: "
          f"PSNR {ex.format_psnr(score)}")
    if args.output:
        if args.test_fraction != 1:
            raise UsageError("--output needs --test-fraction 1 (a full-grid reconstruction)")
        save_image(args.output, recon.reshape(img.shape))
    return EXIT_OK


def cmd_make_dataset(args):
    try:
        counts = write_sample_dataset(args.out)
    except ImportError:
        raise UsageError("make-dataset needs scikit-image (pip install scikit-image)") from None
    print(" ".join(f"{k}={v}" for k, v in counts.items()))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="pconv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bilateral", help="Gaussian permutohedral filter of one image")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--reference", help="clean image to report PSNR against")
    p.add_argument("--noise", type=float, help="add seeded Gaussian noise of this sigma first")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale-spatial", type=float, default=6.0)
    p.add_argument("--scale-intensity", type=float, default=0.1)
    p.add_argument("--sigma", "--kernel-sigma", dest="kernel_sigma", type=float, default=1.0,
                   help="Gaussian kernel width in lattice steps")
    p.add_argument("--neighborhood", type=int, default=2)
    p.set_defaults(func=cmd_bilateral)

    p = sub.add_parser("train", help="train a denoiser and write a checkpoint")
    _experiment_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test set")
    _experiment_flags(p)
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("crossval", help="sweep feature scales of the Gaussian filter on val")
    _experiment_flags(p)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--points", type=int, default=50)
    p.add_argument("--dim", type=int, default=3)
    p.add_argument("--neighborhood", type=int, default=1)
    p.add_argument("--channels", type=int, default=2)
    p.add_argument("--eps", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="time each pipeline stage")
    p.add_argument("--dim", type=int, default=3)
    p.add_argument("--neighborhood", type=int, default=2)
    p.add_argument("--points", type=int, default=100000)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("rotate-demo", help="filter over stacked rotated copies")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--angles", type=int, default=8)
    p.add_argument("--scale-spatial", type=float, default=2.0)
    p.add_argument("--angle-scale", type=float, default=1.0)
    p.add_argument("--kernel-sigma", type=float, default=1.0)
    p.add_argument("--neighborhood", type=int, default=1)
    p.set_defaults(func=cmd_rotate_demo)

    p = sub.add_parser("resample-demo", help="splat one random sampling, slice at another")
    p.add_argument("input")
    p.add_argument("--train-fraction", type=float, default=0.6)
    p.add_argument("--test-fraction", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale-spatial", type=float, default=0.7)
    p.add_argument("--kernel-sigma", type=float, default=1.0)
    p.add_argument("--neighborhood", type=int, default=1)
    p.add_argument("--output", help="write the full-grid reconstruction here")
    p.set_defaults(func=cmd_resample_demo)

    p = sub.add_parser("make-dataset", help="write a train/val/test tree from bundled photos")
    p.add_argument("out")
    p.set_defaults(func=cmd_make_dataset)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        _err(str(exc))
        return EXIT_USAGE
    except (OSError, ImageFormatError, ex.DataError) as exc:
        _err(str(exc))
        return EXIT_DATA
    except (ex.NumericFailure, FloatingPointError) as exc:
        _err(str(exc))
        return EXIT_NUMERIC
    except ValueError as exc:
        _err(str(exc))
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
