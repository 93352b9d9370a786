"""Command-line entry point: ``pnpgmm <command> [--config FILE] [flags]``.

Every command accepts a ``key: value`` config file whose keys are the long
flag names (``patch-side: 8``); flags given on the command line win.

Exit codes: 0 success, 1 usage error, 2 data error, 3 failed diagnostic.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import denoiser, fileio, gmm, metrics, sharpening, simulate
from .patches import PatchGeometry, extract_patches

EXIT_USAGE, EXIT_DATA, EXIT_DIAGNOSTIC = 1, 2, 3

log = logging.getLogger("pnpgmm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def read_config(path) -> dict:
    """Parse ``key: value`` (or ``key = value``) lines; ``#`` starts a comment."""
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        for sep in (":", "="):
            key, found, value = line.partition(sep)
            if found:
                break
        else:
            raise UsageError(f"{path}:{n}: expected 'key: value', got {raw!r}")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _pan(ms: np.ndarray, band) -> np.ndarray:
    ms = np.asarray(ms, dtype=np.float64)
    if band is None:
        return ms.mean(axis=0)
    if not 0 <= band < ms.shape[0]:
        raise ValueError(f"band {band} out of range for {ms.shape[0]} bands")
    return ms[band]


def cmd_simulate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = simulate.SceneSpec(args.width, args.height, args.bands, args.endmembers)
    Z = simulate.generate_scene(spec, args.seed)
    model = sharpening.DegradationModel.default(args.ratio, args.ms_bands, args.bands)
    Yh, Ym = simulate.degrade(Z, model, args.snr_hs, args.snr_ms, args.seed + 1)
    fileio.write_cube(Z, out / "z.hdr")
    fileio.write_cube(Yh, out / "yh.hdr")
    fileio.write_cube(Ym, out / "ym.hdr")
    fileio.write_cube(model.kernel, out / "psf.hdr")
    fileio.write_cube(model.response, out / "srf.hdr")
    log.info("wrote scene and observations to %s", out)
    return 0


def cmd_train_gmm(args) -> int:
    pan = _pan(fileio.read_cube(args.ms), args.band)
    geom = PatchGeometry.for_image(pan, args.patch_side)
    ps = extract_patches(pan, geom, remove_means=True)
    opts = gmm.EMOptions(max_iter=args.iters, sigma=args.sigma, seed=args.seed)
    model = gmm.train_em(ps, args.components, opts)
    gmm.save_gmm(model, args.out)
    log.info("EM: %d iterations, log-likelihood %.6g",
             len(model.log_likelihoods) - 1, model.log_likelihoods[-1])
    return 0


def cmd_sharpen(args) -> int:
    Yh = fileio.read_cube(args.yh).astype(np.float64)
    Ym = fileio.read_cube(args.ym).astype(np.float64)
    kernel = fileio.read_cube(args.psf).astype(np.float64)[0]
    response = fileio.read_cube(args.srf).astype(np.float64)[0]
    ratio = Ym.shape[-1] // Yh.shape[-1]
    if ratio * Yh.shape[-1] != Ym.shape[-1] or ratio * Yh.shape[-2] != Ym.shape[-2]:
        raise ValueError(f"HS size {Yh.shape[1:]} is not a divisor of MS size {Ym.shape[1:]}")
    # kernel stored as float32; renormalize to restore an exact unit sum
    degradation = sharpening.DegradationModel(kernel / kernel.sum(), ratio,
                                              response / response.sum(axis=1, keepdims=True))
    model = gmm.load_gmm(args.gmm)
    params = sharpening.SolverParams(rho=args.rho, lam=args.lam, tau=args.tau,
                                     max_iters=args.iters, tol=args.tol, jobs=args.jobs)
    sigma_train = args.sigma if args.sigma is not None else sharpening.denoiser_sigma(args.tau, args.rho)
    side = int(round(np.sqrt(model.dim)))
    if args.patch_side is not None and args.patch_side != side:
        raise ValueError(f"model patch size {model.dim} does not match patch side {args.patch_side}")
    plan = denoiser.freeze_weights(model, _pan(Ym, args.band), sigma_train, side,
                                   remove_means=not args.no_mean_removal)
    result = sharpening.solve(Yh, Ym, degradation, plan, params, n_latent=args.subspace)
    fileio.write_cube(result.Z, args.out)
    trace = args.trace or str(Path(args.out).with_suffix(".csv"))
    sharpening.write_trace_csv(result.trace, trace)
    log.info("%d iterations, converged=%s", len(result.trace), result.converged)
    return 0


def cmd_denoise(args) -> int:
    img = fileio.read_cube(args.input).astype(np.float64)
    if img.shape[0] != 1:
        raise ValueError(f"denoise expects a single-band image, got {img.shape[0]} bands")
    img = img[0]
    model = gmm.load_gmm(args.gmm)
    side = int(round(np.sqrt(model.dim)))
    if args.mode == "mmse":
        out = denoiser.denoise_mmse(model, img, args.sigma, side)
    else:
        train = img if args.train is None else fileio.read_cube(args.train).astype(np.float64)[0]
        sigma_train = args.sigma_train if args.sigma_train is not None else args.sigma
        plan = denoiser.freeze_weights(model, train, sigma_train, side)
        out = denoiser.apply_fixed(plan, img, args.sigma)
    fileio.write_cube(out, args.out)
    return 0


def cmd_eval(args) -> int:
    est = fileio.read_cube(args.estimate)
    ref = fileio.read_cube(args.reference)
    report = metrics.evaluate(est, ref, args.ratio)
    text = report.csv_header() + "\n" + report.csv_row() + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_diagnose(args) -> int:
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(args.seed)
    img = gaussian_filter(rng.standard_normal((args.size, args.size)), 1.5, mode="wrap")
    img /= img.std()
    geom = PatchGeometry.for_image(img, args.patch_side)
    model = gmm.train_em(extract_patches(img, geom, remove_means=True), args.components,
                         gmm.EMOptions(max_iter=args.iters, seed=args.seed))
    train = img + args.sigma * rng.standard_normal(img.shape)
    plan = denoiser.freeze_weights(model, train, args.sigma, args.patch_side, remove_means=False)
    report = denoiser.spectrum_report(plan, args.sigma, check=False)
    defect = denoiser.prox_defect(plan, args.sigma, rng.standard_normal(img.shape))

    y = np.linspace(-6.0, 6.0, 1201)
    weights, variances = (0.5, 0.5), (0.1, 10.0)
    xhat = denoiser.scalar_mmse_map(weights, variances, 1.0, y)
    fixed = denoiser.scalar_mmse_map(weights, variances, 1.0, y, fixed_beta=weights)
    slope = float(np.max(np.diff(xhat) / np.diff(y)))
    fixed_slope = float(np.max(np.diff(fixed) / np.diff(y)))

    text = report.to_text() + (f"prox_defect: {defect:.6e}\n"
                               f"mmse_max_slope: {slope:.10g}\n"
                               f"fixed_max_slope: {fixed_slope:.10g}\n")
    failures = report.failures()
    if defect > 1e-8:
        failures.append(f"prox defect {defect:.3g} above 1e-8")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text)
        (out / "scalar_map.txt").write_text(denoiser.format_scalar_map(y, xhat, fixed))
    else:
        sys.stdout.write(text)
    if failures:
        for f in failures:
            log.error("diagnostic failed: %s", f)
        return EXIT_DIAGNOSTIC
    return 0


def _common(p):
    p.add_argument("--config", help="key: value config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pnpgmm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate a synthetic scene and its observations")
    _common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--bands", type=int, default=32)
    p.add_argument("--endmembers", type=int, default=4)
    p.add_argument("--ms-bands", type=int, default=4)
    p.add_argument("--ratio", type=int, default=4)
    p.add_argument("--snr-hs", type=float, default=50.0)
    p.add_argument("--snr-ms", type=float, default=50.0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train-gmm", help="learn a patch GMM from an MS/PAN cube")
    _common(p)
    p.add_argument("--ms", required=True, help="MS cube; PAN is the band mean")
    p.add_argument("--band", type=int, help="train on this band instead of the mean")
    p.add_argument("--out", required=True)
    p.add_argument("--patch-side", type=int, default=8)
    p.add_argument("--components", "-K", type=int, default=20)
    p.add_argument("--iters", type=int, default=200, help="EM iteration cap")
    p.add_argument("--sigma", type=float, default=0.0, help="training noise std")
    p.set_defaults(func=cmd_train_gmm)

    p = sub.add_parser("sharpen", help="fuse HS and MS cubes")
    _common(p)
    for name in ("yh", "ym", "psf", "srf", "gmm"):
        p.add_argument(f"--{name}", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trace", help="trace CSV (default: output with .csv suffix)")
    p.add_argument("--band", type=int)
    p.add_argument("--rho", type=float, default=1.0)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--tau", type=float, default=1e-3)
    p.add_argument("--subspace", "--Ls", type=int, default=4)
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--sigma", type=float, help="noise std for freezing weights")
    p.add_argument("--patch-side", type=int)
    p.add_argument("--no-mean-removal", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sharpen)

    p = sub.add_parser("denoise", help="denoise a single-band image")
    _common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--gmm", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--mode", choices=("mmse", "fixed"), default="mmse")
    p.add_argument("--train", help="training image for fixed weights (default: input)")
    p.add_argument("--sigma-train", type=float)
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("eval", help="quality metrics of an estimate")
    _common(p)
    p.add_argument("--estimate", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--ratio", type=float, default=4.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="dense checks of the fixed-weight denoiser")
    _common(p)
    p.add_argument("--out", help="output directory (default: report to stdout)")
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--patch-side", type=int, default=4)
    p.add_argument("--components", "-K", type=int, default=2)
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--iters", type=int, default=50)
    p.set_defaults(func=cmd_diagnose)
    return parser


def _apply_config(parser, argv):
    """Parse ``argv`` with config-file values installed as defaults.

    The config is located before the full parse so that it can supply
    flags the command line would otherwise require.
    """
    argv = sys.argv[1:] if argv is None else list(argv)
    choices = parser._subparsers._group_actions[0].choices
    if not argv or argv[0] not in choices:
        return parser.parse_args(argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    path = pre.parse_known_args(argv[1:])[0].config
    if not path:
        return parser.parse_args(argv)
    config = read_config(path)
    sub = choices[argv[0]]
    known = {a.dest for a in sub._actions}
    unknown = set(config) - known - {"lambda"}
    if unknown:
        raise UsageError(f"unknown config keys for {argv[0]}: {sorted(unknown)}")
    if "lambda" in config:
        config["lam"] = config.pop("lambda")
    for action in sub._actions:
        if action.dest not in config:
            continue
        if isinstance(action, argparse._StoreTrueAction):
            config[action.dest] = config[action.dest].lower() in ("1", "true", "yes", "on")
        action.required = False
    sub.set_defaults(**config)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except UsageError as e:
        print(f"pnpgmm: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"pnpgmm: error: {e}", file=sys.stderr)
        return EXIT_DATA
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except denoiser.DiagnosticError as e:
        log.error("%s", e)
        return EXIT_DIAGNOSTIC
    except (ValueError, OSError, FloatingPointError) as e:
        log.error("%s", e)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
