"""Command-line interface: train, encode, decode, eval, bdrate, rdcurve.

Exit codes: 0 success, 2 usage error, 3 data error (missing or malformed
input), 4 internal invariant violation.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .coder import Bitstream, BitstreamError, decode_image, encode_image
from .evaluation import (evaluate_corpus, mean_result, read_curve_csv, write_eval_csv,
                         write_rdcurve_csv)
from .imageio import read_ppm, to_uint8, write_ppm
from .metrics import bd_rate
from .model import load_checkpoint
from .training import TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 2, 3, 4
VARIANTS = {"raster": "masked_raster", "checkerboard": "checkerboard", "none": "none"}

log = logging.getLogger("arche")


class DataError(Exception):
    """Bad or missing user-supplied input (exit code 3)."""


def _load_weights(path):
    if not Path(path).is_file():
        raise DataError(f"weights file {path} not found")
    try:
        model, _, meta = load_checkpoint(path)
    except (ValueError, KeyError, IndexError) as exc:
        raise DataError(f"cannot read weights {path}: {exc}") from exc
    return model, meta


def _read_image(path):
    if not Path(path).is_file():
        raise DataError(f"input image {path} not found")
    try:
        return read_ppm(path)
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def cmd_train(args) -> int:
    if not Path(args.config).is_file():
        raise DataError(f"config file {args.config} not found")
    try:
        cfg = TrainConfig.from_file(args.config)
    except (ValueError, TypeError) as exc:
        raise DataError(f"bad training config: {exc}") from exc
    cfg.out_dir = args.out
    if args.corpus:
        cfg.corpus = args.corpus
    if args.steps is not None:
        cfg.steps = args.steps
    if cfg.corpus is None or not Path(cfg.corpus).is_dir():
        raise DataError(f"corpus directory {cfg.corpus} not found")

    def report(row):
        if row.step % 100 == 0:
            log.info("step %d total %.4f rate %.4f bpp mse %.6f", row.step, row.total, row.rate_bpp, row.mse)

    res = train(cfg, progress=report)
    print(f"wrote {res.checkpoint} after {cfg.steps} steps")
    return EXIT_OK


def cmd_encode(args) -> int:
    model, _ = _load_weights(args.weights)
    img = _read_image(args.inp)
    bs = encode_image(img / 255.0, model, variant=VARIANTS[args.variant] if args.variant else None)
    data = bs.to_bytes()
    Path(args.out).write_bytes(data)
    print(f"bpp {len(data) * 8.0 / (img.shape[0] * img.shape[1]):.6f}")
    return EXIT_OK


def cmd_decode(args) -> int:
    model, _ = _load_weights(args.weights)
    if not Path(args.inp).is_file():
        raise DataError(f"bitstream {args.inp} not found")
    try:
        x_hat = decode_image(Bitstream.from_bytes(Path(args.inp).read_bytes()), model)
    except BitstreamError as exc:
        raise DataError(f"cannot decode {args.inp}: {exc}") from exc
    write_ppm(args.out, to_uint8(x_hat))
    return EXIT_OK


def _corpus_dir(path):
    if not Path(path).is_dir():
        raise DataError(f"corpus directory {path} not found")
    return path


def cmd_eval(args) -> int:
    model, _ = _load_weights(args.weights)
    rows = evaluate_corpus(model, _corpus_dir(args.corpus),
                           variant=VARIANTS[args.variant] if args.variant else None)
    write_eval_csv(args.out, rows)
    m = mean_result(rows)
    print(f"{len(rows)} images: mean bpp {m.bpp:.4f} psnr {m.psnr_db:.3f} dB ms-ssim {m.msssim:.4f}")
    return EXIT_OK


def cmd_rdcurve(args) -> int:
    corpus = _corpus_dir(args.corpus)
    points = []
    for w in args.weights:
        model, _ = _load_weights(w)
        rows = evaluate_corpus(model, corpus)
        points.append((model.config.lmbda, mean_result(rows)))
    points.sort(key=lambda p: p[0])
    write_rdcurve_csv(args.out, points)
    print(f"wrote {len(points)} RD points to {args.out}")
    return EXIT_OK


def cmd_bdrate(args) -> int:
    for p in (args.anchor, args.test):
        if not Path(p).is_file():
            raise DataError(f"curve file {p} not found")
    try:
        anchor = read_curve_csv(args.anchor)
        test = read_curve_csv(args.test)
        value = bd_rate(anchor, test, args.axis)
    except (ValueError, KeyError) as exc:
        raise DataError(str(exc)) from exc
    print(f"{value:.2f}%")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="arche", description="Learned image codec at desk scale.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a YAML/JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory for checkpoints and trace.csv")
    p.add_argument("--corpus", help="override the corpus directory from the config")
    p.add_argument("--steps", type=int, help="override the step count")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="compress a P6 image")
    p.add_argument("--weights", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=sorted(VARIANTS))
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="reconstruct a P6 image from a bitstream")
    p.add_argument("--weights", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="per-image bpp / PSNR / MS-SSIM over a corpus")
    p.add_argument("--weights", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=sorted(VARIANTS))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bdrate", help="Bjontegaard delta rate between two RD curves")
    p.add_argument("--anchor", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--axis", choices=("psnr", "msssim"), default="psnr")
    p.set_defaults(func=cmd_bdrate)

    p = sub.add_parser("rdcurve", help="one RD point per checkpoint")
    p.add_argument("--weights", required=True, nargs="+")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rdcurve)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (BitstreamError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # invariant violations and bugs
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
