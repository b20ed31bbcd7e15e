"""Command-line front end: train, encode, decode, verify, stats, wavelet, synth.

Exit codes: 0 ok, 1 verification failure, 2 usage or validation error,
3 corrupt or truncated compressed file, 4 training diverged.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import anchors
from .codec.container import (
    POS_LEVELS,
    compress_scene,
    decompress_scene,
    expected_reconstruction,
)
from .errors import CodecError, CorruptionError, TrainingError, TruncatedError, ValidationError
from .trainer import (
    TrainConfig,
    codelength_comparison,
    fit,
    load_checkpoint,
    save_checkpoint,
)
from .wavelet import WaveletSchedule, crop_to_multiple, lambda_schedule, wavelet_terms

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_CORRUPT, EXIT_DIVERGED = 0, 1, 2, 3, 4

log = logging.getLogger("triplane_codec")


class UsageError(Exception):
    """Bad flags or config file contents (exit 2)."""


# ---------------------------------------------------------------------------
# key = value configuration


def _coerce(value: str, kind):
    if kind is bool or isinstance(kind, str) and kind == "bool":
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"not a boolean: {value!r}")
    kind = {"int": int, "float": float}.get(kind, kind)
    try:
        return kind(value.strip())
    except ValueError:
        raise UsageError(f"cannot parse {value!r} as {kind.__name__}") from None


def _config_types():
    return {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def parse_config_text(text: str) -> dict:
    """Parse `key = value` lines; '#' starts a comment. Unknown keys are rejected."""
    types = _config_types()
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise UsageError(f"config line {lineno}: unknown key {key!r}")
        out[key] = _coerce(value, types[key])
    return out


def build_config(args) -> TrainConfig:
    """Defaults, then the config file, then explicit flags."""
    values = {}
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        values.update(parse_config_text(text))
    for name in _config_types():
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    if getattr(args, "deterministic", False):
        values["deterministic"] = True
    if getattr(args, "threads", None) is not None:
        values["threads"] = args.threads
    return TrainConfig(**values)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = build_config(args)
    cloud = anchors.load_anchor_cloud(args.input)
    t0 = time.perf_counter()
    every = max(cfg.total_steps // 10, 1)

    def progress(rec):
        if rec["step"] % every == 0 and not args.quiet:
            log.info("step %d phase %d total %.5g entropy %.1f bits/anchor", rec["step"], rec["phase"],
                     rec["total"], rec["entropy"] / cloud.n)

    try:
        state = fit(cloud, cfg, callback=progress)
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.checkpoint is not None:
            bad = f"{args.output}.last-good"
            save_checkpoint(exc.checkpoint, bad, cfg)
            print(f"last good state written to {bad}", file=sys.stderr)
        return EXIT_DIVERGED
    save_checkpoint(state, args.output, cfg)

    print(f"{'phase':>5} {'steps':>6} {'total(first)':>13} {'total(last)':>12} {'bits/anchor(last)':>18}")
    for phase in (1, 2):
        recs = [r for r in state.history if r["phase"] == phase]
        if recs:
            print(f"{phase:>5} {len(recs):>6} {recs[0]['total']:>13.5g} {recs[-1]['total']:>12.5g} "
                  f"{recs[-1]['entropy'] / cloud.n:>18.2f}")
    est = codelength_comparison(cloud, state)
    print(f"estimated attribute bits per anchor: {est['model']:.2f} "
          f"(per-channel Gaussian {est['baseline']:.2f}, gain {100 * est['gain']:.1f}%)")
    print(f"trained {cfg.total_steps} steps in {time.perf_counter() - t0:.1f} s -> {args.output}")
    if args.report:
        from .report import write_training_report

        for path in write_training_report(state.history, args.report, cloud.n):
            print(f"wrote {path}")
    return EXIT_OK


def _print_sections(stats, file=sys.stdout):
    print(f"{'section':<10} {'bytes':>10} {'estimate':>12}", file=file)
    for name, nbytes, est in stats.rows():
        print(f"{name:<10} {nbytes:>10d} {'' if est is None else f'{est:.1f}':>12}", file=file)
    print(f"{'total':<10} {stats.total_bytes:>10d}", file=file)


def cmd_encode(args) -> int:
    cloud = anchors.load_anchor_cloud(args.input)
    state = load_checkpoint(args.checkpoint)
    blob, stats = compress_scene(cloud, state)
    Path(args.output).write_bytes(blob)
    _print_sections(stats)
    print(f"anchors kept {stats.n_anchors}/{stats.n_input}")
    print(f"bits per anchor {stats.bits_per_anchor:.3f}")
    print(f"compression ratio vs raw fp32 {stats.raw_bytes / stats.total_bytes:.2f}x")
    return EXIT_OK


def cmd_decode(args) -> int:
    blob = Path(args.input).read_bytes()
    scene = decompress_scene(blob)
    anchors.save_anchor_cloud(scene.cloud, args.output)
    print(f"decoded {scene.cloud.n} anchors ({scene.stats.n_input} before masking) -> {args.output}")
    return EXIT_OK


def _survivors(original, qcfg, container_path=None):
    """Expected attributes restricted to surviving anchors, with masked offsets zeroed."""
    expect = expected_reconstruction(original, qcfg)
    keep = np.ones(original.n, dtype=bool)
    offset_keep = np.ones((original.n, original.k), dtype=bool)
    if container_path:
        scene = decompress_scene(Path(container_path).read_bytes())
        if scene.anchor_keep.shape[0] != original.n:
            raise ValidationError("container was not produced from this cloud")
        keep = scene.anchor_keep
        offset_keep = np.zeros((original.n, original.k), dtype=bool)
        offset_keep[keep] = scene.offset_keep
    expect = {g: v[keep] for g, v in expect.items()}
    expect["offsets"] = expect["offsets"] * offset_keep[keep][..., None]
    return expect, original.positions[keep]


def cmd_verify(args) -> int:
    original = anchors.load_anchor_cloud(args.original)
    decoded = anchors.load_anchor_cloud(args.decoded)
    expect, pos = _survivors(original, build_config(args).qcfg, args.container)
    if decoded.n != pos.shape[0] or decoded.k != original.k:
        raise ValidationError(f"anchor count mismatch: decoded N={decoded.n} k={decoded.k}, "
                              f"expected N={pos.shape[0]} k={original.k}")
    ok = True
    for g in ("features", "scalings", "offsets"):
        # decoded files store fp32, so compare the fp32 images of the expected values
        want = expect[g].astype(np.float32)
        got = getattr(decoded, g).astype(np.float32)
        dev = float(np.max(np.abs(want.astype(np.float64) - got))) if want.size else 0.0
        exact = bool(np.array_equal(want, got))
        ok &= exact
        print(f"{g:<10} max deviation {dev:.3g} {'exact' if exact else 'MISMATCH'}")
    ext = pos.max(axis=0) - pos.min(axis=0)
    tol = 0.5 * ext / POS_LEVELS + 4 * np.finfo(np.float32).eps * np.maximum(np.abs(pos).max(axis=0), 1.0)
    dpos = np.abs(decoded.positions - pos).max(axis=0) if pos.size else np.zeros(3)
    pos_ok = bool(np.all(dpos <= tol))
    ok &= pos_ok
    print(f"{'positions':<10} max deviation {dpos.max():.3g} (half cell {0.5 * ext.max() / POS_LEVELS:.3g}) "
          f"{'ok' if pos_ok else 'OUT OF TOLERANCE'}")
    print("verify: PASS" if ok else "verify: FAIL")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_stats(args) -> int:
    path = Path(args.input)
    if not path.is_file():
        raise UsageError(f"no such file: {path}")
    blob = path.read_bytes()
    stats = decompress_scene(blob).stats  # decoding recomputes estimates and checks every section
    _print_sections(stats)
    for name, nbytes, est in stats.rows():
        if est is not None:
            bound = 1.02 * est + 64
            print(f"{name}: actual {nbytes} B, estimate {est:.1f} B, bound {bound:.1f} B "
                  f"({'within' if nbytes <= bound else 'EXCEEDS'} estimate + 2% + 64 B)")
    print(f"bits per anchor {stats.bits_per_anchor:.3f}")
    print(f"compression ratio vs raw fp32 {stats.raw_bytes / stats.total_bytes:.2f}x")
    if args.csv:
        from .report import SECTION_COLUMNS, section_rows, write_csv

        if args.csv == "-":
            import csv

            w = csv.writer(sys.stdout)
            w.writerow(SECTION_COLUMNS)
            w.writerows(section_rows(stats))
        else:
            write_csv(args.csv, SECTION_COLUMNS, section_rows(stats))
    if args.report:
        from .report import write_stats_report

        for p in write_stats_report(stats, args.report):
            print(f"wrote {p}")
    return EXIT_OK


def load_image(path, shape=None) -> np.ndarray:
    """PNG (8 or 16 bit, scaled to [0, 1]) or raw little-endian fp32 planar (ch, H, W)."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        with Image.open(path) as im:
            arr = np.asarray(im)
        scale = 65535.0 if arr.dtype == np.uint16 or im.mode.startswith("I;16") else 255.0
        if arr.dtype.kind in "iu" and arr.max() > 255:
            scale = 65535.0
        return arr.astype(np.float64) / scale
    if shape is None:
        raise UsageError(f"{path}: raw fp32 input needs --shape H,W[,CH]")
    h, w, *ch = shape
    ch = ch[0] if ch else 1
    data = np.fromfile(path, dtype="<f4")
    if data.size != h * w * ch:
        raise ValidationError(f"{path}: {data.size} floats, expected {h * w * ch}")
    return data.reshape(ch, h, w).transpose(1, 2, 0).astype(np.float64)


def cmd_wavelet(args) -> int:
    a = load_image(args.image_a, args.shape)
    b = load_image(args.image_b, args.shape)
    if a.shape != b.shape:
        raise ValidationError(f"image shapes differ: {a.shape} vs {b.shape}")
    a, cropped = crop_to_multiple(a)
    b, _ = crop_to_multiple(b)
    if cropped:
        print(f"notice: cropped to {a.shape[0]}x{a.shape[1]} (dims must be multiples of 4)")
    sched = WaveletSchedule(*args.schedule, total_steps=args.total_steps)
    l1, l2 = lambda_schedule(args.step, sched)
    low, high = wavelet_terms(a, b)
    print(f"lambda1 {l1:.6g}")
    print(f"lambda2 {l2:.6g}")
    print(f"YL {low:.6g}")
    print(f"YH {high:.6g}")
    print(f"total {l1 * low + l2 * high:.6g}")
    return EXIT_OK


SYNTH = {
    "correlated": lambda a: anchors.synth_correlated_cloud(a.seed, a.n, a.corr_len, a.k),
    "iid": lambda a: anchors.synth_iid_cloud(a.seed, a.n, a.k),
    "noisy-offsets": lambda a: anchors.synth_noisy_offsets_cloud(a.seed, a.n, k=a.k, corr_len=a.corr_len)[0],
}


def cmd_synth(args) -> int:
    cloud = SYNTH[args.kind](args)
    anchors.save_anchor_cloud(cloud, args.output)
    print(f"wrote {args.kind} cloud N={cloud.n} k={cloud.k} -> {args.output}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_config_flags(p):
    p.add_argument("--config", help="key = value file; explicit flags override it")
    p.add_argument("--show-config", action="store_true", help="print the effective configuration and exit")
    for f in dataclasses.fields(TrainConfig):
        if f.name in ("deterministic", "threads"):
            continue
        kind = {"int": int, "float": float, "bool": str}.get(f.type, f.type)
        name = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            p.add_argument(name, dest=f.name, type=lambda v: _coerce(v, bool), default=None, metavar="BOOL")
        else:
            p.add_argument(name, dest=f.name, type=kind, default=None, help=f"default {f.default}")
    p.add_argument("--steps", dest="total_steps", type=int, default=None, help="alias of --total-steps")


def _shape(text):
    try:
        dims = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected H,W or H,W,CH") from None
    if len(dims) not in (2, 3) or min(dims) < 1:
        raise argparse.ArgumentTypeError("expected H,W or H,W,CH")
    return dims


def _floats4(text):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError("expected four comma-separated numbers") from None
    if len(vals) != 4:
        raise argparse.ArgumentTypeError("expected l1_start,l1_end,l2_start,l2_end")
    return vals


def build_parser() -> argparse.ArgumentParser:
    # shared flags are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="BLAS threads (default: all cores)")
    common.add_argument("--deterministic", action="store_true", default=argparse.SUPPRESS,
                        help="single-threaded, ordered reductions")
    common.add_argument("-q", "--quiet", action="store_true", default=argparse.SUPPRESS)
    parser = argparse.ArgumentParser(prog="triplane-codec", description=__doc__.splitlines()[0], parents=[common])
    parser.set_defaults(threads=None, deterministic=False, quiet=False)
    sub = parser.add_subparsers(dest="command", required=True)
    _sub_add = sub.add_parser
    sub.add_parser = lambda *a, **kw: _sub_add(*a, parents=[common], **kw)

    p = sub.add_parser("train", help="fit tri-plane, autoencoder, entropy model and masks to a cloud")
    p.add_argument("input")
    p.add_argument("output", nargs="?")
    p.add_argument("--report", metavar="DIR", help="write loss.csv and loss.png here")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="compress a cloud with a trained checkpoint")
    p.add_argument("input")
    p.add_argument("checkpoint")
    p.add_argument("output")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decompress to an anchor file")
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("verify", help="check a decoded cloud against the original")
    p.add_argument("original")
    p.add_argument("decoded")
    p.add_argument("--container", help="compressed file, to account for masked anchors and offsets")
    _add_config_flags(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("stats", help="section sizes and estimated versus actual codelength")
    p.add_argument("input")
    p.add_argument("--csv", metavar="PATH", help="write per-section rows as CSV ('-' for stdout)")
    p.add_argument("--report", metavar="DIR", help="write sections.csv and sections.png here")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("wavelet", help="two-level Haar loss terms between two images")
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.add_argument("--step", type=int, default=0)
    p.add_argument("--total-steps", type=int, default=WaveletSchedule.total_steps)
    p.add_argument("--schedule", type=_floats4, default=[1.0, 0.2, 0.0, 0.8],
                   metavar="L1S,L1E,L2S,L2E")
    p.add_argument("--shape", type=_shape, help="H,W[,CH] for raw fp32 inputs")
    p.set_defaults(func=cmd_wavelet)

    p = sub.add_parser("synth", help="write a synthetic anchor cloud")
    p.add_argument("output")
    p.add_argument("--kind", choices=sorted(SYNTH), default="correlated")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--k", type=int, default=anchors.DEFAULT_K)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corr-len", type=float, default=0.5)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        if getattr(args, "show_config", False):
            sys.stdout.write(build_config(args).to_text())
            return EXIT_OK
        if args.command == "train" and not args.output:
            parser.error("train: the output checkpoint path is required")
        return args.func(args)
    except (CorruptionError, TruncatedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, CodecError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
